"""Loss construction and training for the multi-headed network.

Three ways to learn the representer direction share one architecture:
the constrained objective fits head 1 toward the centering function
``beta`` under a penalty on the empirical moment of head 1 (so head 1
approaches the zero-moment projection), the direct objective fits
head 1 as the representer itself by minimizing its quadratic risk
identity, and the differential-multiplier variant replaces the fixed
penalty with an ascended multiplier plus optional damping. Outcome
heads 2 and 3 are mixed by min-max normalized treatment and trained by
squared error in all variants.

Training runs in stages (typically fast then fine-tuning), early-stops
each stage on the composite validation loss, restores the best
validation weights, and logs per-epoch diagnostics that need no ground
truth.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .estimators import (
    DegenerateRieszError,
    FittedNuisances,
    moment_identity_diag,
    rr_from_beta_perp,
)
from .moments import (
    DifferentiableFunction,
    KnownBeta,
    MomentFunctional,
    beta_default,
    beta_zero_extended,
    empirical_moment,
    moment_from_config,
    require_binary,
)
from .neural import (
    AdamW,
    MultiHeadNet,
    Tensor,
    abs_val,
    add,
    backward,
    mean,
    mul,
    scale,
    square,
    sub,
    zero_grads,
)
from .scenarios import Dataset

__all__ = [
    "LOSS_KINDS",
    "BETA_TAGS",
    "LossSpec",
    "StageConfig",
    "TrainConfig",
    "BdmmState",
    "TreatmentScaler",
    "EarlyStopper",
    "TrainedModel",
    "constrained_loss",
    "ad_loss",
    "bdmm_step",
    "bdmm_trajectory",
    "penalized_trajectory",
    "epoch_diagnostics",
    "train",
    "HISTORY_COLUMNS",
]

LOSS_KINDS = ("constrained", "ad", "bdmm")
BETA_TAGS = ("default", "zero_extended")

HISTORY_COLUMNS = (
    "epoch",
    "stage",
    "train_loss",
    "val_loss",
    "constraint_violation",
    "moment_identity_error",
    "ipw_drift",
)


@dataclass(frozen=True)
class LossSpec:
    """Weights of the composite objective.

    ``lambda_penalty`` multiplies the absolute empirical moment of
    head 1 in the constrained objective; ``rho`` mixes in the outcome
    regression term.
    """

    lambda_penalty: float = 5.0
    rho: float = 1.0

    def __post_init__(self):
        if self.lambda_penalty < 0 or self.rho < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class StageConfig:
    """One training stage: optimizer schedule and stopping rule."""

    max_epochs: int
    learning_rate: float
    patience: int
    batch_size: int = 64
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 1 <= self.patience < self.max_epochs:
            raise ValueError("patience must satisfy 1 <= patience < max_epochs")

    def to_config(self) -> dict:
        return {
            "max_epochs": self.max_epochs,
            "learning_rate": self.learning_rate,
            "patience": self.patience,
            "batch_size": self.batch_size,
            "weight_decay": self.weight_decay,
        }


@dataclass(frozen=True)
class TrainConfig:
    """Multi-stage training configuration."""

    stages: tuple[StageConfig, ...]
    split_fraction: float = 0.8
    seed: int = 0
    loss_kind: str = "constrained"

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if not self.stages:
            raise ValueError("training needs at least one stage")
        if not 0.0 < self.split_fraction < 1.0:
            raise ValueError(f"split_fraction must be in (0, 1), got {self.split_fraction}")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}; expected one of {LOSS_KINDS}")

    def to_config(self) -> dict:
        return {
            "stages": [s.to_config() for s in self.stages],
            "split_fraction": self.split_fraction,
            "seed": self.seed,
            "loss_kind": self.loss_kind,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "TrainConfig":
        stages = tuple(StageConfig(**s) for s in cfg["stages"])
        rest = {k: v for k, v in cfg.items() if k != "stages"}
        return cls(stages=stages, **rest)


@dataclass(frozen=True)
class BdmmState:
    """Multiplier state of the differential-multiplier objective."""

    lam: float = 0.0
    delta: float = 0.0
    multiplier_lr: float = 0.05

    def __post_init__(self):
        if self.delta < 0:
            raise ValueError("damping delta must be nonnegative")
        if self.multiplier_lr <= 0:
            raise ValueError("multiplier learning rate must be positive")


@dataclass(frozen=True)
class TreatmentScaler:
    """Min-max normalization of treatment for the outcome-head mixing."""

    a_min: float
    a_max: float

    def __post_init__(self):
        if not self.a_max > self.a_min:
            raise ValueError(
                "degenerate treatment: outcome-head mixing needs max a > min a"
            )

    @classmethod
    def from_data(cls, a: np.ndarray) -> "TreatmentScaler":
        return cls(a_min=float(np.min(a)), a_max=float(np.max(a)))

    @property
    def slope(self) -> float:
        return 1.0 / (self.a_max - self.a_min)

    def mix_weights(self, a: np.ndarray) -> np.ndarray:
        return (np.asarray(a, dtype=np.float64) - self.a_min) * self.slope


def _batch_heads(net: MultiHeadNet, m: MomentFunctional, a, x, pol):
    """Observed head outputs plus the estimand rows of head 1.

    Binary contrasts reuse the two intervention passes for the observed
    values by exact 0/1 masking, so each batch costs two trunk passes;
    derivative kinds cost a single tangent pass.
    """
    if m.binary_treatment:
        a = require_binary(a)
        heads1 = net.forward(np.ones_like(a), x)
        heads0 = net.forward(np.zeros_like(a), x)
        mask1, mask0 = Tensor(a), Tensor(1.0 - a)
        observed = tuple(
            add(mul(mask1, h1), mul(mask0, h0)) for h1, h0 in zip(heads1, heads0)
        )
        diff = sub(heads1[0], heads0[0])
        if m.kind == "ate":
            rows = diff
        else:
            rows = add(heads0[0], mul(Tensor(pol), diff))
        return (*observed, rows)
    (f1, df1), (f2, _), (f3, _) = net.forward_tangent(a, x)
    rows = df1 if m.kind == "ade" else mul(Tensor(pol), df1)
    return (f1, f2, f3, rows)


def _policy_values(m: MomentFunctional, x: np.ndarray):
    return m.policy_values(x) if m.kind in ("ape", "ipe") else None


def _loss_terms(net, m, y, a, x, beta_vals, pol, scaler):
    """Shared tensors: head 1, its empirical moment, rr MSE, regression."""
    f1, f2, f3, rows = _batch_heads(net, m, a, x, pol)
    hn = mean(rows)
    rr_mse = mean(square(sub(Tensor(beta_vals), f1)))
    mix_w = scaler.mix_weights(a)
    mix = add(mul(Tensor(mix_w), f2), mul(Tensor(1.0 - mix_w), f3))
    reg = mean(square(sub(Tensor(y), mix)))
    return f1, hn, rr_mse, reg


def constrained_loss(
    net: MultiHeadNet,
    data,
    spec: LossSpec,
    m: MomentFunctional,
    beta: KnownBeta,
    scaler: TreatmentScaler | None = None,
) -> Tensor:
    """Penalized projection objective plus outcome regression.

    ``E_n[(beta - f1)^2] + lambda_penalty |h_n(f1)| + rho E_n[(y - mix)^2]``
    where ``mix`` blends heads 2 and 3 by min-max normalized treatment.
    During training the scaler must come from the full dataset so train,
    validation, and estimation share one treatment scale.
    """
    y, a, x = np.asarray(data.y), np.asarray(data.a), np.asarray(data.x)
    scaler = scaler or TreatmentScaler.from_data(a)
    beta_vals = beta.f.value(a, x)
    _, hn, rr_mse, reg = _loss_terms(net, m, y, a, x, beta_vals, _policy_values(m, x), scaler)
    total = add(rr_mse, scale(spec.lambda_penalty, abs_val(hn)))
    if spec.rho:
        total = add(total, scale(spec.rho, reg))
    return total


def ad_loss(net: MultiHeadNet, data, m: MomentFunctional) -> Tensor:
    """Quadratic risk identity for learning the representer directly.

    ``E_n[f1^2 - 2 m(f1, W)]``; unbounded below in finite samples, kept
    as the reference baseline for stability comparisons.
    """
    a, x = np.asarray(data.a), np.asarray(data.x)
    f1, _, _, rows = _batch_heads(net, m, a, x, _policy_values(m, x))
    return sub(mean(square(f1)), scale(2.0, mean(rows)))


def bdmm_step(
    net: MultiHeadNet,
    state: BdmmState,
    data,
    m: MomentFunctional,
    beta: KnownBeta,
    param_lr: float,
    scaler: TreatmentScaler | None = None,
    rho: float = 0.0,
) -> tuple[BdmmState, float]:
    """One plain gradient-descent step on the multiplier objective.

    Descends ``E_n[(beta - f1)^2] + lam h_n(f1) + delta h_n(f1)^2
    (+ rho regression)`` over parameters, then ascends the multiplier by
    ``multiplier_lr`` times the pre-step constraint violation. Returns
    the updated state and the signed violation.
    """
    y, a, x = np.asarray(data.y), np.asarray(data.a), np.asarray(data.x)
    scaler = scaler or TreatmentScaler.from_data(a)
    beta_vals = beta.f.value(a, x)
    _, hn, rr_mse, reg = _loss_terms(net, m, y, a, x, beta_vals, _policy_values(m, x), scaler)
    total = add(rr_mse, scale(state.lam, hn))
    if state.delta:
        total = add(total, scale(state.delta, square(hn)))
    if rho:
        total = add(total, scale(rho, reg))
    if not np.isfinite(total.value):
        raise RuntimeError("non-finite multiplier objective; aborting")
    zero_grads(net)
    backward(total)
    for _, tensor in net.named_params():
        if tensor.grad is not None:
            tensor.value = tensor.value - param_lr * tensor.grad
    violation = float(hn.value)
    return replace(state, lam=state.lam + state.multiplier_lr * violation), violation


def bdmm_trajectory(
    net: MultiHeadNet,
    data,
    m: MomentFunctional,
    beta: KnownBeta,
    state: BdmmState,
    epochs: int,
    param_lr: float,
) -> np.ndarray:
    """Full-batch multiplier dynamics; returns signed violations per epoch."""
    scaler = TreatmentScaler.from_data(np.asarray(data.a))
    violations = np.empty(epochs)
    for i in range(epochs):
        state, violations[i] = bdmm_step(net, state, data, m, beta, param_lr, scaler=scaler)
    return violations


def penalized_trajectory(
    net: MultiHeadNet,
    data,
    m: MomentFunctional,
    beta: KnownBeta,
    spec: LossSpec,
    epochs: int,
    param_lr: float,
) -> np.ndarray:
    """Full-batch plain gradient descent on the penalized objective.

    Returns the signed empirical moment of head 1 per epoch, for
    trajectory contrasts against the multiplier dynamics.
    """
    y, a, x = np.asarray(data.y), np.asarray(data.a), np.asarray(data.x)
    scaler = TreatmentScaler.from_data(a)
    beta_vals = beta.f.value(a, x)
    pol = _policy_values(m, x)
    violations = np.empty(epochs)
    for i in range(epochs):
        _, hn, rr_mse, reg = _loss_terms(net, m, y, a, x, beta_vals, pol, scaler)
        total = add(rr_mse, scale(spec.lambda_penalty, abs_val(hn)))
        if spec.rho:
            total = add(total, scale(spec.rho, reg))
        zero_grads(net)
        backward(total)
        for _, tensor in net.named_params():
            if tensor.grad is not None:
                tensor.value = tensor.value - param_lr * tensor.grad
        violations[i] = float(hn.value)
    return violations


class EarlyStopper:
    """Consecutive-failure early stopping with best-state tracking.

    ``update`` returns True when training should stop: the validation
    loss has failed to strictly improve on the best seen for ``patience``
    consecutive epochs. The best epoch (1-based) is tracked for
    restoration.
    """

    def __init__(self, patience: int):
        self.patience = patience
        self.best_loss = np.inf
        self.best_epoch = 0
        self.failures = 0
        self.epochs_seen = 0

    def update(self, val_loss: float) -> bool:
        self.epochs_seen += 1
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = self.epochs_seen
            self.failures = 0
            return False
        self.failures += 1
        return self.failures >= self.patience


def epoch_diagnostics(
    m: MomentFunctional,
    beta: KnownBeta,
    f1_fn: DifferentiableFunction,
    mu_fn: DifferentiableFunction,
    data,
    f1_is_rr: bool = False,
) -> dict:
    """Ground-truth-free calibration record on one sample.

    ``constraint_violation`` is the signed empirical moment of head 1,
    ``moment_identity_error`` is ``E_n[A alpha_hat] - 1`` for the
    representer implied by head 1 (reconstructed from the projection, or
    head 1 itself when it was trained as the representer), and
    ``ipw_drift`` is ``E_n[Y alpha_hat] - h_n(mu_hat)``. A residual with
    no direction (head 1 equal to ``beta``) yields the zero representer.
    """
    y = np.asarray(data.y, dtype=np.float64)
    a = np.asarray(data.a, dtype=np.float64)
    x = np.asarray(data.x, dtype=np.float64)
    violation = empirical_moment(m, f1_fn, data)
    if f1_is_rr:
        alpha = f1_fn
    else:
        try:
            alpha = rr_from_beta_perp(
                FittedNuisances(moment=m, mu_hat=mu_fn, beta=beta, beta_perp_hat=f1_fn), data
            )
        except DegenerateRieszError:
            alpha = DifferentiableFunction(fn=lambda av, xv: np.zeros(av.shape[0]))
    alpha_vals = alpha.value(a, x)
    return {
        "constraint_violation": float(violation),
        "moment_identity_error": moment_identity_diag(alpha, data),
        "ipw_drift": float(np.mean(y * alpha_vals)) - empirical_moment(m, mu_fn, data),
    }


def _net_f1_function(net: MultiHeadNet, for_derivative: bool) -> DifferentiableFunction:
    def fn(a, x):
        return net.forward(a, x)[0].value

    da = None
    if for_derivative:

        def da(a, x):
            return net.forward_tangent(a, x)[0][1].value

    return DifferentiableFunction(fn=fn, da=da)


def _net_mu_function(
    net: MultiHeadNet, scaler: TreatmentScaler, outcome_scale: float
) -> DifferentiableFunction:
    """Outcome predictor mixing heads 2/3, mapped back to original units."""

    def fn(a, x):
        _, f2, f3 = net.forward(a, x)
        w = scaler.mix_weights(a)
        return outcome_scale * (w * f2.value + (1.0 - w) * f3.value)

    def da(a, x):
        _, (f2, df2), (f3, df3) = net.forward_tangent(a, x)
        w = scaler.mix_weights(a)
        mixed = w * df2.value + (1.0 - w) * df3.value
        return outcome_scale * (scaler.slope * (f2.value - f3.value) + mixed)

    return DifferentiableFunction(fn=fn, da=da)


@dataclass
class TrainedModel:
    """Fitted network plus everything needed to use and audit it."""

    net: MultiHeadNet
    moment: MomentFunctional
    beta: KnownBeta
    loss_kind: str
    outcome_scale: float
    scaler: TreatmentScaler
    history: list[dict] = field(default_factory=list)
    beta_tag: str = "default"

    def f1_function(self) -> DifferentiableFunction:
        return _net_f1_function(self.net, for_derivative=True)

    def mu_function(self) -> DifferentiableFunction:
        return _net_mu_function(self.net, self.scaler, self.outcome_scale)

    def alpha_function(self) -> DifferentiableFunction | None:
        """Head 1 as the representer itself, for directly trained runs."""
        if self.loss_kind != "ad":
            return None
        return self.f1_function()

    def nuisances(self) -> FittedNuisances:
        perp = None if self.loss_kind == "ad" else self.f1_function()
        return FittedNuisances(
            moment=self.moment,
            mu_hat=self.mu_function(),
            beta=self.beta,
            beta_perp_hat=perp,
        )

    def write_history_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(HISTORY_COLUMNS)
            for row in self.history:
                writer.writerow([row[c] for c in HISTORY_COLUMNS])

    def to_state(self) -> dict:
        if self.beta_tag not in BETA_TAGS:
            raise ValueError(
                f"cannot serialize a custom centering function (beta_tag {self.beta_tag!r})"
            )
        return {
            "net": self.net.to_state(),
            "moment": self.moment.to_config(),
            "beta_tag": self.beta_tag,
            "loss_kind": self.loss_kind,
            "outcome_scale": self.outcome_scale,
            "a_min": self.scaler.a_min,
            "a_max": self.scaler.a_max,
            "history": self.history,
        }

    @classmethod
    def from_state(cls, state: dict) -> "TrainedModel":
        moment = moment_from_config(state["moment"])
        tag = state["beta_tag"]
        if tag not in BETA_TAGS:
            raise ValueError(f"unknown beta tag {tag!r}; expected one of {BETA_TAGS}")
        beta = beta_default(moment) if tag == "default" else beta_zero_extended(moment)
        return cls(
            net=MultiHeadNet.from_state(state["net"]),
            moment=moment,
            beta=beta,
            loss_kind=state["loss_kind"],
            outcome_scale=float(state["outcome_scale"]),
            scaler=TreatmentScaler(a_min=state["a_min"], a_max=state["a_max"]),
            history=list(state.get("history", [])),
            beta_tag=tag,
        )


def train(
    dataset: Dataset,
    m: MomentFunctional,
    beta: KnownBeta,
    config: TrainConfig,
    loss_spec: LossSpec = LossSpec(),
    net: MultiHeadNet | None = None,
    bdmm: BdmmState | None = None,
    beta_tag: str = "default",
) -> TrainedModel:
    """Fit the multi-headed network in stages with early stopping.

    The outcome is divided by its full-sample standard deviation before
    fitting and the scale is stored for mapping predictions back; the
    treatment scaler also comes from the full sample so train,
    validation, and estimation agree. Each stage gets a fresh optimizer
    at its own learning rate and restores its best-validation weights at
    the end. The per-epoch history carries the composite train and
    validation losses and the calibration diagnostics of
    :func:`epoch_diagnostics`.
    """
    if dataset.n < 10:
        raise ValueError("training needs at least 10 observations")
    if config.loss_kind == "bdmm" and bdmm is None:
        bdmm = BdmmState()
    outcome_scale = float(np.std(dataset.y, ddof=1))
    if outcome_scale == 0.0:
        raise ValueError("outcome is constant; cannot standardize")
    y_all = dataset.y / outcome_scale
    a_all = require_binary(dataset.a) if m.binary_treatment else dataset.a.copy()
    x_all = dataset.x
    scaler = TreatmentScaler.from_data(a_all)
    beta_all = beta.f.value(a_all, x_all)
    pol_all = _policy_values(m, x_all)

    n = dataset.n
    n_train = int(np.floor(config.split_fraction * n))
    if n_train == 0 or n_train == n:
        raise ValueError(
            f"split of {n} rows at fraction {config.split_fraction} leaves an empty side"
        )
    perm = np.random.default_rng(config.seed).permutation(n)
    idx_tr, idx_val = perm[:n_train], perm[n_train:]
    if idx_val.size < 2:
        raise ValueError("validation split needs at least 2 rows")
    val_data = Dataset(y=y_all[idx_val], a=a_all[idx_val], x=x_all[idx_val])

    if net is None:
        net = MultiHeadNet(d=dataset.d, seed=config.seed)
    batch_rng = np.random.default_rng([config.seed, 1])
    bdmm_states = [bdmm] if bdmm is not None else []

    def batch_loss(idx):
        f1, hn, rr_mse, reg = _loss_terms(
            net,
            m,
            y_all[idx],
            a_all[idx],
            x_all[idx],
            beta_all[idx],
            None if pol_all is None else pol_all[idx],
            scaler,
        )
        if config.loss_kind == "ad":
            total = sub(mean(square(f1)), scale(2.0, hn))
        elif config.loss_kind == "bdmm":
            total = add(rr_mse, scale(bdmm_states[-1].lam, hn))
            if bdmm_states[-1].delta:
                total = add(total, scale(bdmm_states[-1].delta, square(hn)))
        else:
            total = add(rr_mse, scale(loss_spec.lambda_penalty, abs_val(hn)))
        if loss_spec.rho:
            total = add(total, scale(loss_spec.rho, reg))
        return total, hn

    history: list[dict] = []
    f1_eval = _net_f1_function(net, for_derivative=m.needs_derivative)
    mu_eval = _net_mu_function(net, scaler, 1.0)
    global_epoch = 0
    for stage_idx, stage in enumerate(config.stages, start=1):
        optimizer = AdamW(
            net.named_params(),
            lr=stage.learning_rate,
            weight_decay=stage.weight_decay,
            lr_overrides=dict.fromkeys(net.out_bias_names(), 0.9),
        )
        stopper = EarlyStopper(stage.patience)
        snapshot = {name: t.value.copy() for name, t in net.named_params()}
        for _ in range(stage.max_epochs):
            global_epoch += 1
            order = batch_rng.permutation(n_train)
            total_loss = 0.0
            for start in range(0, n_train, stage.batch_size):
                idx = idx_tr[order[start : start + stage.batch_size]]
                loss, hn = batch_loss(idx)
                if not np.isfinite(loss.value):
                    raise RuntimeError(
                        f"non-finite training loss at epoch {global_epoch}; aborting"
                    )
                zero_grads(net)
                backward(loss)
                optimizer.step()
                total_loss += float(loss.value) * idx.size
                if config.loss_kind == "bdmm":
                    state = bdmm_states[-1]
                    bdmm_states.append(
                        replace(
                            state,
                            lam=state.lam + state.multiplier_lr * float(hn.value),
                        )
                    )
            val_loss_t, _ = batch_loss(idx_val)
            val_loss = float(val_loss_t.value)
            record = {
                "epoch": global_epoch,
                "stage": stage_idx,
                "train_loss": total_loss / n_train,
                "val_loss": val_loss,
            }
            record.update(
                epoch_diagnostics(
                    m, beta, f1_eval, mu_eval, val_data, f1_is_rr=config.loss_kind == "ad"
                )
            )
            history.append(record)
            if val_loss < stopper.best_loss:
                snapshot = {name: t.value.copy() for name, t in net.named_params()}
            if stopper.update(val_loss):
                break
        for name, tensor in net.named_params():
            tensor.value = snapshot[name]
    return TrainedModel(
        net=net,
        moment=m,
        beta=beta,
        loss_kind=config.loss_kind,
        outcome_scale=outcome_scale,
        scaler=scaler,
        history=history,
        beta_tag=beta_tag,
    )
