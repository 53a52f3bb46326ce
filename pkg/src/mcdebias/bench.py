"""Multi-replicate benchmark and diagnostic harness.

Each replicate draws a fresh scenario at its own seed, trains a fresh
network, runs the estimators against the scenario's ground truth, and
reports absolute errors plus end-of-training calibration diagnostics.
Replicates are independent, so parallelism lives here and only here; a
single training run stays sequential and deterministic. With a fixed
master seed the per-replicate seed is the master seed plus the replicate
index, so any subset of replicates can be reproduced in isolation.

Failures are data, not crashes: a replicate that raises is recorded as a
failed row and the summary covers the completed ones.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .estimators import estimate_all
from .learners import (
    BdmmState,
    LossSpec,
    TrainConfig,
    train,
)
from .moments import beta_default, beta_zero_extended, moment_from_config
from .neural import MultiHeadNet
from .scenarios import ScenarioSpec, generate

__all__ = [
    "WORKER_ENV",
    "BENCH_ESTIMATORS",
    "SUMMARY_COLUMNS",
    "BenchmarkSpec",
    "DiagnoseSpec",
    "run_replicate",
    "run_benchmark",
    "run_diagnostics",
    "summarize",
    "replicate_columns",
    "write_replicates_csv",
    "write_summary_csv",
    "write_long_csv",
    "worker_count",
]

WORKER_ENV = "MCDEBIAS_WORKERS"
BENCH_ESTIMATORS = ("direct", "ipw", "dr", "tmle", "perp_dr")
SUMMARY_COLUMNS = ("estimator", "mae", "median_ae", "se_mae", "coverage", "n_replicates")
LONG_COLUMNS = ("replicate", "loss_kind", "learning_rate", "epoch", "metric", "value")
_BASE_COLUMNS = (
    "replicate",
    "seed",
    "status",
    "psi_true",
    "final_constraint_violation",
    "final_identity_error",
)
_PER_ESTIMATOR = ("psi", "se", "abs_err", "covered")


@dataclass(frozen=True)
class BenchmarkSpec:
    """One benchmark: scenario template, estimand, trainer, and scale.

    ``scenario.seed`` is ignored; replicate ``i`` regenerates the scenario
    at ``seed + i`` and trains with the same per-replicate seed. The
    network architecture is fixed per spec (the default is a desk-scale
    net sized for quick replicate loops, not the full-scale trainer
    default).
    """

    scenario: ScenarioSpec
    moment_config: dict
    train_config: TrainConfig
    loss_spec: LossSpec = LossSpec()
    replicates: int = 20
    seed: int = 0
    beta_tag: str = "default"
    trunk_widths: tuple[int, ...] = (32,)
    head_widths: tuple[int, ...] = (16,)
    activation: str = "elu"
    bdmm: BdmmState | None = None
    estimators: tuple[str, ...] = BENCH_ESTIMATORS

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("benchmark needs at least 1 replicate")
        if self.beta_tag not in ("default", "zero_extended"):
            raise ValueError(f"unknown beta tag {self.beta_tag!r}")
        unknown = set(self.estimators) - set(BENCH_ESTIMATORS)
        if unknown:
            raise ValueError(f"unknown estimators {sorted(unknown)}")


@dataclass(frozen=True)
class DiagnoseSpec:
    """Trajectory study: per-epoch diagnostics across replicates and rates.

    Every combination of loss kind and stage-one learning rate is trained
    for each replicate, and the full per-epoch history goes into long
    rows ready for external plotting. Early stopping still applies; use a
    patience of ``max_epochs - 1`` in the base config to record complete
    trajectories.
    """

    scenario: ScenarioSpec
    moment_config: dict
    train_config: TrainConfig
    loss_kinds: tuple[str, ...] = ("constrained",)
    learning_rates: tuple[float, ...] = ()
    loss_spec: LossSpec = LossSpec()
    replicates: int = 20
    seed: int = 0
    beta_tag: str = "default"
    trunk_widths: tuple[int, ...] = (32,)
    head_widths: tuple[int, ...] = (16,)
    activation: str = "elu"
    bdmm: BdmmState | None = None

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("diagnostics need at least 1 replicate")
        if not self.loss_kinds:
            raise ValueError("diagnostics need at least one loss kind")


def _beta_for(moment, tag):
    return beta_default(moment) if tag == "default" else beta_zero_extended(moment)


def _fit_one(spec, rep_seed, loss_kind, learning_rate=None):
    scenario = replace(spec.scenario, seed=rep_seed)
    data, truth = generate(scenario)
    m = moment_from_config(spec.moment_config)
    beta = _beta_for(m, spec.beta_tag)
    config = replace(spec.train_config, seed=rep_seed, loss_kind=loss_kind)
    if learning_rate is not None:
        first = replace(config.stages[0], learning_rate=learning_rate)
        config = replace(config, stages=(first,) + config.stages[1:])
    net = MultiHeadNet(
        d=data.d,
        trunk_widths=spec.trunk_widths,
        head_widths=spec.head_widths,
        activation=spec.activation,
        seed=rep_seed,
    )
    model = train(
        data, m, beta, config, spec.loss_spec,
        net=net, bdmm=spec.bdmm, beta_tag=spec.beta_tag,
    )
    return data, truth, model


def run_replicate(spec: BenchmarkSpec, index: int) -> dict:
    """Generate, train, and estimate one replicate; returns a flat row."""
    rep_seed = spec.seed + index
    row = dict.fromkeys(replicate_columns(spec.estimators), "")
    row.update(replicate=index, seed=rep_seed, status="ok", error="")
    try:
        data, truth, model = _fit_one(spec, rep_seed, spec.train_config.loss_kind)
        alpha = model.alpha_function()
        reports = estimate_all(
            model.nuisances(), data, alpha_hat=alpha, estimators=spec.estimators
        )
        last = model.history[-1]
        row.update(
            psi_true=truth.psi_true,
            final_constraint_violation=last["constraint_violation"],
            final_identity_error=last["moment_identity_error"],
        )
        for name, report in reports.items():
            err = abs(report.psi_hat - truth.psi_true)
            row[f"{name}_psi"] = report.psi_hat
            row[f"{name}_se"] = report.std_error
            row[f"{name}_abs_err"] = err
            row[f"{name}_covered"] = int(err <= 1.96 * report.std_error)
    except Exception as exc:  # noqa: BLE001 - failures become rows by design
        row["status"] = "failed"
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def _benchmark_task(args):
    spec, index = args
    return run_replicate(spec, index)


def _diagnose_task(args):
    spec, index = args
    rep_seed = spec.seed + index
    rates = spec.learning_rates or (spec.train_config.stages[0].learning_rate,)
    out = []
    for loss_kind in spec.loss_kinds:
        for lr in rates:
            _, _, model = _fit_one(spec, rep_seed, loss_kind, learning_rate=lr)
            for record in model.history:
                for metric in ("train_loss", "val_loss", "constraint_violation",
                               "moment_identity_error", "ipw_drift"):
                    out.append({
                        "replicate": index,
                        "loss_kind": loss_kind,
                        "learning_rate": lr,
                        "epoch": record["epoch"],
                        "metric": metric,
                        "value": record[metric],
                    })
    return out


def worker_count(n_tasks: int) -> int:
    """Pool size: the env override wins, else one worker per CPU."""
    raw = os.environ.get(WORKER_ENV, "").strip()
    if raw:
        requested = int(raw)
        if requested < 1:
            raise ValueError(f"{WORKER_ENV} must be a positive integer, got {raw!r}")
    else:
        requested = os.cpu_count() or 1
    return max(1, min(requested, n_tasks))


def _run_tasks(task_fn, payloads):
    workers = worker_count(len(payloads))
    if workers == 1:
        return [task_fn(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(task_fn, payloads))


def run_benchmark(spec: BenchmarkSpec) -> tuple[list[dict], list[dict]]:
    """All replicates plus the per-estimator summary over completed ones."""
    rows = _run_tasks(_benchmark_task, [(spec, i) for i in range(spec.replicates)])
    return rows, summarize(rows, spec.estimators)


def run_diagnostics(spec: DiagnoseSpec) -> list[dict]:
    """Long-format per-epoch rows over replicates, loss kinds, and rates."""
    nested = _run_tasks(_diagnose_task, [(spec, i) for i in range(spec.replicates)])
    return [row for chunk in nested for row in chunk]


def summarize(rows: list[dict], estimators: tuple[str, ...] = BENCH_ESTIMATORS) -> list[dict]:
    """Absolute-error summary per estimator over completed replicates.

    Columns: mean absolute error, median absolute error, the standard
    error of the MAE, and 95 percent CI coverage. A single completed
    replicate has no SE, reported as None.
    """
    out = []
    for name in estimators:
        errs = []
        covered = []
        for row in rows:
            if row.get("status") != "ok":
                continue
            err = row.get(f"{name}_abs_err", "")
            if err == "" or err is None:
                continue
            errs.append(float(err))
            covered.append(float(row[f"{name}_covered"]))
        k = len(errs)
        if k == 0:
            out.append(dict(zip(SUMMARY_COLUMNS, (name, None, None, None, None, 0))))
            continue
        errs_arr = np.asarray(errs)
        se = float(np.std(errs_arr, ddof=1) / np.sqrt(k)) if k > 1 else None
        out.append(
            dict(zip(SUMMARY_COLUMNS, (
                name,
                float(np.mean(errs_arr)),
                float(np.median(errs_arr)),
                se,
                float(np.mean(covered)),
                k,
            )))
        )
    return out


def replicate_columns(estimators: tuple[str, ...] = BENCH_ESTIMATORS) -> tuple[str, ...]:
    per_est = tuple(f"{name}_{suffix}" for name in estimators for suffix in _PER_ESTIMATOR)
    return _BASE_COLUMNS + per_est + ("error",)


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow(["" if row.get(c) is None else row.get(c, "") for c in columns])


def write_replicates_csv(path, rows, estimators: tuple[str, ...] = BENCH_ESTIMATORS) -> None:
    _write_csv(path, replicate_columns(estimators), rows)


def write_summary_csv(path, summary) -> None:
    _write_csv(path, SUMMARY_COLUMNS, summary)


def write_long_csv(path, rows) -> None:
    _write_csv(path, LONG_COLUMNS, rows)
