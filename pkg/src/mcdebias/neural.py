"""Minimal differentiable network engine on 64-bit numpy arrays.

Reverse-mode automatic differentiation over a small set of array
primitives, exact forward-mode derivatives with respect to the treatment
input coordinate, a multi-headed dense architecture with a shared trunk,
and Adam with decoupled weight decay. The treatment derivative is itself
composed from primitives, so losses containing it still yield exact
parameter gradients.

Non-differentiable points are resolved by convention and noted on each
primitive: the absolute value uses subgradient 0 at 0, the rectifier
derivative at 0 is 0, and the exponential-linear second derivative at 0
takes its left limit. Training visits these points with probability
zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Tensor",
    "backward",
    "add",
    "add_bias",
    "sub",
    "neg",
    "mul",
    "scale",
    "matmul",
    "square",
    "abs_val",
    "mean",
    "elu",
    "elu_prime",
    "relu",
    "relu_prime",
    "flatten_col",
    "MlpSpec",
    "Mlp",
    "MultiHeadNet",
    "grad_params",
    "zero_grads",
    "AdamW",
]

ACTIVATION_NAMES = ("elu", "relu")


class Tensor:
    """Node in a reverse-mode computation graph holding a float64 array.

    Leaves created with ``requires_grad=True`` accumulate gradients in
    ``grad`` after :func:`backward`. Interior nodes carry their parents
    and a vector-Jacobian product closure; nodes whose inputs are all
    constant are pruned to constants.
    """

    __slots__ = ("value", "grad", "requires_grad", "parents", "vjp")

    def __init__(self, value, requires_grad: bool = False, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.parents = tuple(parents)
        self.vjp = vjp

    @property
    def shape(self):
        return self.value.shape


def _node(value, inputs, vjp) -> Tensor:
    if any(t.requires_grad for t in inputs):
        return Tensor(value, requires_grad=True, parents=inputs, vjp=vjp)
    return Tensor(value)


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into every reachable leaf."""
    if loss.value.shape != ():
        raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            stack.append((parent, False))
    loss.grad = np.ones(())
    for node in reversed(order):
        if node.vjp is None:
            continue
        contributions = node.vjp(node.grad)
        for parent, contrib in zip(node.parents, contributions):
            if parent.requires_grad and contrib is not None:
                parent.grad = contrib if parent.grad is None else parent.grad + contrib


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.value.shape != b.value.shape:
        raise ValueError(f"add shape mismatch: {a.value.shape} vs {b.value.shape}")
    return _node(a.value + b.value, (a, b), lambda g: (g, g))


def add_bias(mat: Tensor, bias: Tensor) -> Tensor:
    """Add a row vector of biases to every row of a matrix."""
    return _node(
        mat.value + bias.value[None, :],
        (mat, bias),
        lambda g: (g, g.sum(axis=0)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _node(a.value - b.value, (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return _node(-a.value, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.shape != b.value.shape:
        raise ValueError(f"mul shape mismatch: {a.value.shape} vs {b.value.shape}")
    return _node(a.value * b.value, (a, b), lambda g: (g * b.value, g * a.value))


def scale(c: float, a: Tensor) -> Tensor:
    """Multiply by a Python constant."""
    c = float(c)
    return _node(c * a.value, (a,), lambda g: (c * g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.shape[-1] != b.value.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.value.shape} @ {b.value.shape}")
    return _node(
        a.value @ b.value,
        (a, b),
        lambda g: (g @ b.value.T, a.value.T @ g),
    )


def square(a: Tensor) -> Tensor:
    return _node(a.value**2, (a,), lambda g: (2.0 * a.value * g,))


def abs_val(a: Tensor) -> Tensor:
    """Elementwise absolute value; the subgradient at 0 is taken as 0."""
    return _node(np.abs(a.value), (a,), lambda g: (np.sign(a.value) * g,))


def mean(a: Tensor) -> Tensor:
    size = a.value.size
    return _node(
        np.mean(a.value),
        (a,),
        lambda g: (np.full(a.value.shape, g / size),),
    )


def elu(a: Tensor) -> Tensor:
    # The exponential branch is clamped at 0 before evaluation; where
    # selects the linear branch there, so values are unchanged and large
    # positive inputs cannot overflow the unused branch.
    x = a.value
    xn = np.minimum(x, 0.0)
    return _node(
        np.where(x > 0, x, np.expm1(xn)),
        (a,),
        lambda g: (np.where(x > 0, 1.0, np.exp(xn)) * g,),
    )


def elu_prime(a: Tensor) -> Tensor:
    """First derivative of elu, differentiable once more.

    Its own derivative (the elu second derivative) is exp(x) for x < 0
    and 0 for x > 0; at exactly 0 the left limit 1 is used.
    """
    x = a.value
    ex = np.exp(np.minimum(x, 0.0))
    return _node(
        np.where(x > 0, 1.0, ex),
        (a,),
        lambda g: (np.where(x > 0, 0.0, ex) * g,),
    )


def relu(a: Tensor) -> Tensor:
    x = a.value
    return _node(np.maximum(x, 0.0), (a,), lambda g: ((x > 0) * g,))


def relu_prime(a: Tensor) -> Tensor:
    """Derivative of relu, 0 at the kink; constant almost everywhere.

    Returned as a non-tracking tensor because its derivative vanishes
    wherever it is defined.
    """
    return Tensor(np.where(a.value > 0, 1.0, 0.0))


def flatten_col(a: Tensor) -> Tensor:
    """Reshape an (n, 1) column to a flat (n,) vector."""
    orig = a.value.shape
    return _node(a.value.reshape(-1), (a,), lambda g: (g.reshape(orig),))


_ACTIVATIONS = {"elu": (elu, elu_prime), "relu": (relu, relu_prime)}


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of one dense stack.

    ``output_dim=None`` means the stack ends with its last activated
    hidden layer (a representation); an integer adds a final affine map
    with no activation. Depth 0 with an output dimension is a single
    affine map.
    """

    input_dim: int
    hidden_widths: tuple[int, ...]
    activation: str = "elu"
    output_dim: int | None = 1

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim < 1 or any(w < 1 for w in self.hidden_widths):
            raise ValueError("layer widths must be at least 1")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(
                f"unknown activation {self.activation!r}; expected one of {ACTIVATION_NAMES}"
            )
        if self.output_dim is None and not self.hidden_widths:
            raise ValueError("a stack with no output layer needs at least one hidden layer")

    @property
    def depth(self) -> int:
        return len(self.hidden_widths)

    @property
    def feature_dim(self) -> int:
        return self.hidden_widths[-1] if self.output_dim is None else self.output_dim

    def param_count(self) -> int:
        count, fan_in = 0, self.input_dim
        for w in self.hidden_widths:
            count += fan_in * w + w
            fan_in = w
        if self.output_dim is not None:
            count += fan_in * self.output_dim + self.output_dim
        return count


def _init_layer(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[Tensor, Tensor]:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    return Tensor(w, requires_grad=True), Tensor(np.zeros(fan_out), requires_grad=True)


class Mlp:
    """Dense stack with trainable parameters following an MlpSpec."""

    def __init__(self, spec: MlpSpec, rng: np.random.Generator):
        self.spec = spec
        act, act_prime = _ACTIVATIONS[spec.activation]
        self._act, self._act_prime = act, act_prime
        self.hidden: list[tuple[Tensor, Tensor]] = []
        fan_in = spec.input_dim
        for width in spec.hidden_widths:
            self.hidden.append(_init_layer(rng, fan_in, width))
            fan_in = width
        self.out: tuple[Tensor, Tensor] | None = None
        if spec.output_dim is not None:
            self.out = _init_layer(rng, fan_in, spec.output_dim)

    def named_params(self, prefix: str) -> list[tuple[str, Tensor]]:
        named = []
        for i, (w, b) in enumerate(self.hidden, start=1):
            named.extend([(f"{prefix}.W{i}", w), (f"{prefix}.b{i}", b)])
        if self.out is not None:
            named.extend([(f"{prefix}.Wout", self.out[0]), (f"{prefix}.bout", self.out[1])])
        return named

    def forward(self, h: Tensor) -> Tensor:
        if h.value.ndim != 2 or h.value.shape[1] != self.spec.input_dim:
            raise ValueError(
                f"expected input of shape (n, {self.spec.input_dim}), got {h.value.shape}"
            )
        for w, b in self.hidden:
            h = self._act(add_bias(matmul(h, w), b))
        if self.out is not None:
            h = add_bias(matmul(h, self.out[0]), self.out[1])
        return h

    def forward_tangent(self, h: Tensor, dh: Tensor) -> tuple[Tensor, Tensor]:
        """Forward pass carrying a directional input derivative alongside.

        ``dh`` holds d(input)/da row by row; the returned pair is the
        output and its derivative in the same direction, both still
        differentiable with respect to parameters.
        """
        for w, b in self.hidden:
            u = add_bias(matmul(h, w), b)
            du = matmul(dh, w)
            h = self._act(u)
            dh = mul(self._act_prime(u), du)
        if self.out is not None:
            h = add_bias(matmul(h, self.out[0]), self.out[1])
            dh = matmul(dh, self.out[0])
        return h, dh


class MultiHeadNet:
    """Shared trunk with one affine direction head and two outcome heads.

    The trunk consumes the concatenated input (a, x) and ends activated;
    head 1 is a zero-depth affine map producing the constrained
    direction estimate, heads 2 and 3 are small dense stacks producing
    the outcome predictions mixed by normalized treatment. The direction
    head is affine by construction so the constrained objective stays a
    linear readout of the shared representation.
    """

    def __init__(
        self,
        d: int,
        trunk_widths: tuple[int, ...] = (200, 200, 200),
        head_widths: tuple[int, ...] = (100, 100),
        activation: str = "elu",
        seed: int = 0,
    ):
        if d < 1:
            raise ValueError("need at least one covariate")
        self.d = int(d)
        self.trunk_widths = tuple(int(w) for w in trunk_widths)
        self.head_widths = tuple(int(w) for w in head_widths)
        self.activation = activation
        rng = np.random.default_rng(seed)
        trunk_spec = MlpSpec(self.d + 1, self.trunk_widths, activation, output_dim=None)
        self.trunk = Mlp(trunk_spec, rng)
        feat = trunk_spec.feature_dim
        self.f1 = Mlp(MlpSpec(feat, (), activation, output_dim=1), rng)
        self.f2 = Mlp(MlpSpec(feat, self.head_widths, activation, output_dim=1), rng)
        self.f3 = Mlp(MlpSpec(feat, self.head_widths, activation, output_dim=1), rng)

    def named_params(self) -> list[tuple[str, Tensor]]:
        named = self.trunk.named_params("trunk")
        named.extend(self.f1.named_params("f1"))
        named.extend(self.f2.named_params("f2"))
        named.extend(self.f3.named_params("f3"))
        return named

    def param_count(self) -> int:
        return sum(t.value.size for _, t in self.named_params())

    def out_bias_names(self) -> tuple[str, str]:
        """Names of the two outcome heads' final bias parameters."""
        return ("f2.bout", "f3.bout")

    def _check_input(self, a: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        a = np.asarray(a, dtype=np.float64).reshape(-1)
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape != (a.shape[0], self.d):
            raise ValueError(
                f"expected covariates of shape ({a.shape[0]}, {self.d}), got {x.shape}"
            )
        return a, x

    def heads_from(self, z: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """All three flat head outputs from an input tensor of (a, x) rows."""
        h = self.trunk.forward(z)
        return (
            flatten_col(self.f1.forward(h)),
            flatten_col(self.f2.forward(h)),
            flatten_col(self.f3.forward(h)),
        )

    def forward(self, a, x) -> tuple[Tensor, Tensor, Tensor]:
        a, x = self._check_input(a, x)
        return self.heads_from(Tensor(np.column_stack([a, x])))

    def forward_tangent(self, a, x) -> tuple[tuple[Tensor, Tensor], ...]:
        """Head outputs paired with their exact treatment derivatives."""
        a, x = self._check_input(a, x)
        z = Tensor(np.column_stack([a, x]))
        dz = np.zeros_like(z.value)
        dz[:, 0] = 1.0
        h, dh = self.trunk.forward_tangent(z, Tensor(dz))
        pairs = []
        for head in (self.f1, self.f2, self.f3):
            out, dout = head.forward_tangent(h, dh)
            pairs.append((flatten_col(out), flatten_col(dout)))
        return tuple(pairs)

    def to_state(self) -> dict:
        return {
            "architecture": {
                "d": self.d,
                "trunk_widths": list(self.trunk_widths),
                "head_widths": list(self.head_widths),
                "activation": self.activation,
            },
            "params": {name: t.value.tolist() for name, t in self.named_params()},
        }

    @classmethod
    def from_state(cls, state: dict) -> "MultiHeadNet":
        arch = state["architecture"]
        net = cls(
            d=arch["d"],
            trunk_widths=tuple(arch["trunk_widths"]),
            head_widths=tuple(arch["head_widths"]),
            activation=arch["activation"],
        )
        params = dict(net.named_params())
        saved = state["params"]
        if set(saved) != set(params):
            missing = sorted(set(params) ^ set(saved))
            raise ValueError(f"checkpoint parameter groups do not match: {missing}")
        for name, tensor in params.items():
            arr = np.asarray(saved[name], dtype=np.float64)
            if arr.shape != tensor.value.shape:
                raise ValueError(
                    f"checkpoint group {name!r} has shape {arr.shape},"
                    f" expected {tensor.value.shape}"
                )
            tensor.value = arr
        return net

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_state(), fh)

    @classmethod
    def load(cls, path) -> "MultiHeadNet":
        with open(path) as fh:
            return cls.from_state(json.load(fh))


def zero_grads(net: MultiHeadNet) -> None:
    for _, tensor in net.named_params():
        tensor.grad = None


def grad_params(scalar_loss_fn, net: MultiHeadNet) -> np.ndarray:
    """Exact gradient of a scalar loss with respect to all parameters.

    Returns the flat concatenation in named-parameter order; parameters
    the loss never touches contribute zeros.
    """
    zero_grads(net)
    loss = scalar_loss_fn(net)
    backward(loss)
    pieces = []
    for _, tensor in net.named_params():
        grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.value)
        pieces.append(np.asarray(grad, dtype=np.float64).reshape(-1))
    return np.concatenate(pieces)


class AdamW:
    """Adam with bias correction and decoupled weight decay.

    The decay step ``p <- p - lr * wd * p`` is applied after the Adam
    update, separately from the gradient. Per-parameter learning rates
    come from ``lr_overrides`` keyed by parameter name; everything else
    uses the default rate.
    """

    def __init__(
        self,
        named_params: list[tuple[str, Tensor]],
        lr: float,
        weight_decay: float = 0.0,
        lr_overrides: dict[str, float] | None = None,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.named_params = list(named_params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.lr_overrides = dict(lr_overrides or {})
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.moments = {
            name: (np.zeros_like(t.value), np.zeros_like(t.value))
            for name, t in self.named_params
        }

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        for name, param in self.named_params:
            grad = param.grad if param.grad is not None else np.zeros_like(param.value)
            if not np.all(np.isfinite(grad)):
                raise RuntimeError(f"non-finite gradient in parameter group {name!r}")
            m, v = self.moments[name]
            m = self.beta1 * m + (1.0 - self.beta1) * grad
            v = self.beta2 * v + (1.0 - self.beta2) * grad**2
            self.moments[name] = (m, v)
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            lr = self.lr_overrides.get(name, self.lr)
            param.value = param.value - lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay:
                param.value = param.value - lr * self.weight_decay * param.value
