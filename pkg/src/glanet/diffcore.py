"""Define-by-run reverse-mode differentiation over dense N x C float64 arrays.

Only the handful of primitives the network needs are provided. Rows are
instances (correspondences) and columns are channels; every primitive is
permutation-equivariant over rows except the reductions, which are invariant.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np


class ContractError(ValueError):
    """Raised when an operation is called outside its documented contract."""


class Tensor:
    """A node in a :class:`ValueGraph`: a value plus how to push gradients back."""

    __slots__ = ("value", "grad", "graph", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, value, graph, parents=(), backward_fn=None, requires_grad=False, name=None):
        self.value = value
        self.grad = None
        self.graph = graph
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __add__(self, other):
        return add(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, name={self.name!r})"


class ValueGraph:
    """Tape of recorded operations; rebuilt for every forward pass.

    Nodes are appended in execution order, so the tape itself is a valid
    topological order and ``backward`` simply walks it in reverse.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.parameters: dict[str, Tensor] = {}

    def leaf(self, value, name: str | None = None) -> Tensor:
        """Register a trainable leaf. Named leaves are reported by :meth:`backward`."""
        t = Tensor(_as_array(value), self, requires_grad=True, name=name)
        if name is not None:
            if name in self.parameters:
                raise ContractError(f"duplicate parameter name {name!r}")
            self.parameters[name] = t
        self.nodes.append(t)
        return t

    def constant(self, value) -> Tensor:
        t = Tensor(_as_array(value), self)
        self.nodes.append(t)
        return t

    def record(self, value, parents: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
        """Append a new node. ``backward_fn(g)`` returns one gradient per parent."""
        for p in parents:
            if p.graph is not self:
                raise ContractError("operands belong to different graphs")
        requires = any(p.requires_grad for p in parents)
        t = Tensor(value, self, parents, backward_fn, requires)
        self.nodes.append(t)
        return t

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Accumulate d(loss)/d(node) for every node and return parameter gradients."""
        if not self.nodes or loss.graph is not self:
            raise ContractError("backward called before a forward pass recorded the loss")
        if loss.value.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is None or node.backward_fn is None or not node.requires_grad:
                continue
            grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
        return {
            name: (t.grad if t.grad is not None else np.zeros_like(t.value))
            for name, t in self.parameters.items()
        }


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ContractError("non-finite values in tensor")
    return arr


def _check_instance(x: Tensor, what: str) -> None:
    if x.value.ndim != 2 or x.value.shape[0] < 1 or x.value.shape[1] < 1:
        raise ContractError(f"{what}: expected N x C with N, C >= 1, got {x.value.shape}")


# --- primitives -----------------------------------------------------------


def pointwise_linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Shared per-instance affine map (a 1x1 convolution): ``x @ W + b``."""
    _check_instance(x, "pointwise_linear")
    if W.value.ndim != 2 or W.value.shape[0] != x.value.shape[1]:
        raise ContractError(f"weight shape {W.value.shape} does not fit input {x.value.shape}")
    if b.value.shape != (W.value.shape[1],):
        raise ContractError(f"bias shape {b.value.shape} does not fit weight {W.value.shape}")
    xv, Wv = x.value, W.value

    def back(g):
        return g @ Wv.T, xv.T @ g, g.sum(axis=0)

    return x.graph.record(xv @ Wv + b.value, (x, W, b), back)


def matmul(x: Tensor, W: Tensor) -> Tensor:
    """Bias-free per-instance linear map ``x @ W``."""
    _check_instance(x, "matmul")
    if W.value.ndim != 2 or W.value.shape[0] != x.value.shape[1]:
        raise ContractError(f"weight shape {W.value.shape} does not fit input {x.value.shape}")
    xv, Wv = x.value, W.value
    return x.graph.record(xv @ Wv, (x, W), lambda g: (g @ Wv.T, xv.T @ g))


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    out = np.maximum(x.value, 0.0)
    mask = (x.value > 0).astype(np.float64)
    return x.graph.record(out, (x,), lambda g: (g * mask,))


def stable_sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = stable_sigmoid(x.value)
    return x.graph.record(s, (x,), lambda g: (g * s * (1.0 - s),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ContractError(f"unknown activation {kind!r}")


def log(x: Tensor, offset: float = 0.0) -> Tensor:
    """Elementwise ``log(x + offset)``; the caller guarantees positivity."""
    shifted = x.value + offset
    if np.any(shifted <= 0):
        raise ContractError("log of non-positive value")
    return x.graph.record(np.log(shifted), (x,), lambda g: (g / shifted,))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.value.shape != b.value.shape:
        raise ContractError(f"add: shape mismatch {a.value.shape} vs {b.value.shape}")
    return a.graph.record(a.value + b.value, (a, b), lambda g: (g, g))


def scale(x: Tensor, c: float) -> Tensor:
    return x.graph.record(x.value * c, (x,), lambda g: (g * c,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.shape != b.value.shape:
        raise ContractError(f"mul: shape mismatch {a.value.shape} vs {b.value.shape}")
    av, bv = a.value, b.value
    return a.graph.record(av * bv, (a, b), lambda g: (g * bv, g * av))


def total(x: Tensor) -> Tensor:
    """Sum of all entries, as a scalar node."""
    shape = x.value.shape
    return x.graph.record(np.array(x.value.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def add_scalars(terms: Iterable[tuple[float, Tensor]]) -> Tensor:
    """Weighted sum ``sum_k c_k * t_k`` of scalar nodes."""
    terms = list(terms)
    if not terms:
        raise ContractError("add_scalars needs at least one term")
    graph = terms[0][1].graph
    coefs = [c for c, _ in terms]
    value = np.array(sum(c * float(t.value) for c, t in terms))
    return graph.record(value, tuple(t for _, t in terms), lambda g: tuple(c * g for c in coefs))


def softmax_over_instances(r: Tensor) -> Tensor:
    """Softmax down the N rows of an N x 1 column."""
    _check_instance(r, "softmax_over_instances")
    if r.value.shape[1] != 1:
        raise ContractError(f"softmax_over_instances expects N x 1, got {r.value.shape}")
    z = r.value - r.value.max()
    e = np.exp(z)
    s = e / e.sum()

    def back(g):
        return (s * (g - float((g * s).sum())),)

    return r.graph.record(s, (r,), back)


# --- gradient verification -------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    ``f`` receives a leaf tensor in a fresh graph and returns a scalar node.
    ``x`` must be away from non-differentiable points (relu kinks, clip edges).
    """
    x = np.array(x, dtype=np.float64)

    def value_at(point):
        g = ValueGraph()
        out = f(g.leaf(point, "x"))
        v = float(out.value)
        if not np.isfinite(v):
            raise ContractError("non-finite function value during grad_check")
        return v

    g = ValueGraph()
    out = f(g.leaf(x, "x"))
    analytic = g.backward(out)["x"]
    worst = 0.0
    flat = x.reshape(-1)
    for k in range(flat.size):
        plus = flat.copy()
        minus = flat.copy()
        plus[k] += h
        minus[k] -= h
        numeric = (value_at(plus.reshape(x.shape)) - value_at(minus.reshape(x.shape))) / (2 * h)
        err = abs(analytic.reshape(-1)[k] - numeric) / max(1e-12, abs(numeric))
        worst = max(worst, err)
    return worst


def grad_check_params(
    f: Callable[[ValueGraph, dict[str, Tensor]], Tensor],
    params: dict[str, np.ndarray],
    h: float = 1e-5,
) -> dict[str, float]:
    """Per-parameter max relative error for a loss built from several named leaves."""

    def run(values):
        g = ValueGraph()
        leaves = {k: g.leaf(v, k) for k, v in values.items()}
        return g, f(g, leaves)

    g, out = run(params)
    analytic = g.backward(out)
    report = {}
    for name, value in params.items():
        worst = 0.0
        flat = value.reshape(-1)
        for k in range(flat.size):
            vals = []
            for sign in (1.0, -1.0):
                moved = flat.copy()
                moved[k] += sign * h
                trial = dict(params)
                trial[name] = moved.reshape(value.shape)
                v = float(run(trial)[1].value)
                if not np.isfinite(v):
                    raise ContractError(f"non-finite loss while perturbing {name}")
                vals.append(v)
            numeric = (vals[0] - vals[1]) / (2 * h)
            err = abs(analytic[name].reshape(-1)[k] - numeric) / max(1e-12, abs(numeric))
            worst = max(worst, err)
        report[name] = worst
    return report


# --- optimizer ---------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float):
    """One bias-corrected Adam update, applied in place. Returns ``(params, state)``."""
    if not lr > 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    for name, g in grads.items():
        if name not in params or params[name].shape != g.shape:
            raise ContractError(f"gradient for {name!r} does not match any parameter")
        if not np.all(np.isfinite(g)):
            raise ContractError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state
