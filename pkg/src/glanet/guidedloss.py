"""Fn-score algebra, the guided class-weight scheduler, and the classification losses.

The scheduler treats misclassified positives ``x`` and misclassified negatives
``y`` as independent counts. It picks (lambda, mu) so that the 0-1 surrogate
loss ``lambda * x / n_pos + mu * y / n_neg`` has the same X/Y gradient ratio as
the Fn-score. A step that lowers the loss then cannot lower Fn.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import ContractError, Tensor, ValueGraph

WEIGHT_CLAMP = 1e-3
PROB_CLIP = 1e-7


@dataclass(frozen=True)
class ClassCounts:
    n_pos: int
    n_neg: int
    x: int = 0  # misclassified positives (false negatives)
    y: int = 0  # misclassified negatives (false positives)

    def __post_init__(self):
        if self.n_pos < 0 or self.n_neg < 0:
            raise ContractError(f"negative class size in {self}")
        if not (0 <= self.x <= self.n_pos and 0 <= self.y <= self.n_neg):
            raise ContractError(f"error counts out of range in {self}")

    @property
    def n(self) -> int:
        return self.n_pos + self.n_neg

    @classmethod
    def from_predictions(cls, mask, labels) -> "ClassCounts":
        mask = np.asarray(mask).astype(bool).reshape(-1)
        labels = np.asarray(labels).astype(bool).reshape(-1)
        return cls(
            n_pos=int(labels.sum()),
            n_neg=int((~labels).sum()),
            x=int((labels & ~mask).sum()),
            y=int((~labels & mask).sum()),
        )


@dataclass(frozen=True)
class FnSpec:
    n: float = 1.0

    def __post_init__(self):
        if not self.n > 0:
            raise ContractError(f"Fn parameter must be positive, got {self.n}")


@dataclass(frozen=True)
class LossWeights:
    lam: float
    mu: float
    clamped: bool = False


# --- Fn-score algebra ----------------------------------------------------------


def counts_to_pr(c: ClassCounts) -> tuple[float, float]:
    if c.n_pos == 0:
        raise ContractError("recall undefined for a pair without positives")
    tp = c.n_pos - c.x
    predicted = tp + c.y
    precision = tp / predicted if predicted else 0.0
    return precision, tp / c.n_pos


def fn_score(P: float, R: float, spec: FnSpec = FnSpec()) -> float:
    n2 = spec.n * spec.n
    denom = n2 * P + R
    if denom == 0:
        return 0.0
    return (1 + n2) * P * R / denom


def fn_from_counts(c: ClassCounts, spec: FnSpec = FnSpec()) -> float:
    return fn_score(*counts_to_pr(c), spec)


def _fn_closed(n_pos: float, x: float, y: float, n2: float) -> float:
    # (1+n^2)(n_pos - x) / (n^2 n_pos + (n_pos - x) + y), valid for real-valued x, y
    return (1 + n2) * (n_pos - x) / (n2 * n_pos + (n_pos - x) + y)


def fn_derivatives(c: ClassCounts, spec: FnSpec = FnSpec(), method: str = "analytic"):
    """Return ``(dF/dX, dF/dY, ratio)`` with ``ratio = (dF/dX) / (dF/dY)``.

    ``method="algorithm1"`` uses unit finite steps: remove one false negative,
    then find the (real-valued) change in false positives giving the same Fn change.
    """
    if c.n_pos - c.x < 1:
        raise ContractError("Fn derivatives need at least one true positive")
    n2 = spec.n * spec.n
    tp = c.n_pos - c.x
    if method == "analytic":
        d = n2 * c.n_pos + tp + c.y
        dfdx = -(1 + n2) * (n2 * c.n_pos + c.y) / (d * d)
        dfdy = -(1 + n2) * tp / (d * d)
        return dfdx, dfdy, (n2 * c.n_pos + c.y) / tp
    if method == "algorithm1":
        f0 = _fn_closed(c.n_pos, c.x, c.y, n2)
        delta_f = _fn_closed(c.n_pos, c.x - 1, c.y, n2) - f0
        dfdx = -delta_f
        # invert Fn(x, y + dy) = f0 + delta_f for dy
        target = f0 + delta_f
        dy = (1 + n2) * tp / target - n2 * c.n_pos - tp - c.y
        if not 0.0 <= c.y + dy <= c.n_neg:
            # the Fn gain cannot be matched by removing false positives; use the exact partials
            return fn_derivatives(c, spec, "analytic")
        ratio = -dy
        return dfdx, delta_f / dy, ratio
    raise ContractError(f"unknown derivative method {method!r}")


def guided_weights(c: ClassCounts, spec: FnSpec = FnSpec(), method: str = "analytic") -> LossWeights:
    """(lambda, mu) with lambda + mu = 1 and (lambda/n_pos)/(mu/n_neg) = dF_X/dF_Y."""
    if c.n_pos == 0 or c.n_neg == 0:
        raise ContractError("guided weights need both classes present")
    if c.n_pos - c.x == 0:
        # every positive missed: the Fn gradient ratio diverges
        lam = 1.0
    else:
        t = c.n_pos * fn_derivatives(c, spec, method)[2] / c.n_neg
        lam = t / (1.0 + t)
    clamped_lam = min(max(lam, WEIGHT_CLAMP), 1.0 - WEIGHT_CLAMP)
    return LossWeights(lam=clamped_lam, mu=1.0 - clamped_lam, clamped=clamped_lam != lam)


def negative_correlation_products(c: ClassCounts, spec: FnSpec, w: LossWeights, span: int = 3) -> np.ndarray:
    """dloss * dFn over the integer grid of (dX, dY) in [-span, span]^2."""
    dlx = w.lam / c.n_pos
    dly = w.mu / c.n_neg
    dfx, dfy, _ = fn_derivatives(c, spec, "analytic")
    d = np.arange(-span, span + 1, dtype=np.float64)
    dX, dY = np.meshgrid(d, d, indexing="ij")
    return (dlx * dX + dly * dY) * (dfx * dX + dfy * dY)


def verify_negative_correlation(c: ClassCounts, spec: FnSpec, w: LossWeights) -> bool:
    return bool(np.all(negative_correlation_products(c, spec, w) <= 1e-12))


# --- losses ------------------------------------------------------------------


def _weighted_log_loss(probs: Tensor, pos_coef: np.ndarray, neg_coef: np.ndarray) -> Tensor:
    """-sum(a_i log p_i + b_i log(1 - p_i)) with p clipped to [1e-7, 1 - 1e-7]."""
    p = probs.value
    inside = (p >= PROB_CLIP) & (p <= 1.0 - PROB_CLIP)
    pc = np.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)
    value = -(pos_coef * np.log(pc) + neg_coef * np.log1p(-pc)).sum()

    def back(g):
        return (float(g) * inside * (neg_coef / (1.0 - pc) - pos_coef / pc),)

    return probs.graph.record(np.array(value), (probs,), back)


def _prepare(probs, labels):
    """Wrap array input in a throwaway graph; returns (tensor, labels column, wrapped?)."""
    wrapped = not isinstance(probs, Tensor)
    if wrapped:
        probs = ValueGraph().constant(np.asarray(probs, dtype=np.float64).reshape(-1, 1))
    labels = np.asarray(labels).reshape(probs.value.shape).astype(bool)
    return probs, labels, wrapped


def _finish(loss: Tensor, wrapped: bool):
    return float(loss.value) if wrapped else loss


def guided_bce_loss(probs, labels, w: LossWeights):
    """lambda * mean(-log p | positives) + mu * mean(-log(1-p) | negatives).

    A pair missing one class drops that term and gives the other weight 1.
    Array input returns a float; Tensor input returns a differentiable node.
    """
    probs, pos, wrapped = _prepare(probs, labels)
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos and n_neg:
        a, b = w.lam / n_pos, w.mu / n_neg
    elif n_pos:
        a, b = 1.0 / n_pos, 0.0
    else:
        a, b = 0.0, 1.0 / n_neg
    return _finish(_weighted_log_loss(probs, np.where(pos, a, 0.0), np.where(pos, 0.0, b)), wrapped)


def l_loss(probs, labels):
    """Cost-sensitive log loss with class weights reciprocal to the class sizes."""
    probs, pos, wrapped = _prepare(probs, labels)
    n = pos.size
    n_pos = int(pos.sum())
    n_neg = n - n_pos
    if n_pos and n_neg:
        alpha, beta = n_neg / n, n_pos / n
    else:
        alpha = beta = 1.0
    return _finish(
        _weighted_log_loss(probs, np.where(pos, alpha / n, 0.0), np.where(pos, 0.0, beta / n)), wrapped
    )


def focal_loss(probs, labels, gamma: float = 2.0):
    """-(1/N) sum (1 - p_t)^gamma log p_t, p_t being the probability of the true class."""
    if gamma < 0:
        raise ContractError("focal gamma must be non-negative")
    probs, pos, wrapped = _prepare(probs, labels)
    p = probs.value
    n = p.size
    inside = (p >= PROB_CLIP) & (p <= 1.0 - PROB_CLIP)
    pc = np.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)
    pt = np.where(pos, pc, 1.0 - pc)
    q = 1.0 - pt
    logpt = np.log(pt)
    value = -(q**gamma * logpt).sum() / n

    def back(g):
        if gamma == 0:
            d_pt = -1.0 / pt
        else:
            d_pt = gamma * q ** (gamma - 1) * logpt - q**gamma / pt
        d_p = np.where(pos, d_pt, -d_pt) / n
        return (float(g) * inside * d_p,)

    return _finish(probs.graph.record(np.array(value), (probs,), back), wrapped)
