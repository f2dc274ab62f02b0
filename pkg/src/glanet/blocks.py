"""Context Normalization, Inlier Attention Normalization and the IA block."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import (
    ContractError,
    Tensor,
    add,
    log,
    matmul,
    relu,
    softmax_over_instances,
)

EPS = 1e-8
EXTERNAL_LOGIT_OFFSET = 1e-6

LEARNED = "learned"
EXTERNAL = "external"


@dataclass
class IndicatingMatrix:
    """Per-instance attention: raw logits and the weights ``softmax(r) * N``."""

    logits: np.ndarray
    weights: np.ndarray

    @classmethod
    def from_logits(cls, logits: np.ndarray) -> "IndicatingMatrix":
        r = np.asarray(logits, dtype=np.float64).reshape(-1)
        z = np.exp(r - r.max())
        return cls(logits=r, weights=z / z.sum() * r.size)


@dataclass
class IABlockParams:
    """Weights of one IA block.

    The C x C layers carry no bias because each feeds a normalization that
    subtracts a mean, which would cancel any bias exactly.
    """

    w1: Tensor
    w2: Tensor
    wa: Tensor | None = None  # C x 1, no bias: softmax ignores a shared shift
    mode: str = LEARNED

    @property
    def channels(self) -> int:
        return self.w1.value.shape[0]


def _need_two(x: Tensor, what: str) -> None:
    if x.value.ndim != 2 or x.value.shape[0] < 2:
        raise ContractError(f"{what} needs at least 2 instances, got shape {x.value.shape}")


def _normalize(x: Tensor, w: Tensor | None) -> Tensor:
    """(x - mu) / sigma with sigma from the plain mean and mu weighted by ``w`` (sums to 1).

    With ``w`` None the mean is the plain one, i.e. Context Normalization.
    """
    xv = x.value
    n = xv.shape[0]
    centered = xv - xv.mean(axis=0)
    # second pass removes the rounding residue, which 1/sqrt(eps) would amplify on flat channels
    centered -= centered.mean(axis=0)
    inv_sigma = 1.0 / np.sqrt(np.einsum("ij,ij->j", centered, centered) / n + EPS)
    if w is None:
        out = centered * inv_sigma

        def back_cn(g):
            # batch-norm style: (g - mean(g) - y * mean(g * y)) / sigma
            gy = np.einsum("ij,ij->j", g, out) / n
            return ((g - g.mean(axis=0) - out * gy) * inv_sigma,)

        return x.graph.record(out, (x,), back_cn)

    wv = w.value
    # weighted mean taken relative to the plain mean; identical since the weights sum to 1
    out = (centered - wv[:, 0] @ centered) * inv_sigma

    def back_ian(g):
        d_mu = -g.sum(axis=0) * inv_sigma
        d_sigma = -np.einsum("ij,ij->j", g, out) * inv_sigma
        gx = g * inv_sigma + wv * d_mu + centered * (d_sigma * inv_sigma / n)
        gw = (centered @ d_mu)[:, None]
        return gx, gw

    return x.graph.record(out, (x, w), back_ian)


def context_normalize(x: Tensor) -> Tensor:
    """Per-channel standardization over the instances (population variance)."""
    _need_two(x, "context_normalize")
    return _normalize(x, None)


def inlier_attention_normalize(x: Tensor, r: Tensor) -> Tensor:
    """Like :func:`context_normalize`, but the mean is weighted by ``softmax(r)``."""
    _need_two(x, "inlier_attention_normalize")
    if r.value.shape != (x.value.shape[0], 1):
        raise ContractError(f"logits must be N x 1 = ({x.value.shape[0]}, 1), got {r.value.shape}")
    return _normalize(x, softmax_over_instances(r))


def external_logits(probs: Tensor) -> Tensor:
    """Map preliminary probabilities to logits so softmax weighting is proportional to p."""
    return log(probs, EXTERNAL_LOGIT_OFFSET)


def ia_block_forward(
    x: Tensor, params: IABlockParams, external_r: Tensor | None = None
) -> tuple[Tensor, IndicatingMatrix]:
    """linear -> IAN -> relu -> linear -> IAN -> relu, plus a residual skip.

    In learned mode the logits come from a 1-channel projection of the first
    linear layer's output; in external mode they are supplied by the caller.
    """
    if params.mode == LEARNED:
        if external_r is not None:
            raise ContractError("learned-attention block got external logits")
        if params.wa is None:
            raise ContractError("learned-attention block is missing its attention projection")
    elif params.mode == EXTERNAL:
        if external_r is None:
            raise ContractError("external-attention block needs logits")
    else:
        raise ContractError(f"unknown block mode {params.mode!r}")

    h1 = matmul(x, params.w1)
    r = matmul(h1, params.wa) if params.mode == LEARNED else external_r
    h = relu(inlier_attention_normalize(h1, r))
    h2 = matmul(h, params.w2)
    out = add(relu(inlier_attention_normalize(h2, r)), x)
    return out, IndicatingMatrix.from_logits(r.value)


def attention_ratio(ind: IndicatingMatrix, labels) -> float:
    """Mean weight on inliers divided by mean weight on outliers."""
    labels = np.asarray(labels).reshape(-1).astype(bool)
    w = np.asarray(ind.weights).reshape(-1)
    if labels.shape != w.shape:
        raise ContractError("labels and weights differ in length")
    if labels.all() or not labels.any():
        raise ContractError("attention_ratio needs both inlier and outlier labels")
    return float(w[labels].mean() / w[~labels].mean())
