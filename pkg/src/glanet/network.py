"""Coarse-to-fine correspondence classifier and its checkpoint format.

Stage 1 (crude subnet) runs learned-attention IA blocks and emits preliminary
inlier probabilities. Each fine pass then re-runs IA blocks whose attention is
the previous stage's probabilities, and emits refined probabilities.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .blocks import EXTERNAL, LEARNED, IABlockParams, IndicatingMatrix, external_logits, ia_block_forward
from .diffcore import ContractError, Tensor, ValueGraph, add_scalars, pointwise_linear, sigmoid
from .guidedloss import ClassCounts, FnSpec, LossWeights, focal_loss, guided_bce_loss, guided_weights, l_loss

CKPT_MAGIC = b"GLAC"
CKPT_VERSION = 1
MIN_INSTANCES = 8


@dataclass
class GLANetConfig:
    channels: int = 32
    crude_blocks: int = 6
    fine_blocks_per_pass: int = 3
    fine_passes: int = 2
    rho: float = 0.1
    eta: float = 0.1
    fn_n: float = 1.0
    threshold: float = 0.5
    share_fine: bool = False

    def __post_init__(self):
        for name in ("channels", "crude_blocks", "fine_blocks_per_pass", "fine_passes"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if not (0.0 <= self.rho <= 1.0 and 0.0 <= self.eta <= 1.0):
            raise ContractError("rho and eta must lie in [0, 1]")
        if not 0.0 < self.threshold < 1.0:
            raise ContractError("threshold must lie in (0, 1)")

    @classmethod
    def tiny(cls) -> "GLANetConfig":
        return cls(channels=4, crude_blocks=1, fine_blocks_per_pass=1)


def _fine_prefix(config: GLANetConfig, k: int) -> str:
    return "fine0" if config.share_fine else f"fine{k}"


def param_shapes(config: GLANetConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map; the parameter set is a pure function of the config."""
    C = config.channels
    shapes: dict[str, tuple[int, ...]] = {"embed.W": (4, C), "embed.b": (C,)}

    def block(prefix, learned):
        shapes[f"{prefix}.w1"] = (C, C)
        shapes[f"{prefix}.w2"] = (C, C)
        if learned:
            shapes[f"{prefix}.wa"] = (C, 1)

    for i in range(config.crude_blocks):
        block(f"crude.{i}", True)
    passes = 1 if config.share_fine else config.fine_passes
    for k in range(passes):
        for i in range(config.fine_blocks_per_pass):
            block(f"fine{k}.{i}", False)
    for s in range(config.fine_passes + 1):
        shapes[f"head{s}.W"] = (C, 1)
        shapes[f"head{s}.b"] = (1,)
    return shapes


def init_params(config: GLANetConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """He-normal weights, zero biases, from a seeded Philox stream."""
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    params = {}
    for name, shape in param_shapes(config).items():
        if len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            # relu-fed layers get He gain; attention and output projections unit gain
            gain = 1.0 if name.endswith(".wa") or name.startswith("head") else 2.0
            params[name] = rng.normal(scale=np.sqrt(gain / shape[0]), size=shape)
    return params


@dataclass
class ForwardTrace:
    prelim_probs: np.ndarray
    mid_probs: np.ndarray
    final_probs: np.ndarray
    stage_probs: list[Tensor]  # differentiable N x 1 nodes, one per supervised stage
    indicating: dict[str, IndicatingMatrix]
    graph: ValueGraph

    @property
    def probs(self) -> list[np.ndarray]:
        return [p.value.reshape(-1) for p in self.stage_probs]


def _block_params(leaves: dict[str, Tensor], prefix: str, learned: bool) -> IABlockParams:
    return IABlockParams(
        leaves[f"{prefix}.w1"], leaves[f"{prefix}.w2"],
        leaves.get(f"{prefix}.wa") if learned else None,
        LEARNED if learned else EXTERNAL,
    )


def forward(coords, params: dict, config: GLANetConfig, graph: ValueGraph | None = None) -> ForwardTrace:
    """Run all stages. ``params`` values may be arrays or leaves already in ``graph``."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 4:
        raise ContractError(f"coords must be N x 4, got {coords.shape}")
    if coords.shape[0] < MIN_INSTANCES:
        raise ContractError(f"need at least {MIN_INSTANCES} correspondences, got {coords.shape[0]}")
    g = graph if graph is not None else ValueGraph()
    leaves = {name: v if isinstance(v, Tensor) else g.leaf(v, name) for name, v in params.items()}
    h = pointwise_linear(g.constant(coords), leaves["embed.W"], leaves["embed.b"])
    indicating = {}
    for i in range(config.crude_blocks):
        h, indicating[f"crude.{i}"] = ia_block_forward(h, _block_params(leaves, f"crude.{i}", True))
    stage = [sigmoid(pointwise_linear(h, leaves["head0.W"], leaves["head0.b"]))]
    for k in range(config.fine_passes):
        r = external_logits(stage[-1])
        for i in range(config.fine_blocks_per_pass):
            prefix = f"{_fine_prefix(config, k)}.{i}"
            h, indicating[f"fine{k}.{i}"] = ia_block_forward(h, _block_params(leaves, prefix, False), r)
        stage.append(sigmoid(pointwise_linear(h, leaves[f"head{k + 1}.W"], leaves[f"head{k + 1}.b"])))
    flat = [p.value.reshape(-1) for p in stage]
    return ForwardTrace(flat[0], flat[1] if len(flat) > 2 else flat[0], flat[-1], stage, indicating, g)


def predict(probs, threshold: float = 0.5) -> np.ndarray:
    """Inclusive threshold: ``probs >= threshold`` is an inlier."""
    if not 0.0 < threshold < 1.0:
        raise ContractError("threshold must lie in (0, 1)")
    return (np.asarray(probs).reshape(-1) >= threshold).astype(np.uint8)


def scheduled_weights(final_probs, labels, config: GLANetConfig) -> tuple[LossWeights | None, ClassCounts]:
    """Guided (lambda, mu) from the thresholded final prediction; None for single-class pairs."""
    counts = ClassCounts.from_predictions(predict(final_probs, config.threshold), labels)
    if counts.n_pos == 0 or counts.n_neg == 0:
        return None, counts
    return guided_weights(counts, FnSpec(config.fn_n)), counts


@dataclass
class LossBreakdown:
    loss1: float
    loss2: float
    loss3: float
    total: float
    weights: LossWeights | None = None
    counts: ClassCounts | None = None
    extra: dict = field(default_factory=dict)


def total_loss(trace: ForwardTrace, labels, config: GLANetConfig, guided: LossWeights | None = None,
               main: str = "guided", gamma: float = 2.0) -> tuple[Tensor, LossBreakdown]:
    """rho * loss1 + eta * loss2 + loss3.

    The auxiliary stages use the class-reciprocal log loss. The main stage uses
    the guided loss by default; pass ``main="l_loss"`` or ``"focal"`` to swap it.
    Every fine pass before the last contributes to loss2 (averaged).
    """
    labels = np.asarray(labels).reshape(-1)
    stages = trace.stage_probs
    counts = None
    if main == "guided":
        if guided is None:
            guided, counts = scheduled_weights(trace.final_probs, labels, config)
        loss3 = guided_bce_loss(stages[-1], labels, guided or LossWeights(0.5, 0.5))
    elif main == "l_loss":
        loss3 = l_loss(stages[-1], labels)
    elif main == "focal":
        loss3 = focal_loss(stages[-1], labels, gamma)
    else:
        raise ContractError(f"unknown main loss {main!r}")
    loss1 = l_loss(stages[0], labels)
    mids = [l_loss(p, labels) for p in stages[1:-1]]
    terms = [(config.rho, loss1), (1.0, loss3)]
    terms += [(config.eta / len(mids), m) for m in mids]
    loss = add_scalars(terms)
    loss2 = float(np.mean([m.value for m in mids])) if mids else 0.0
    return loss, LossBreakdown(float(loss1.value), loss2, float(loss3.value), float(loss.value), guided, counts)


# --- checkpoints ---------------------------------------------------------------


def save_checkpoint(path, params: dict[str, np.ndarray], config: GLANetConfig, extra: dict | None = None) -> None:
    """Binary container: magic, version, JSON config, then named little-endian f64 tensors."""
    meta = json.dumps({"config": asdict(config), "extra": extra or {}}, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<IQ", CKPT_VERSION, len(meta)), meta, struct.pack("<I", len(params))]
    for name, value in params.items():
        encoded = name.encode()
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<I", value.ndim) + struct.pack(f"<{value.ndim}Q", *value.shape))
        parts.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], GLANetConfig, dict]:
    blob = Path(path).read_bytes()
    if blob[:4] != CKPT_MAGIC:
        raise ContractError(f"{path} is not a checkpoint")
    version, meta_len = struct.unpack_from("<IQ", blob, 4)
    if version != CKPT_VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    off = 16
    meta = json.loads(blob[off:off + meta_len])
    off += meta_len
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + name_len].decode()
        off += name_len
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", blob, off)
        off += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(blob, "<f8", size, off).reshape(shape).astype(np.float64)
        off += 8 * size
    config = GLANetConfig(**meta["config"])
    expected = param_shapes(config)
    if {k: v.shape for k, v in params.items()} != expected:
        raise ContractError("checkpoint tensors do not match its config")
    return params, config, meta.get("extra", {})
