"""Training loop, evaluation, retained-correspondence sweeps and the RANSAC comparison."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .blocks import attention_ratio
from .data import PairRecord, load_split, rng_for
from .diffcore import AdamState, ContractError, adam_step
from .geometry import DegenerateConfiguration, e_deviation, eight_point, ransac
from .guidedloss import ClassCounts, FnSpec, counts_to_pr, fn_score
from .network import GLANetConfig, forward, init_params, predict, save_checkpoint, total_loss

log = logging.getLogger(__name__)

MAX_E_DEVIATION = 4.0
TRAIN_LOG_COLUMNS = ["epoch", "iter", "pair_id", "loss1", "loss2", "loss3", "total", "lambda", "mu", "clamped"]
METRICS_COLUMNS = ["pair_id", "precision", "recall", "f1", "fn", "e_dev"]
LOSS_CHOICES = ("guided", "l_loss", "focal")


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


@dataclass
class TrainRunConfig:
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0
    loss: str = "guided"
    focal_gamma: float = 2.0
    network: GLANetConfig = field(default_factory=GLANetConfig)
    dataset: str = ""
    split: str = "train"
    checkpoint_every: int = 0  # epochs; 0 disables intermediate checkpoints
    checkpoint_path: str = ""
    log_path: str = ""
    threads: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be positive")
        if self.loss not in LOSS_CHOICES:
            raise ContractError(f"loss must be one of {LOSS_CHOICES}")


@dataclass
class TrainLogEntry:
    epoch: int
    iteration: int
    pair_id: int
    loss1: float
    loss2: float
    loss3: float
    total: float
    lam: float
    mu: float
    clamped: bool
    counts: ClassCounts | None

    def row(self):
        return [self.epoch, self.iteration, self.pair_id, self.loss1, self.loss2, self.loss3,
                self.total, self.lam, self.mu, self.clamped]


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    log: list[TrainLogEntry]
    epoch_losses: list[float]
    clamp_rate: list[float]


def _pair_gradient(record: PairRecord, params, run: TrainRunConfig, pair_id: int):
    trace = forward(record.coords64(), params, run.network)
    loss, parts = total_loss(trace, record.labels, run.network, main=run.loss, gamma=run.focal_gamma)
    if not math.isfinite(parts.total):
        raise FloatingPointError(f"non-finite loss on pair {pair_id} (seed {record.seed})")
    return trace.graph.backward(loss), parts


def train(run: TrainRunConfig, records: list[PairRecord] | None = None, pair_ids: list[int] | None = None,
          params: dict[str, np.ndarray] | None = None) -> TrainResult:
    """Adam over pair batches; guided weights are recomputed per pair per iteration.

    Gradients are averaged over the pairs of a batch in a fixed order, so the
    result is bitwise reproducible for a given seed, with or without threads.
    """
    if records is None:
        records, pair_ids = load_split(run.dataset, run.split)
    if pair_ids is None:
        pair_ids = list(range(len(records)))
    if not records:
        raise ContractError("no training pairs")
    params = params if params is not None else init_params(run.network, run.seed)
    state = AdamState()
    shuffle = rng_for(run.seed + 1)
    entries: list[TrainLogEntry] = []
    epoch_losses, clamp_rate = [], []
    pool = ThreadPoolExecutor(run.threads) if run.threads > 1 else None
    it = 0
    try:
        for epoch in range(1, run.epochs + 1):
            order = shuffle.permutation(len(records))
            epoch_total = 0.0
            for start in range(0, len(order), run.batch_size):
                batch = [int(i) for i in order[start:start + run.batch_size]]
                jobs = [(records[i], params, run, pair_ids[i]) for i in batch]
                results = list(pool.map(lambda a: _pair_gradient(*a), jobs)) if pool else [
                    _pair_gradient(*a) for a in jobs]
                it += 1
                acc = {k: np.zeros_like(v) for k, v in params.items()}
                clamps = 0
                for i, (grads, parts) in zip(batch, results):
                    for k, g in grads.items():
                        acc[k] += g
                    w = parts.weights
                    lam, mu, clamped = (w.lam, w.mu, w.clamped) if w is not None else (math.nan, math.nan, False)
                    clamps += clamped
                    entries.append(TrainLogEntry(epoch, it, pair_ids[i], parts.loss1, parts.loss2, parts.loss3,
                                                 parts.total, lam, mu, clamped, parts.counts))
                    epoch_total += parts.total
                for k in acc:
                    acc[k] /= len(batch)
                adam_step(params, acc, state, run.learning_rate)
                clamp_rate.append(clamps / len(batch))
            epoch_losses.append(epoch_total / len(records))
            log.info("epoch %d  mean loss %.5f", epoch, epoch_losses[-1])
            if run.checkpoint_every and run.checkpoint_path and epoch % run.checkpoint_every == 0:
                save_checkpoint(f"{run.checkpoint_path}.epoch{epoch}", params, run.network)
    finally:
        if pool:
            pool.shutdown()
    if run.log_path:
        write_csv(run.log_path, TRAIN_LOG_COLUMNS, (e.row() for e in entries))
    return TrainResult(params, entries, epoch_losses, clamp_rate)


# --- evaluation ------------------------------------------------------------------


@dataclass
class PairMetrics:
    pair_id: int
    precision: float
    recall: float
    f1: float
    fn: float
    e_dev: float


@dataclass
class MetricsRow:
    pairs: list[PairMetrics]
    fn_n: float = 1.0

    def mean(self, name: str) -> float:
        return float(np.mean([getattr(p, name) for p in self.pairs]))

    @property
    def precision(self):
        return self.mean("precision")

    @property
    def recall(self):
        return self.mean("recall")

    @property
    def f1(self):
        return self.mean("f1")

    @property
    def fn(self):
        return self.mean("fn")

    @property
    def e_dev(self):
        return self.mean("e_dev")

    def aggregate(self) -> dict[str, float]:
        return {k: self.mean(k) for k in METRICS_COLUMNS[1:]}

    def write(self, path) -> None:
        rows = [[p.pair_id, p.precision, p.recall, p.f1, p.fn, p.e_dev] for p in self.pairs]
        agg = self.aggregate()
        rows.append(["mean"] + [agg[k] for k in METRICS_COLUMNS[1:]])
        write_csv(path, METRICS_COLUMNS, rows)


def pair_metrics(record: PairRecord, mask, fn_n: float = 1.0, pair_id: int = 0) -> PairMetrics:
    mask = np.asarray(mask).astype(bool).reshape(-1)
    P, R = counts_to_pr(ClassCounts.from_predictions(mask, record.labels))
    if mask.sum() >= 8:
        try:
            e_dev = e_deviation(eight_point(record.coords64()[mask]), record.e_gt)
        except DegenerateConfiguration:
            e_dev = MAX_E_DEVIATION
    else:
        e_dev = MAX_E_DEVIATION
    return PairMetrics(pair_id, P, R, fn_score(P, R, FnSpec(1.0)), fn_score(P, R, FnSpec(fn_n)), e_dev)


def evaluate_masks(records, masks, fn_n: float = 1.0, pair_ids=None, threads: int = 1) -> MetricsRow:
    """Per-pair P, R, F1, Fn and E deviation; aggregates are means over pairs."""
    if not records:
        raise ContractError("cannot evaluate an empty split")
    ids = pair_ids if pair_ids is not None else list(range(len(records)))
    jobs = list(zip(records, masks, ids))
    fn = lambda a: pair_metrics(a[0], a[1], fn_n, a[2])  # noqa: E731
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            rows = list(pool.map(fn, jobs))
    else:
        rows = [fn(j) for j in jobs]
    return MetricsRow(rows, fn_n)


def network_probs(params, records, config: GLANetConfig) -> list[np.ndarray]:
    return [forward(r.coords64(), params, config).final_probs for r in records]


def evaluate(params, records, config: GLANetConfig, pair_ids=None, threads: int = 1) -> MetricsRow:
    masks = [predict(p, config.threshold) for p in network_probs(params, records, config)]
    return evaluate_masks(records, masks, config.fn_n, pair_ids, threads)


def attention_ratios(params, records, config: GLANetConfig) -> dict[str, float]:
    """Mean inlier/outlier attention-weight ratio per crude block, averaged over pairs."""
    sums: dict[str, list[float]] = {}
    for r in records:
        trace = forward(r.coords64(), params, config)
        for name, ind in trace.indicating.items():
            if name.startswith("crude"):
                sums.setdefault(name, []).append(attention_ratio(ind, r.labels))
    return {k: float(np.mean(v)) for k, v in sums.items()}


# --- retained-correspondence sweep --------------------------------------------------


@dataclass
class PRFCurve:
    k: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    best_k: int
    best_f1: float


def prf_sweep(probs, labels) -> PRFCurve:
    """P/R/F1 when keeping the top-k instances by probability, for k = 1..N.

    The best boundary is the k of highest F1 (smallest k on ties). Sorting is
    stable, so equal probabilities keep their input order.
    """
    probs = np.asarray(probs, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).astype(bool).reshape(-1)
    if probs.size < 1 or probs.shape != labels.shape:
        raise ContractError("prf_sweep needs matching, non-empty probs and labels")
    order = np.argsort(-probs, kind="stable")
    tp = np.cumsum(labels[order])
    k = np.arange(1, probs.size + 1)
    n_pos = labels.sum()
    precision = tp / k
    recall = tp / n_pos if n_pos else np.zeros(probs.size)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(probs.size), where=denom > 0)
    best = int(np.argmax(f1))
    return PRFCurve(k, precision, recall, f1, int(k[best]), float(f1[best]))


# --- baseline comparison ----------------------------------------------------------


def ransac_masks(records, iterations: int, threshold: float, seed: int = 0) -> list[np.ndarray]:
    return [ransac(r.coords64(), iterations, threshold, seed + i).mask for i, r in enumerate(records)]


def tune_ransac_threshold(records, iterations: int, candidates, seed: int = 0, fn_n: float = 1.0) -> float:
    """Threshold from ``candidates`` with the best mean F1 on ``records``."""
    best, best_f1 = None, -1.0
    for t in candidates:
        f1 = evaluate_masks(records, ransac_masks(records, iterations, t, seed), fn_n).f1
        log.info("ransac threshold %.3g -> F1 %.4f", t, f1)
        if f1 > best_f1:
            best, best_f1 = t, f1
    return best


def baseline_compare(records, config: GLANetConfig, params=None, ransac_iters: int = 1000,
                     ransac_thresh: float = 1e-4, seed: int = 0, pair_ids=None, threads: int = 1) -> dict[str, MetricsRow]:
    """Run RANSAC and (if params are given) the network through the same evaluation."""
    table = {"ransac": evaluate_masks(records, ransac_masks(records, ransac_iters, ransac_thresh, seed),
                                      config.fn_n, pair_ids, threads)}
    if params is not None:
        table["network"] = evaluate(params, records, config, pair_ids, threads)
    return table


def write_comparison(path, table: dict[str, MetricsRow]) -> None:
    rows = []
    for method, metrics in table.items():
        agg = metrics.aggregate()
        rows.append([method] + [agg[k] for k in METRICS_COLUMNS[1:]])
    write_csv(path, ["method"] + METRICS_COLUMNS[1:], rows)
