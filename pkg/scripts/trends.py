"""Desk-scale trend experiments on synthetic pairs.

Two experiments, each repeated over seeds:

* balance: F1-guided vs L-loss vs F2-guided networks on 15% inlier data.
  Reports test P, R, F1, F2 and the crude-block attention ratios.
* low_inlier: the F1-guided network vs RANSAC on 7.5% inlier data, with the
  RANSAC threshold picked on the validation split.

Usage::

    python scripts/trends.py --out results/trends            # full run (~20 min on one core)
    python scripts/trends.py --quick --out /tmp/trends       # smoke run
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from glanet.data import GeneratorParams, generate_dataset, split_indices
from glanet.harness import (
    TrainRunConfig,
    attention_ratios,
    evaluate_masks,
    network_probs,
    ransac_masks,
    train,
    tune_ransac_threshold,
    write_csv,
)
from glanet.network import GLANetConfig, predict

log = logging.getLogger("glanet.trends")

# variant name -> (main loss, Fn target)
BALANCE_VARIANTS = {"f1_guided": ("guided", 1.0), "l_loss": ("l_loss", 1.0), "f2_guided": ("guided", 2.0)}


@dataclass
class TrendConfig:
    pairs: int = 714  # splits to 500 train / 107 val / 107 test
    n: int = 512
    inlier_ratio: float = 0.15
    low_inlier_ratio: float = 0.075
    noise_sigma: float = 1e-3
    seeds: tuple[int, ...] = (0, 1, 2)
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 1e-3
    channels: int = 32
    crude_blocks: int = 3
    fine_blocks_per_pass: int = 1
    ransac_iters: int = 1000
    ransac_candidates: tuple[float, ...] = (1e-6, 1e-5, 1e-4, 1e-3)
    data_seed_offset: int = 1000

    @classmethod
    def quick(cls) -> "TrendConfig":
        return cls(pairs=60, n=128, seeds=(0,), epochs=2, channels=8, crude_blocks=2, ransac_iters=100,
                   ransac_candidates=(1e-5, 1e-4))

    def network(self, fn_n: float = 1.0) -> GLANetConfig:
        return GLANetConfig(channels=self.channels, crude_blocks=self.crude_blocks,
                            fine_blocks_per_pass=self.fine_blocks_per_pass, fn_n=fn_n)


@dataclass
class RunSummary:
    experiment: str
    variant: str
    seed: int
    precision: float
    recall: float
    f1: float
    f2: float
    e_dev: float
    seconds: float
    attention: dict[str, float] = field(default_factory=dict)

    @property
    def gap(self) -> float:
        return abs(self.precision - self.recall)


def split_data(cfg: TrendConfig, ratio: float, seed: int):
    """Generate one dataset and cut it into train/val/test record lists."""
    params = GeneratorParams(n=cfg.n, inlier_ratio=ratio, noise_sigma=cfg.noise_sigma)
    data_seed = cfg.data_seed_offset + seed
    records = generate_dataset(data_seed, cfg.pairs, params)
    return {name: [records[i] for i in idx] for name, idx in split_indices(cfg.pairs, data_seed).items()}


def summarize(experiment, variant, seed, records, masks, seconds, attention=None) -> RunSummary:
    m1 = evaluate_masks(records, masks, fn_n=1.0)
    f2 = evaluate_masks(records, masks, fn_n=2.0).fn
    return RunSummary(experiment, variant, seed, m1.precision, m1.recall, m1.f1, f2, m1.e_dev, seconds,
                      attention or {})


def train_variant(cfg: TrendConfig, splits, loss: str, fn_n: float, seed: int):
    net = cfg.network(fn_n)
    run = TrainRunConfig(epochs=cfg.epochs, batch_size=cfg.batch_size, learning_rate=cfg.learning_rate,
                         seed=seed, loss=loss, network=net)
    return train(run, splits["train"]).params, net


def run_balance(cfg: TrendConfig, seed: int) -> list[RunSummary]:
    splits = split_data(cfg, cfg.inlier_ratio, seed)
    test = splits["test"]
    out = []
    for variant, (loss, fn_n) in BALANCE_VARIANTS.items():
        t0 = time.perf_counter()
        params, net = train_variant(cfg, splits, loss, fn_n, seed)
        masks = [predict(p, net.threshold) for p in network_probs(params, test, net)]
        s = summarize("balance", variant, seed, test, masks, time.perf_counter() - t0,
                      attention_ratios(params, test, net))
        log.info("balance seed %d %-9s P=%.3f R=%.3f F1=%.3f F2=%.3f (%.0fs)", seed, variant, s.precision,
                 s.recall, s.f1, s.f2, s.seconds)
        out.append(s)
    return out


def run_low_inlier(cfg: TrendConfig, seed: int) -> list[RunSummary]:
    splits = split_data(cfg, cfg.low_inlier_ratio, seed)
    test = splits["test"]
    t0 = time.perf_counter()
    params, net = train_variant(cfg, splits, "guided", 1.0, seed)
    masks = [predict(p, net.threshold) for p in network_probs(params, test, net)]
    net_row = summarize("low_inlier", "f1_guided", seed, test, masks, time.perf_counter() - t0)
    t0 = time.perf_counter()
    thresh = tune_ransac_threshold(splits["val"], cfg.ransac_iters, cfg.ransac_candidates, seed)
    rmasks = ransac_masks(test, cfg.ransac_iters, thresh, seed)
    ransac_row = summarize("low_inlier", f"ransac@{thresh:g}", seed, test, rmasks, time.perf_counter() - t0)
    for s in (net_row, ransac_row):
        log.info("low_inlier seed %d %-12s P=%.3f R=%.3f F1=%.3f (%.0fs)", seed, s.variant, s.precision,
                 s.recall, s.f1, s.seconds)
    return [net_row, ransac_row]


def median_of(rows: list[RunSummary], variant_prefix: str, metric: str) -> float:
    vals = [getattr(r, metric) for r in rows if r.variant.startswith(variant_prefix)]
    return float(np.median(vals))


def attention_vote(rows: list[RunSummary], variant: str = "f1_guided") -> float:
    """Median over seeds of the fraction of crude blocks with mean attention ratio > 1."""
    fracs = [np.mean([v > 1.0 for v in r.attention.values()]) for r in rows if r.variant == variant]
    return float(np.median(fracs))


def write_results(out_dir, rows: list[RunSummary], cfg: TrendConfig) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = ["experiment", "variant", "seed", "precision", "recall", "f1", "f2", "abs_p_minus_r", "e_dev", "seconds"]
    write_csv(out / "runs.csv", header, [[r.experiment, r.variant, r.seed, r.precision, r.recall, r.f1, r.f2,
                                          r.gap, r.e_dev, r.seconds] for r in rows])
    att = [[r.variant, r.seed, name, v] for r in rows for name, v in r.attention.items()]
    write_csv(out / "attention.csv", ["variant", "seed", "block", "ratio"], att)
    (out / "config.json").write_text(json.dumps(asdict(cfg), indent=2) + "\n")


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="results/trends")
    p.add_argument("--quick", action="store_true", help="tiny smoke configuration")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--only", choices=["balance", "low_inlier"])
    a = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    cfg = TrendConfig.quick() if a.quick else TrendConfig()
    if a.seeds:
        cfg = replace(cfg, seeds=tuple(a.seeds))
    rows: list[RunSummary] = []
    for seed in cfg.seeds:
        if a.only in (None, "balance"):
            rows += run_balance(cfg, seed)
        if a.only in (None, "low_inlier"):
            rows += run_low_inlier(cfg, seed)
    write_results(a.out, rows, cfg)
    bal = [r for r in rows if r.experiment == "balance"]
    if bal:
        for v in BALANCE_VARIANTS:
            print(f"{v:10s} median F1 {median_of(bal, v, 'f1'):.4f}  F2 {median_of(bal, v, 'f2'):.4f}  "
                  f"|P-R| {median_of(bal, v, 'gap'):.4f}")
        print(f"attention: median fraction of crude blocks with ratio > 1: {attention_vote(bal):.2f}")
    low = [r for r in rows if r.experiment == "low_inlier"]
    if low:
        print(f"low inlier: network F1 {median_of(low, 'f1_guided', 'f1'):.4f}  "
              f"ransac F1 {median_of(low, 'ransac', 'f1'):.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
