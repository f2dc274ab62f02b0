"""Command-line entry point: ``glanet {gen,train,eval,baseline,curves,gradcheck}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .data import GeneratorParams, build_dataset, load_split
from .diffcore import grad_check_params
from .harness import (
    TrainRunConfig,
    baseline_compare,
    evaluate,
    network_probs,
    prf_sweep,
    train,
    write_comparison,
    write_csv,
)
from .network import (
    GLANetConfig,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
    scheduled_weights,
    total_loss,
)

log = logging.getLogger("glanet")

LOSS_FLAGS = {"guided": "guided", "l": "l_loss", "focal": "focal"}
GRADCHECK_TOLERANCE = 1e-4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _network_flags(p):
    p.add_argument("--channels", type=int)
    p.add_argument("--crude-blocks", type=int)
    p.add_argument("--fine-blocks", type=int)
    p.add_argument("--rho", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--fn-n", type=float, choices=[0.5, 1.0, 2.0])
    p.add_argument("--threshold", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="glanet", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=1)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--pairs", type=int, required=True)
    g.add_argument("--n", type=int, default=512)
    g.add_argument("--inlier-ratio", type=float, default=0.15)
    g.add_argument("--noise", type=float, default=1e-3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a network")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--config", help="JSON file of training options (flags override it)")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--loss", choices=sorted(LOSS_FLAGS))
    t.add_argument("--log", help="training log CSV (default: <out>.log.csv)")
    _network_flags(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out", help="metrics CSV (default: <ckpt>.<split>.metrics.csv)")
    e.add_argument("--threshold", type=float)
    e.add_argument("--fn-n", type=float, choices=[0.5, 1.0, 2.0])

    b = sub.add_parser("baseline", help="RANSAC vs network comparison table")
    b.add_argument("--data", required=True)
    b.add_argument("--ckpt")
    b.add_argument("--split", default="test")
    b.add_argument("--ransac-iters", type=int, default=1000)
    b.add_argument("--ransac-thresh", type=float, default=1e-4)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)

    c = sub.add_parser("curves", help="retained-correspondence P/R/F1 sweep per pair")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--split", default="test")
    c.add_argument("--out", required=True)

    k = sub.add_parser("gradcheck", help="finite-difference check of every block and the network")
    k.add_argument("--config", default="tiny", choices=["tiny"])
    k.add_argument("--seed", type=int, default=0)
    return parser


# --- subcommands ------------------------------------------------------------------


def cmd_gen(a) -> int:
    params = GeneratorParams(n=a.n, inlier_ratio=a.inlier_ratio, noise_sigma=a.noise)
    manifest = build_dataset(a.out, a.seed, a.pairs, params)
    sizes = {k: len(v) for k, v in manifest.splits.items()}
    print(f"wrote {a.pairs} pairs to {a.out} (splits {sizes}, checksum {manifest.checksum})")
    return 0


def _merge_network(net: GLANetConfig, a) -> GLANetConfig:
    d = asdict(net)
    for flag, key in [("channels", "channels"), ("crude_blocks", "crude_blocks"),
                      ("fine_blocks", "fine_blocks_per_pass"), ("rho", "rho"), ("eta", "eta"),
                      ("fn_n", "fn_n"), ("threshold", "threshold")]:
        value = getattr(a, flag, None)
        if value is not None:
            d[key] = value
    return GLANetConfig(**d)


def train_config_from(a) -> TrainRunConfig:
    """Defaults, overridden by the --config JSON file, overridden by flags."""
    base = {}
    if a.config:
        base = json.loads(Path(a.config).read_text())
    net_base = base.pop("network", {})
    unknown = (set(base) - {f.name for f in fields(TrainRunConfig)}) | {
        f"network.{k}" for k in set(net_base) - {f.name for f in fields(GLANetConfig)}
    }
    if unknown:
        raise UsageError(f"unknown keys in config file: {sorted(unknown)}")
    net = GLANetConfig(**net_base)
    run = TrainRunConfig(**base)
    for flag, key in [("seed", "seed"), ("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "learning_rate")]:
        value = getattr(a, flag)
        if value is not None:
            setattr(run, key, value)
    if a.loss is not None:
        run.loss = LOSS_FLAGS[a.loss]
    run.network = _merge_network(net, a)
    run.dataset = a.data
    run.checkpoint_path = a.out
    run.log_path = a.log or f"{a.out}.log.csv"
    run.threads = a.threads
    run.__post_init__()
    return run


def cmd_train(a) -> int:
    run = train_config_from(a)
    result = train(run)
    save_checkpoint(a.out, result.params, run.network, {"seed": run.seed, "loss": run.loss, "epochs": run.epochs})
    print(f"trained {run.epochs} epochs; final mean loss {result.epoch_losses[-1]:.6f}; checkpoint {a.out}")
    return 0


def cmd_eval(a) -> int:
    params, config, _ = load_checkpoint(a.ckpt)
    config = _merge_network(config, a)
    records, ids = load_split(a.data, a.split)
    metrics = evaluate(params, records, config, ids, a.threads)
    out = a.out or f"{a.ckpt}.{a.split}.metrics.csv"
    metrics.write(out)
    print(f"{a.split}: P={metrics.precision:.4f} R={metrics.recall:.4f} F1={metrics.f1:.4f} "
          f"E-dev={metrics.e_dev:.4f} -> {out}")
    return 0


def cmd_baseline(a) -> int:
    records, ids = load_split(a.data, a.split)
    if a.ckpt:
        params, config, _ = load_checkpoint(a.ckpt)
    else:
        params, config = None, GLANetConfig()
    table = baseline_compare(records, config, params, a.ransac_iters, a.ransac_thresh, a.seed, ids, a.threads)
    write_comparison(a.out, table)
    for method, m in table.items():
        print(f"{method:8s} P={m.precision:.4f} R={m.recall:.4f} F1={m.f1:.4f} E-dev={m.e_dev:.4f}")
    return 0


def cmd_curves(a) -> int:
    params, config, _ = load_checkpoint(a.ckpt)
    records, ids = load_split(a.data, a.split)
    rows = []
    for pid, r, probs in zip(ids, records, network_probs(params, records, config)):
        curve = prf_sweep(probs, r.labels)
        for k, P, R, F in zip(curve.k, curve.precision, curve.recall, curve.f1):
            rows.append([pid, int(k), float(P), float(R), float(F), int(k) == curve.best_k])
    write_csv(a.out, ["pair_id", "k", "precision", "recall", "f1", "best"], rows)
    print(f"wrote sweeps for {len(records)} pairs to {a.out}")
    return 0


def gradcheck_report(seed: int = 0, n: int = 12) -> dict[str, float]:
    """Max relative FD error per block (and the whole network) on the tiny config."""
    config = GLANetConfig.tiny()
    rng = np.random.Generator(np.random.Philox(key=seed))
    coords = rng.uniform(-0.5, 0.5, size=(n, 4))
    labels = (np.arange(n) % 3 == 0).astype(np.uint8)
    params = init_params(config, seed)
    for k in params:
        params[k] = params[k] + rng.normal(scale=0.1, size=params[k].shape)
    # freeze the scheduled weights so the loss is a smooth function of the parameters
    guided, _ = scheduled_weights(forward(coords, params, config).final_probs, labels, config)

    def f(graph, leaves):
        return total_loss(forward(coords, leaves, config, graph), labels, config, guided=guided)[0]

    errors = grad_check_params(f, params)
    report: dict[str, float] = {}
    for name, err in errors.items():
        block = name.rsplit(".", 1)[0]
        report[block] = max(report.get(block, 0.0), err)
    report["network"] = max(errors.values())
    return report


def cmd_gradcheck(a) -> int:
    report = gradcheck_report(a.seed)
    worst = 0.0
    for name, err in report.items():
        print(f"{name:12s} max relative error {err:.3e}")
        worst = max(worst, err)
    ok = worst < GRADCHECK_TOLERANCE
    print("gradcheck", "passed" if ok else "FAILED", f"(tolerance {GRADCHECK_TOLERANCE:g})")
    return 0 if ok else 1


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "baseline": cmd_baseline,
            "curves": cmd_curves, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    level = os.environ.get("GLA_LOG_LEVEL", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    a = None
    try:
        a = parser.parse_args(argv)
        return COMMANDS[a.command](a)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"glanet {getattr(a, 'command', '')}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
