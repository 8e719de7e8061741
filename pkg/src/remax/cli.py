"""Command-line driver: ``remax {gen,train,eval,ablate,inspect-losses}``.

Exit codes: 0 ok, 2 configuration/input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import itertools
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ConfigError, RunConfig, load_config, parse_assignment
from .model import CheckpointError, init_params, load_checkpoint, save_checkpoint
from .metrics import write_pq_csv
from .synthdata import DatasetError, generate_many, read_dataset, write_dataset
from .train import NumericalFailure, evaluate, prepare, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

# short grid keys accepted by ``ablate --grid``
GRID_KEYS = {
    "eta": ("relax.eta",),
    "remask_stage_count": ("relax.remask_stage_count",),
    "stop_grad_semantic": ("relax.stop_grad_semantic",),
    "gt_remask_mode": ("relax.gt_remask_mode",),
    "activation": ("relax.activation", "loss.activation"),
}

METRICS_FIELDS = ("variant", "pq", "sq", "rq", "miou", "pq_things", "pq_stuff", "n_images")
HIST_EDGES = np.arange(-6.0, 6.01, 0.5)


def _config(args) -> RunConfig:
    cfg = load_config(args.config, args.set or ())
    if args.seed is not None:
        cfg.set("seed", str(args.seed))
    if args.out is not None:
        cfg.set("out", args.out)
    cfg.validate()
    return cfg


def _datasets(cfg: RunConfig):
    root = Path(cfg.data.path)
    try:
        train_samples = read_dataset(root / "train.rmx")
        val_samples = read_dataset(root / "val.rmx")
    except FileNotFoundError as exc:
        raise ConfigError(f"dataset missing ({exc.filename}); run 'gen' first") from None
    return prepare(train_samples, cfg.model), prepare(val_samples[:cfg.train.val_size], cfg.model)


def _params(cfg: RunConfig, checkpoint: str | None) -> dict[str, np.ndarray]:
    if checkpoint is None:
        return init_params(cfg.model)
    params = load_checkpoint(checkpoint)
    expected = init_params(cfg.model)
    if set(params) != set(expected) or any(params[k].shape != v.shape for k, v in expected.items()):
        raise ConfigError("checkpoint does not match model config")
    return {k: params[k] for k in expected}


def _run(cfg: RunConfig, train_set, val_set, out: Path, params=None, on_step=None):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.dumps())
    result = train(cfg, train_set, val_set, params=params, log_path=out / "train_log.csv", on_step=on_step)
    save_checkpoint(out / "checkpoint.rmx", result.params)
    return result


def cmd_gen(args) -> int:
    cfg = _config(args)
    root = Path(cfg.data.path if args.out is None else args.out)
    root.mkdir(parents=True, exist_ok=True)
    scene = cfg.scene_config()
    write_dataset(root / "train.rmx", generate_many(cfg.seed, cfg.data.n_train, scene))
    # validation scenes come from a disjoint seed stream
    write_dataset(root / "val.rmx", generate_many(cfg.seed + 1_000_003, cfg.data.n_val, scene))
    print(f"wrote {cfg.data.n_train} train / {cfg.data.n_val} val samples to {root}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    train_set, val_set = _datasets(cfg)
    result = _run(cfg, train_set, val_set, Path(cfg.out), params=_params(cfg, args.checkpoint))
    last = result.rows[-1] if result.rows else None
    if last:
        print(f"step {last['step']}: total={last['total']:.6g} val_pq={last['val_pq']}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    _, val_set = _datasets(cfg)
    params = _params(cfg, args.checkpoint)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_FIELDS)
        for variant, branch in (("without_branch", False), ("with_branch", True)):
            res, miou = evaluate(params, val_set, cfg, semantic_branch=branch)
            write_pq_csv(out / f"pq_{variant}.csv", res)
            w.writerow([variant, repr(res.pq), repr(res.sq), repr(res.rq), repr(miou),
                        repr(res.things["pq"]), repr(res.stuff["pq"]), len(val_set)])
            print(f"{variant}: PQ={res.pq:.4f} SQ={res.sq:.4f} RQ={res.rq:.4f} mIoU={miou:.4f}")
    return EXIT_OK


def parse_grid(specs: Sequence[str]) -> list[tuple[str, list[str]]]:
    grid = []
    for spec in specs:
        key, values = parse_assignment(spec)
        if key not in GRID_KEYS:
            raise ConfigError(f"grid key must be one of {sorted(GRID_KEYS)}, got {key!r}")
        vals = [v.strip() for v in values.split(",") if v.strip()]
        if not vals:
            raise ConfigError(f"grid key {key!r} has no values")
        grid.append((key, vals))
    return grid


def cmd_ablate(args) -> int:
    base = _config(args)
    grid = parse_grid(args.grid or [])
    train_set, val_set = _datasets(base)
    out = Path(base.out)
    out.mkdir(parents=True, exist_ok=True)
    keys = [k for k, _ in grid]
    rows = []
    for i, combo in enumerate(itertools.product(*[v for _, v in grid])):
        cfg = copy.deepcopy(base)
        for key, value in zip(keys, combo):
            for dotted in GRID_KEYS[key]:
                cfg.set(dotted, value)
        cell = out / f"cell_{i:03d}"
        cfg.out = str(cell)
        cfg.validate()
        result = _run(cfg, train_set, val_set, cell)
        last = result.rows[-1] if result.rows else {}
        rows.append([i, *combo, _num(last.get("val_pq")), _num(last.get("total")), cell.name])
        print(f"cell {i}: {dict(zip(keys, combo))} val_pq={last.get('val_pq')}")
    with open(out / "ablate_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell", *keys, "final_val_pq", "final_total", "run_dir"])
        w.writerows(rows)
    return EXIT_OK


def _num(x) -> str:
    return "" if x is None else repr(float(x))


def cmd_inspect_losses(args) -> int:
    base = _config(args)
    if args.steps is not None:
        base.train.steps = args.steps
    train_set, _ = _datasets(base)
    out = Path(base.out)
    out.mkdir(parents=True, exist_ok=True)
    with_remask = copy.deepcopy(base)
    if with_remask.relax.remask_stage_count == 0:
        with_remask.relax.remask_stage_count = min(4, base.model.stages)
    without = copy.deepcopy(base)
    without.relax.remask_stage_count = 0
    without.explicit.add("relax.remask_stage_count")
    with_remask.explicit.add("relax.remask_stage_count")

    hist_rows, step_rows = [], []
    for variant, cfg in (("with_remask", with_remask), ("without_remask", without)):
        def record(step, reports, variant=variant):
            ratios = np.concatenate([np.log10(np.maximum(r.fp_pairs, 1e-12) / np.maximum(r.fn_pairs, 1e-12))
                                     for r in reports])
            counts, _ = np.histogram(np.clip(ratios, HIST_EDGES[0], HIST_EDGES[-1]), bins=HIST_EDGES)
            for lo, hi, c in zip(HIST_EDGES[:-1], HIST_EDGES[1:], counts):
                hist_rows.append([variant, step, repr(float(lo)), repr(float(hi)), int(c)])
            fp = float(np.mean([r.fp_mask for r in reports]))
            fn = float(np.mean([r.fn_mask for r in reports]))
            step_rows.append([variant, step, repr(fp), repr(fn),
                              repr(float(np.log10(max(fp, 1e-12) / max(fn, 1e-12))))])

        train(cfg, train_set, params=_params(cfg, args.checkpoint), on_step=record)
    with open(out / "fpfn_hist.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "step", "bin_lo", "bin_hi", "count"])
        w.writerows(hist_rows)
    with open(out / "fpfn_steps.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "step", "fp_mask", "fn_mask", "log10_fp_fn"])
        w.writerows(step_rows)
    for variant in ("with_remask", "without_remask"):
        fps = [float(r[2]) for r in step_rows if r[0] == variant]
        print(f"{variant}: mean fp_mask={np.mean(fps):.6g} over {len(fps)} steps")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key=value config file")
    common.add_argument("--set", metavar="K=V", action="append", help="override a config key (repeatable)")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--seed", type=int, metavar="U64", help="run seed")

    parser = argparse.ArgumentParser(prog="remax", description="ReMask / ReClass training laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate train/val synthetic datasets")
    p = sub.add_parser("train", parents=[common], help="train and write checkpoint + train_log.csv")
    p.add_argument("--checkpoint", help="start from this checkpoint instead of fresh weights")
    p = sub.add_parser("eval", parents=[common], help="PQ/SQ/RQ/mIoU with and without the semantic branch")
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("ablate", parents=[common], help="train one run per grid cell")
    p.add_argument("--grid", action="append", metavar="KEY=V1,V2,...",
                   help=f"grid axis; keys: {', '.join(GRID_KEYS)}")
    p = sub.add_parser("inspect-losses", parents=[common], help="log10(fp/fn) histograms with/without ReMask")
    p.add_argument("--checkpoint", help="start from this checkpoint (default: fresh init)")
    p.add_argument("--steps", type=int, help="number of steps to inspect")
    return parser


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "inspect-losses": cmd_inspect_losses}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DatasetError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        print(f"batch seed: default_rng({list(exc.batch_seed)}), sample indices {exc.indices}", file=sys.stderr)
        out = getattr(args, "out", None)
        if out:
            Path(out).mkdir(parents=True, exist_ok=True)
            (Path(out) / "failure.txt").write_text(
                f"step={exc.step}\nbatch_seed={list(exc.batch_seed)}\nindices={exc.indices}\nerror={exc}\n")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
