"""``sphnet`` command line: train, eval, invariance, bench-pool, sweep-rho, gen-data.

Flags mirror :class:`sphnet.experiments.ExperimentConfig`; a ``--config`` JSON
file is applied on top of the flags, so its values win.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import experiments as ex
from .checkpoint import CheckpointError
from .data import Protocol, write_dataset
from .models import build_model

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class CliError(Exception):
    pass


# --------------------------------------------------------------------------- config assembly


def _add_experiment_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="JSON experiment config; its keys override flags")
    p.add_argument("--task", choices=["classify", "segment"], default="classify")
    p.add_argument("--variant", choices=["sphnet", "sphbase"])
    p.add_argument("--precision", choices=["float32", "float64"])
    p.add_argument("--protocol", help="train/test augmentation, e.g. O/A")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--rho", type=float)
    p.add_argument("--data-kind", choices=["shapes", "dumbbell", "off", "files"])
    p.add_argument("--data-root")
    p.add_argument("--train-size", type=int)
    p.add_argument("--test-size", type=int)
    p.add_argument("--data-points", type=int)


def merge_config(cfg: ex.ExperimentConfig, overrides: dict) -> ex.ExperimentConfig:
    """Apply a (possibly partial) experiment dict; nested ``model`` and ``data`` merge key by key."""
    overrides = dict(overrides)
    overrides.pop("schema", None)
    overrides.pop("version", None)
    d = cfg.to_dict()
    for key in ("model", "data"):
        if key in overrides:
            sub = overrides.pop(key)
            if not isinstance(sub, dict):
                raise CliError(f"config key {key!r} must be an object")
            if key == "model" and sub.get("schema", d["model"]["schema"]) != d["model"]["schema"]:
                d["model"] = {}
            d[key] = {**d[key], **sub}
    d.update(overrides)
    try:
        return ex.ExperimentConfig.from_dict(d)
    except (TypeError, ValueError) as err:
        raise CliError(f"invalid config: {err}") from None


def experiment_from_args(args) -> ex.ExperimentConfig:
    cfg = ex.classification_experiment() if args.task == "classify" else ex.segmentation_experiment()
    flat = {
        "variant": args.variant,
        "precision": args.precision,
        "rho": args.rho,
        "protocol": args.protocol,
        "lr": args.lr,
        "batch_size": args.batch_size,
        "epochs": args.epochs,
        "seed": args.seed,
    }
    data = {
        "kind": args.data_kind,
        "root": args.data_root,
        "train_size": args.train_size,
        "test_size": args.test_size,
        "n_points": args.data_points,
    }
    changes = {k: v for k, v in flat.items() if v is not None}
    data = {k: v for k, v in data.items() if v is not None}
    if data:
        changes["data"] = data
    try:
        cfg = cfg.replace(**changes)
    except ValueError as err:
        raise CliError(str(err)) from None
    if args.config is not None:
        try:
            overrides = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise CliError(f"cannot read config {args.config}: {err}") from None
        cfg = merge_config(cfg, overrides)
    return cfg


def _emit(payload):
    print(json.dumps(payload, indent=2, sort_keys=True, default=float))


def _progress(entry):
    val = "" if entry["val_acc"] is None else f" val_acc={entry['val_acc']:.2f}"
    print(f"epoch {entry['epoch']} loss={entry['loss']:.4f} train_acc={entry['train_acc']:.2f}{val}", file=sys.stderr)


# --------------------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = experiment_from_args(args)
    out = Path(args.out)
    train_set, test_set = cfg.data.load("train"), cfg.data.load("test")
    augs = ("O", "A") if args.grid else (Protocol.parse(cfg.protocol).train_aug,)
    summary = {"config_hash": cfg.config_hash(), "runs": {}}
    cells = {}
    for aug in augs:
        run_cfg = cfg.replace(protocol=f"{aug}/{Protocol.parse(cfg.protocol).test_aug}", output_dir=str(out))
        result = ex.train(run_cfg, train_set, test_set, None if args.quiet else _progress)
        metrics = {f"{aug}/{te}": acc for te, acc in ex.evaluate_protocols(result.model, test_set, cfg.seed).items()}
        cells.update(metrics)
        directory = out / f"train_{aug}" if args.grid else out
        ex.save_run(result, directory, metrics)
        summary["runs"][aug] = str(directory / "model.ckpt")
    summary["cells"] = cells
    ex.write_json_atomic(out / "summary.json", summary)
    _emit(summary)
    return EXIT_OK


def cmd_eval(args) -> int:
    cells = {}
    hashes = []
    for path in args.checkpoint:
        try:
            model, cfg = ex.load_run(path)
        except (OSError, CheckpointError, ValueError, KeyError) as err:
            raise CliError(f"cannot load {path}: {err}") from None
        if cfg is None:
            raise CliError(f"{path} carries no experiment config")
        test_set = cfg.data.load(args.split)
        train_aug = Protocol.parse(cfg.protocol).train_aug
        augs = [Protocol.parse(args.protocol).test_aug] if args.protocol else ["O", "A"]
        for te in augs:
            cells[f"{train_aug}/{te}"] = ex.evaluate(model, test_set, te, cfg.seed)
        hashes.append(cfg.config_hash())
    _emit({"cells": cells, "config_hashes": hashes, "split": args.split})
    return EXIT_OK


def cmd_invariance(args) -> int:
    if args.checkpoint:
        try:
            model, cfg = ex.load_run(args.checkpoint)
        except (OSError, CheckpointError, ValueError, KeyError) as err:
            raise CliError(f"cannot load {args.checkpoint}: {err}") from None
    else:
        cfg = experiment_from_args(args)
        model = build_model(cfg.model_config())
    report = ex.invariance_audit(model, trials=args.trials, seed=args.audit_seed)
    report["config_hash"] = cfg.config_hash() if cfg is not None else None
    _emit(report)
    return EXIT_OK


def cmd_bench_pool(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",")]
    if any(n < 2 or n & (n - 1) for n in sizes):
        raise CliError("sizes must be powers of two")
    rows, summary = ex.bench_pool(sizes, ratio=args.ratio, repeats=args.repeats, seed=args.seed)
    text = ex.write_csv(rows, ex.BENCH_COLUMNS)
    if args.csv:
        Path(args.csv).write_text(text)
    _emit({"rows": rows, **summary})
    return EXIT_OK


def cmd_sweep_rho(args) -> int:
    cfg = experiment_from_args(args)
    values = [float(v) for v in args.values.split(",")]
    rows = ex.sweep_rho(cfg, values, log=None if args.quiet else _progress)
    text = ex.write_csv(rows, ex.SWEEP_COLUMNS)
    if args.csv:
        Path(args.csv).write_text(text)
    _emit({"config_hash": cfg.config_hash(), "rows": rows})
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = experiment_from_args(args)
    out = Path(args.out)
    written = {}
    for split in ("train", "test"):
        ds = cfg.data.load(split)
        written[split] = {"path": str(write_dataset(ds, out)), "samples": len(ds)}
    _emit({"data": dataclasses.asdict(cfg.data), "written": written})
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sphnet", description="Rotation-invariant point-cloud networks: experiments and tools.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoint + report")
    _add_experiment_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--grid", action="store_true", help="train O and A models and report all four cells")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate checkpoints under O and A test poses")
    p.add_argument("checkpoint", nargs="+")
    p.add_argument("--protocol", help="restrict to one test augmentation, e.g. O/A")
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("invariance", help="rotation audit of a checkpoint or a randomly initialised model")
    _add_experiment_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--audit-seed", type=int, default=0)
    p.set_defaults(func=cmd_invariance)

    p = sub.add_parser("bench-pool", help="kd-tree vs FPS/Voronoi pooling timings")
    p.add_argument("--sizes", default=",".join(str(2**e) for e in range(9, 15)))
    p.add_argument("--ratio", type=int, default=4)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", help="write the timing table here")
    p.set_defaults(func=cmd_bench_pool)

    p = sub.add_parser("sweep-rho", help="protocol cells for each kernel scale rho")
    _add_experiment_flags(p)
    p.add_argument("--values", default=",".join(str(v) for v in ex.RHO_GRID))
    p.add_argument("--csv")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_sweep_rho)

    p = sub.add_parser("gen-data", help="write the configured dataset in the binary record format")
    _add_experiment_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, FileNotFoundError, ValueError) as err:
        print(f"sphnet: error: {err}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
