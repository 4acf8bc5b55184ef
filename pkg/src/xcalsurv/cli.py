"""Command-line entry point: simulate, train, evaluate, sweep.

Exit codes: 0 success, 2 usage, 3 data error, 4 divergence.
The default output root comes from ``$XCALSURV_OUT`` (falls back to ``runs``).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .data import DataError, load_dataset, save_dataset, save_split_manifest, split_dataset, \
    split_from_manifest, load_split_manifest
from .metrics import evaluate
from .models import load_checkpoint, save_checkpoint
from .simulate import GammaSimConfig, load_oracle, save_oracle, simulate_gamma, simulate_risk_groups
from .train import SWEEP_COLUMNS, ConfigError, TrainConfig, TrainingDiverged, run_one, \
    sweep_configs, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
OUT_ENV = "XCALSURV_OUT"
VOLATILE_KEYS = ("created", "duration_s")


class UsageError(Exception):
    pass


def output_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict = field(default_factory=dict)     # path -> sha256
    seeds: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    duration_s: float = 0.0
    created: str = ""

    def write(self, path: Path, started: float) -> None:
        self.duration_s = round(time.time() - started, 3)
        self.created = datetime.now(timezone.utc).isoformat(timespec="seconds")
        missing = [p for p in self.outputs if not Path(p).exists()]
        if missing:
            raise RuntimeError(f"declared outputs missing: {missing}")
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def sidecar_path(data_path) -> Path:
    p = Path(data_path)
    return p.with_name(p.stem + ".oracle.csv")


def _float_list(text: str) -> list[float]:
    items = [s for s in text.replace(" ", "").split(",") if s]
    try:
        return [float(s) for s in items]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of numbers: {text!r}") from None


def _int_list(text: str) -> list[int]:
    return [int(v) for v in _float_list(text)]


# -- simulate -----------------------------------------------------------------

def cmd_simulate(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be positive")
    started = time.time()
    out = Path(args.out) if args.out else output_root() / "data"
    out.mkdir(parents=True, exist_ok=True)
    if args.generator == "gamma":
        cfg = GammaSimConfig(n=args.n, d=args.d, censoring=args.censoring, seed=args.seed)
        data, oracle = simulate_gamma(cfg)
        config = asdict(cfg)
    else:
        if args.n < 10:
            raise UsageError("risk-groups needs --n >= 10")
        data, oracle = simulate_risk_groups(args.n, args.seed, args.censoring)
        config = {"n": args.n, "seed": args.seed, "censoring": args.censoring}
    name = args.generator.replace("-", "_")
    data_path = out / f"{name}.csv"
    oracle_path = sidecar_path(data_path)
    save_dataset(data, data_path)
    save_oracle(data, oracle, oracle_path)
    man = RunManifest("simulate", {"generator": args.generator, **config},
                      seeds={"seed": args.seed}, outputs=[str(data_path), str(oracle_path)])
    man.write(out / f"{name}.manifest.json", started)
    print(f"dataset={data_path}")
    print(f"oracle={oracle_path}")
    print(f"censored_fraction={data.censored_fraction:.4f}")
    return EXIT_OK


# -- shared training config ---------------------------------------------------

TRAIN_FLAGS = {
    # flag dest -> TrainConfig field
    "family": "family", "loss": "loss_kind", "lam": "lam", "seed": "seed", "epochs": "epochs",
    "lr": "learning_rate", "batch_size": "batch_size", "hidden": "hidden", "gamma": "gamma",
    "dcal_bins": "dcal_bins", "time_bins": "time_bins", "interpolate": "interpolate",
    "selection": "selection", "dropout": "dropout", "weight_decay": "weight_decay",
}


def add_train_flags(p: argparse.ArgumentParser, with_lam: bool = True) -> None:
    p.add_argument("--data", required=True, help="dataset CSV (u, delta, x1..xd)")
    p.add_argument("--profile", choices=("desk", "full"), default="desk")
    p.add_argument("--config", help="JSON file of TrainConfig fields; flags take precedence")
    p.add_argument("--family", choices=("lognormal", "weibull", "categorical", "mtlr"))
    p.add_argument("--loss", choices=("nll", "scrps"))
    if with_lam:
        p.add_argument("--lam", type=float)
        p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--hidden", type=_int_list, help="comma-separated hidden widths, '' for linear")
    p.add_argument("--gamma", type=float)
    p.add_argument("--dcal-bins", type=int)
    p.add_argument("--time-bins", type=int)
    p.add_argument("--interpolate", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--selection", choices=("combined", "base"))
    p.add_argument("--dropout", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--fractions", type=_float_list, default=[0.5, 0.25, 0.25])
    p.add_argument("--split-seed", type=int, default=0)


def resolve_config(args) -> TrainConfig:
    """Profile defaults, then the JSON config file, then explicit flags."""
    values = TrainConfig.full().to_dict() if args.profile == "full" else TrainConfig().to_dict()
    if args.config:
        try:
            override = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        unknown = set(override) - set(values)
        if unknown:
            raise UsageError(f"unknown config keys {sorted(unknown)}")
        values.update(override)
    for dest, key in TRAIN_FLAGS.items():
        v = getattr(args, dest, None)
        if v is not None:
            values[key] = v
    try:
        return TrainConfig.from_dict(values)
    except (ConfigError, TypeError) as exc:
        raise UsageError(str(exc)) from None


def _load_split(args):
    data = load_dataset(args.data)
    try:
        return data, split_dataset(data, args.fractions, args.split_seed)
    except DataError as exc:
        raise UsageError(str(exc)) from None


# -- train --------------------------------------------------------------------

def cmd_train(args) -> int:
    started = time.time()
    config = resolve_config(args)
    data, split = _load_split(args)
    out = Path(args.out) if args.out else output_root() / f"train_{config.family}_lam{config.lam:g}_s{config.seed}"
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / f"{k}.json" for k in ("config", "split", "history", "manifest")}
    paths["config"].write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    save_split_manifest(split, paths["split"])
    man = RunManifest("train", config.to_dict(), inputs={str(args.data): sha256_file(args.data)},
                      seeds={"seed": config.seed, "split_seed": args.split_seed})
    try:
        model, history = train(config, split)
    except TrainingDiverged as exc:
        paths["history"].write_text(exc.history.to_json())
        man.outputs = [str(paths[k]) for k in ("config", "split", "history")]
        man.write(paths["manifest"], started)
        print(f"error={exc}", file=sys.stderr)
        return EXIT_DIVERGED
    save_checkpoint(model, out)
    paths["history"].write_text(history.to_json())
    man.outputs = [str(out / f) for f in ("model.json", "params.npy", "params.json")]
    man.outputs += [str(paths[k]) for k in ("config", "split", "history")]
    man.write(paths["manifest"], started)
    k = history.selected_epoch
    print(f"checkpoint={out}")
    print(f"selected_epoch={k}")
    print(f"val_loss={history.val_loss[k]:.6g}")
    print(f"val_base={history.val_base[k]:.6g}")
    print(f"val_dcal={history.val_dcal[k]:.6g}")
    print(f"skipped_steps={history.skipped_steps}")
    return EXIT_OK


# -- evaluate -----------------------------------------------------------------

def cmd_evaluate(args) -> int:
    started = time.time()
    ckpt = Path(args.checkpoint)
    try:
        model = load_checkpoint(ckpt)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"cannot load checkpoint {ckpt}: {exc}") from None
    data = load_dataset(args.data)
    if data.dim != model.input_dim:
        raise DataError(f"checkpoint expects {model.input_dim} covariates, data has {data.dim}")
    true_times = None
    oracle_path = Path(args.oracle) if args.oracle else sidecar_path(args.data)
    if oracle_path.exists():
        true_times = load_oracle(oracle_path)["t_true"]
        if len(true_times) != len(data):
            raise DataError("oracle sidecar is not aligned with the dataset")
    if args.part == "all":
        part, idx = data, None
    else:
        split_path = Path(args.split) if args.split else ckpt / "split.json"
        split = split_from_manifest(data, load_split_manifest(split_path))
        part, idx = getattr(split, args.part), split.indices[args.part]
        if true_times is not None:
            true_times = true_times[idx]
    bins = None
    cfg_path = ckpt / "config.json"
    if cfg_path.exists():
        bins = TrainConfig.from_dict(json.loads(cfg_path.read_text())).bins
    report = evaluate(model, part, bins, label=args.part, true_times=true_times)
    out = Path(args.out) if args.out else ckpt / f"metrics_{args.part}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json())
    man = RunManifest("evaluate", {"part": args.part, "checkpoint": str(ckpt)},
                      inputs={str(args.data): sha256_file(args.data),
                              str(ckpt / "params.npy"): sha256_file(ckpt / "params.npy")},
                      outputs=[str(out)])
    man.write(out.with_name(out.stem + ".manifest.json"), started)
    sys.stdout.write(report.to_json())
    return EXIT_OK


# -- sweep --------------------------------------------------------------------

def row_hash(config: TrainConfig, data_hash: str, fractions, split_seed) -> str:
    blob = json.dumps({"config": config.to_dict(), "data": data_hash,
                       "fractions": list(fractions), "split_seed": split_seed}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


CSV_COLUMNS = SWEEP_COLUMNS + ("hash",)


def _fmt_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _read_rows(path: Path) -> dict[str, dict]:
    if not path.exists():
        return {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise DataError(f"{path} is not a sweep table")
        return {r["hash"]: r for r in reader if r.get("hash")}


def _sweep_worker(job):
    config, split = job
    return run_one(config, split)


def cmd_sweep(args) -> int:
    started = time.time()
    if not args.lams:
        raise UsageError("--lams must list at least one value")
    if not args.seeds:
        raise UsageError("--seeds must list at least one value")
    if args.jobs < 1:
        raise UsageError("--jobs must be positive")
    args.lam = args.seed = None
    base = resolve_config(args)
    data, split = _load_split(args)
    data_hash = sha256_file(args.data)
    try:
        configs = sweep_configs(base, args.lams, args.seeds, args.families)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    hashes = [row_hash(c, data_hash, args.fractions, args.split_seed) for c in configs]
    out = Path(args.out) if args.out else output_root() / "sweep.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    done = _read_rows(out)
    todo = [(c, h) for c, h in zip(configs, hashes) if h not in done]
    if not out.exists():
        with open(out, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerow(CSV_COLUMNS)

    def record(row, h):
        row = {**row, "hash": h}
        cells = {k: _fmt_cell(row[k]) for k in CSV_COLUMNS}
        with open(out, "a", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerow([cells[k] for k in CSV_COLUMNS])
        done[h] = cells
        print(f"row family={row['family']} lam={row['lam']:g} seed={row['seed']} "
              f"dcal={cells['dcal']} error={row['error'] or '-'}", flush=True)

    limit = len(todo) if args.max_runs is None else min(args.max_runs, len(todo))
    todo = todo[:limit]
    if args.jobs == 1:
        for c, h in todo:
            record(run_one(c, split), h)
    else:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for (c, h), row in zip(todo, pool.map(_sweep_worker, [(c, split) for c, _ in todo])):
                record(row, h)

    complete = all(h in done for h in hashes)
    if complete:
        # canonical order, independent of interruption history
        with open(out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            for h in hashes:
                w.writerow([done[h][k] for k in CSV_COLUMNS])
    man = RunManifest("sweep", {"base": base.to_dict(), "lams": args.lams, "seeds": args.seeds,
                                "families": args.families or [base.family]},
                      inputs={str(args.data): data_hash},
                      seeds={"seeds": args.seeds, "split_seed": args.split_seed},
                      outputs=[str(out)])
    man.write(out.with_name(out.stem + ".manifest.json"), started)
    print(f"table={out}")
    print(f"rows={sum(h in done for h in hashes)}/{len(hashes)}")
    return EXIT_OK


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xcalsurv", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset with oracle sidecar")
    p.add_argument("generator", choices=("gamma", "risk-groups"))
    p.add_argument("--n", type=int, default=20000)
    p.add_argument("--d", type=int, default=32, help="covariate dimension (gamma only)")
    p.add_argument("--censoring", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train one model and write a checkpoint")
    add_train_flags(p)
    p.add_argument("--out", help="checkpoint directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on one part of a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--part", choices=("train", "validation", "test", "all"), default="test")
    p.add_argument("--split", help="split manifest (default: the checkpoint's split.json)")
    p.add_argument("--oracle", help="oracle sidecar (default: <data>.oracle.csv if present)")
    p.add_argument("--out", help="metrics JSON path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="lambda x seed x family grid into one CSV")
    add_train_flags(p, with_lam=False)
    p.add_argument("--lams", type=_float_list, required=True)
    p.add_argument("--seeds", type=_int_list, default=[0])
    p.add_argument("--families", type=lambda s: [f for f in s.split(",") if f])
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--max-runs", type=int, help="stop after this many new rows")
    p.add_argument("--out", help="CSV path")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
