"""``adapt`` command line: synth | ingest | train | eval | flops.

Every command resolves its settings as defaults <- ``--config`` file (flat
YAML mapping) <- explicit flags, and writes the resolved mapping next to its
outputs as ``run_config.yaml`` so a run can be repeated with
``--config run_config.yaml``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import yaml

from . import flops as flops_mod
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .dropping import drop_targets
from .model import SAMPLERS, ModelConfig
from .pointcloud import (
    SHAPE_CLASSES,
    AugmentConfig,
    ConfigError,
    IngestionError,
    SynthConfig,
    ingest_tree,
    load_dataset,
    save_dataset,
    synth_dataset,
)
from .training import NumericalError, TrainConfig, evaluate, fit, init_state, metrics_header, metrics_row

log = logging.getLogger("adapt")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class DataError(RuntimeError):
    pass


SYNTH_DEFAULTS = {"classes": list(SHAPE_CLASSES), "points_per_cloud": 256, "clutter_ratio": 0.3, "noise": 0.01,
                  "count_per_class": 100, "eval_fraction": 0.2, "seed": 0, "out": "data/synth"}
INGEST_DEFAULTS = {"points": 2048, "seed": 0, "out": "data/modelnet"}
TRAIN_DEFAULTS = {"data": "data/synth", "out": "runs/train", "preset": "desk", "seed": 0, "epochs": 60,
                  "batch_size": 64, "lr": 1e-3, "alpha": 2.0, "rho": 0.8, "ell": 4, "budgets": 4,
                  "augment": True, "eval_every": 0, "checkpoint_every": 10, "resume": None}
EVAL_DEFAULTS = {"split": "eval", "budget": "all", "sampler": "adaptive", "seed": 0, "batch_size": 64,
                 "out": None}
FLOPS_DEFAULTS = {"preset": "paper", "sizes": [256, 512, 1024, 2048, 3072, 4096], "rho": 0.8, "ell": 4,
                  "budgets": 4, "out": None}

MODEL_KEYS = {f.name for f in fields(ModelConfig)}
AUG_KEYS = {f.name for f in fields(AugmentConfig)}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _resolve(defaults: dict, args: argparse.Namespace, extra_keys: set[str] = frozenset()) -> dict:
    cfg = dict(defaults)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        loaded = yaml.safe_load(path.read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a flat mapping")
        unknown = set(loaded) - set(defaults) - extra_keys
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg.update(loaded)
    for key, val in vars(args).items():
        if key in ("config", "command", "func", "verbose") or val is None:
            continue
        cfg[key] = val
    return cfg


def _write_run_config(out: Path, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True))


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = _resolve(SYNTH_DEFAULTS, args)
    if isinstance(cfg["classes"], str):
        cfg["classes"] = [c.strip() for c in cfg["classes"].split(",") if c.strip()]
    out = Path(cfg["out"])
    scfg = SynthConfig(**{k: cfg[k] for k in SYNTH_DEFAULTS if k != "out"})
    ds = synth_dataset(scfg)
    try:
        manifest = save_dataset(ds, out)
    except OSError as exc:
        raise DataError(f"cannot write dataset to {out}: {exc}") from exc
    _write_run_config(out, cfg)
    digest = hashlib.sha256(manifest.read_bytes()).hexdigest()
    print(f"wrote {len(ds)} clouds to {out} (manifest sha256 {digest})")
    return EXIT_OK


def cmd_ingest(args) -> int:
    cfg = _resolve(INGEST_DEFAULTS, args, {"source"})
    src = Path(cfg["source"])
    if not src.is_dir():
        raise DataError(f"{src} is not a directory")
    ds, failures = ingest_tree(src, n_points=cfg["points"], seed=cfg["seed"])
    out = Path(cfg["out"])
    save_dataset(ds, out)
    _write_run_config(out, cfg)
    (out / "failures.json").write_text(json.dumps([{"path": p, "reason": r} for p, r in failures], indent=1))
    counts = {s: ds.splits.count(s) for s in ("train", "eval")}
    print(f"ingested {len(ds)} clouds ({counts['train']} train, {counts['eval']} eval); {len(failures)} failures")
    for p, r in failures:
        print(f"  FAILED {p}: {r}", file=sys.stderr)
    return EXIT_OK if len(ds) else EXIT_DATA


def _model_config(cfg: dict, num_classes: int) -> ModelConfig:
    overrides = {k: cfg[k] for k in MODEL_KEYS if k in cfg and k != "num_classes"}
    overrides["num_classes"] = num_classes
    preset = cfg.get("preset", "desk")
    if preset == "desk":
        return ModelConfig.desk(**overrides)
    if preset == "paper":
        return ModelConfig(**overrides)
    raise ConfigError(f"unknown preset {preset!r}; choose desk or paper")


def _train_config(cfg: dict, num_classes: int) -> TrainConfig:
    aug = None
    if cfg.get("augment", True):
        aug = AugmentConfig(**{k: tuple(cfg[k]) if isinstance(cfg[k], list) else cfg[k]
                               for k in AUG_KEYS if k in cfg})
    return TrainConfig(model=_model_config(cfg, num_classes), alpha=cfg["alpha"], batch_size=cfg["batch_size"],
                       base_lr=cfg["lr"], epochs=cfg["epochs"], seed=cfg["seed"], augment=aug,
                       eval_every=cfg["eval_every"])


def _load_data(root) -> "Dataset":  # noqa: F821
    try:
        return load_dataset(Path(root))
    except (FileNotFoundError, IngestionError, ValueError) as exc:
        raise DataError(f"cannot load dataset {root}: {exc}") from exc


def cmd_train(args) -> int:
    cfg = _resolve(TRAIN_DEFAULTS, args, MODEL_KEYS | AUG_KEYS)
    ds = _load_data(cfg["data"])
    out = Path(cfg["out"])
    if cfg.get("resume"):
        state = load_checkpoint(Path(cfg["resume"]))
        state.cfg.epochs = cfg["epochs"]
    else:
        state = init_state(_train_config(cfg, len(ds.class_names)))
    _write_run_config(out, cfg)
    tcfg = state.cfg
    budgets, ell = tcfg.model.budgets, tcfg.model.ell
    metrics_path = out / "metrics.csv"
    telemetry_path = out / "drop_telemetry.jsonl"
    if not cfg.get("resume") or not metrics_path.exists():
        with open(metrics_path, "w", newline="") as fh:
            csv.writer(fh).writerow(metrics_header(budgets, ell))
        telemetry_path.write_text("")

    def on_epoch(st, summary):
        with open(metrics_path, "a", newline="") as fh:
            csv.writer(fh).writerow(metrics_row(summary, budgets, ell))
        with open(telemetry_path, "a") as fh:
            for rec in st.telemetry:
                fh.write(json.dumps(rec) + "\n")
        st.telemetry.clear()
        every = cfg.get("checkpoint_every") or 0
        if every and st.epoch % every == 0:
            save_checkpoint(st, out / "checkpoint.ckpt")

    fit(state, ds.subset("train"), ds.subset("eval"), on_epoch=on_epoch)
    save_checkpoint(state, out / "checkpoint.ckpt")
    final = state.history[-1] if state.history else {}
    print(json.dumps({"epochs": state.epoch, "eval_acc": final.get("eval_acc"), "checkpoint": str(out / "checkpoint.ckpt")}))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve(EVAL_DEFAULTS, args, {"checkpoint", "data"})
    try:
        state = load_checkpoint(Path(cfg["checkpoint"]))
    except (OSError, CheckpointError) as exc:
        raise DataError(str(exc)) from exc
    budgets = state.cfg.model.budgets
    if str(cfg["budget"]) == "all":
        which = list(range(1, budgets + 1))
    else:
        try:
            which = [int(cfg["budget"])]
        except ValueError:
            raise ConfigError(f"budget must be an integer or 'all', got {cfg['budget']!r}") from None
    for b in which:
        state.model.schedule.check_budget(b)
    if cfg["sampler"] not in SAMPLERS:
        raise ConfigError(f"unknown sampler {cfg['sampler']!r}; choose from {', '.join(SAMPLERS)}")
    ds = _load_data(cfg["data"]).subset(cfg["split"])
    from .numerics import RandomSource

    reports = []
    for b in which:
        rep = evaluate(state.model, ds, b, sampler=cfg["sampler"], batch_size=cfg["batch_size"],
                       rng=RandomSource(cfg["seed"], 5000 + b))
        reports.append({"budget": b, "sampler": rep.sampler, "accuracy": rep.accuracy,
                        "kept_counts": rep.kept_counts, "clouds": len(ds)})
    text = json.dumps({"checkpoint": str(cfg["checkpoint"]), "reports": reports}, indent=1)
    if cfg.get("out"):
        out = Path(cfg["out"])
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_flops(args) -> int:
    cfg = _resolve(FLOPS_DEFAULTS, args, MODEL_KEYS)
    sizes = cfg["sizes"] if isinstance(cfg["sizes"], list) else _csv_ints(cfg["sizes"])
    mcfg = _model_config({**cfg, "preset": cfg["preset"]}, cfg.get("num_classes", 40))
    schedule = drop_targets(mcfg.ell, mcfg.rho, mcfg.budgets, mcfg.placement)
    cm = flops_mod.CostModel.from_config(mcfg)
    text = flops_mod.to_csv(flops_mod.sweep(sizes, schedule, cm))
    if cfg.get("out"):
        out = Path(cfg["out"])
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        _write_run_config(out.parent, cfg)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="adapt", description="Adaptive point transformer with inference-time token budgets.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate the synthetic shape dataset")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--classes", help="comma-separated subset of " + ",".join(SHAPE_CLASSES))
    s.add_argument("--count-per-class", dest="count_per_class", type=int)
    s.add_argument("--points", dest="points_per_cloud", type=int)
    s.add_argument("--clutter", dest="clutter_ratio", type=float)
    s.add_argument("--noise", type=float)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", help="sample a <class>/{train,test}/*.off tree")
    s.add_argument("source")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--points", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("train", help="train one model holding every budget bank")
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--out")
    s.add_argument("--preset", choices=["desk", "paper"])
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--alpha", type=float)
    s.add_argument("--rho", type=float)
    s.add_argument("--ell", type=int)
    s.add_argument("--budgets", type=int)
    s.add_argument("--eval-every", dest="eval_every", type=int)
    s.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    s.add_argument("--resume")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint under one or all budgets")
    s.add_argument("--config")
    s.add_argument("--checkpoint")
    s.add_argument("--data")
    s.add_argument("--budget", help="budget index 1..B or 'all'")
    s.add_argument("--sampler", help="adaptive, random or fps")
    s.add_argument("--split")
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("flops", help="analytic FLOPS over a sweep of input sizes and all budgets")
    s.add_argument("--config")
    s.add_argument("--preset", choices=["desk", "paper"])
    s.add_argument("--sizes", type=_csv_ints)
    s.add_argument("--rho", type=float)
    s.add_argument("--ell", type=int)
    s.add_argument("--budgets", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_flops)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
