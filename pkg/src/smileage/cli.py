"""Command-line entry point: ``smileage <command> [flags]``.

Every command reads an optional JSON config; flags win over config values.
Errors print ``error: ...`` to stderr and exit with status 2.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .attention import MECHANISMS
from .data import (
    Dataset,
    DatasetError,
    SyntheticSpec,
    generate_synthetic,
    holdout_split,
    load_dataset,
    replica_dataset,
    save_dataset,
)
from .evaluation import (
    EvalReport,
    evaluate,
    export_attention,
    run_ablation,
    run_crossval,
    run_mechanism_compare,
    threshold_study,
)
from .network import VARIANTS, ModelConfig, ModelParams, scaled_config
from .tensor import ShapeError
from .training import TrainConfig, TrainingDiverged, fit, grid_search, model_for

logger = logging.getLogger("smileage")

TOP_LEVEL_KEYS = {
    "model", "train", "spec", "replica", "k", "val_fraction", "grids", "hidden_scale",
    "n_jobs", "checkpoint", "predictions", "videos",
}
DEFAULT_SCALE = 1 / 16


class ConfigError(ValueError):
    pass


def _check_keys(section: str, given: dict, allowed) -> None:
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"config section {section!r}: unknown key(s) {', '.join(unknown)}")


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    _check_keys("<top level>", cfg, TOP_LEVEL_KEYS)
    for section in ("model", "train", "spec", "grids"):
        if section in cfg and not isinstance(cfg[section], dict):
            raise ConfigError(f"config section {section!r} must be an object")
    return cfg


def model_config(cfg: dict, args, dataset: Dataset | None = None) -> ModelConfig:
    section = dict(cfg.get("model", {}))
    _check_keys("model", section, {f.name for f in fields(ModelConfig)} | {"scale"})
    scale = section.pop("scale", DEFAULT_SCALE)
    if args.scale is not None:
        scale = args.scale
    for flag, key in (("variant", "variant"), ("mechanism", "mechanism"), ("attn_layer", "attn_layer")):
        if getattr(args, flag, None) is not None:
            section[key] = getattr(args, flag)
    if "input_size" not in section and dataset is not None and len(dataset):
        section["input_size"] = dataset[0].frames.shape[1]
    section.setdefault("input_size", 16)
    return scaled_config(scale, **section)


def train_config(cfg: dict, args) -> TrainConfig:
    section = dict(cfg.get("train", {}))
    _check_keys("train", section, {f.name for f in fields(TrainConfig)})
    if args.seed is not None:
        section["seed"] = args.seed
    return TrainConfig(**section)


def hidden_scale(cfg: dict, args) -> float:
    if "hidden_scale" in cfg:
        return float(cfg["hidden_scale"])
    if args.scale is not None:
        return args.scale
    return float(cfg.get("model", {}).get("scale", DEFAULT_SCALE))


def resolve_model(cfg: dict, args, dataset: Dataset) -> tuple[ModelConfig, TrainConfig]:
    """An explicit ``train.hidden_units`` sizes the recurrent layers (times ``hidden_scale``)."""
    mc, tc = model_config(cfg, args, dataset), train_config(cfg, args)
    if "hidden_units" in cfg.get("train", {}):
        mc = model_for(tc, mc, hidden_scale(cfg, args))
    return mc, tc


def _require(value, flag: str):
    if value is None:
        raise ConfigError(f"{flag} is required for this command")
    return value


def _dataset(args) -> Dataset:
    return load_dataset(_require(args.dataset, "--dataset"))


def _out(args) -> Path:
    out = Path(_require(args.out, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, payload) -> Path:
    path.write_text(json.dumps(payload, indent=1, default=_json_default) + "\n")
    return path


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _write_rows(path: Path, rows: list[dict]) -> Path:
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    return path


def _split(cfg: dict, data: Dataset, seed: int) -> tuple[Dataset, Dataset]:
    return holdout_split(data, float(cfg.get("val_fraction", 0.2)), seed)


# commands ---------------------------------------------------------------------------


def cmd_gen(args, cfg) -> dict:
    out = Path(_require(args.out, "--out"))
    seed = 0 if args.seed is None else args.seed
    if cfg.get("replica"):
        data = replica_dataset(seed)
    else:
        section = dict(cfg.get("spec", {}))
        _check_keys("spec", section, {f.name for f in fields(SyntheticSpec)})
        if args.seed is not None:
            section["seed"] = args.seed
        data = generate_synthetic(SyntheticSpec.from_dict(section))
    save_dataset(data, out)
    return {"dataset": str(out), "videos": len(data), "subjects": len(data.subjects)}


def cmd_train(args, cfg) -> dict:
    data = _dataset(args)
    mc, tc = resolve_model(cfg, args, data)
    out = _out(args)
    train, val = _split(cfg, data, tc.seed)
    result = fit(ModelParams.init(mc, tc.seed), train, val if len(val) else None, tc,
                 history_path=out / "history.csv", dump_dir=out / "dumps")
    result.params.save(out / "model.ckpt")
    _write_json(out / "config.json", {"model": mc.to_dict(), "train": tc.to_dict()})
    summary = {"checkpoint": str(out / "model.ckpt"), "best_epoch": result.best_epoch,
               "epochs_run": len(result.history), "parameters": result.params.count()}
    if len(val):
        report = evaluate(result.params, val)
        report.write(out, "val_report")
        summary["val_mae"] = report.mae
    return summary


def cmd_gridsearch(args, cfg) -> dict:
    data = _dataset(args)
    mc, tc = resolve_model(cfg, args, data)
    out = _out(args)
    train, val = _split(cfg, data, tc.seed)
    grids = cfg.get("grids")
    if grids is not None:
        _check_keys("grids", grids, {f.name for f in fields(TrainConfig)})
    result = grid_search(train, val if len(val) else None, mc, tc, grids, hidden_scale(cfg, args),
                         int(cfg.get("n_jobs", 1)), tc.seed)
    keys = list(grids) if grids is not None else ["hidden_units", "dropout_conv", "dropout_rnn", "l2_lambda"]
    _write_rows(out / "gridsearch.csv",
                [{**{k: getattr(r["config"], k) for k in keys}, "val_mae": r["val_mae"]} for r in result.rows])
    best = result.best.to_dict()
    _write_json(out / "best.json", best)
    return {"candidates": len(result.rows), "best": {k: best[k] for k in keys},
            "best_val_mae": min(r["val_mae"] for r in result.rows)}


def cmd_crossval(args, cfg) -> dict:
    data = _dataset(args)
    mc, tc = resolve_model(cfg, args, data)
    out = _out(args)
    cv = run_crossval(data, mc, tc, int(cfg.get("k", 10)), 0 if args.seed is None else args.seed)
    summary = cv.summary()
    _write_json(out / "crossval.json", summary)
    if cv.pooled is not None:
        cv.pooled.write(out, "pooled")
    cv.baseline.write(out, "baseline")
    return {k: summary[k] for k in ("pooled_mae", "pooled_error_std", "baseline_mae")}


def _read_predictions(path: str) -> EvalReport:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except FileNotFoundError:
        raise ConfigError(f"predictions file {path} not found") from None
    if not rows or not {"age", "prediction"} <= set(rows[0]):
        raise ConfigError(f"{path}: need a header with 'age' and 'prediction' columns")
    try:
        ages = [float(r["age"]) for r in rows]
        preds = [float(r["prediction"]) for r in rows]
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    subjects = [r.get("subject_id") for r in rows]
    videos = [r["video_id"] for r in rows] if "video_id" in rows[0] else None
    return EvalReport.from_predictions(ages, preds, subjects, videos)


def cmd_eval(args, cfg) -> dict:
    predictions = args.predictions or cfg.get("predictions")
    if predictions is not None:
        report = _read_predictions(predictions)
        dataset_ages = report.ages
    else:
        checkpoint = _require(args.checkpoint or cfg.get("checkpoint"), "--checkpoint or --predictions")
        data = _dataset(args)
        report = evaluate(ModelParams.load(checkpoint), data)
        dataset_ages = data.ages
    out = _out(args)
    report.write(out, "report")
    study = threshold_study(dataset_ages, report.ages, report.predictions)
    _write_rows(out / "threshold.csv", [vars(r) for r in study])
    return {"mae": report.mae, "error_std": report.error_std, "samples": len(report.records)}


def cmd_ablate(args, cfg) -> dict:
    data = _dataset(args)
    mc, tc = resolve_model(cfg, args, data)
    out = _out(args)
    rows = run_ablation(data, mc, tc, int(cfg.get("k", 10)), 0 if args.seed is None else args.seed)
    _write_rows(out / "ablation.csv", rows)
    return {"rows": [{"variant": r["variant"], "mae": r["mae"]} for r in rows]}


def cmd_attn_export(args, cfg) -> dict:
    checkpoint = _require(args.checkpoint or cfg.get("checkpoint"), "--checkpoint")
    data = _dataset(args)
    params = ModelParams.load(checkpoint)
    if not params.config.has_spatial and not params.config.has_temporal:
        raise ConfigError(f"checkpoint variant {params.config.variant!r} has no attention to export")
    out = _out(args)
    chosen = args.videos if args.videos is not None else cfg.get("videos", [0])
    written = []
    for i in chosen:
        if not 0 <= int(i) < len(data):
            raise ConfigError(f"video index {i} out of range (dataset has {len(data)} videos)")
        written += export_attention(params, data[int(i)], out, stem=f"video{int(i):05d}")
    return {"files": [str(p) for p in written]}


def cmd_mechanism_compare(args, cfg) -> dict:
    data = _dataset(args)
    mc, tc = resolve_model(cfg, args, data)
    out = _out(args)
    train, val = _split(cfg, data, tc.seed)
    mechanisms = [args.mechanism] if args.mechanism else MECHANISMS
    layers = [args.attn_layer] if args.attn_layer else (1, 2, 3)
    rows = run_mechanism_compare(train, val, mc, tc, out / "maps", mechanisms, layers, tc.seed)
    _write_rows(out / "mechanism_compare.csv", rows)
    return {"rows": [{k: r[k] for k in ("mechanism", "attn_layer", "val_mae", "equivariant")} for r in rows]}


COMMANDS = {
    "gen": (cmd_gen, "generate a synthetic (or replica-layout) dataset directory"),
    "train": (cmd_train, "train one model; writes model.ckpt and history.csv"),
    "gridsearch": (cmd_gridsearch, "exhaustive hyperparameter search on a subject holdout"),
    "crossval": (cmd_crossval, "subject-disjoint k-fold evaluation against the mean predictor"),
    "eval": (cmd_eval, "score a checkpoint on a dataset, or a predictions CSV"),
    "ablate": (cmd_ablate, "cross-validate the four architecture variants"),
    "attn-export": (cmd_attn_export, "write spatial PGM and temporal CSV attention maps"),
    "mechanism-compare": (cmd_mechanism_compare, "train every gate mechanism at every insertion point"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smileage", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--dataset", help="dataset directory")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="master seed (non-negative)")
        p.add_argument("--scale", type=float, help="width multiplier applied to the full-size network")
        p.add_argument("--variant", choices=VARIANTS)
        p.add_argument("--mechanism", choices=MECHANISMS)
        p.add_argument("--attn-layer", type=int, choices=(1, 2, 3))
        if name in ("eval", "attn-export"):
            p.add_argument("--checkpoint", help="model checkpoint file")
        if name == "eval":
            p.add_argument("--predictions", help="CSV with age,prediction columns")
        if name == "attn-export":
            p.add_argument("--videos", type=int, nargs="+", help="dataset indices to export")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(message)s")
    if args.seed is not None and args.seed < 0:
        parser.error("--seed must be non-negative")
    if args.scale is not None and not args.scale > 0:
        parser.error("--scale must be positive")
    handler = COMMANDS[args.command][0]
    try:
        summary = handler(args, load_config(args.config))
    except (ConfigError, DatasetError, ShapeError, TrainingDiverged, ValueError, TypeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(summary, default=_json_default))
    return 0


if __name__ == "__main__":
    sys.exit(main())
