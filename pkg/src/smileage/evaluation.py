"""Error reports, cross-validation driver, sample-threshold study and attention export."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .attention import MECHANISMS, AttentionMap, spatial_attention_forward
from .data import Dataset, FoldPlan, VideoSample, make_folds
from .network import VARIANTS, ModelConfig, ModelParams, attention_input, model_forward, predict
from .tensor import Tensor, no_grad
from .training import TrainConfig, TrainingDiverged, fit

logger = logging.getLogger(__name__)

N_BINS = 8  # 0-9, 10-19, ..., 70-79
CURVE_X = np.arange(26)  # 0..25 years


def age_bin(age) -> np.ndarray:
    """Decade bin index; ages of 80 and above are folded into the last bin."""
    return np.clip(np.floor(np.asarray(age, dtype=np.float64) / 10).astype(int), 0, N_BINS - 1)


def bin_labels() -> list[str]:
    return [f"{10 * b}-{10 * b + 9}" for b in range(N_BINS)]


def cumulative_curve(errors, xs=CURVE_X) -> np.ndarray:
    """Fraction of samples whose absolute error is at most x, for every x in ``xs``."""
    errors = np.sort(np.abs(np.asarray(errors, dtype=np.float64)))
    return np.searchsorted(errors, np.asarray(xs, dtype=np.float64), side="right") / len(errors)


@dataclass
class EvalReport:
    mae: float
    error_std: float  # population std of the absolute errors (the "+-" column)
    bin_mae: list[float]
    bin_counts: list[int]
    curve_x: list[float]
    curve: list[float]
    records: list[dict] = field(repr=False)

    @classmethod
    def from_predictions(cls, ages, predictions, subjects=None, video_ids=None) -> "EvalReport":
        ages = np.asarray(ages, dtype=np.float64)
        predictions = np.asarray(predictions, dtype=np.float64)
        if ages.size == 0 or ages.shape != predictions.shape:
            raise ValueError("need equal-length, nonempty ages and predictions")
        errors = np.abs(predictions - ages)
        bins = age_bin(ages)
        counts = np.bincount(bins, minlength=N_BINS)
        bin_mae = [float(errors[bins == b].mean()) if counts[b] else float("nan") for b in range(N_BINS)]
        subjects = [None] * len(ages) if subjects is None else list(subjects)
        video_ids = list(range(len(ages))) if video_ids is None else list(video_ids)
        records = [
            {"subject_id": s, "video_id": v, "age": float(y), "prediction": float(p)}
            for s, v, y, p in zip(subjects, video_ids, ages, predictions)
        ]
        return cls(
            mae=float(errors.mean()),
            error_std=float(errors.std()),
            bin_mae=bin_mae,
            bin_counts=[int(c) for c in counts],
            curve_x=[float(x) for x in CURVE_X],
            curve=[float(c) for c in cumulative_curve(errors)],
            records=records,
        )

    @property
    def ages(self) -> np.ndarray:
        return np.array([r["age"] for r in self.records])

    @property
    def predictions(self) -> np.ndarray:
        return np.array([r["prediction"] for r in self.records])

    @property
    def errors(self) -> np.ndarray:
        return np.abs(self.predictions - self.ages)

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, out_dir: str | Path, stem: str = "report") -> list[Path]:
        """JSON summary plus per-bin, cumulative-curve and per-sample CSVs."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        summary = {k: v for k, v in self.to_dict().items() if k != "records"}
        paths = [out / f"{stem}.json", out / f"{stem}_bins.csv", out / f"{stem}_cumulative.csv", out / f"{stem}_samples.csv"]
        paths[0].write_text(json.dumps(summary, indent=1))
        rows = ["bin,count,mae"] + [f"{lab},{c},{m!r}" for lab, c, m in zip(bin_labels(), self.bin_counts, self.bin_mae)]
        paths[1].write_text("\n".join(rows) + "\n")
        rows = ["max_error,success_rate"] + [f"{x:g},{c!r}" for x, c in zip(self.curve_x, self.curve)]
        paths[2].write_text("\n".join(rows) + "\n")
        rows = ["subject_id,video_id,age,prediction"] + [
            f"{r['subject_id']},{r['video_id']},{r['age']!r},{r['prediction']!r}" for r in self.records
        ]
        paths[3].write_text("\n".join(rows) + "\n")
        return paths


def evaluate(params: ModelParams, test_set: Dataset | Sequence[VideoSample]) -> EvalReport:
    """Deterministic (dropout-free) evaluation of ``params`` on ``test_set``."""
    videos = list(test_set)
    if not videos:
        raise ValueError("empty test set")
    preds = predict(videos, params)
    return EvalReport.from_predictions(
        [v.age for v in videos], preds, [v.subject_id for v in videos], [v.video_id for v in videos]
    )


def mean_predictor_report(train_set, test_set) -> EvalReport:
    """Baseline that predicts the mean training age for every test video."""
    mean_age = float(np.mean([v.age for v in train_set]))
    test = list(test_set)
    return EvalReport.from_predictions(
        [v.age for v in test], np.full(len(test), mean_age), [v.subject_id for v in test], [v.video_id for v in test]
    )


# cross-validation ------------------------------------------------------------------


@dataclass
class FoldOutcome:
    fold: int
    seed: int
    report: EvalReport | None
    baseline: EvalReport
    best_epoch: int | None = None
    error: str | None = None


@dataclass
class CrossValReport:
    folds: list[FoldOutcome]
    pooled: EvalReport | None
    baseline: EvalReport
    plan: FoldPlan

    def summary(self) -> dict:
        return {
            "pooled_mae": None if self.pooled is None else self.pooled.mae,
            "pooled_error_std": None if self.pooled is None else self.pooled.error_std,
            "baseline_mae": self.baseline.mae,
            "folds": [
                {"fold": f.fold, "seed": f.seed, "mae": None if f.report is None else f.report.mae,
                 "baseline_mae": f.baseline.mae, "best_epoch": f.best_epoch, "error": f.error}
                for f in self.folds
            ],
        }


def fold_seeds(master_seed: int, k: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(master_seed).spawn(k)]


def _pool(reports: Sequence[EvalReport]) -> EvalReport:
    records = [r for rep in reports for r in rep.records]
    return EvalReport.from_predictions(
        [r["age"] for r in records], [r["prediction"] for r in records],
        [r["subject_id"] for r in records], [r["video_id"] for r in records],
    )


def run_crossval(
    dataset: Dataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    k: int = 10,
    seed: int = 0,
    use_validation: bool = True,
    folds: Sequence[int] | None = None,
) -> CrossValReport:
    """Subject-disjoint k-fold evaluation with test predictions pooled across folds.

    A fold whose training diverges is reported with its error and excluded from
    the pooled model report; the other folds still run. With ``k < 3`` there is
    no spare fold, so checkpoints are selected on training MAE.
    """
    plan = make_folds(dataset, k, seed)
    seeds = fold_seeds(seed, k)
    if k < 3 and use_validation:
        # two folds leave nothing to train on once one is held out for validation
        logger.info("k=%d: selecting checkpoints on training MAE instead of a validation fold", k)
        use_validation = False
    outcomes = []
    for f in range(k) if folds is None else folds:
        train, val, test = plan.split(dataset, f, use_validation)
        baseline = mean_predictor_report(train, test)
        cfg = replace(train_config, seed=seeds[f])
        try:
            result = fit(ModelParams.init(model_config, seeds[f]), train, val if len(val) else None, cfg)
            outcomes.append(FoldOutcome(f, seeds[f], evaluate(result.params, test), baseline, result.best_epoch))
        except TrainingDiverged as exc:
            logger.error("fold %d diverged: %s", f, exc)
            outcomes.append(FoldOutcome(f, seeds[f], None, baseline, error=str(exc)))
        logger.info("fold %d done", f)
    ok = [o.report for o in outcomes if o.report is not None]
    return CrossValReport(outcomes, _pool(ok) if ok else None, _pool([o.baseline for o in outcomes]), plan)


# threshold study -------------------------------------------------------------------


@dataclass
class ThresholdRow:
    threshold: int
    n_samples: int
    mae: float | None  # None when no age has enough samples
    error_std: float | None


def threshold_study(dataset_ages, ages, predictions, max_threshold: int | None = None) -> list[ThresholdRow]:
    """MAE over samples whose integer age has at least ``m`` samples in the whole dataset."""
    dataset_ages = np.floor(np.asarray(dataset_ages, dtype=np.float64)).astype(int)
    ages = np.asarray(ages, dtype=np.float64)
    errors = np.abs(np.asarray(predictions, dtype=np.float64) - ages)
    values, counts = np.unique(dataset_ages, return_counts=True)
    per_age = dict(zip(values.tolist(), counts.tolist()))
    support = np.array([per_age.get(int(a), 0) for a in np.floor(ages)])
    top = int(counts.max()) if max_threshold is None else max_threshold
    rows = []
    for m in range(1, top + 1):
        keep = support >= m
        if keep.any():
            rows.append(ThresholdRow(m, int(keep.sum()), float(errors[keep].mean()), float(errors[keep].std())))
        else:
            rows.append(ThresholdRow(m, 0, None, None))
    return rows


# attention -------------------------------------------------------------------------


def attention_maps(params: ModelParams, video: VideoSample) -> tuple[list[AttentionMap], AttentionMap | None]:
    with no_grad():
        result = model_forward(video.frames, params)
    return result.spatial_maps(0), result.temporal_map(0)


def export_attention(params: ModelParams, video: VideoSample, out_dir: str | Path,
                     frames: Sequence[int] | None = None, stem: str = "video") -> list[Path]:
    """Spatial PGM per selected frame plus one temporal CSV."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create attention export directory {out}: {exc}") from exc
    spatial, temporal = attention_maps(params, video)
    paths = []
    chosen = range(len(spatial)) if frames is None else frames
    for t in chosen:
        paths.append(spatial[t].to_pgm(out / f"{stem}_spatial_t{t:03d}.pgm"))
    if temporal is not None:
        paths.append(temporal.to_csv(out / f"{stem}_temporal.csv"))
    return paths


def upsample_nearest(grid: np.ndarray, size: int) -> np.ndarray:
    """Blow a coarse attention grid up to ``size x size`` pixels, each cell covering its block."""
    M, N = grid.shape
    rows = np.minimum((np.arange(size) * M) // size, M - 1)
    cols = np.minimum((np.arange(size) * N) // size, N - 1)
    return grid[np.ix_(rows, cols)]


def salience_ratio(grid: np.ndarray, pixel_mask: np.ndarray) -> float:
    """Mean attention over planted pixels divided by mean attention elsewhere."""
    up = upsample_nearest(np.asarray(grid), pixel_mask.shape[0])
    return float(up[pixel_mask].mean() / up[~pixel_mask].mean())


def permutation_equivariant(params: ModelParams, feature_map: np.ndarray, seed: int = 0, atol: float = 1e-12) -> bool:
    """Whether shuffling the cells of ``feature_map [M, N, C]`` shuffles the gate grid the same way."""
    spatial = params.spatial()
    M, N, C = feature_map.shape
    perm = np.random.default_rng(seed).permutation(M * N)
    shuffled = feature_map.reshape(M * N, C)[perm].reshape(M, N, C)
    with no_grad():
        base = spatial_attention_forward(Tensor(feature_map), spatial)[1].data
        moved = spatial_attention_forward(Tensor(shuffled), spatial)[1].data
    return bool(np.allclose(moved, base.reshape(-1)[perm].reshape(M, N), rtol=0, atol=atol))


# experiment ladders ----------------------------------------------------------------


def run_ablation(dataset: Dataset, model_config: ModelConfig, train_config: TrainConfig, k: int = 10,
                 seed: int = 0, variants: Sequence[str] = VARIANTS) -> list[dict]:
    """Cross-validate each architecture variant on the same folds; one row per variant."""
    rows = []
    for variant in variants:
        cv = run_crossval(dataset, replace(model_config, variant=variant), train_config, k, seed)
        rows.append({
            "variant": variant,
            "mae": None if cv.pooled is None else cv.pooled.mae,
            "error_std": None if cv.pooled is None else cv.pooled.error_std,
            "baseline_mae": cv.baseline.mae,
            "failed_folds": sum(f.error is not None for f in cv.folds),
        })
    return rows


def run_mechanism_compare(train_set: Dataset, val_set: Dataset, model_config: ModelConfig,
                          train_config: TrainConfig, out_dir: str | Path | None = None,
                          mechanisms: Sequence[str] = MECHANISMS, layers: Sequence[int] = (1, 2, 3),
                          init_seed: int = 0) -> list[dict]:
    """Train every mechanism at every gate position and score it on ``val_set``.

    Each row also says whether the trained gate commutes with a random shuffle of
    the cells of a held-out feature map, and (with ``out_dir``) where its maps went.
    """
    probe = val_set[0] if len(val_set) else train_set[0]
    rows = []
    for mechanism in mechanisms:
        for layer in layers:
            cfg = replace(model_config, variant="full", mechanism=mechanism, attn_layer=layer)
            row = {"mechanism": mechanism, "attn_layer": layer, "grid": "x".join(map(str, cfg.attention_grid()))}
            try:
                result = fit(ModelParams.init(cfg, init_seed), train_set, val_set if len(val_set) else None,
                             train_config)
            except TrainingDiverged as exc:
                rows.append({**row, "val_mae": None, "equivariant": None, "maps": None, "error": str(exc)})
                continue
            params = result.params
            mae = evaluate(params, val_set).mae if len(val_set) else None
            feature_map = attention_input(probe.frames, params)[probe.apex or 0]
            maps = None
            if out_dir is not None:
                maps = Path(out_dir) / f"{mechanism}_layer{layer}"
                export_attention(params, probe, maps)
            rows.append({**row, "val_mae": mae, "equivariant": permutation_equivariant(params, feature_map),
                         "maps": None if maps is None else str(maps), "error": None})
    return rows
