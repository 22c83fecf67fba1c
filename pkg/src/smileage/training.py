"""End-to-end MAE training with RMSprop, gradient clipping, L2 and dropout."""

from __future__ import annotations

import csv
import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import Dataset, VideoSample
from .functional import mae_loss
from .network import ModelConfig, ModelParams, model_forward, predict

logger = logging.getLogger(__name__)

DEFAULT_GRIDS: dict[str, tuple] = {
    "hidden_units": (128, 256, 512),
    "dropout_conv": (0.0, 0.1, 0.2, 0.4),
    "dropout_rnn": (0.0, 0.1, 0.2, 0.4),
    "l2_lambda": (0.0, 1e-4, 3e-4, 5e-4, 1e-3, 3e-3, 5e-3),
}

WEIGHT_SUFFIXES = ("weight", "fusion", "W", "V", "k")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; ``dump`` names the offending batch."""

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    rmsprop_decay: float = 0.9
    rmsprop_epsilon: float = 1e-8
    clip_min: float = -5.0
    clip_max: float = 5.0
    l2_lambda: float = 0.0
    dropout_conv: float = 0.0
    dropout_rnn: float = 0.0
    hidden_units: int = 128
    epochs: int = 100
    seed: int = 0
    batch_size: int = 1
    patience: int | None = 20
    init_bias: str | None = "median"  # start the regressor bias at the train-label median

    def __post_init__(self):
        if not self.clip_min < self.clip_max:
            raise ValueError("clip_min must be below clip_max")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.init_bias not in (None, "median", "mean"):
            raise ValueError(f"init_bias must be None, 'median' or 'mean', got {self.init_bias!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class OptimizerState:
    square_avg: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def is_weight(name: str) -> bool:
    """Parameters subject to L2: weight matrices/vectors, not biases or scalar offsets."""
    return name.rsplit(".", 1)[-1] in WEIGHT_SUFFIXES


def clip_gradients(grads, lo: float = -5.0, hi: float = 5.0):
    """Elementwise clamp of every gradient entry to ``[lo, hi]``."""
    if isinstance(grads, dict):
        return {k: np.clip(g, lo, hi) for k, g in grads.items()}
    return np.clip(grads, lo, hi)


def rmsprop_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    config: TrainConfig,
) -> None:
    """In-place RMSprop update of ``params`` (name -> array).

    Raw gradients are clipped first, then the L2 term is added for weight
    parameters before the squared-gradient average is updated.
    """
    rho, eps, lr = config.rmsprop_decay, config.rmsprop_epsilon, config.learning_rate
    for name, g in grads.items():
        theta = params[name]
        g = np.clip(g, config.clip_min, config.clip_max)
        if config.l2_lambda and is_weight(name):
            g = g + config.l2_lambda * theta
        acc = state.square_avg.get(name)
        acc = (1.0 - rho) * g * g if acc is None else rho * acc + (1.0 - rho) * g * g
        state.square_avg[name] = acc
        theta -= lr * g / np.sqrt(acc + eps)
    state.step += 1


@dataclass
class FitResult:
    params: ModelParams
    history: list[dict]
    best_epoch: int
    final_params: ModelParams | None = None

    def write_history(self, path: str | Path) -> Path:
        return write_history(self.history, path)


def write_history(history: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_mae", "val_mae", "grad_norm"])
        for row in history:
            w.writerow([row["epoch"], repr(row["train_mae"]), repr(row["val_mae"]), repr(row["grad_norm"])])
    return path


def make_batches(videos: Sequence[VideoSample], batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Shuffled index batches; with ``batch_size > 1`` every batch shares one video length."""
    order = rng.permutation(len(videos))
    if batch_size == 1:
        return [[int(i)] for i in order]
    buckets: dict[int, list[int]] = {}
    for i in order:
        buckets.setdefault(videos[i].length, []).append(int(i))
    batches = [b[j : j + batch_size] for b in buckets.values() for j in range(0, len(b), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def evaluate_mae(params: ModelParams, dataset: Dataset | Sequence[VideoSample]) -> float:
    videos = list(dataset)
    if not videos:
        return float("nan")
    pred = predict(videos, params)
    return float(np.mean(np.abs(pred - np.array([v.age for v in videos]))))


def train_step(
    params: ModelParams,
    videos: Sequence[VideoSample],
    state: OptimizerState,
    config: TrainConfig,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """Forward, backward, clip and update on one same-length batch. Returns (loss, raw grad norm)."""
    frames = np.stack([v.frames for v in videos])
    ages = np.array([v.age for v in videos])
    result = model_forward(frames, params, training=True, rng=rng,
                           dropout_conv=config.dropout_conv, dropout_rnn=config.dropout_rnn)
    loss = mae_loss(result.age, ages)
    if not np.isfinite(loss.data):
        raise TrainingDiverged(
            f"non-finite loss {loss.item()} on videos {[v.video_id for v in videos]}",
            {"video_ids": [v.video_id for v in videos], "ages": ages, "predictions": result.age.data.copy()},
        )
    params.zero_grad()
    loss.backward()
    grads = {k: t.grad for k, t in params.items() if t.grad is not None}
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    rmsprop_step({k: params[k].data for k in grads}, grads, state, config)
    return loss.item(), norm


def fit(
    params: ModelParams,
    train_set: Dataset | Sequence[VideoSample],
    val_set: Dataset | Sequence[VideoSample] | None,
    config: TrainConfig,
    history_path: str | Path | None = None,
    dump_dir: str | Path | None = None,
    callback: Callable[[dict], None] | None = None,
) -> FitResult:
    """Train a copy of ``params``; return the checkpoint with the best validation MAE.

    Without a validation set the end-of-epoch training MAE (evaluation mode) is
    monitored instead.
    """
    params = params.copy()
    train = list(train_set)
    val = list(val_set) if val_set is not None else []
    if not train:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed)
    if config.init_bias:
        ages = np.array([v.age for v in train])
        params["regressor.b"].data = np.array(np.median(ages) if config.init_bias == "median" else ages.mean())
    state = OptimizerState()
    history: list[dict] = []
    best_score, best_epoch, best_state = math.inf, 0, params.state()
    stale = 0
    for epoch in range(1, config.epochs + 1):
        losses, norms = [], []
        for batch in make_batches(train, config.batch_size, rng):
            videos = [train[i] for i in batch]
            try:
                loss, norm = train_step(params, videos, state, config, rng)
            except TrainingDiverged as exc:
                exc.dump["epoch"] = epoch
                if dump_dir is not None:
                    _dump_batch(dump_dir, videos, params, exc.dump)
                raise
            losses.append(loss * len(batch))
            norms.append(norm)
        train_mae = float(np.sum(losses) / len(train))
        val_mae = evaluate_mae(params, val) if val else float("nan")
        row = {"epoch": epoch, "train_mae": train_mae, "val_mae": val_mae, "grad_norm": float(np.mean(norms))}
        history.append(row)
        if callback is not None:
            callback(row)
        logger.debug("epoch %d train %.4f val %.4f", epoch, train_mae, val_mae)
        # the checkpoint is scored after the epoch's updates, so it matches the stored weights
        score = val_mae if val else evaluate_mae(params, train)
        row["monitor_mae"] = score
        if score < best_score:
            best_score, best_epoch, best_state, stale = score, epoch, params.state(), 0
        else:
            stale += 1
            if config.patience is not None and stale >= config.patience:
                break
    final = params.copy()
    params.load_state(best_state)
    if history_path is not None:
        write_history(history, history_path)
    return FitResult(params, history, best_epoch, final)


def _dump_batch(dump_dir, videos, params: ModelParams, info: dict) -> Path:
    path = Path(dump_dir)
    path.mkdir(parents=True, exist_ok=True)
    out = path / f"diverged_epoch{info.get('epoch', 0)}.npz"
    np.savez(out, frames=np.stack([v.frames for v in videos]), **{k: np.asarray(v) for k, v in info.items()},
             **{f"param/{k}": v for k, v in params.state().items()})
    return out


# grid search ----------------------------------------------------------------------


def grid_candidates(base: TrainConfig, grids: dict[str, Iterable] | None = None) -> list[TrainConfig]:
    grids = dict(DEFAULT_GRIDS if grids is None else grids)
    if not grids or any(len(list(v)) == 0 for v in grids.values()):
        raise ValueError("every grid axis needs at least one value")
    keys = list(grids)
    return [replace(base, **dict(zip(keys, combo))) for combo in itertools.product(*(list(grids[k]) for k in keys))]


def model_for(train_config: TrainConfig, model_config: ModelConfig, hidden_scale: float = 1.0) -> ModelConfig:
    hidden = max(1, int(round(train_config.hidden_units * hidden_scale)))
    return replace(model_config, hidden=hidden)


def _run_candidate(args) -> dict:
    cfg, model_config, hidden_scale, train, val, init_seed = args
    params = ModelParams.init(model_for(cfg, model_config, hidden_scale), init_seed)
    try:
        result = fit(params, train, val, cfg)
        score = min(r["val_mae"] for r in result.history) if val else min(r["train_mae"] for r in result.history)
    except TrainingDiverged as exc:
        logger.warning("candidate %s diverged: %s", cfg, exc)
        score = math.inf
    return {"config": cfg, "val_mae": float(score)}


@dataclass
class GridSearchResult:
    best: TrainConfig
    rows: list[dict]


def grid_search(
    train_set,
    val_set,
    model_config: ModelConfig,
    base: TrainConfig | None = None,
    grids: dict[str, Iterable] | None = None,
    hidden_scale: float = 1.0,
    n_jobs: int = 1,
    init_seed: int = 0,
) -> GridSearchResult:
    """Exhaustive search; lowest validation MAE wins, ties go to fewer hidden units, then smaller L2."""
    candidates = grid_candidates(base or TrainConfig(), grids)
    train, val = list(train_set), list(val_set) if val_set is not None else []
    jobs = [(c, model_config, hidden_scale, train, val, init_seed) for c in candidates]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            rows = list(pool.map(_run_candidate, jobs))
    else:
        rows = [_run_candidate(j) for j in jobs]
    return GridSearchResult(select_best(rows), rows)


def select_best(rows: Sequence[dict]) -> TrainConfig:
    """Lowest validation MAE; ties go to fewer hidden units, then smaller L2."""
    best = min(rows, key=lambda r: (r["val_mae"], r["config"].hidden_units, r["config"].l2_lambda))
    return best["config"]
