"""Attended CNN-RNN age regression from facial expression videos, in plain numpy."""

from .attention import MECHANISMS, AttentionMap, Mechanism
from .data import (
    Dataset,
    DatasetError,
    SyntheticSpec,
    VideoSample,
    generate_synthetic,
    holdout_split,
    load_dataset,
    make_folds,
    replica_dataset,
    save_dataset,
)
from .evaluation import (
    EvalReport,
    evaluate,
    export_attention,
    mean_predictor_report,
    run_ablation,
    run_crossval,
    run_mechanism_compare,
    threshold_study,
)
from .network import VARIANTS, ModelConfig, ModelParams, model_forward, predict, scaled_config, toy_config
from .smoothing import smooth_4253h_twice
from .tensor import Tensor, no_grad
from .training import TrainConfig, TrainingDiverged, fit, grid_search

__version__ = "0.1.0"

__all__ = [
    "MECHANISMS", "VARIANTS", "AttentionMap", "Dataset", "DatasetError", "EvalReport", "Mechanism",
    "ModelConfig", "ModelParams", "SyntheticSpec", "Tensor", "TrainConfig", "TrainingDiverged", "VideoSample",
    "evaluate", "export_attention", "fit", "generate_synthetic", "grid_search", "holdout_split", "load_dataset",
    "make_folds", "mean_predictor_report", "model_forward", "no_grad", "predict", "replica_dataset",
    "run_ablation", "run_crossval", "run_mechanism_compare", "save_dataset", "scaled_config",
    "smooth_4253h_twice", "threshold_study", "toy_config",
]
