"""Multivariate time-series forecasting with unified attention over flattened
patch tokens, plus the training protocol, analysis and memory instruments."""

from .analysis import (
    ConstantSegmentError,
    CorrHeatmap,
    PairFractionReport,
    attn_weight_histogram,
    corr_heatmap,
    cross_corr,
    cross_pair_fraction,
    multiplied_attention,
)
from .benchmark import MemReport, bench_ablation, count_attention_memory, measured_attention_memory
from .data import (
    DataError,
    NormStats,
    TimeSeriesDataset,
    Window,
    Windows,
    denormalize,
    instance_normalize,
    load_csv_dataset,
    make_windows,
    split_dataset,
    standardize_dataset,
)
from .evaluation import EvalReport, evaluate, run_protocol
from .model import (
    AttentionRecord,
    Flatformer,
    ModelConfig,
    load_checkpoint,
    save_checkpoint,
    scaled_dot_attention,
)
from .patching import PatchConfig, embed_patches, flatten_tokens, segment_patches, unflatten_tokens
from .training import GradCheckResult, TrainConfig, TrainHistory, grad_check, mse_loss, train

__version__ = "0.1.0"

__all__ = [
    "AttentionRecord",
    "ConstantSegmentError",
    "CorrHeatmap",
    "DataError",
    "EvalReport",
    "Flatformer",
    "GradCheckResult",
    "MemReport",
    "ModelConfig",
    "NormStats",
    "PairFractionReport",
    "PatchConfig",
    "TimeSeriesDataset",
    "TrainConfig",
    "TrainHistory",
    "Window",
    "Windows",
    "attn_weight_histogram",
    "bench_ablation",
    "corr_heatmap",
    "count_attention_memory",
    "cross_corr",
    "cross_pair_fraction",
    "denormalize",
    "evaluate",
    "flatten_tokens",
    "grad_check",
    "instance_normalize",
    "load_checkpoint",
    "load_csv_dataset",
    "make_windows",
    "measured_attention_memory",
    "mse_loss",
    "multiplied_attention",
    "run_protocol",
    "save_checkpoint",
    "scaled_dot_attention",
    "segment_patches",
    "split_dataset",
    "standardize_dataset",
    "train",
    "unflatten_tokens",
]
