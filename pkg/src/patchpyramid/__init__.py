"""Patch-pyramid time-series forecaster on a small f64 autodiff core."""

from .attention import (
    AttentionBlockParams,
    MaskKind,
    dm_element_wise_self_attention,
    dm_patch_wise_self_attention,
    patch_wise_cross_attention,
    scaled_dot_product,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    Dataset,
    SplitSpec,
    SynthSpec,
    WindowSample,
    load_csv,
    revin_denormalize,
    revin_normalize,
    sliding_windows,
    synth_generate,
)
from .metrics import MetricsReport, mae, mase, mse, naive2_forecast, owa, smape
from .model import (
    ForwardCapture,
    Model,
    ModelConfig,
    StageFeatures,
    export_attention_scores,
    forecast_loss,
    merge_patches,
    model_gradient_check,
    segment,
    split_patches,
)
from .optim import Adam, AdamState, adam_step, finite_diff_gradient
from .tensor import Tensor, backward, no_grad
from .training import AblationVariant, TrainSpec, evaluate, run_ablation, train

__all__ = [
    "Adam", "AdamState", "AblationVariant", "AttentionBlockParams", "Dataset",
    "ForwardCapture", "MaskKind", "MetricsReport", "Model", "ModelConfig",
    "SplitSpec", "StageFeatures", "SynthSpec", "Tensor", "TrainSpec",
    "WindowSample", "adam_step", "backward", "dm_element_wise_self_attention",
    "dm_patch_wise_self_attention", "evaluate", "export_attention_scores",
    "finite_diff_gradient", "forecast_loss", "load_checkpoint", "load_csv",
    "mae", "mase", "merge_patches", "model_gradient_check", "mse",
    "naive2_forecast", "no_grad", "owa", "patch_wise_cross_attention",
    "revin_denormalize", "revin_normalize", "run_ablation", "save_checkpoint",
    "scaled_dot_product", "segment", "sliding_windows", "smape",
    "split_patches", "synth_generate", "train",
]
