"""cardiseg: from-scratch 2D U-Net cardiac segmentation toolkit.

Builds, trains and evaluates a modified U-Net with its own reverse-mode
autodiff engine, quantile/min-max/grid-distortion preprocessing,
patient-level cross-validation and finetuning protocols, and a
synthetic two-distribution phantom generator for desk-scale
generalization-gap experiments.
"""

from .autodiff import Tensor, grad_check, no_grad
from .data import (
    DatasetIndex,
    FoldAssignment,
    PhantomSpec,
    VolumeSample,
    load_manifest,
    load_volume,
    one_hot,
    random_kfold,
    stratified_kfold,
    synth_generate,
)
from .errors import CardisegError, ConfigError, ParameterError, ShapeError, ValidationError
from .evaluation import EvalResult, evaluate_model
from .experiments import (
    FinetuneSpec,
    GapReport,
    finetune_sweep,
    gap_report,
    improvement_summary,
    run_crossval,
)
from .losses import LossSpec, bce, compute_loss, dsc_class, dsc_labels, jdl, sdl, wce
from .preprocess import PipelineConfig, apply_pipeline
from .training import TrainConfig, TrainState, adam_step, fit
from .unet import ModelConfig, UNet, build, parameter_count

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "grad_check",
    "no_grad",
    "CardisegError",
    "ConfigError",
    "ParameterError",
    "ShapeError",
    "ValidationError",
    "LossSpec",
    "bce",
    "wce",
    "jdl",
    "sdl",
    "dsc_class",
    "dsc_labels",
    "compute_loss",
    "ModelConfig",
    "UNet",
    "build",
    "parameter_count",
    "PipelineConfig",
    "apply_pipeline",
    "VolumeSample",
    "DatasetIndex",
    "FoldAssignment",
    "PhantomSpec",
    "load_volume",
    "load_manifest",
    "one_hot",
    "stratified_kfold",
    "random_kfold",
    "synth_generate",
    "TrainConfig",
    "TrainState",
    "adam_step",
    "fit",
    "EvalResult",
    "evaluate_model",
    "FinetuneSpec",
    "GapReport",
    "run_crossval",
    "gap_report",
    "finetune_sweep",
    "improvement_summary",
    "__version__",
]
