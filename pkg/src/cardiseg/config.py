"""Experiment configuration: a versioned JSON document with four
sections (dataset, model, train, experiment).

Every field has a default; the defaults reproduce the reference
training protocol (batch 32, Adam at 1e-3 halved after 5 stale epochs
down to 1e-8, early stop after 10, soft dice loss with background
excluded, 224x224 inputs, 0.3-0.5 dropout, 0.999-quantile clipping,
grid distortion at 80% with 10 steps).  Unknown fields are rejected
with their JSON path so typos cannot silently change an experiment.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import PhantomSpec
from .errors import ConfigError
from .losses import LossSpec
from .preprocess import PipelineConfig
from .training import TrainConfig
from .unet import ModelConfig

__all__ = ["ExperimentConfig", "DatasetConfig", "ExperimentSection", "load_config", "parse_config"]

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"  # "synthetic" | "manifest"
    manifest: str | None = None
    distribution: str = "A"
    n_patients: int = 16
    phases: tuple[str, ...] = ("ED", "ES")
    slices_per_volume: int = 4
    size_range: tuple[int, int] = (56, 96)
    seed: int = 0

    def phantom_spec(self) -> PhantomSpec:
        return PhantomSpec(
            distribution=self.distribution,
            n_patients=self.n_patients,
            phases=self.phases,
            slices_per_volume=self.slices_per_volume,
            size_range=self.size_range,
        )


@dataclass(frozen=True)
class ExperimentSection:
    k: int = 4
    split: str = "auto"  # auto | stratified | random
    val_fraction: float = 0.25
    methods: tuple[int, ...] = (1, 2, 3)
    n_schedule: tuple[int, ...] = (5, 21, 37, 53, 69, 85, 101, 117, 133, 150)
    baseline_checkpoint: str | None = None
    unseen: DatasetConfig | None = None
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)


@dataclass(frozen=True)
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(
                f"unsupported schema_version {self.schema_version}", path="schema_version"
            )
        try:
            self.model.validate()
        except ConfigError as exc:
            raise ConfigError(str(exc), path="model") from exc
        try:
            self.train.validate()
        except ConfigError as exc:
            raise ConfigError(str(exc), path="train") from exc
        try:
            self.experiment.pipeline.validate()
        except ConfigError as exc:
            raise ConfigError(str(exc), path="experiment.pipeline") from exc
        if self.dataset.kind not in ("synthetic", "manifest"):
            raise ConfigError(f"unknown dataset kind {self.dataset.kind!r}", path="dataset.kind")
        if self.dataset.kind == "manifest" and not self.dataset.manifest:
            raise ConfigError("manifest path required", path="dataset.manifest")
        if self.experiment.split not in ("auto", "stratified", "random"):
            raise ConfigError(
                f"unknown split {self.experiment.split!r}", path="experiment.split"
            )
        if not 0.0 < self.experiment.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in (0, 1)", path="experiment.val_fraction")


# field name -> (coercion, nested spec) tables drive both parsing and
# unknown-field rejection.
def _tuple_of(kind):
    def coerce(value, path):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected a list, got {type(value).__name__}", path=path)
        try:
            return tuple(kind(v) for v in value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad element: {exc}", path=path) from exc

    return coerce


def _scalar(kind):
    def coerce(value, path):
        if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if kind is int and isinstance(value, int) and not isinstance(value, bool):
            return int(value)
        if kind is bool and isinstance(value, bool):
            return value
        if kind is str and isinstance(value, str):
            return value
        raise ConfigError(f"expected {kind.__name__}, got {value!r}", path=path)

    return coerce


def _optional(coerce):
    def wrapped(value, path):
        return None if value is None else coerce(value, path)

    return wrapped


_LOSS_FIELDS = {
    "kind": _scalar(str),
    "class_weights": _optional(_tuple_of(float)),
    "smooth": _scalar(float),
    "ignore_background": _scalar(bool),
}
_DATASET_FIELDS = {
    "kind": _scalar(str),
    "manifest": _optional(_scalar(str)),
    "distribution": _scalar(str),
    "n_patients": _scalar(int),
    "phases": _tuple_of(str),
    "slices_per_volume": _scalar(int),
    "size_range": _tuple_of(int),
    "seed": _scalar(int),
}
_MODEL_FIELDS = {
    "input_size": _tuple_of(int),
    "base_channels": _scalar(int),
    "num_classes": _scalar(int),
    "dropout_schedule": _tuple_of(float),
    "seed": _scalar(int),
    "transpose_kernel": _scalar(int),
    "bn_momentum": _scalar(float),
    "bn_eps": _scalar(float),
    "precision": _scalar(str),
    "head_bias": _scalar(float),
}
_TRAIN_FIELDS = {
    "batch_size": _scalar(int),
    "initial_lr": _scalar(float),
    "lr_factor": _scalar(float),
    "lr_patience": _scalar(int),
    "min_lr": _scalar(float),
    "early_stop_patience": _scalar(int),
    "max_epochs": _scalar(int),
    "seed": _scalar(int),
    "min_delta": _scalar(float),
    "target_dsc": _optional(_scalar(float)),
}
_PIPELINE_FIELDS = {
    "target_size": _tuple_of(int),
    "clip_quantile": _scalar(float),
    "distortion_probability": _scalar(float),
    "distortion_steps": _scalar(int),
    "distortion_limit": _scalar(float),
    "seed": _scalar(int),
    "num_classes": _scalar(int),
}
_EXPERIMENT_FIELDS = {
    "k": _scalar(int),
    "split": _scalar(str),
    "val_fraction": _scalar(float),
    "methods": _tuple_of(int),
    "n_schedule": _tuple_of(int),
    "baseline_checkpoint": _optional(_scalar(str)),
}


def _parse_section(doc: dict, fields: dict, path: str) -> dict:
    if not isinstance(doc, dict):
        raise ConfigError(f"expected an object, got {type(doc).__name__}", path=path)
    out = {}
    for key, value in doc.items():
        if key not in fields:
            raise ConfigError(f"unknown field {key!r}", path=f"{path}.{key}")
        out[key] = fields[key](value, f"{path}.{key}")
    return out


def parse_config(doc: dict) -> ExperimentConfig:
    """Build an ExperimentConfig from a parsed JSON document."""
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object", path="$")
    known = {"schema_version", "dataset", "model", "train", "experiment"}
    for key in doc:
        if key not in known:
            raise ConfigError(f"unknown section {key!r}", path=key)

    dataset = DatasetConfig(**_parse_section(doc.get("dataset", {}), _DATASET_FIELDS, "dataset"))

    model_kw = _parse_section(doc.get("model", {}), _MODEL_FIELDS, "model")
    model = ModelConfig(**model_kw)

    train_doc = dict(doc.get("train", {}))
    loss_doc = train_doc.pop("loss", None)
    train_kw = _parse_section(train_doc, _TRAIN_FIELDS, "train")
    if loss_doc is not None:
        loss_kw = _parse_section(loss_doc, _LOSS_FIELDS, "train.loss")
        train_kw["loss"] = LossSpec(**loss_kw)
    train = TrainConfig(**train_kw)

    exp_doc = dict(doc.get("experiment", {}))
    pipeline_doc = exp_doc.pop("pipeline", None)
    unseen_doc = exp_doc.pop("unseen", None)
    exp_kw = _parse_section(exp_doc, _EXPERIMENT_FIELDS, "experiment")
    if pipeline_doc is not None:
        pipe_kw = _parse_section(pipeline_doc, _PIPELINE_FIELDS, "experiment.pipeline")
        pipe_kw.setdefault("target_size", tuple(model.input_size))
        pipe_kw.setdefault("num_classes", model.num_classes)
        exp_kw["pipeline"] = PipelineConfig(**pipe_kw)
    else:
        exp_kw["pipeline"] = PipelineConfig(
            target_size=tuple(model.input_size), num_classes=model.num_classes
        )
    if unseen_doc is not None:
        exp_kw["unseen"] = DatasetConfig(
            **_parse_section(unseen_doc, _DATASET_FIELDS, "experiment.unseen")
        )
    experiment = ExperimentSection(**exp_kw)

    version = doc.get("schema_version", SCHEMA_VERSION)
    if not isinstance(version, int):
        raise ConfigError("schema_version must be an integer", path="schema_version")
    config = ExperimentConfig(
        schema_version=version, dataset=dataset, model=model, train=train, experiment=experiment
    )
    config.validate()
    return config


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}", path=str(path))
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}", path=str(path)) from exc
    return parse_config(doc)
