"""Training engine: batching, Adam, plateau LR schedule, early stopping.

One epoch is a single seeded-shuffle pass over every training slice.
After each epoch the validation loss drives both the
reduce-on-plateau learning-rate schedule (halve after more than
``lr_patience`` epochs without improvement, floor at ``min_lr``) and
early stopping (more than ``early_stop_patience`` epochs without
improvement).  The best-validation-loss parameters are checkpointed.

Given identical (seed, config, data), a single-worker run reproduces
its entire history bit for bit.
"""

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .checkpoint import save_checkpoint
from .data import DatasetIndex
from .errors import ConfigError, TrainingAbort
from .evaluation import evaluate_model, worker_count
from .losses import LossSpec, compute_loss
from .preprocess import PipelineConfig, apply_pipeline
from .rng import derive_seed, pcg
from .unet import UNet

__all__ = [
    "TrainConfig",
    "TrainState",
    "EpochStats",
    "FitResult",
    "adam_step",
    "lr_schedule_update",
    "early_stop_check",
    "fit",
    "write_history_csv",
]

HISTORY_COLUMNS = (
    "epoch",
    "train_loss",
    "val_loss",
    "lr",
    "dsc_rv",
    "dsc_lv",
    "dsc_myo",
    "dsc_labels",
)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    initial_lr: float = 1e-3
    lr_factor: float = 0.5
    lr_patience: int = 5
    min_lr: float = 1e-8
    early_stop_patience: int = 10
    loss: LossSpec = field(default_factory=LossSpec)
    max_epochs: int = 200
    seed: int = 0
    min_delta: float = 1e-4
    target_dsc: float | None = None  # optional desk-scale early exit

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not 0.0 < self.lr_factor < 1.0:
            raise ConfigError("lr_factor must be in (0, 1)")
        if self.min_lr <= 0:
            raise ConfigError("min_lr must be positive")
        if self.lr_patience < 1 or self.early_stop_patience < 1:
            raise ConfigError("patiences must be >= 1")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be >= 0")
        if self.initial_lr <= 0:
            raise ConfigError("initial_lr must be positive")
        self.loss.validate()


@dataclass
class TrainState:
    current_lr: float
    epoch: int = 0
    step: int = 0
    best_loss: float = float("inf")
    epochs_since_improvement: int = 0
    plateau_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    dsc_rv: float
    dsc_lv: float
    dsc_myo: float
    dsc_labels: float

    def row(self) -> list:
        return [getattr(self, c) for c in HISTORY_COLUMNS]


@dataclass
class FitResult:
    history: list[EpochStats]
    state: TrainState
    best_state: dict[str, np.ndarray] | None
    best_val_loss: float
    best_epoch: int
    stopped_early: bool


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: TrainState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update, in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise TrainingAbort(f"non-finite gradient in {name!r} at step {t}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)


def lr_schedule_update(state: TrainState, epoch_loss: float, config: TrainConfig) -> TrainState:
    """Reduce-on-plateau: track the best monitored loss, halve the rate
    after more than ``lr_patience`` epochs without a min_delta improvement."""
    if epoch_loss < state.best_loss - config.min_delta:
        state.best_loss = epoch_loss
        state.epochs_since_improvement = 0
        state.plateau_count = 0
    else:
        state.epochs_since_improvement += 1
        state.plateau_count += 1
        if state.plateau_count > config.lr_patience:
            state.current_lr = max(state.current_lr * config.lr_factor, config.min_lr)
            state.plateau_count = 0
    return state


def early_stop_check(state: TrainState, config: TrainConfig) -> bool:
    """True when training should stop."""
    return state.epochs_since_improvement > config.early_stop_patience


def _preprocess_batch(items, pipeline, config, epoch):
    def one(item):
        sample, z = item
        seed = derive_seed(config.seed, "aug", sample.patient_id, sample.phase, z, epoch)
        clip = sample.clip_threshold(pipeline.clip_quantile)
        return apply_pipeline(sample.image[z], sample.mask[z], pipeline, seed=seed, clip_value=clip)

    workers = worker_count()
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pairs = list(pool.map(one, items))
    else:
        pairs = [one(item) for item in items]
    x = np.stack([p[0] for p in pairs])[:, None]
    g = np.stack([p[1] for p in pairs])
    return x, g


def fit(
    model: UNet,
    train_index: DatasetIndex,
    val_index: DatasetIndex,
    config: TrainConfig,
    pipeline: PipelineConfig | None = None,
    out_dir: str | Path | None = None,
) -> FitResult:
    """Train ``model``; returns history plus the best checkpointed state."""
    config.validate()
    overlap = set(train_index.patients()) & set(val_index.patients())
    if overlap:
        raise ConfigError(f"train/val patients overlap: {sorted(overlap)[:3]}...")
    if not train_index.samples:
        raise ConfigError("training set is empty")
    if not val_index.samples and config.max_epochs > 0:
        raise ConfigError("validation set is empty")

    if pipeline is None:
        pipeline = PipelineConfig(
            target_size=model.config.input_size,
            train_mode=True,
            seed=config.seed,
            num_classes=model.config.num_classes,
        )
    infer_pipeline = replace(pipeline, train_mode=False)

    slices = [(s, z) for s in train_index.samples for z in range(s.n_slices)]
    state = TrainState(current_lr=config.initial_lr)
    history: list[EpochStats] = []
    best_state: dict[str, np.ndarray] | None = None
    best_val = float("inf")
    best_epoch = -1
    stopped_early = False
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    def checkpoint(target, arrays):
        if out_dir is not None:
            save_checkpoint(
                out_dir / target,
                arrays,
                meta={"model_config": model.config.to_dict()},
            )

    for epoch in range(config.max_epochs):
        state.epoch = epoch
        order = pcg(derive_seed(config.seed, "shuffle", epoch)).permutation(len(slices))
        loss_sum = 0.0
        for start in range(0, len(order), config.batch_size):
            batch_items = [slices[i] for i in order[start : start + config.batch_size]]
            x, g = _preprocess_batch(batch_items, pipeline, config, epoch)
            for p in model.params.values():
                p.zero_grad()
            dropout_seed = derive_seed(config.seed, "dropout", epoch, state.step)
            pred = model.forward(Tensor(x, dtype=model.dtype), mode="train", dropout_seed=dropout_seed)
            loss = compute_loss(config.loss, pred, g)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                checkpoint("aborted_checkpoint.bin", model.state_dict())
                raise TrainingAbort(
                    f"non-finite loss {loss_value} at epoch {epoch}, step {state.step}"
                )
            loss.backward()
            grads = {name: p.grad for name, p in model.params.items()}
            try:
                adam_step(model.params, grads, state, state.current_lr)
            except TrainingAbort:
                checkpoint("aborted_checkpoint.bin", model.state_dict())
                raise
            loss_sum += loss_value * x.shape[0]
        train_loss = loss_sum / len(slices)

        val_eval = evaluate_model(
            model, val_index, infer_pipeline, loss_spec=config.loss
        )
        val_loss = val_eval.loss if val_eval.loss is not None else train_loss
        stats = EpochStats(
            epoch=epoch,
            train_loss=train_loss,
            val_loss=val_loss,
            lr=state.current_lr,
            dsc_rv=val_eval.mean["rv"],
            dsc_lv=val_eval.mean["lv"],
            dsc_myo=val_eval.mean["myo"],
            dsc_labels=val_eval.mean["labels"],
        )
        history.append(stats)

        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_state = model.clone_state()
            checkpoint("checkpoint.bin", best_state)

        lr_schedule_update(state, val_loss, config)
        if early_stop_check(state, config):
            stopped_early = True
            break
        if config.target_dsc is not None and stats.dsc_labels >= config.target_dsc:
            break

    if out_dir is not None:
        write_history_csv(history, out_dir / "history.csv")
    return FitResult(
        history=history,
        state=state,
        best_state=best_state,
        best_val_loss=best_val,
        best_epoch=best_epoch,
        stopped_early=stopped_early,
    )


def write_history_csv(history: list[EpochStats], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for stats in history:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in stats.row()])
