"""Frozen-model evaluation over datasets.

Dice is aggregated per patient-phase volume: every slice's binarised
prediction contributes to one intersection/total count per label, the
volume gets one dice per label from the pooled counts, and dataset
statistics are the mean and standard deviation over volumes.

``CARDISEG_THREADS`` bounds how many volumes are evaluated in parallel;
results are independent of the worker count.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import Tensor, no_grad
from .data import DatasetIndex, VolumeSample
from .errors import ParameterError
from .losses import LossSpec, binarize_prediction, compute_loss, dice_from_counts
from .preprocess import PipelineConfig, apply_pipeline

__all__ = ["EvalResult", "evaluate_model", "worker_count", "LABEL_COLUMNS"]

LABEL_COLUMNS = ("rv", "lv", "myo")
_LABEL_INDEX = {"rv": 1, "myo": 2, "lv": 3}


def worker_count() -> int:
    """Worker parallelism bound from the CARDISEG_THREADS environment variable."""
    raw = os.environ.get("CARDISEG_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


@dataclass
class EvalResult:
    """Per-volume and aggregate dice for one model on one dataset."""

    per_volume: dict[str, dict[str, float]]
    mean: dict[str, float]
    sd: dict[str, float]
    n_volumes: int
    loss: float | None = None

    def to_dict(self) -> dict:
        out = {
            "n_volumes": self.n_volumes,
            "mean": {k: self.mean[k] for k in sorted(self.mean)},
            "sd": {k: self.sd[k] for k in sorted(self.sd)},
            "per_volume": {
                k: {m: v[m] for m in sorted(v)} for k, v in sorted(self.per_volume.items())
            },
        }
        if self.loss is not None:
            out["loss"] = self.loss
        return out


def _volume_metrics(model, sample: VolumeSample, pipeline: PipelineConfig, loss_spec, batch_size):
    clip = sample.clip_threshold(pipeline.clip_quantile)
    images, masks = [], []
    for z in range(sample.n_slices):
        img, oh = apply_pipeline(sample.image[z], sample.mask[z], pipeline, clip_value=clip)
        images.append(img)
        masks.append(oh)
    inter = np.zeros(4)
    total = np.zeros(4)
    loss_sum = 0.0
    with no_grad():
        for start in range(0, len(images), batch_size):
            x = np.stack(images[start : start + batch_size])[:, None]
            g = np.stack(masks[start : start + batch_size])
            pred = model.forward(Tensor(x, dtype=model.dtype), mode="infer").data
            if loss_spec is not None:
                batch_loss = compute_loss(loss_spec, Tensor(pred), g).item()
                loss_sum += batch_loss * x.shape[0]
            labels = binarize_prediction(pred, axis=1)
            truth_labels = g.argmax(axis=1)
            for c in range(1, 4):
                hard = labels == c
                truth = truth_labels == c
                inter[c] += float((hard & truth).sum())
                total[c] += float(hard.sum() + truth.sum())
    dices = {
        name: dice_from_counts(inter[idx], total[idx], smooth=1.0)
        for name, idx in _LABEL_INDEX.items()
    }
    dices["labels"] = float(np.mean([dices[n] for n in LABEL_COLUMNS]))
    return dices, loss_sum, len(images)


def evaluate_model(
    model,
    dataset: DatasetIndex | list[VolumeSample],
    pipeline: PipelineConfig | None = None,
    loss_spec: LossSpec | None = None,
    batch_size: int = 16,
) -> EvalResult:
    """Evaluate a frozen model; optionally also report the mean loss."""
    samples = dataset.samples if isinstance(dataset, DatasetIndex) else list(dataset)
    if not samples:
        raise ParameterError("cannot evaluate an empty dataset")
    if pipeline is None:
        pipeline = PipelineConfig(
            target_size=model.config.input_size,
            train_mode=False,
            num_classes=model.config.num_classes,
        )
    if pipeline.train_mode:
        pipeline = replace(pipeline, train_mode=False)

    def job(sample):
        return sample.key(), _volume_metrics(model, sample, pipeline, loss_spec, batch_size)

    workers = worker_count()
    if workers > 1 and len(samples) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, samples))
    else:
        results = [job(s) for s in samples]

    per_volume = {key: dices for key, (dices, _, _) in results}
    keys = ("rv", "lv", "myo", "labels")
    mean = {k: float(np.mean([v[k] for v in per_volume.values()])) for k in keys}
    sd = {k: float(np.std([v[k] for v in per_volume.values()])) for k in keys}
    loss = None
    if loss_spec is not None:
        total_slices = sum(n for _, (_, _, n) in results)
        loss = float(sum(ls for _, (_, ls, _) in results) / max(1, total_slices))
    return EvalResult(
        per_volume=per_volume, mean=mean, sd=sd, n_volumes=len(samples), loss=loss
    )
