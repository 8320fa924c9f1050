"""Segmentation losses and dice metrics, background-exclusion aware.

Four training losses: binary cross-entropy, class-weighted
cross-entropy, Jaccard distance and soft Dice.  Evaluation uses the
smoothed binary soft dice per label and its foreground class-wise mean
(``dsc_labels``), binarising soft predictions per pixel to the most
probable foreground class when it reaches 0.5 probability, else
background (see ``binarize_prediction``).
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ParameterError, ShapeError, ValidationError

__all__ = [
    "LossSpec",
    "bce",
    "wce",
    "jdl",
    "sdl",
    "dsc_class",
    "dsc_labels",
    "per_class_dice",
    "binarize_prediction",
    "compute_loss",
    "LOSS_KINDS",
]

LOSS_KINDS = ("BCE", "WCE", "JDL", "SDL")
CLAMP_EPS = 1e-7  # keeps log() finite for saturated predictions


@dataclass(frozen=True)
class LossSpec:
    """Which loss to train with and how it treats classes.

    class_weights applies to WCE only and must have one entry per class
    channel (including background, whose weight is unused when
    ignore_background is set).
    """

    kind: str = "SDL"
    class_weights: tuple[float, ...] | None = None
    smooth: float = 1.0
    ignore_background: bool = True

    def validate(self, num_classes: int | None = None) -> None:
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {self.kind!r}, expected one of {LOSS_KINDS}")
        if self.smooth < 0:
            raise ConfigError(f"smooth must be >= 0, got {self.smooth}")
        if self.kind == "WCE":
            if self.class_weights is None:
                raise ConfigError("WCE requires class_weights")
            if any(w < 0 for w in self.class_weights):
                raise ConfigError("class_weights must be non-negative")
            if num_classes is not None and len(self.class_weights) != num_classes:
                raise ConfigError(
                    f"class_weights has {len(self.class_weights)} entries "
                    f"for {num_classes} classes"
                )
        elif self.class_weights is not None:
            raise ConfigError(f"class_weights only applies to WCE, not {self.kind}")


def _pair(pred, truth) -> tuple[Tensor, np.ndarray]:
    p = pred if isinstance(pred, Tensor) else Tensor(pred)
    t = truth.data if isinstance(truth, Tensor) else np.asarray(truth, dtype=p.dtype)
    if p.shape != t.shape:
        raise ShapeError(f"pred/truth shape mismatch: {p.shape} vs {t.shape}")
    return p, t.astype(p.dtype)


def _check_binary(truth: np.ndarray) -> None:
    if not np.all((truth == 0) | (truth == 1)):
        raise ValidationError("ground truth must be binary (0/1)")


def bce(pred, truth) -> Tensor:
    """Mean binary cross-entropy over every element given."""
    p, g = _pair(pred, truth)
    _check_binary(g)
    pc = ad.clip(p, CLAMP_EPS, 1.0 - CLAMP_EPS)
    terms = ad.add(ad.mul(ad.log(pc), g), ad.mul(ad.log(1.0 - pc), 1.0 - g))
    return ad.mul(ad.tsum(terms), -1.0 / p.size)


def wce(pred, truth, weights) -> Tensor:
    """Cross-entropy with one multiplicative coefficient per class channel."""
    p, g = _pair(pred, truth)
    _check_binary(g)
    if p.data.ndim != 4:
        raise ShapeError(f"wce expects [B,C,H,W] tensors, got {p.shape}")
    w = np.asarray(weights, dtype=p.dtype)
    if w.ndim != 1 or w.shape[0] != p.shape[1]:
        raise ShapeError(f"need one weight per class: {p.shape[1]} classes, got {w.shape}")
    pc = ad.clip(p, CLAMP_EPS, 1.0 - CLAMP_EPS)
    terms = ad.add(ad.mul(ad.log(pc), g), ad.mul(ad.log(1.0 - pc), 1.0 - g))
    weighted = ad.mul(terms, w[None, :, None, None])
    return ad.mul(ad.tsum(weighted), -1.0 / p.size)


def jdl(pred, truth, smooth: float = 1.0) -> Tensor:
    """Jaccard distance: 1 - (|g.p| + s) / (|g| + |p| - |g.p| + s)."""
    p, g = _pair(pred, truth)
    inter = ad.tsum(ad.mul(p, g))
    total = ad.add(float(g.sum()), ad.tsum(p))
    union = ad.sub(total, inter)
    return 1.0 - ad.div(inter + smooth, union + smooth)


def dsc_class(pred, truth, smooth: float = 1.0) -> Tensor:
    """Smoothed binary soft dice of one class: (2|g.p| + s)/(|g| + |p| + s)."""
    p, g = _pair(pred, truth)
    inter = ad.tsum(ad.mul(p, g))
    total = ad.add(float(g.sum()), ad.tsum(p))
    return ad.div(ad.mul(inter, 2.0) + smooth, total + smooth)


def sdl(pred, truth, smooth: float = 1.0, ignore_background: bool = True) -> Tensor:
    """Soft dice loss: 1 - mean of per-class dice over foreground classes."""
    p, g = _pair(pred, truth)
    if p.data.ndim != 4:
        raise ShapeError(f"sdl expects [B,C,H,W] tensors, got {p.shape}")
    start = 1 if ignore_background else 0
    classes = range(start, p.shape[1])
    if len(classes) < 1:
        raise ConfigError("sdl needs at least one foreground class")
    acc = None
    for c in classes:
        d = dsc_class(ad.slice_channels(p, c, c + 1), g[:, c : c + 1], smooth)
        acc = d if acc is None else ad.add(acc, d)
    return 1.0 - ad.mul(acc, 1.0 / len(classes))


def compute_loss(spec: LossSpec, pred: Tensor, truth: np.ndarray) -> Tensor:
    """Apply ``spec`` to [B,C,H,W] predictions and one-hot truth.

    Background exclusion slices off channel 0 (and its weight) before
    the loss proper, matching how all four losses are trained.
    """
    if pred.data.ndim != 4:
        raise ShapeError(f"compute_loss expects [B,C,H,W], got {pred.shape}")
    spec.validate(num_classes=pred.shape[1])
    truth = truth.data if isinstance(truth, Tensor) else np.asarray(truth)
    if spec.kind == "SDL":
        return sdl(pred, truth, spec.smooth, spec.ignore_background)
    p, g, w = pred, truth, spec.class_weights
    if spec.ignore_background:
        if pred.shape[1] < 2:
            raise ConfigError("ignore_background needs at least 2 channels")
        p = ad.slice_channels(pred, 1, pred.shape[1])
        g = truth[:, 1:]
        w = None if w is None else w[1:]
    if spec.kind == "BCE":
        return bce(p, g)
    if spec.kind == "WCE":
        return wce(p, g, w)
    return jdl(p, g, spec.smooth)


# -- evaluation metrics (plain numpy, not differentiable) -----------------


def binarize_prediction(pred: np.ndarray, axis: int = 0) -> np.ndarray:
    """Hard labels from per-channel probabilities.

    A pixel gets the most probable foreground class when that class's
    probability reaches 0.5, and background otherwise.  The background
    channel itself never competes: with background-excluded training it
    receives no gradient, so its output is an untrained projection that
    would otherwise override confident foreground predictions.
    """
    fg = np.moveaxis(pred, axis, 0)[1:]
    best = fg.argmax(axis=0).astype(np.uint8) + 1
    confident = fg.max(axis=0) >= 0.5
    return np.where(confident, best, 0).astype(np.uint8)


def _binarize(pred: np.ndarray) -> np.ndarray:
    """Channel-first probabilities -> one-hot hard prediction."""
    labels = binarize_prediction(pred, axis=0)
    out = np.zeros_like(pred, dtype=np.uint8)
    for c in range(pred.shape[0]):
        out[c] = labels == c
    return out


def dice_from_counts(inter: float, total: float, smooth: float = 1.0) -> float:
    return (2.0 * inter + smooth) / (total + smooth)


def per_class_dice(pred: np.ndarray, truth: np.ndarray, smooth: float = 1.0) -> dict[int, float]:
    """Binary dice per foreground class after binarisation.

    pred and truth are channel-first arrays of identical shape
    ([C, ...]); truth must already be one-hot.
    """
    if pred.shape != truth.shape:
        raise ShapeError(f"pred/truth shape mismatch: {pred.shape} vs {truth.shape}")
    hard = _binarize(pred)
    out = {}
    for c in range(1, pred.shape[0]):
        inter = float((hard[c] * truth[c]).sum())
        total = float(hard[c].sum() + truth[c].sum())
        out[c] = dice_from_counts(inter, total, smooth)
    return out


def dsc_labels(pred: np.ndarray, truth: np.ndarray, smooth: float = 1.0) -> float:
    """Class-wise averaged dice over foreground classes, background ignored."""
    per = per_class_dice(pred, truth, smooth)
    if not per:
        raise ParameterError("dsc_labels needs at least one foreground class")
    return float(np.mean(list(per.values())))
