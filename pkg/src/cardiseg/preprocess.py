"""Slice preprocessing and augmentation.

The per-slice pipeline, in order: quantile clipping (threshold computed
over the whole 3D volume), min/max normalisation, seeded grid
distortion (training only), centre crop to square, then centre crop or
resize to the network input size.  There is deliberately no physical
resampling step: volumes with different pixel spacing keep their
different anatomical scales, so the network has to cope with any size.

Images are interpolated bilinearly, masks with nearest neighbour so no
new label values can appear.  Image and mask always receive the same
geometric map.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ParameterError, ShapeError, ValidationError
from .rng import pcg

__all__ = [
    "PipelineConfig",
    "clip_quantile",
    "minmax_normalize",
    "crop_to_square",
    "center_crop",
    "fit_to_network",
    "grid_distort",
    "one_hot",
    "apply_pipeline",
]


@dataclass(frozen=True)
class PipelineConfig:
    target_size: tuple[int, int] = (224, 224)
    clip_quantile: float = 0.999
    distortion_probability: float = 0.8
    distortion_steps: int = 10
    distortion_limit: float = 0.3
    train_mode: bool = False
    seed: int = 0
    num_classes: int = 4

    def validate(self) -> None:
        th, tw = self.target_size
        if th <= 0 or tw <= 0:
            raise ConfigError(f"target_size must be positive, got {self.target_size}")
        if not 0.0 < self.clip_quantile <= 1.0:
            raise ConfigError(f"clip_quantile must be in (0, 1], got {self.clip_quantile}")
        if not 0.0 <= self.distortion_probability <= 1.0:
            raise ConfigError("distortion_probability must be in [0, 1]")
        if self.distortion_steps < 1:
            raise ConfigError("distortion_steps must be >= 1")
        if not 0.0 <= self.distortion_limit < 1.0:
            raise ConfigError("distortion_limit must be in [0, 1)")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")


def clip_quantile(values: np.ndarray, q: float) -> np.ndarray:
    """Clip values above the q-quantile (linear interpolation between
    order statistics).  Values at or below the quantile are untouched."""
    if values.size == 0:
        raise ParameterError("cannot clip an empty array")
    if not 0.0 < q <= 1.0:
        raise ParameterError(f"quantile must be in (0, 1], got {q}")
    if q == 1.0:
        return values.copy()
    threshold = float(np.quantile(values, q))
    return np.minimum(values, threshold)


def quantile_threshold(volume: np.ndarray, q: float) -> float:
    """The clip threshold for a whole volume (shared across its slices)."""
    if volume.size == 0:
        raise ParameterError("cannot take the quantile of an empty array")
    return float(np.quantile(volume, q))


def minmax_normalize(values: np.ndarray) -> np.ndarray:
    """Affine map to [0, 1]; constant inputs map to all zeros."""
    lo = float(values.min())
    hi = float(values.max())
    if hi == lo:
        return np.zeros_like(values, dtype=np.float32)
    return ((values - lo) / (hi - lo)).astype(np.float32)


def center_crop(arr: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Centre crop; odd margins lose the extra row/col at bottom/right."""
    h, w = arr.shape
    th, tw = target
    if th > h or tw > w:
        raise ShapeError(f"cannot crop {h}x{w} to larger {th}x{tw}")
    top = (h - th) // 2
    left = (w - tw) // 2
    return arr[top : top + th, left : left + tw]


def crop_to_square(arr: np.ndarray) -> np.ndarray:
    s = min(arr.shape)
    return center_crop(arr, (s, s))


def _resize(arr: np.ndarray, target: tuple[int, int], kind: str) -> np.ndarray:
    """Half-pixel-centre resize: bilinear for images, nearest for masks."""
    h, w = arr.shape
    th, tw = target
    ys = (np.arange(th) + 0.5) * (h / th) - 0.5
    xs = (np.arange(tw) + 0.5) * (w / tw) - 0.5
    if kind == "mask":
        yi = np.clip(np.rint(ys).astype(int), 0, h - 1)
        xi = np.clip(np.rint(xs).astype(int), 0, w - 1)
        return arr[np.ix_(yi, xi)]
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    a = arr[np.ix_(y0, x0)]
    b = arr[np.ix_(y0, x1)]
    c = arr[np.ix_(y1, x0)]
    d = arr[np.ix_(y1, x1)]
    out = (1 - wy) * ((1 - wx) * a + wx * b) + wy * ((1 - wx) * c + wx * d)
    return out.astype(np.float32)


def fit_to_network(arr: np.ndarray, target: tuple[int, int], kind: str = "image") -> np.ndarray:
    """Centre crop when at least as large as the target, else resize.

    The resize path therefore only ever upscales, where anti-aliasing is
    a no-op; masks use nearest neighbour in every case.
    """
    if kind not in ("image", "mask"):
        raise ParameterError(f"kind must be 'image' or 'mask', got {kind!r}")
    h, w = arr.shape
    th, tw = target
    if h >= th and w >= tw:
        return center_crop(arr, target)
    return _resize(arr, target, kind)


def _axis_map(length: int, steps: int, factors: np.ndarray) -> np.ndarray:
    """Source coordinate for each output index along one axis.

    The axis is split into ``steps`` equal cells; each output cell
    samples a source span scaled by its factor, renormalised so the full
    extent is preserved (the map stays within the image).
    """
    bounds = np.linspace(0.0, length - 1.0, steps + 1)
    spans = np.diff(bounds) * factors
    src = np.concatenate([[0.0], np.cumsum(spans)])
    src *= (length - 1.0) / src[-1]
    return np.interp(np.arange(length, dtype=np.float64), bounds, src)


def grid_distort(
    image: np.ndarray,
    mask: np.ndarray,
    steps: int = 10,
    limit: float = 0.3,
    probability: float = 0.8,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Piecewise-linear grid distortion, identical map for image and mask.

    Per-axis cell scale factors are drawn uniformly from
    [1-limit, 1+limit].  Image resampling is bilinear, mask resampling
    nearest neighbour.  Applied with the given probability; otherwise
    both inputs pass through untouched.
    """
    if image.shape != mask.shape:
        raise ShapeError(f"image/mask shape mismatch: {image.shape} vs {mask.shape}")
    rng = pcg(seed)
    if rng.random() >= probability:
        return image, mask
    h, w = image.shape
    fy = rng.uniform(1.0 - limit, 1.0 + limit, steps)
    fx = rng.uniform(1.0 - limit, 1.0 + limit, steps)
    src_y = _axis_map(h, steps, fy)
    src_x = _axis_map(w, steps, fx)

    y0 = np.clip(np.floor(src_y).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(src_x).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(src_y - y0, 0.0, 1.0)[:, None]
    wx = np.clip(src_x - x0, 0.0, 1.0)[None, :]
    img = (1 - wy) * ((1 - wx) * image[np.ix_(y0, x0)] + wx * image[np.ix_(y0, x1)]) + wy * (
        (1 - wx) * image[np.ix_(y1, x0)] + wx * image[np.ix_(y1, x1)]
    )
    yn = np.clip(np.rint(src_y).astype(int), 0, h - 1)
    xn = np.clip(np.rint(src_x).astype(int), 0, w - 1)
    return img.astype(image.dtype, copy=False), mask[np.ix_(yn, xn)]


def one_hot(mask: np.ndarray, num_classes: int = 4) -> np.ndarray:
    """Channel-first indicator encoding; channels sum to 1 everywhere."""
    if mask.min() < 0 or mask.max() >= num_classes:
        raise ValidationError(
            f"labels must lie in [0, {num_classes}), got range "
            f"[{mask.min()}, {mask.max()}]"
        )
    out = np.zeros((num_classes, *mask.shape), dtype=np.float32)
    for c in range(num_classes):
        out[c] = mask == c
    return out


def apply_pipeline(
    image: np.ndarray,
    mask: np.ndarray,
    config: PipelineConfig,
    seed: int | None = None,
    clip_value: float | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Run one 2D slice through the full pipeline.

    ``clip_value`` is the volume-level quantile threshold; when omitted
    it is computed from this slice alone.  Returns the image in [0, 1]
    at target size and the one-hot mask [C, H, W].
    """
    config.validate()
    if image.shape != mask.shape:
        raise ShapeError(f"image/mask shape mismatch: {image.shape} vs {mask.shape}")
    if clip_value is None:
        clip_value = quantile_threshold(image, config.clip_quantile)
    img = np.minimum(image.astype(np.float64), clip_value)
    img = minmax_normalize(img)
    msk = mask
    if config.train_mode:
        img, msk = grid_distort(
            img,
            msk,
            steps=config.distortion_steps,
            limit=config.distortion_limit,
            probability=config.distortion_probability,
            seed=config.seed if seed is None else seed,
        )
    img = crop_to_square(img)
    msk = crop_to_square(msk)
    img = fit_to_network(img, config.target_size, "image")
    msk = fit_to_network(msk, config.target_size, "mask")
    return img.astype(np.float32), one_hot(msk, config.num_classes)
