"""Dense tensors with reverse-mode automatic differentiation.

The engine covers exactly the operations a 2D encoder/decoder
segmentation network and its losses need: elementwise arithmetic with
broadcasting, reductions, log/exp/clip, 3x3 "same" convolution, stride-2
transposed convolution, 2x2 max pooling, batch normalisation, ELU,
sigmoid, inverted dropout and channel concatenation/slicing.

Every operation records its inputs and a backward closure on the output
tensor; ``Tensor.backward()`` replays those records once each, in
reverse topological order (the tape).  Training runs in float32,
gradient checking in float64; ``grad_check`` compares tape gradients
against central finite differences.
"""

import threading
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ParameterError, ShapeError
from .rng import pcg

__all__ = [
    "Tensor",
    "no_grad",
    "concat_channels",
    "slice_channels",
    "conv2d",
    "conv_transpose2d",
    "maxpool2",
    "batchnorm2d",
    "elu",
    "sigmoid",
    "dropout",
    "log",
    "exp",
    "clip",
    "tsum",
    "tmean",
    "grad_check",
]

_FLOAT_DTYPES = (np.float32, np.float64)
# graph recording is toggled per thread: read-only inference may run on
# worker threads concurrently without disturbing a training thread
_grad_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording (inference / finite differences)."""
    prev = _grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


class Tensor:
    """N-dimensional float array, optionally participating in the tape.

    ``data`` is a contiguous numpy array (float32 or float64).  ``grad``
    is populated by ``backward()`` for every tensor with
    ``requires_grad`` that the loss depends on, and has the same shape
    and dtype as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def tape(self) -> list["Tensor"]:
        """Topologically ordered record of the graph below this tensor."""
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def backward(self) -> None:
        """Populate ``grad`` on every reachable requires_grad tensor.

        Only a scalar (single-element) tensor can seed a backward pass.
        Each recorded operation is visited exactly once.
        """
        if self.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        self.grad = np.ones_like(self.data)
        for node in reversed(self.tape()):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Wrap an op result, recording it on the tape when grads are live."""
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic ---------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", np.float32))
    b = _as_tensor(b, a.dtype)
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", np.float32))
    b = _as_tensor(b, a.dtype)
    out = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _node(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", np.float32))
    b = _as_tensor(b, a.dtype)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(out, (a, b), backward)


def div(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", np.float32))
    b = _as_tensor(b, a.dtype)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(out, (a, b), backward)


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g / x.data)

    return _node(out, (x,), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * out)

    return _node(out, (x,), backward)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes through the interior."""
    out = np.clip(x.data, lo, hi)

    def backward(g):
        if x.requires_grad:
            inside = (x.data >= lo) & (x.data <= hi)
            x._accumulate(g * inside)

    return _node(out, (x,), backward)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not x.requires_grad:
            return
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.shape).copy())
            return
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        x._accumulate(np.broadcast_to(g, x.shape).copy())

    return _node(np.asarray(out), (x,), backward)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[i] for i in axes]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# -- activations ---------------------------------------------------------


def elu(x: Tensor) -> Tensor:
    """x for x > 0 else exp(x) - 1; derivative at 0 defined as 1."""
    neg = np.expm1(np.minimum(x.data, 0.0))
    out = np.where(x.data > 0, x.data, neg)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * np.where(x.data > 0, 1.0, neg + 1.0))

    return _node(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * out * (1.0 - out))

    return _node(out, (x,), backward)


def dropout(x: Tensor, rate: float, mode: str = "train", seed: int = 0) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, scale survivors.

    Inference mode is the identity, so no rescaling is ever needed at
    prediction time.  The mask is a pure function of ``seed``.
    """
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "infer"):
        raise ParameterError(f"mode must be 'train' or 'infer', got {mode!r}")
    if mode == "infer" or rate == 0.0:
        return x
    keep = (pcg(seed).random(x.shape) >= rate).astype(x.dtype)
    scale = 1.0 / (1.0 - rate)
    out = x.data * keep * scale

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * keep * scale)

    return _node(out, (x,), backward)


# -- structural ops ------------------------------------------------------


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack two [B,C,H,W] tensors along the channel axis, a first."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels expects [B,C,H,W] tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"batch/spatial mismatch: {a.shape} vs {b.shape}")
    out = np.concatenate([a.data, b.data], axis=1)
    ca = a.shape[1]

    def backward(g):
        if a.requires_grad:
            a._accumulate(g[:, :ca])
        if b.requires_grad:
            b._accumulate(g[:, ca:])

    return _node(out, (a, b), backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Take channels [start, stop) of a [B,C,H,W] tensor."""
    if x.data.ndim != 4:
        raise ShapeError("slice_channels expects a [B,C,H,W] tensor")
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"channel range [{start}, {stop}) invalid for C={x.shape[1]}")
    out = x.data[:, start:stop].copy()

    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[:, start:stop] = g
            x._accumulate(full)

    return _node(out, (x,), backward)


# -- convolution core (shared by conv2d / conv_transpose2d) --------------


def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """View of sliding windows: [B, C, k, k, Ho, Wo] (no copy)."""
    b, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    s0, s1, s2, s3 = x.strides
    return as_strided(
        x,
        shape=(b, c, k, k, ho, wo),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
    )


# Two equivalent lowerings of the stride-1 correlation: an im2col GEMM
# (cheaper at small spatial extents) and a channels-last accumulation of
# k*k shifted skinny GEMMs (much cheaper at high resolution, where the
# im2col copy blows the data up k*k-fold).
_OFFSET_MIN_PIXELS = 512


def _conv_fwd_im2col(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    k = w.shape[2]
    xp = _pad2d(x, pad)
    cols = _im2col(xp, k, stride)
    b, c, _, _, ho, wo = cols.shape
    mat = cols.transpose(0, 4, 5, 1, 2, 3).reshape(b * ho * wo, c * k * k)
    out = mat @ w.reshape(w.shape[0], -1).T
    return out.reshape(b, ho, wo, w.shape[0]).transpose(0, 3, 1, 2)


def _channels_last(x: np.ndarray, pad: int) -> np.ndarray:
    return np.ascontiguousarray(_pad2d(x, pad).transpose(0, 2, 3, 1))


def _conv_fwd_offsets(x: np.ndarray, w: np.ndarray, pad: int, xt: np.ndarray | None = None) -> np.ndarray:
    b, c, h, wd = x.shape
    k = w.shape[2]
    o = w.shape[0]
    if xt is None:
        xt = _channels_last(x, pad)
    ho, wo = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    out = np.zeros((b * ho * wo, o), dtype=x.dtype)
    wt = np.ascontiguousarray(w.transpose(2, 3, 1, 0))
    for di in range(k):
        for dj in range(k):
            patch = xt[:, di : di + ho, dj : dj + wo, :].reshape(-1, c)
            out += patch @ wt[di, dj]
    return np.ascontiguousarray(out.reshape(b, ho, wo, o).transpose(0, 3, 1, 2))


def _conv_fwd(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Correlation of x [B,Cin,H,W] with w [Cout,Cin,k,k]."""
    if stride == 1 and x.shape[2] * x.shape[3] >= _OFFSET_MIN_PIXELS:
        return _conv_fwd_offsets(x, w, pad)
    return _conv_fwd_im2col(x, w, stride, pad)


def _conv_bwd_kernel(
    gy: np.ndarray, x: np.ndarray, k: int, stride: int, pad: int, xt: np.ndarray | None = None
) -> np.ndarray:
    if stride == 1 and x.shape[2] * x.shape[3] >= _OFFSET_MIN_PIXELS:
        b, c = x.shape[0], x.shape[1]
        o = gy.shape[1]
        ho, wo = gy.shape[2], gy.shape[3]
        if xt is None:
            xt = _channels_last(x, pad)
        gyt = np.ascontiguousarray(gy.transpose(0, 2, 3, 1)).reshape(-1, o)
        gw = np.empty((o, c, k, k), dtype=gy.dtype)
        for di in range(k):
            for dj in range(k):
                patch = xt[:, di : di + ho, dj : dj + wo, :].reshape(-1, c)
                gw[:, :, di, dj] = gyt.T @ patch
        return gw
    xp = _pad2d(x, pad)
    cols = _im2col(xp, k, stride)
    b, c, _, _, ho, wo = cols.shape
    mat = cols.transpose(0, 4, 5, 1, 2, 3).reshape(b * ho * wo, c * k * k)
    gmat = gy.transpose(0, 2, 3, 1).reshape(b * ho * wo, -1)
    return (gmat.T @ mat).reshape(gy.shape[1], c, k, k)


def _conv_bwd_input(gy: np.ndarray, w: np.ndarray, x_shape, stride: int, pad: int) -> np.ndarray:
    b, c, h, w_ = x_shape
    k = w.shape[2]
    _, co, ho, wo = gy.shape
    if stride == 1 and h * w_ >= _OFFSET_MIN_PIXELS:
        gyt = np.ascontiguousarray(gy.transpose(0, 2, 3, 1)).reshape(-1, co)
        gxt = np.zeros((b, h + 2 * pad, w_ + 2 * pad, c), dtype=gy.dtype)
        wt = np.ascontiguousarray(w.transpose(2, 3, 1, 0))  # [k,k,c,o]
        for di in range(k):
            for dj in range(k):
                gxt[:, di : di + ho, dj : dj + wo, :] += (gyt @ wt[di, dj].T).reshape(
                    b, ho, wo, c
                )
        gx = gxt.transpose(0, 3, 1, 2)
        if pad:
            gx = gx[:, :, pad:-pad, pad:-pad]
        return np.ascontiguousarray(gx)
    gmat = gy.transpose(0, 2, 3, 1).reshape(b * ho * wo, co)
    gcols = (gmat @ w.reshape(co, -1)).reshape(b, ho, wo, c, k, k)
    gxp = np.zeros((b, c, h + 2 * pad, w_ + 2 * pad), dtype=gy.dtype)
    for i in range(k):
        for j in range(k):
            gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    if pad:
        return gxp[:, :, pad:-pad, pad:-pad]
    return gxp


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """"Same" 2D convolution: odd kernel, zero padding k//2, stride 1.

    Output spatial size equals input spatial size.  Differentiable with
    respect to input, kernel and bias.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be [B,Cin,H,W], got {x.shape}")
    if kernel.data.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"conv2d kernel must be [Cout,Cin,k,k], got {kernel.shape}")
    k = kernel.shape[2]
    if k % 2 == 0:
        raise ShapeError(f"conv2d kernel size must be odd, got {k}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(
            f"channel mismatch: input has {x.shape[1]}, kernel expects {kernel.shape[1]}"
        )
    if bias.shape != (kernel.shape[0],):
        raise ShapeError(f"bias must be [Cout]={kernel.shape[0]}, got {bias.shape}")
    pad = k // 2
    use_offsets = stride == 1 and x.shape[2] * x.shape[3] >= _OFFSET_MIN_PIXELS
    xt = _channels_last(x.data, pad) if (use_offsets and _grad_enabled()) else None
    if use_offsets:
        out = _conv_fwd_offsets(x.data, kernel.data, pad, xt=xt)
    else:
        out = _conv_fwd_im2col(x.data, kernel.data, stride, pad)
    out += bias.data[None, :, None, None]

    def backward(g):
        if x.requires_grad:
            x._accumulate(_conv_bwd_input(g, kernel.data, x.shape, stride, pad))
        if kernel.requires_grad:
            kernel._accumulate(_conv_bwd_kernel(g, x.data, k, stride, pad, xt=xt))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    return _node(out, (x, kernel, bias), backward)


def conv_transpose2d(x: Tensor, kernel: Tensor, stride: int = 2) -> Tensor:
    """Stride-2 transposed convolution doubling both spatial dims.

    kernel is [Cin, Cout, k, k] with k in {2, 3}.  k=2 tiles the plane
    exactly; k=3 computes the overlapping full correlation and crops one
    row/column at top/left so the output is still exactly 2H x 2W.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv_transpose2d input must be [B,Cin,H,W], got {x.shape}")
    if any(s <= 0 for s in x.shape):
        raise ShapeError(f"non-positive input dims: {x.shape}")
    if kernel.data.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"kernel must be [Cin,Cout,k,k], got {kernel.shape}")
    if x.shape[1] != kernel.shape[0]:
        raise ShapeError(
            f"channel mismatch: input has {x.shape[1]}, kernel expects {kernel.shape[0]}"
        )
    k = kernel.shape[2]
    if k not in (2, 3):
        raise ShapeError(f"transpose kernel size must be 2 or 3, got {k}")
    crop = k - stride  # 0 for k=2, 1 for k=3
    b, ci, h, w = x.shape
    co = kernel.shape[1]
    hs, ws = (h - 1) * stride + 1, (w - 1) * stride + 1
    xs = np.zeros((b, ci, hs, ws), dtype=x.dtype)
    xs[:, :, ::stride, ::stride] = x.data
    # full correlation with the flipped kernel == full convolution with kernel
    wflip = np.ascontiguousarray(kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    full = _conv_fwd(xs, wflip, 1, k - 1)
    out = full[:, :, crop : crop + stride * h, crop : crop + stride * w]

    def backward(g):
        gfull = np.zeros((b, co, hs + k - 1, ws + k - 1), dtype=g.dtype)
        gfull[:, :, crop : crop + stride * h, crop : crop + stride * w] = g
        if x.requires_grad:
            gxs = _conv_bwd_input(gfull, wflip, xs.shape, 1, k - 1)
            x._accumulate(np.ascontiguousarray(gxs[:, :, ::stride, ::stride]))
        if kernel.requires_grad:
            gwflip = _conv_bwd_kernel(gfull, xs, k, 1, k - 1)
            kernel._accumulate(
                np.ascontiguousarray(gwflip.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
            )

    return _node(np.ascontiguousarray(out), (x, kernel), backward)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling over disjoint windows; H and W must be even.

    Backward routes each window's gradient to its first (row-major)
    maximal element only.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2 input must be [B,C,H,W], got {x.shape}")
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    win = x.data.reshape(b, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h2, w2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        if not x.requires_grad:
            return
        gwin = np.zeros((b, c, h2, w2, 4), dtype=g.dtype)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = gwin.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        x._accumulate(np.ascontiguousarray(gx))

    return _node(np.ascontiguousarray(out), (x,), backward)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str = "train",
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation over (B, H, W).

    Train mode normalises with the batch statistics (biased variance)
    and updates the running buffers in place as a side effect outside
    the tape; infer mode normalises with the running buffers.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm2d input must be [B,C,H,W], got {x.shape}")
    b, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must be [C]={c}")
    if mode not in ("train", "infer"):
        raise ParameterError(f"mode must be 'train' or 'infer', got {mode!r}")

    if mode == "infer":
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean[None, :, None, None]) * inv[None, :, None, None]
        out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

        def backward_infer(g):
            if x.requires_grad:
                x._accumulate(g * (gamma.data * inv)[None, :, None, None])
            if gamma.requires_grad:
                gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                beta._accumulate(g.sum(axis=(0, 2, 3)))

        return _node(out.astype(x.dtype), (x, gamma, beta), backward_infer)

    n = b * h * w
    if n < 2:
        raise ShapeError(f"batch statistics need B*H*W >= 2, got {n}")
    mu = x.data.mean(axis=(0, 2, 3))
    var = x.data.var(axis=(0, 2, 3))  # biased
    inv = 1.0 / np.sqrt(var + eps)
    xc = x.data - mu[None, :, None, None]
    xhat = xc * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    running_mean *= momentum
    running_mean += (1.0 - momentum) * mu
    running_var *= momentum
    running_var += (1.0 - momentum) * var

    def backward_train(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            sum_g = gxhat.sum(axis=(0, 2, 3))
            sum_gx = (gxhat * xhat).sum(axis=(0, 2, 3))
            gx = (
                inv[None, :, None, None]
                / n
                * (n * gxhat - sum_g[None, :, None, None] - xhat * sum_gx[None, :, None, None])
            )
            x._accumulate(gx.astype(x.dtype))

    return _node(out.astype(x.dtype), (x, gamma, beta), backward_train)


# -- gradient checking ----------------------------------------------------


def grad_check(
    f,
    x: Tensor,
    h: float = 1e-5,
    sample: int | None = None,
    seed: int = 0,
    rel_floor: float = 1e-6,
) -> float:
    """Max relative error between tape gradient and central differences.

    ``f`` maps a Tensor to a scalar Tensor.  Requires float64 input for
    meaningful results.  When ``sample`` is given, only that many
    (deterministically chosen) coordinates are probed; otherwise all.
    The relative error for a coordinate is |a - n| / max(|a|, |n|,
    rel_floor), with a the tape gradient and n the finite difference.
    """
    if x.dtype != np.float64:
        raise ParameterError("grad_check requires a float64 input tensor")
    probe = Tensor(x.data.copy(), requires_grad=True, dtype=np.float64)
    y = f(probe)
    if not isinstance(y, Tensor) or y.size != 1:
        raise ShapeError("grad_check needs f to return a scalar Tensor")
    y.backward()
    analytic = probe.grad.reshape(-1).copy() if probe.grad is not None else np.zeros(x.size)

    coords = np.arange(x.size)
    if sample is not None and sample < x.size:
        coords = pcg(seed).choice(x.size, size=sample, replace=False)

    flat = x.data.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in coords:
            saved = flat[i]
            work = flat.copy()
            work[i] = saved + h
            fp = f(Tensor(work.reshape(x.shape), dtype=np.float64)).item()
            work[i] = saved - h
            fm = f(Tensor(work.reshape(x.shape), dtype=np.float64)).item()
            numeric = (fp - fm) / (2.0 * h)
            a = analytic[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), rel_floor)
            worst = max(worst, err)
    return worst
