"""2D U-Net: four pooling encoder blocks, bottleneck, four up blocks.

Blocks follow conv -> ELU -> batchnorm ordering with a dropout layer
between the two convolutions of each block; dropout rates grow with
depth.  The first encoder block skips the leading max pool so the input
resolution survives until the first convolution.  Decoding uses stride-2
transposed convolutions, concatenation with the matching encoder skip,
and the same double-conv structure.  A 1x1 convolution plus sigmoid
produces per-pixel, per-class probabilities (channels are independent,
not softmax-normalised).

Channel widths double per depth: base, 2b, 4b, 8b and 16b at the
bottleneck.  Parameters are drawn from a seeded PCG64 stream with
variance scaling (sqrt(2/fan_in)), so two builds from the same seed are
bit-identical.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .rng import derive_seed, pcg

__all__ = ["ModelConfig", "UNet", "build", "forward", "parameter_count"]

_DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass(frozen=True)
class ModelConfig:
    input_size: tuple[int, int] = (224, 224)
    base_channels: int = 32
    num_classes: int = 4
    dropout_schedule: tuple[float, float, float, float, float] = (0.3, 0.37, 0.43, 0.5, 0.5)
    seed: int = 0
    transpose_kernel: int = 2
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    precision: str = "f32"
    # classifier-head bias prior: sigmoid(-2) ~= 0.12, matching the rough
    # foreground frequency.  Starting sparse keeps the independent class
    # channels from co-saturating on "any tissue" before they learn class
    # identity (saturated sigmoids get no corrective dice gradient).
    head_bias: float = -2.0

    def validate(self) -> None:
        h, w = self.input_size
        if h <= 0 or w <= 0 or h % 16 or w % 16:
            raise ConfigError(f"input_size must be positive multiples of 16, got {h}x{w}")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be positive")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")
        if len(self.dropout_schedule) != 5:
            raise ConfigError("dropout_schedule needs 5 rates (depths 0-4)")
        for r in self.dropout_schedule:
            if not 0.0 <= r < 1.0:
                raise ConfigError(f"dropout rates must be in [0, 1), got {r}")
        if any(self.dropout_schedule[i] > self.dropout_schedule[i + 1] for i in range(4)):
            raise ConfigError("dropout rates must be non-decreasing with depth")
        if self.transpose_kernel not in (2, 3):
            raise ConfigError("transpose_kernel must be 2 or 3")
        if self.precision not in _DTYPES:
            raise ConfigError(f"precision must be one of {sorted(_DTYPES)}")

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * 2**d for d in range(5))

    def to_dict(self) -> dict:
        return {
            "input_size": list(self.input_size),
            "base_channels": self.base_channels,
            "num_classes": self.num_classes,
            "dropout_schedule": list(self.dropout_schedule),
            "seed": self.seed,
            "transpose_kernel": self.transpose_kernel,
            "bn_momentum": self.bn_momentum,
            "bn_eps": self.bn_eps,
            "precision": self.precision,
            "head_bias": self.head_bias,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("input_size", "dropout_schedule"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def _layer_plan(config: ModelConfig) -> list[tuple[str, str, int, int]]:
    """(block name, kind, in_channels, out_channels) in build order."""
    ch = config.channels
    plan = []
    for d in range(4):
        cin = 1 if d == 0 else ch[d - 1]
        plan.append((f"enc{d}", "double_conv", cin, ch[d]))
    plan.append(("bottleneck", "double_conv", ch[3], ch[4]))
    for d in range(3, -1, -1):
        plan.append((f"dec{d}", "up", ch[d + 1], ch[d]))
    plan.append(("head", "conv1x1", ch[0], config.num_classes))
    return plan


def parameter_count(config: ModelConfig) -> int:
    """Closed-form trainable parameter count for a configuration."""
    config.validate()
    kt = config.transpose_kernel
    total = 0
    for _, kind, cin, cout in _layer_plan(config):
        if kind == "double_conv":
            total += 9 * cin * cout + cout + 2 * cout  # conv1 + bn1
            total += 9 * cout * cout + cout + 2 * cout  # conv2 + bn2
        elif kind == "up":
            total += kt * kt * cin * cout  # transpose (no bias)
            total += 9 * (2 * cout) * cout + cout + 2 * cout
            total += 9 * cout * cout + cout + 2 * cout
        else:  # conv1x1 head
            total += cin * cout + cout
    return total


class UNet:
    """The parameterised network: ordered params, batchnorm buffers."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        self.dtype = _DTYPES[config.precision]
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._init_params(pcg(config.seed))

    # -- construction ----------------------------------------------------
    def _add_conv(self, rng, name: str, cin: int, cout: int, k: int) -> None:
        std = np.sqrt(2.0 / (cin * k * k))
        kernel = rng.standard_normal((cout, cin, k, k)) * std
        self.params[f"{name}.kernel"] = Tensor(kernel, requires_grad=True, dtype=self.dtype)
        self.params[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True, dtype=self.dtype)

    def _add_bn(self, name: str, c: int) -> None:
        self.params[f"{name}.gamma"] = Tensor(np.ones(c), requires_grad=True, dtype=self.dtype)
        self.params[f"{name}.beta"] = Tensor(np.zeros(c), requires_grad=True, dtype=self.dtype)
        self.buffers[f"{name}.running_mean"] = np.zeros(c, dtype=self.dtype)
        self.buffers[f"{name}.running_var"] = np.ones(c, dtype=self.dtype)

    def _add_transpose(self, rng, name: str, cin: int, cout: int, k: int) -> None:
        fan = max(1, cin * k * k // 4)  # stride-2 scatter: ~cin contributions per output
        std = np.sqrt(2.0 / fan)
        kernel = rng.standard_normal((cin, cout, k, k)) * std
        self.params[f"{name}.kernel"] = Tensor(kernel, requires_grad=True, dtype=self.dtype)

    def _init_params(self, rng) -> None:
        kt = self.config.transpose_kernel
        for name, kind, cin, cout in _layer_plan(self.config):
            if kind == "double_conv":
                self._add_conv(rng, f"{name}.conv1", cin, cout, 3)
                self._add_bn(f"{name}.bn1", cout)
                self._add_conv(rng, f"{name}.conv2", cout, cout, 3)
                self._add_bn(f"{name}.bn2", cout)
            elif kind == "up":
                self._add_transpose(rng, f"{name}.up", cin, cout, kt)
                self._add_conv(rng, f"{name}.conv1", 2 * cout, cout, 3)
                self._add_bn(f"{name}.bn1", cout)
                self._add_conv(rng, f"{name}.conv2", cout, cout, 3)
                self._add_bn(f"{name}.bn2", cout)
            else:
                self._add_conv(rng, name, cin, cout, 1)
                self.params[f"{name}.bias"].data[:] = self.config.head_bias

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    # -- forward ---------------------------------------------------------
    def _conv_elu_bn(self, name: str, bn: str, x: Tensor, mode: str) -> Tensor:
        x = ad.conv2d(x, self.params[f"{name}.kernel"], self.params[f"{name}.bias"])
        x = ad.elu(x)
        return ad.batchnorm2d(
            x,
            self.params[f"{bn}.gamma"],
            self.params[f"{bn}.beta"],
            self.buffers[f"{bn}.running_mean"],
            self.buffers[f"{bn}.running_var"],
            mode=mode,
            momentum=self.config.bn_momentum,
            eps=self.config.bn_eps,
        )

    def _double_conv(self, block: str, x: Tensor, rate: float, mode: str, seed: int) -> Tensor:
        x = self._conv_elu_bn(f"{block}.conv1", f"{block}.bn1", x, mode)
        x = ad.dropout(x, rate, mode=mode, seed=derive_seed(seed, block))
        return self._conv_elu_bn(f"{block}.conv2", f"{block}.bn2", x, mode)

    def down_block(
        self, depth: int, x: Tensor, mode: str = "infer", dropout_seed: int = 0
    ) -> tuple[Tensor, Tensor]:
        """Encoder block ``depth``; returns (skip, value passed onward).

        Both are the same activation: the decoder consumes it as the
        skip and the next block pools it.  Depth 0 has no leading pool.
        """
        if depth > 0:
            x = ad.maxpool2(x)
        rate = self.config.dropout_schedule[depth]
        out = self._double_conv(f"enc{depth}", x, rate, mode, dropout_seed)
        return out, out

    def up_block(
        self, depth: int, x: Tensor, skip: Tensor, mode: str = "infer", dropout_seed: int = 0
    ) -> Tensor:
        """Decoder block: upsample 2x, concat skip, double conv."""
        if (x.shape[2] * 2, x.shape[3] * 2) != (skip.shape[2], skip.shape[3]):
            raise ShapeError(
                f"skip spatial {skip.shape[2:]} must be twice input spatial {x.shape[2:]}"
            )
        up = ad.conv_transpose2d(x, self.params[f"dec{depth}.up.kernel"])
        merged = ad.concat_channels(up, skip)
        rate = self.config.dropout_schedule[depth]
        return self._double_conv(f"dec{depth}", merged, rate, mode, dropout_seed)

    def forward(self, batch: Tensor, mode: str = "infer", dropout_seed: int = 0) -> Tensor:
        """Map [B,1,H,W] to per-class probabilities [B,C,H,W] in (0,1)."""
        if not isinstance(batch, Tensor):
            batch = Tensor(batch, dtype=self.dtype)
        h, w = self.config.input_size
        if batch.data.ndim != 4 or batch.shape[1] != 1 or batch.shape[2:] != (h, w):
            raise ShapeError(f"expected [B,1,{h},{w}], got {batch.shape}")
        if batch.dtype != self.dtype:
            batch = Tensor(batch.data, requires_grad=batch.requires_grad, dtype=self.dtype)

        x = batch
        skips = []
        for d in range(4):
            skip, x = self.down_block(d, x, mode, dropout_seed)
            skips.append(skip)
        x = ad.maxpool2(x)
        x = self._double_conv("bottleneck", x, self.config.dropout_schedule[4], mode, dropout_seed)
        for d in range(3, -1, -1):
            x = self.up_block(d, x, skips[d], mode, dropout_seed)
        logits = ad.conv2d(x, self.params["head.kernel"], self.params["head.bias"])
        return ad.sigmoid(logits)

    __call__ = forward

    # -- persistence -------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: t.data for name, t in self.params.items()}
        out.update(self.buffers)
        return out

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.params.items():
            arr = np.asarray(arrays[name], dtype=self.dtype)
            if arr.shape != t.shape:
                raise ShapeError(f"{name}: shape {arr.shape} != expected {t.shape}")
            t.data = np.ascontiguousarray(arr)
            t.grad = None
        for name in self.buffers:
            arr = np.asarray(arrays[name], dtype=self.dtype)
            if arr.shape != self.buffers[name].shape:
                raise ShapeError(f"{name}: shape mismatch")
            self.buffers[name] = np.ascontiguousarray(arr)

    def clone_state(self) -> dict[str, np.ndarray]:
        return {name: arr.copy() for name, arr in self.state_dict().items()}


def build(config: ModelConfig) -> UNet:
    """Construct a network with seeded, deterministic initialisation."""
    return UNet(config)


def forward(model: UNet, batch, mode: str = "infer", dropout_seed: int = 0) -> Tensor:
    return model.forward(batch, mode=mode, dropout_seed=dropout_seed)
