"""2D U-Net assembled from the diffcore layers.

Layout for ``depth`` d and ``base_filters`` f (filters at level k: f * 2**k):

    d x {conv3-relu, conv3-relu, dropout, maxpool2}
    bottleneck {conv3-relu, conv3-relu, dropout}
    d x {upconv2, concat skip, conv3-relu, conv3-relu, dropout}
    conv1x1 -> 2 channels -> softmax2

Convolutions use same padding, so the output grid equals the input grid as
long as height and width are multiples of 2**depth (see ``pad_to_grid``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal, Mapping

import numpy as np

from tract_stack.diffcore import (
    ConcatChannels,
    Conv2d,
    Dropout,
    MaxPool2,
    ReLU,
    Softmax2,
    UpConv2,
    check_tensor4,
    new_generator,
)
from tract_stack.errors import ConfigError, ShapeError

log = logging.getLogger(__name__)

Mode = Literal["train", "eval"]

# Architecture presets: (depth, base_filters).
PRESETS: dict[str, tuple[int, int]] = {
    "full": (4, 64),
    "phantom": (3, 16),
    "tiny": (2, 4),
}


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int
    depth: int
    base_filters: int
    dropout_p: float = 0.0

    def __post_init__(self) -> None:
        if self.in_channels < 1 or self.depth < 1 or self.base_filters < 1:
            raise ConfigError(
                "in_channels, depth and base_filters must be >= 1, got "
                f"{self.in_channels}, {self.depth}, {self.base_filters}"
            )
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    def filters(self, level: int) -> int:
        return self.base_filters * 2**level

    @property
    def grid(self) -> int:
        return 2**self.depth


def preset_config(name: str, in_channels: int, dropout_p: float = 0.0) -> UNetConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset '{name}'. Known: {sorted(PRESETS)}")
    depth, base = PRESETS[name]
    return UNetConfig(in_channels=in_channels, depth=depth, base_filters=base, dropout_p=dropout_p)


def param_shapes(config: UNetConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name and shape, in the declared (serialization) order."""
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(prefix: str, cin: int, cout: int, k: int = 3) -> None:
        shapes[f"{prefix}.w"] = (cout, cin, k, k)
        shapes[f"{prefix}.b"] = (cout,)

    cin = config.in_channels
    for level in range(config.depth):
        f = config.filters(level)
        conv(f"enc{level}.conv1", cin, f)
        conv(f"enc{level}.conv2", f, f)
        cin = f
    bottom = config.filters(config.depth)
    conv("bottleneck.conv1", cin, bottom)
    conv("bottleneck.conv2", bottom, bottom)
    for level in reversed(range(config.depth)):
        f = config.filters(level)
        shapes[f"up{level}.w"] = (config.filters(level + 1), f, 2, 2)
        conv(f"dec{level}.conv1", 2 * f, f)
        conv(f"dec{level}.conv2", f, f)
    conv("head", config.base_filters, 2, k=1)
    return shapes


def parameter_count(config: UNetConfig) -> int:
    return sum(int(np.prod(shape)) for shape in param_shapes(config).values())


@dataclass(frozen=True, eq=False)
class NetworkParams:
    config: UNetConfig
    tensors: dict[str, np.ndarray]

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def equals(self, other: "NetworkParams") -> bool:
        """Bitwise equality of config and every tensor."""
        if self.config != other.config or list(self.tensors) != list(other.tensors):
            return False
        return all(
            a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.tensors.values(), other.tensors.values())
        )


def audit(params: NetworkParams) -> None:
    """Raise ShapeError unless the tensors match the config exactly, in order."""
    expected = param_shapes(params.config)
    if list(params.tensors) != list(expected):
        raise ShapeError("parameter names/order do not match the config")
    for name, shape in expected.items():
        actual = params.tensors[name].shape
        if actual != shape:
            raise ShapeError(f"{name}: expected shape {shape}, got {actual}")


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name.startswith("up"):
        # each output pixel of a stride-2 2x2 up-convolution sees one kernel tap
        return shape[0]
    return shape[1] * shape[2] * shape[3]


def build(config: UNetConfig, seed: int) -> NetworkParams:
    """He-initialised parameters (std sqrt(2 / fan_in)), zero biases."""
    rng = new_generator(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape, dtype=np.float32)
        else:
            std = np.sqrt(2.0 / _fan_in(name, shape))
            tensors[name] = rng.normal(0.0, std, size=shape).astype(np.float32)
    return NetworkParams(config, tensors)


class _ConvBlock:
    """conv3-relu-conv3-relu-dropout with a shared parameter prefix."""

    def __init__(self, prefix: str, cin: int, cout: int, dropout_p: float):
        self.prefix = prefix
        self.conv1 = Conv2d(cin, cout, name=f"{prefix}.conv1")
        self.relu1 = ReLU()
        self.conv2 = Conv2d(cout, cout, name=f"{prefix}.conv2")
        self.relu2 = ReLU()
        self.dropout = Dropout(dropout_p)

    def _p(self, params: Mapping[str, np.ndarray], conv: str) -> dict[str, np.ndarray]:
        return {"w": params[f"{self.prefix}.{conv}.w"], "b": params[f"{self.prefix}.{conv}.b"]}

    def forward(self, x: np.ndarray, params: Mapping[str, np.ndarray]) -> np.ndarray:
        x = self.relu1.forward(self.conv1.forward(x, self._p(params, "conv1")))
        x = self.relu2.forward(self.conv2.forward(x, self._p(params, "conv2")))
        return self.dropout.forward(x)

    def backward(self, dout: np.ndarray, grads: dict[str, np.ndarray]) -> np.ndarray:
        d, _ = self.dropout.backward(dout)
        d, _ = self.relu2.backward(d)
        d, g2 = self.conv2.backward(d)
        d, _ = self.relu1.backward(d)
        d, g1 = self.conv1.backward(d)
        for conv, g in (("conv1", g1), ("conv2", g2)):
            grads[f"{self.prefix}.{conv}.w"] = g["w"]
            grads[f"{self.prefix}.{conv}.b"] = g["b"]
        return d


class UNet:
    """Stateful evaluator for one parameter set; not shared across threads."""

    name = "unet"

    def __init__(self, config: UNetConfig):
        self.config = config
        p = config.dropout_p
        self.encoders: list[_ConvBlock] = []
        self.pools: list[MaxPool2] = []
        cin = config.in_channels
        for level in range(config.depth):
            self.encoders.append(_ConvBlock(f"enc{level}", cin, config.filters(level), p))
            self.pools.append(MaxPool2())
            cin = config.filters(level)
        self.bottleneck = _ConvBlock("bottleneck", cin, config.filters(config.depth), p)
        self.ups: dict[int, UpConv2] = {}
        self.concats: dict[int, ConcatChannels] = {}
        self.decoders: dict[int, _ConvBlock] = {}
        for level in reversed(range(config.depth)):
            f = config.filters(level)
            self.ups[level] = UpConv2(config.filters(level + 1), f, name=f"up{level}")
            self.concats[level] = ConcatChannels()
            self.decoders[level] = _ConvBlock(f"dec{level}", 2 * f, f, p)
        self.head = Conv2d(config.base_filters, 2, kernel=1, name="head")
        self.softmax = Softmax2()
        self.rng = new_generator(0)
        self.logits: np.ndarray | None = None

    def _dropouts(self) -> list[Dropout]:
        blocks = [*self.encoders, self.bottleneck, *self.decoders.values()]
        return [block.dropout for block in blocks]

    def reseed(self, seed: int) -> None:
        self.rng = new_generator(seed)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return param_shapes(self.config)

    def forward(
        self,
        x: np.ndarray,
        params: NetworkParams | Mapping[str, np.ndarray],
        mode: Mode = "eval",
        rng: np.random.Generator | None = None,
    ) -> np.ndarray:
        tensors = params.tensors if isinstance(params, NetworkParams) else params
        check_tensor4(x)
        if x.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"network expects {self.config.in_channels} channels, got {x.shape[1]}"
            )
        grid = self.config.grid
        if x.shape[2] % grid or x.shape[3] % grid:
            raise ShapeError(
                f"height/width {x.shape[2]}x{x.shape[3]} not divisible by {grid}; pad_to_grid first"
            )
        if rng is not None:
            self.rng = rng
        for dropout in self._dropouts():
            dropout.training = mode == "train"
            dropout.rng = self.rng

        skips: list[np.ndarray] = []
        for encoder, pool in zip(self.encoders, self.pools):
            x = encoder.forward(x, tensors)
            skips.append(x)
            x = pool.forward(x)
        x = self.bottleneck.forward(x, tensors)
        for level in reversed(range(self.config.depth)):
            x = self.ups[level].forward(x, {"w": tensors[f"up{level}.w"]})
            x = self.concats[level].forward((skips[level], x))
            x = self.decoders[level].forward(x, tensors)
        self.logits = self.head.forward(x, {"w": tensors["head.w"], "b": tensors["head.b"]})
        return self.softmax.forward(self.logits)

    def backward(
        self, dout: np.ndarray, *, from_logits: bool = False
    ) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        """Backpropagate ``dout`` (w.r.t. probabilities, or logits if ``from_logits``)."""
        grads: dict[str, np.ndarray] = {}
        d = dout if from_logits else self.softmax.backward(dout)[0]
        d, g = self.head.backward(d)
        grads["head.w"], grads["head.b"] = g["w"], g["b"]
        skip_grads: dict[int, np.ndarray] = {}
        for level in range(self.config.depth):
            d = self.decoders[level].backward(d, grads)
            (d_skip, d), _ = self.concats[level].backward(d)
            skip_grads[level] = d_skip
            d, g = self.ups[level].backward(d)
            grads[f"up{level}.w"] = g["w"]
        d = self.bottleneck.backward(d, grads)
        for level in reversed(range(self.config.depth)):
            d, _ = self.pools[level].backward(d)
            d = self.encoders[level].backward(d + skip_grads[level], grads)
        ordered = {name: grads[name] for name in param_shapes(self.config)}
        return d, ordered


def forward(
    params: NetworkParams,
    x: np.ndarray,
    mode: Mode = "eval",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Run one forward pass on a fresh evaluator; safe for concurrent callers."""
    return UNet(params.config).forward(x, params, mode=mode, rng=rng)


@dataclass(frozen=True)
class CropRecord:
    top: int = 0
    bottom: int = 0
    left: int = 0
    right: int = 0

    @property
    def is_empty(self) -> bool:
        return not (self.top or self.bottom or self.left or self.right)


def split_pad(size: int, grid: int) -> tuple[int, int]:
    """(low, high) zero padding that brings ``size`` up to a multiple of ``grid``."""
    total = -size % grid
    low = total // 2
    return low, total - low


def pad_to_grid(x: np.ndarray, depth: int) -> tuple[np.ndarray, CropRecord]:
    """Zero-pad H and W of a (B, C, H, W) batch up to multiples of 2**depth.

    The extra voxel of an odd pad goes to the high side.
    """
    grid = 2**depth
    top, bottom = split_pad(x.shape[-2], grid)
    left, right = split_pad(x.shape[-1], grid)
    record = CropRecord(top, bottom, left, right)
    if record.is_empty:
        return x, record
    widths = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]
    return np.pad(x, widths), record


def crop(x: np.ndarray, record: CropRecord) -> np.ndarray:
    """Invert ``pad_to_grid`` on the last two axes."""
    if record.is_empty:
        return x
    h, w = x.shape[-2], x.shape[-1]
    return x[..., record.top : h - record.bottom, record.left : w - record.right]
