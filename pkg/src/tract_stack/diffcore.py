"""Differentiable layers for the 2D U-Net.

Every layer follows the same contract: ``forward(x, params)`` caches what it
needs and returns the output, ``backward(dout)`` returns
``(input_gradient, LayerGrads)`` for the most recent forward call. Tensors
are plain ``numpy`` arrays laid out as (batch, channels, height, width).
Computation happens in the dtype of the input, so float32 is used for
training and float64 for gradient verification.

Random numbers come from numpy's counter-based Philox bit generator
(``new_generator``), which makes dropout masks reproducible for a seed
across platforms.
"""

from __future__ import annotations

from typing import Mapping, Protocol, Union, runtime_checkable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from tract_stack.errors import ConfigError, ShapeError

Params = Mapping[str, np.ndarray]
LayerGrads = dict[str, np.ndarray]
Inputs = Union[np.ndarray, tuple[np.ndarray, ...]]


def new_generator(seed: int | np.ndarray | list[int]) -> np.random.Generator:
    """Philox-backed generator; the only RNG used for weights and dropout."""
    return np.random.Generator(np.random.Philox(seed))


def check_tensor4(x: np.ndarray, name: str = "input") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be (B, C, H, W), got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: {x.shape}")


@runtime_checkable
class Layer(Protocol):
    name: str

    def param_shapes(self) -> dict[str, tuple[int, ...]]: ...

    def forward(self, x: Inputs, params: Params) -> np.ndarray: ...

    def backward(self, dout: np.ndarray) -> tuple[Inputs, LayerGrads]: ...


def _windows(x: np.ndarray, size: int, pad: int) -> np.ndarray:
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    return sliding_window_view(x, (size, size), axis=(2, 3))


class Conv2d:
    """Stride-1 convolution with "same" zero padding (odd kernel sizes)."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3, name: str = "conv2d"):
        if kernel % 2 != 1:
            raise ConfigError(f"kernel size must be odd, got {kernel}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.pad = kernel // 2
        self.name = name
        self._cols: np.ndarray | None = None
        self._w: np.ndarray | None = None

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        k = self.kernel
        return {"w": (self.out_channels, self.in_channels, k, k), "b": (self.out_channels,)}

    def forward(self, x: np.ndarray, params: Params) -> np.ndarray:
        check_tensor4(x)
        w, b = params["w"], params["b"]
        if x.shape[1] != w.shape[1] or w.shape[1] != self.in_channels:
            raise ShapeError(
                f"{self.name}: input has {x.shape[1]} channels, weights expect {w.shape[1]}"
            )
        cols = _windows(x, self.kernel, self.pad)
        out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))
        out = out.transpose(0, 3, 1, 2) + b[None, :, None, None]
        self._cols, self._w = cols, w
        return np.ascontiguousarray(out, dtype=x.dtype)

    def backward(self, dout: np.ndarray) -> tuple[np.ndarray, LayerGrads]:
        cols, w = self._cols, self._w
        db = dout.sum(axis=(0, 2, 3))
        dw = np.tensordot(dout, cols, axes=([0, 2, 3], [0, 2, 3]))
        dcols = _windows(dout, self.kernel, self.kernel - 1 - self.pad)
        flipped = w[:, :, ::-1, ::-1]
        dx = np.tensordot(dcols, flipped, axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
        return (
            np.ascontiguousarray(dx, dtype=dout.dtype),
            {"w": dw.astype(w.dtype, copy=False), "b": db.astype(w.dtype, copy=False)},
        )


class ReLU:
    name = "relu"

    def __init__(self) -> None:
        self._mask: np.ndarray | None = None

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {}

    def forward(self, x: np.ndarray, params: Params | None = None) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, x.dtype.type(0))

    def backward(self, dout: np.ndarray) -> tuple[np.ndarray, LayerGrads]:
        return np.where(self._mask, dout, dout.dtype.type(0)), {}


def maxpool2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 max pooling returning the output and the per-window argmax (0..3).

    Window positions are numbered row-major, so ties resolve to the lowest
    flat index.
    """
    check_tensor4(x)
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even height and width, got {h}x{w}")
    blocks = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(b, c, h // 2, w // 2, 4)
    indices = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, indices[..., None], axis=-1)[..., 0]
    return out, indices


class MaxPool2:
    name = "maxpool2"

    def __init__(self) -> None:
        self._indices: np.ndarray | None = None
        self._shape: tuple[int, ...] = ()

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {}

    def forward(self, x: np.ndarray, params: Params | None = None) -> np.ndarray:
        out, self._indices = maxpool2(x)
        self._shape = x.shape
        return out

    def backward(self, dout: np.ndarray) -> tuple[np.ndarray, LayerGrads]:
        b, c, h, w = self._shape
        blocks = np.zeros((b, c, h // 2, w // 2, 4), dtype=dout.dtype)
        np.put_along_axis(blocks, self._indices[..., None], dout[..., None], axis=-1)
        dx = blocks.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return dx.reshape(b, c, h, w), {}


class UpConv2:
    """Transposed 2x2 convolution with stride 2 (exact doubling, no bias)."""

    def __init__(self, in_channels: int, out_channels: int, name: str = "upconv2"):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.name = name
        self._x: np.ndarray | None = None
        self._w: np.ndarray | None = None

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {"w": (self.in_channels, self.out_channels, 2, 2)}

    def forward(self, x: np.ndarray, params: Params) -> np.ndarray:
        check_tensor4(x)
        w = params["w"]
        if x.shape[1] != w.shape[0]:
            raise ShapeError(
                f"{self.name}: input has {x.shape[1]} channels, weights expect {w.shape[0]}"
            )
        b, _, h, width = x.shape
        out = np.tensordot(x, w, axes=([1], [0]))  # (B, H, W, Cout, 2, 2)
        out = out.transpose(0, 3, 1, 4, 2, 5).reshape(b, w.shape[1], 2 * h, 2 * width)
        self._x, self._w = x, w
        return np.ascontiguousarray(out, dtype=x.dtype)

    def backward(self, dout: np.ndarray) -> tuple[np.ndarray, LayerGrads]:
        x, w = self._x, self._w
        b, _, h, width = x.shape
        blocks = dout.reshape(b, w.shape[1], h, 2, width, 2)
        dx = np.tensordot(blocks, w, axes=([1, 3, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        dw = np.tensordot(x, blocks, axes=([0, 2, 3], [0, 2, 4]))
        return np.ascontiguousarray(dx, dtype=dout.dtype), {"w": dw.astype(w.dtype, copy=False)}


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError(f"concat needs two 4D tensors, got {a.shape} and {b.shape}")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"concat spatial mismatch: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=1)


class ConcatChannels:
    """Channels of the first input followed by the second (U-Net skips)."""

    name = "concat_channels"

    def __init__(self) -> None:
        self._split = 0

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {}

    def forward(self, x: tuple[np.ndarray, np.ndarray], params: Params | None = None) -> np.ndarray:
        a, b = x
        out = concat_channels(a, b)
        self._split = a.shape[1]
        return out

    def backward(self, dout: np.ndarray) -> tuple[tuple[np.ndarray, np.ndarray], LayerGrads]:
        return (dout[:, : self._split], dout[:, self._split :]), {}


class Dropout:
    """Inverted dropout: survivors are scaled by 1/(1-p) at train time."""

    name = "dropout"

    def __init__(self, p: float, rng: np.random.Generator | None = None):
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self.training = False
        self.rng = rng if rng is not None else new_generator(0)
        self._scale_mask: np.ndarray | None = None

    def reseed(self, seed: int) -> None:
        self.rng = new_generator(seed)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {}

    def forward(self, x: np.ndarray, params: Params | None = None) -> np.ndarray:
        if not self.training or self.p == 0.0:
            self._scale_mask = None
            return x
        keep = self.rng.random(x.shape) >= self.p
        self._scale_mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - self.p))
        return x * self._scale_mask

    def backward(self, dout: np.ndarray) -> tuple[np.ndarray, LayerGrads]:
        if self._scale_mask is None:
            return dout, {}
        return dout * self._scale_mask, {}


def softmax2(x: np.ndarray) -> np.ndarray:
    """Per-pixel softmax over the (background, bundle) channel pair."""
    check_tensor4(x)
    if x.shape[1] != 2:
        raise ShapeError(f"softmax2 needs exactly 2 channels, got {x.shape[1]}")
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


class Softmax2:
    name = "softmax2"

    def __init__(self) -> None:
        self._out: np.ndarray | None = None

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {}

    def forward(self, x: np.ndarray, params: Params | None = None) -> np.ndarray:
        self._out = softmax2(x)
        return self._out

    def backward(self, dout: np.ndarray) -> tuple[np.ndarray, LayerGrads]:
        s = self._out
        return s * (dout - (dout * s).sum(axis=1, keepdims=True)), {}
