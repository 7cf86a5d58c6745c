"""Slicing planes: volume <-> 2D slice stacks, and slice-wise inference.

Volumes are indexed (x, y, z[, c]). Slice stacks are arrays indexed by
slice first: (N, C, H, W) for 4D volumes, (N, H, W) for 3D ones.

    XY  slices indexed by z, each (C, X, Y)
    YZ  slices indexed by x, each (C, Y, Z)
    ZX  slices indexed by y, each (C, Z, X)
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from tract_stack.errors import ConfigError, ShapeError
from tract_stack.unet import NetworkParams, UNet, crop, pad_to_grid
from tract_stack.volume_io import PeakVolume, ProbabilityVolume


class SlicePlane(str, Enum):
    XY = "xy"
    YZ = "yz"
    ZX = "zx"

    @property
    def index(self) -> int:
        return list(SlicePlane).index(self)

    @classmethod
    def parse(cls, value: "str | SlicePlane") -> "SlicePlane":
        try:
            return cls(str(getattr(value, "value", value)).lower())
        except ValueError:
            raise ConfigError(
                f"unknown plane '{value}'. Known: {', '.join(p.value for p in cls)}"
            ) from None


# (slice axis, height axis, width axis[, channel axis]) permutations.
_PERM_4D = {
    SlicePlane.XY: (2, 3, 0, 1),
    SlicePlane.YZ: (0, 3, 1, 2),
    SlicePlane.ZX: (1, 3, 2, 0),
}
_PERM_3D = {
    SlicePlane.XY: (2, 0, 1),
    SlicePlane.YZ: (0, 1, 2),
    SlicePlane.ZX: (1, 2, 0),
}


def _perm(ndim: int, plane: SlicePlane) -> tuple[int, ...]:
    if ndim == 4:
        return _PERM_4D[plane]
    if ndim == 3:
        return _PERM_3D[plane]
    raise ShapeError(f"expected a 3D or 4D volume, got {ndim} dimensions")


def extract_slices(volume: np.ndarray, plane: SlicePlane | str) -> np.ndarray:
    plane = SlicePlane.parse(plane)
    volume = np.asarray(volume)
    return np.ascontiguousarray(volume.transpose(_perm(volume.ndim, plane)))


def slice_count(dims: tuple[int, ...], plane: SlicePlane | str) -> int:
    plane = SlicePlane.parse(plane)
    return dims[_PERM_3D[plane][0]]


def reassemble(slices, plane: SlicePlane | str, dims: tuple[int, ...]) -> np.ndarray:
    """Exact inverse of ``extract_slices`` for a volume of shape ``dims``."""
    plane = SlicePlane.parse(plane)
    if isinstance(slices, (list, tuple)):
        if not slices:
            raise ShapeError("no slices to reassemble")
        slices = np.stack(slices)
    slices = np.asarray(slices)
    dims = tuple(int(d) for d in dims)
    perm = _perm(len(dims), plane)
    expected = tuple(dims[p] for p in perm)
    if slices.shape != expected:
        raise ShapeError(
            f"{plane.value} slices of shape {slices.shape} do not fit dims {dims} "
            f"(expected {expected})"
        )
    return np.ascontiguousarray(slices.transpose(np.argsort(perm)))


def predict_axis_array(
    params: NetworkParams,
    data: np.ndarray,
    plane: SlicePlane | str,
    batch_size: int = 8,
) -> np.ndarray:
    """Foreground probability (X, Y, Z) of a (X, Y, Z, C) array, slice by slice."""
    plane = SlicePlane.parse(plane)
    if data.ndim != 4:
        raise ShapeError(f"expected a (X, Y, Z, C) volume, got shape {data.shape}")
    if data.shape[-1] != params.config.in_channels:
        raise ShapeError(
            f"network expects {params.config.in_channels} channels, volume has {data.shape[-1]}"
        )
    slices = extract_slices(data.astype(np.float32, copy=False), plane)
    net = UNet(params.config)
    out = np.empty((slices.shape[0], slices.shape[2], slices.shape[3]), dtype=np.float32)
    for start in range(0, slices.shape[0], batch_size):
        batch, record = pad_to_grid(slices[start : start + batch_size], params.config.depth)
        probs = net.forward(batch, params, mode="eval")
        out[start : start + batch_size] = crop(probs[:, 1], record)
    return reassemble(np.clip(out, 0.0, 1.0), plane, data.shape[:3])


def predict_axis(
    params: NetworkParams,
    volume: PeakVolume,
    plane: SlicePlane | str,
    batch_size: int = 8,
) -> ProbabilityVolume:
    probs = predict_axis_array(params, volume.data, plane, batch_size)
    return ProbabilityVolume(probs, voxel_size_mm=volume.voxel_size_mm, affine=volume.affine)
