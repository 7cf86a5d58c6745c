"""NIfTI-1 reading/writing and the volumetric types shared by every module.

Volumes are immutable once constructed: ``data`` is stored as a read-only
array, so they can be handed to concurrent readers without copying.
Indexing is always ``(x, y, z[, c])``; nibabel takes care of NIfTI's
Fortran on-disk order and of ``scl_slope``/``scl_inter``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Union

import nibabel as nib
import numpy as np
from nibabel.filebasedimages import ImageFileError
from nibabel.openers import ImageOpener

from tract_stack.errors import (
    ChannelCountError,
    CorruptData,
    FormatError,
    IoError,
    ShapeError,
    UnsupportedDatatype,
)

log = logging.getLogger(__name__)

PEAK_CHANNELS = 9
HEADER_SIZE = 348
NIFTI1_MAGIC = b"n+1\x00"

DT_UINT8 = 2
DT_INT16 = 4
DT_FLOAT32 = 16
SUPPORTED_DATATYPES = {DT_UINT8, DT_INT16, DT_FLOAT32}

VolumeKind = Literal["peaks", "mask", "probability"]


def _voxel_size(values) -> tuple[float, float, float]:
    size = tuple(float(np.float32(v)) for v in values)
    if len(size) != 3 or any(v <= 0 for v in size):
        raise ShapeError(f"voxel size must be 3 positive values, got {values!r}")
    return size  # type: ignore[return-value]


def _default_affine(voxel_size: tuple[float, float, float]) -> np.ndarray:
    return np.diag([*voxel_size, 1.0])


def _freeze(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class _Volume:
    data: np.ndarray
    voxel_size_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray | None = field(default=None)

    def _init_common(self) -> None:
        voxel_size = _voxel_size(self.voxel_size_mm)
        object.__setattr__(self, "voxel_size_mm", voxel_size)
        affine = self.affine if self.affine is not None else _default_affine(voxel_size)
        affine = np.array(affine, dtype=np.float64)
        if affine.shape != (4, 4):
            raise ShapeError(f"affine must be 4x4, got {affine.shape}")
        object.__setattr__(self, "affine", _freeze(affine))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape[:3])  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class PeakVolume(_Volume):
    """Three principal fiber directions per voxel, shape (X, Y, Z, 9)."""

    def __post_init__(self) -> None:
        data = np.array(self.data, dtype=np.float32)
        if data.ndim != 4 or min(data.shape[:3], default=0) < 1:
            raise ShapeError(f"peak volume must be (X,Y,Z,9), got {data.shape}")
        if data.shape[3] != PEAK_CHANNELS:
            raise ChannelCountError(
                f"peak volume needs {PEAK_CHANNELS} channels, got {data.shape[3]}"
            )
        if not np.all(np.isfinite(data)):
            raise CorruptData("peak volume contains NaN or Inf")
        object.__setattr__(self, "data", _freeze(data))
        self._init_common()

    def peak(self, index: int) -> np.ndarray:
        """Peak vectors ``index`` in {0, 1, 2} as an (X, Y, Z, 3) view."""
        return self.data[..., 3 * index : 3 * index + 3]


@dataclass(frozen=True, eq=False)
class BinaryMask(_Volume):
    """Reference or predicted bundle segmentation with values in {0, 1}."""

    def __post_init__(self) -> None:
        raw = np.asarray(self.data)
        if raw.ndim != 3 or min(raw.shape, default=0) < 1:
            raise ShapeError(f"mask must be 3D, got {raw.shape}")
        if not np.all(np.isin(raw, (0, 1))):
            raise CorruptData("mask values must be exactly 0 or 1")
        object.__setattr__(self, "data", _freeze(raw.astype(np.uint8)))
        self._init_common()

    @property
    def count(self) -> int:
        return int(self.data.sum(dtype=np.int64))


@dataclass(frozen=True, eq=False)
class ProbabilityVolume(_Volume):
    """Per-voxel foreground probability in [0, 1]."""

    def __post_init__(self) -> None:
        data = np.array(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape, default=0) < 1:
            raise ShapeError(f"probability volume must be 3D, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise CorruptData("probability volume contains NaN or Inf")
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise CorruptData("probabilities must lie in [0, 1]")
        object.__setattr__(self, "data", _freeze(data))
        self._init_common()

    def threshold(self, level: float = 0.5) -> BinaryMask:
        return BinaryMask(
            (self.data >= level).astype(np.uint8),
            voxel_size_mm=self.voxel_size_mm,
            affine=self.affine,
        )


Volume = Union[PeakVolume, BinaryMask, ProbabilityVolume]


def read_header(path: Path | str) -> nib.Nifti1Header:
    """Parse and validate the 348-byte NIfTI-1 header of ``path``."""
    path = Path(path)
    try:
        with ImageOpener(str(path), "rb") as fobj:
            raw = fobj.read(HEADER_SIZE)
    except FileNotFoundError as exc:
        raise IoError(f"no such file: {path}") from exc
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    if raw[344:348] != NIFTI1_MAGIC:
        raise FormatError(f"{path}: not a single-file NIfTI-1 image (magic {raw[344:348]!r})")
    header = nib.Nifti1Header(binaryblock=raw, check=False)
    datatype = int(header["datatype"])
    if datatype not in SUPPORTED_DATATYPES:
        raise UnsupportedDatatype(f"{path}: datatype code {datatype} is not supported")
    ndim = int(header["dim"][0])
    if ndim not in (3, 4):
        raise FormatError(f"{path}: dim[0] must be 3 or 4, got {ndim}")
    return header


def _resolve_kind(kind: VolumeKind | None, ndim: int, datatype: int) -> VolumeKind:
    if kind is not None:
        return kind
    if ndim == 4:
        return "peaks"
    return "mask" if datatype in (DT_UINT8, DT_INT16) else "probability"


def load_nifti(path: Path | str, kind: VolumeKind | None = None) -> Volume:
    """Load a NIfTI-1 file as a PeakVolume, BinaryMask or ProbabilityVolume.

    Without ``kind`` the type follows the file: 4D is a peak volume, integer
    3D a mask, float 3D a probability volume. Integer and float masks are
    binarised as "nonzero is foreground".
    """
    path = Path(path)
    header = read_header(path)
    datatype = int(header["datatype"])
    try:
        image = nib.load(str(path))
        data = np.asanyarray(image.dataobj)
    except (ImageFileError, ValueError, EOFError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc

    if not np.all(np.isfinite(data)):
        raise CorruptData(f"{path}: volume contains NaN or Inf")

    resolved = _resolve_kind(kind, data.ndim, datatype)
    voxel_size = tuple(image.header.get_zooms()[:3])
    affine = image.affine
    log.debug("loaded %s as %s, shape %s, datatype %d", path, resolved, data.shape, datatype)

    if resolved == "peaks":
        if data.ndim != 4:
            raise ChannelCountError(f"{path}: peak volume must be 4D, got {data.ndim}D")
        if data.shape[3] != PEAK_CHANNELS:
            raise ChannelCountError(
                f"{path}: peak volume needs {PEAK_CHANNELS} channels, got {data.shape[3]}"
            )
        return PeakVolume(data.astype(np.float32), voxel_size, affine)

    if data.ndim != 3:
        raise FormatError(f"{path}: expected a 3D volume for {resolved}, got {data.ndim}D")
    if resolved == "mask":
        return BinaryMask((data != 0).astype(np.uint8), voxel_size, affine)
    try:
        return ProbabilityVolume(data.astype(np.float32), voxel_size, affine)
    except CorruptData as exc:
        raise CorruptData(f"{path}: {exc}") from exc


def save_nifti(volume: Volume, path: Path | str) -> None:
    """Write ``volume`` as NIfTI-1 (float32 for peaks/probabilities, uint8 masks)."""
    path = Path(path)
    if isinstance(volume, BinaryMask):
        data, dtype = np.asarray(volume.data, dtype=np.uint8), np.uint8
    else:
        data, dtype = np.asarray(volume.data, dtype=np.float32), np.float32

    image = nib.Nifti1Image(data, volume.affine)
    image.header.set_data_dtype(dtype)
    zooms = tuple(volume.voxel_size_mm) + ((1.0,) if data.ndim == 4 else ())
    image.header.set_zooms(zooms)
    try:
        nib.save(image, str(path))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    log.debug("saved %s (%s)", path, type(volume).__name__)
