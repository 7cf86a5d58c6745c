"""Seeded synthetic bundle phantoms (peak volume + reference mask).

A phantom is a tube of radius ``tube_radius_vox`` around a quarter-circle
arc. Inside the tube the first peak follows the arc tangent (plus Gaussian
noise, renormalised). A planar sheet of constant-direction peaks crosses
the tube at the arc midpoint: inside the tube it adds a second peak,
outside it replaces the first. Remaining background voxels carry a random
unit peak with probability ``distractor_density``.

Coordinates are voxel indices (x, y, z); voxel centres sit on integers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from tract_stack.diffcore import new_generator
from tract_stack.errors import SpecError
from tract_stack.volume_io import BinaryMask, PeakVolume

log = logging.getLogger(__name__)

ARC_SWEEP = np.pi / 2
DEFAULT_ARC_FRACTION = 0.55
_EXTENT_SAMPLES = 4096

# Difficulty groups, from thick well-separated bundles to thin ones.
BUNDLE_PRESETS: dict[str, dict[str, float]] = {
    "medium": {},
    "hard": {"tube_radius_vox": 2.2, "distractor_density": 0.4},
    "very_hard": {"tube_radius_vox": 1.5, "distractor_density": 0.5, "peak_noise_sigma": 0.1},
}


@dataclass(frozen=True)
class PhantomSpec:
    dim: int = 64
    tube_radius_vox: float = 3.0
    arc_radius: float | None = None
    center: tuple[float, float, float] | None = None
    normal: tuple[float, float, float] = (1.0, 1.0, 1.0)
    start_angle: float = 0.0
    peak_noise_sigma: float = 0.05
    distractor_density: float = 0.3
    crossing_sheet: bool = True
    sheet_thickness: float = 4.0
    voxel_size_mm: float = 1.0
    seed: int = 0

    def validate(self) -> "PhantomSpec":
        if self.dim < 4:
            raise SpecError(f"dim must be >= 4, got {self.dim}")
        if self.tube_radius_vox <= 0:
            raise SpecError(f"tube_radius_vox must be > 0, got {self.tube_radius_vox}")
        if self.arc_radius is not None and self.arc_radius <= 0:
            raise SpecError(f"arc_radius must be > 0, got {self.arc_radius}")
        if not 0.0 < self.distractor_density < 1.0:
            raise SpecError(
                f"distractor_density must be in (0, 1), got {self.distractor_density}"
            )
        if self.peak_noise_sigma < 0:
            raise SpecError("peak_noise_sigma must be >= 0")
        if self.sheet_thickness <= 0 or self.voxel_size_mm <= 0:
            raise SpecError("sheet_thickness and voxel_size_mm must be > 0")
        if len(self.normal) != 3 or np.linalg.norm(self.normal) == 0:
            raise SpecError(f"normal must be a nonzero 3-vector, got {self.normal}")
        return self


def bundle_spec(name: str, base: PhantomSpec | None = None) -> PhantomSpec:
    """Apply a difficulty preset from BUNDLE_PRESETS to ``base``."""
    if name not in BUNDLE_PRESETS:
        raise SpecError(f"unknown bundle preset '{name}'. Known: {sorted(BUNDLE_PRESETS)}")
    return replace(base or PhantomSpec(), **BUNDLE_PRESETS[name])


@dataclass(frozen=True, eq=False)
class ArcGeometry:
    center: np.ndarray
    radius: float
    u: np.ndarray
    v: np.ndarray
    normal: np.ndarray
    start: float
    sweep: float = ARC_SWEEP

    def point(self, theta: np.ndarray | float) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)[..., None]
        return self.center + self.radius * (np.cos(theta) * self.u + np.sin(theta) * self.v)

    def tangent(self, theta: np.ndarray | float) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)[..., None]
        return -np.sin(theta) * self.u + np.cos(theta) * self.v

    @property
    def mid_angle(self) -> float:
        return self.start + self.sweep / 2


def plane_basis(normal) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    ref = np.array([0.0, 0.0, 1.0]) if abs(n[2]) < 0.99 else np.array([1.0, 0.0, 0.0])
    u = np.cross(n, ref)
    u /= np.linalg.norm(u)
    return u, np.cross(n, u), n


def arc_geometry(spec: PhantomSpec) -> ArcGeometry:
    """Resolve defaults (radius, bounding-box-centred arc) and check containment."""
    spec.validate()
    radius = spec.arc_radius if spec.arc_radius is not None else DEFAULT_ARC_FRACTION * spec.dim
    u, v, n = plane_basis(spec.normal)
    origin_arc = ArcGeometry(np.zeros(3), radius, u, v, n, spec.start_angle)
    samples = origin_arc.point(np.linspace(spec.start_angle, spec.start_angle + ARC_SWEEP, _EXTENT_SAMPLES))
    if spec.center is None:
        mid = (samples.min(axis=0) + samples.max(axis=0)) / 2
        center = np.full(3, (spec.dim - 1) / 2) - mid
    else:
        center = np.asarray(spec.center, dtype=np.float64)
    geometry = ArcGeometry(center, radius, u, v, n, spec.start_angle)

    points = samples + center
    low = points.min(axis=0) - spec.tube_radius_vox
    high = points.max(axis=0) + spec.tube_radius_vox
    if np.any(low < 0) or np.any(high > spec.dim - 1):
        raise SpecError(
            f"tube leaves the {spec.dim}^3 grid (extent {low.round(2)} .. {high.round(2)})"
        )
    return geometry


def distance_to_arc(points: np.ndarray, geometry: ArcGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Distance of each (N, 3) point to the continuous arc and the nearest arc angle."""
    rel = points - geometry.center
    a = rel @ geometry.u
    b = rel @ geometry.v
    h = rel @ geometry.normal
    phi = np.arctan2(b, a)
    offset = np.mod(phi - geometry.start, 2 * np.pi)
    on_arc = offset <= geometry.sweep

    rho = np.hypot(a, b)
    dist = np.sqrt(h**2 + (rho - geometry.radius) ** 2)
    theta = geometry.start + offset

    ends = (geometry.start, geometry.start + geometry.sweep)
    d_start = np.linalg.norm(points - geometry.point(ends[0]), axis=1)
    d_end = np.linalg.norm(points - geometry.point(ends[1]), axis=1)
    end_theta = np.where(d_start <= d_end, ends[0], ends[1])
    end_dist = np.minimum(d_start, d_end)

    dist = np.where(on_arc, dist, end_dist)
    theta = np.where(on_arc, theta, end_theta)
    return dist, theta


def _unit(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    return vectors / np.where(norms == 0, 1.0, norms)


def generate(spec: PhantomSpec) -> tuple[PeakVolume, BinaryMask]:
    geometry = arc_geometry(spec)
    dim = spec.dim
    rng = new_generator(spec.seed)

    coords = np.indices((dim, dim, dim), dtype=np.float64).reshape(3, -1).T
    dist, theta = distance_to_arc(coords, geometry)
    inside = dist <= spec.tube_radius_vox

    n_vox = coords.shape[0]
    noise = rng.normal(0.0, spec.peak_noise_sigma, size=(n_vox, 3)) if spec.peak_noise_sigma else 0.0
    draw = rng.random(n_vox)
    random_dirs = _unit(rng.standard_normal((n_vox, 3)))

    peaks = np.zeros((n_vox, 9), dtype=np.float64)
    tangent = _unit(geometry.tangent(theta) + noise)
    peaks[inside, 0:3] = tangent[inside]

    distractor = ~inside & (draw < spec.distractor_density)
    if spec.crossing_sheet:
        mid = geometry.point(geometry.mid_angle)
        sheet_normal = geometry.tangent(geometry.mid_angle)
        in_sheet = np.abs((coords - mid) @ sheet_normal) <= spec.sheet_thickness / 2
        sheet_dir = geometry.normal
        peaks[inside & in_sheet, 3:6] = sheet_dir
        distractor &= ~in_sheet
        peaks[~inside & in_sheet, 0:3] = sheet_dir
    peaks[distractor, 0:3] = random_dirs[distractor]

    size = (spec.voxel_size_mm,) * 3
    volume = PeakVolume(peaks.reshape(dim, dim, dim, 9).astype(np.float32), voxel_size_mm=size)
    mask = BinaryMask(inside.reshape(dim, dim, dim).astype(np.uint8), voxel_size_mm=size)
    log.debug(
        "phantom seed=%d: %d foreground voxels (%.2f%%)",
        spec.seed,
        mask.count,
        100.0 * mask.count / inside.size,
    )
    return volume, mask


def subject_spec(base: PhantomSpec, index: int, seed: int) -> PhantomSpec:
    """Jittered spec of subject ``index``: seed+index drives both jitter and noise.

    Arc radius varies by +-10 %, tube radius by +-20 %, and the arc centre
    moves by up to 10 % of the arc radius along each axis.
    """
    subject_seed = seed + index
    rng = new_generator([subject_seed, 1])
    base_radius = base.arc_radius if base.arc_radius is not None else DEFAULT_ARC_FRACTION * base.dim
    radius = base_radius * rng.uniform(0.9, 1.1)
    tube = base.tube_radius_vox * rng.uniform(0.8, 1.2)
    shift = rng.uniform(-0.1, 0.1, size=3) * radius
    centred = arc_geometry(replace(base, arc_radius=radius, tube_radius_vox=tube, center=None))
    center = tuple(float(c) for c in centred.center + shift)
    return replace(base, arc_radius=radius, tube_radius_vox=tube, center=center, seed=subject_seed)


def generate_dataset(n: int, base: PhantomSpec, seed: int) -> list[tuple[PeakVolume, BinaryMask]]:
    if n < 1:
        raise SpecError(f"need at least one phantom, got n={n}")
    return [generate(subject_spec(base, i, seed)) for i in range(n)]


def is_connected(mask: BinaryMask | np.ndarray) -> bool:
    """True when the foreground forms a single 26-connected component."""
    data = mask.data if isinstance(mask, BinaryMask) else np.asarray(mask)
    _, components = ndimage.label(data, structure=np.ones((3, 3, 3), dtype=bool))
    return components == 1


def downsample(
    peaks: PeakVolume, mask: BinaryMask, factor: int
) -> tuple[PeakVolume, BinaryMask]:
    """Coarser-acquisition variant: block-averaged peaks, majority-vote mask."""
    if factor < 1:
        raise SpecError(f"downsample factor must be >= 1, got {factor}")
    if any(n % factor for n in peaks.dims):
        raise SpecError(f"dims {peaks.dims} not divisible by factor {factor}")
    if factor == 1:
        return peaks, mask
    x, y, z = (n // factor for n in peaks.dims)
    blocks = peaks.data.astype(np.float64).reshape(x, factor, y, factor, z, factor, 3, 3)
    summed = blocks.sum(axis=(1, 3, 5))
    coarse = _unit(summed).reshape(x, y, z, 9).astype(np.float32)
    votes = mask.data.reshape(x, factor, y, factor, z, factor).mean(axis=(1, 3, 5))

    scale = np.diag([factor, factor, factor, 1.0])
    affine = peaks.affine @ scale
    affine[:3, 3] = peaks.affine[:3, :3] @ np.full(3, (factor - 1) / 2) + peaks.affine[:3, 3]
    size = tuple(s * factor for s in peaks.voxel_size_mm)
    return (
        PeakVolume(coarse, voxel_size_mm=size, affine=affine),
        BinaryMask((votes >= 0.5).astype(np.uint8), voxel_size_mm=size, affine=affine),
    )
