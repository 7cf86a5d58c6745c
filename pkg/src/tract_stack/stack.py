"""Stacked model: three axis networks plus a fusion network.

Each axis network sees 9-channel peak slices from one plane. Their
foreground probabilities, reassembled into volumes, form a 3-channel fusion
volume (channel order XY, YZ, ZX) that a fourth network segments slice-wise
along the XY plane.

On disk a stacked model is a directory::

    xy.ckpt  yz.ckpt  zx.ckpt  fusion.ckpt  manifest.json

A plain (single-axis) model is one checkpoint file plus a ``<ckpt>.json``
sidecar recording its plane.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from tract_stack.checkpoint import FORMAT_VERSION, atomic_write_bytes, load_params, save_params
from tract_stack.config import TrainConfig, config_hash
from tract_stack.errors import DivergenceError, FormatError, IoError, ShapeError
from tract_stack.manifest import load_manifest, save_manifest
from tract_stack.planes import SlicePlane, predict_axis_array
from tract_stack.train import EpochRecord, PredictionSink, nifti_prediction_sink, normalize, train_network
from tract_stack.unet import NetworkParams, preset_config
from tract_stack.volume_io import BinaryMask, PeakVolume, ProbabilityVolume

log = logging.getLogger(__name__)

FUSION_PLANE = SlicePlane.XY
FUSION_NAME = "fusion"
PLANES = tuple(SlicePlane)


@dataclass(frozen=True, eq=False)
class FusionVolume:
    """Per-axis foreground probabilities, shape (X, Y, Z, 3)."""

    data: np.ndarray

    def __post_init__(self) -> None:
        data = np.array(self.data, dtype=np.float32)
        if data.ndim != 4 or data.shape[3] != len(PLANES):
            raise ShapeError(f"fusion volume must be (X,Y,Z,3), got {data.shape}")
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise ShapeError("fusion probabilities must lie in [0, 1]")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape[:3])  # type: ignore[return-value]


def _prob_data(p: ProbabilityVolume | np.ndarray) -> np.ndarray:
    return p.data if isinstance(p, ProbabilityVolume) else np.asarray(p, dtype=np.float32)


def build_fusion_input(p_xy, p_yz, p_zx) -> FusionVolume:
    channels = [_prob_data(p) for p in (p_xy, p_yz, p_zx)]
    if len({c.shape for c in channels}) != 1:
        raise ShapeError(f"axis predictions differ in dims: {[c.shape for c in channels]}")
    return FusionVolume(np.stack(channels, axis=-1))


@dataclass(frozen=True, eq=False)
class StackedModel:
    axis_params: dict[SlicePlane, NetworkParams]
    fusion_params: NetworkParams
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if set(self.axis_params) != set(PLANES):
            raise ShapeError("a stacked model needs exactly one network per plane")
        shapes = {(p.config.depth, p.config.base_filters) for p in self.axis_params.values()}
        shapes.add((self.fusion_params.config.depth, self.fusion_params.config.base_filters))
        if len(shapes) != 1:
            raise ShapeError(f"all four networks must share depth and width, got {sorted(shapes)}")
        if any(p.config.in_channels != 9 for p in self.axis_params.values()):
            raise ShapeError("axis networks must take 9 input channels")
        if self.fusion_params.config.in_channels != len(PLANES):
            raise ShapeError("fusion network must take exactly 3 input channels")

    @property
    def normalization(self) -> str:
        return self.metadata.get("normalization", "joint")


@dataclass(eq=False)
class StackedTraining:
    model: StackedModel
    histories: dict[str, list[EpochRecord]]


# --- inference ---


def axis_probabilities(
    axis_params: dict[SlicePlane, NetworkParams],
    data: np.ndarray,
    *,
    batch_size: int = 8,
    threads: int = 1,
) -> FusionVolume:
    """Run the three axis networks on a normalized (X, Y, Z, 9) array."""

    def run(plane: SlicePlane) -> np.ndarray:
        return predict_axis_array(axis_params[plane], data, plane, batch_size)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=min(threads, len(PLANES))) as pool:
            probs = list(pool.map(run, PLANES))
    else:
        probs = [run(plane) for plane in PLANES]
    return build_fusion_input(*probs)


def fusion_probabilities(
    params: NetworkParams, fusion: FusionVolume, batch_size: int = 8
) -> np.ndarray:
    return predict_axis_array(params, fusion.data, FUSION_PLANE, batch_size)


def predict_stacked(
    model: StackedModel,
    volume: PeakVolume,
    *,
    threshold: float = 0.5,
    batch_size: int = 8,
    threads: int = 1,
) -> tuple[ProbabilityVolume, BinaryMask]:
    normalized = normalize(volume, model.normalization)
    fusion = axis_probabilities(
        model.axis_params, normalized.data, batch_size=batch_size, threads=threads
    )
    probs = np.clip(fusion_probabilities(model.fusion_params, fusion, batch_size), 0.0, 1.0)
    prob_volume = ProbabilityVolume(probs, voxel_size_mm=volume.voxel_size_mm, affine=volume.affine)
    return prob_volume, prob_volume.threshold(threshold)


def predict_plain(
    params: NetworkParams,
    volume: PeakVolume,
    plane: SlicePlane | str,
    *,
    normalization: str = "joint",
    threshold: float = 0.5,
    batch_size: int = 8,
) -> tuple[ProbabilityVolume, BinaryMask]:
    normalized = normalize(volume, normalization)
    probs = predict_axis_array(params, normalized.data, plane, batch_size)
    prob_volume = ProbabilityVolume(probs, voxel_size_mm=volume.voxel_size_mm, affine=volume.affine)
    return prob_volume, prob_volume.threshold(threshold)


# --- training ---


def _normalized_pairs(pairs, mode: str) -> list[tuple[np.ndarray, BinaryMask]]:
    return [(normalize(volume, mode).data, mask) for volume, mask in pairs]


def _sink(val_prediction_dir: Path | str | None, name: str) -> PredictionSink | None:
    if val_prediction_dir is None:
        return None
    return nifti_prediction_sink(Path(val_prediction_dir) / name)


def train_plain(
    train_pairs: Sequence[tuple[PeakVolume, BinaryMask]],
    val_pairs: Sequence[tuple[PeakVolume, BinaryMask]],
    config: TrainConfig,
    plane: SlicePlane | str,
    *,
    val_prediction_dir: Path | str | None = None,
):
    """Single-axis baseline; the network seed is seed + plane index.

    With ``val_prediction_dir`` every epoch's validation predictions are
    saved under ``<dir>/<plane>/``.
    """
    plane = SlicePlane.parse(plane)
    net_config = preset_config(config.preset, 9, config.dropout_p)
    return train_network(
        net_config,
        _normalized_pairs(train_pairs, config.normalization),
        _normalized_pairs(val_pairs, config.normalization),
        config,
        plane=plane,
        seed=config.seed + plane.index,
        val_sink=_sink(val_prediction_dir, plane.value),
        label=f"plain/{plane.value}",
    )


def train_stacked(
    train_pairs: Sequence[tuple[PeakVolume, BinaryMask]],
    val_pairs: Sequence[tuple[PeakVolume, BinaryMask]],
    config: TrainConfig,
    *,
    bundle: str = "bundle",
    threads: int = 1,
    val_prediction_dir: Path | str | None = None,
) -> StackedTraining:
    config.validate()
    train_data = _normalized_pairs(train_pairs, config.normalization)
    val_data = _normalized_pairs(val_pairs, config.normalization)
    axis_config = preset_config(config.preset, 9, config.dropout_p)

    def stage1(plane: SlicePlane):
        log.info("stage 1: training %s network", plane.value)
        try:
            return train_network(
                axis_config, train_data, val_data, config,
                plane=plane, seed=config.seed + plane.index, label=plane.value,
                val_sink=_sink(val_prediction_dir, plane.value),
            )
        except DivergenceError as exc:
            raise exc.with_stage("stage1") from exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=min(threads, len(PLANES))) as pool:
            results = dict(zip(PLANES, pool.map(stage1, PLANES)))
    else:
        results = {plane: stage1(plane) for plane in PLANES}
    axis_params = {plane: result.best for plane, result in results.items()}

    log.info("stage 2: computing fusion inputs")
    batch = config.batch_size_eval

    def fused(pairs):
        return [
            (axis_probabilities(axis_params, volume, batch_size=batch, threads=threads).data, mask)
            for volume, mask in pairs
        ]

    fusion_config = preset_config(config.preset, len(PLANES), config.dropout_p)
    try:
        fusion_result = train_network(
            fusion_config, fused(train_data), fused(val_data), config,
            plane=FUSION_PLANE, seed=config.seed + len(PLANES), label=FUSION_NAME,
            val_sink=_sink(val_prediction_dir, FUSION_NAME),
        )
    except DivergenceError as exc:
        raise exc.with_stage("stage2") from exc

    selected = {plane.value: results[plane].best_epoch for plane in PLANES}
    selected[FUSION_NAME] = fusion_result.best_epoch
    metadata = {
        "bundle": bundle,
        "preset": config.preset,
        "normalization": config.normalization,
        "config_hash": config_hash(config),
        "train_config": asdict(config),
        "selected_epochs": selected,
        "best_val_dice": {
            **{plane.value: results[plane].best_dice for plane in PLANES},
            FUSION_NAME: fusion_result.best_dice,
        },
    }
    histories = {plane.value: results[plane].history for plane in PLANES}
    histories[FUSION_NAME] = fusion_result.history
    model = StackedModel(axis_params, fusion_result.best, metadata)
    return StackedTraining(model, histories)


# --- persistence ---


def save_stacked(model: StackedModel, model_dir: Path | str) -> Path:
    model_dir = Path(model_dir)
    for plane, params in model.axis_params.items():
        save_params(params, model_dir / f"{plane.value}.ckpt")
    save_params(model.fusion_params, model_dir / f"{FUSION_NAME}.ckpt")
    save_manifest(model_dir, {"kind": "stacked", "format_version": FORMAT_VERSION, **model.metadata})
    return model_dir


def load_stacked(model_dir: Path | str) -> StackedModel:
    model_dir = Path(model_dir)
    if not model_dir.is_dir():
        raise IoError(f"model directory not found: {model_dir}")
    manifest = load_manifest(model_dir, required=True)
    if manifest.get("kind") != "stacked":
        raise FormatError(f"{model_dir}: not a stacked model manifest")
    axis_params = {plane: load_params(model_dir / f"{plane.value}.ckpt") for plane in PLANES}
    fusion = load_params(model_dir / f"{FUSION_NAME}.ckpt")
    metadata = {k: v for k, v in manifest.items() if k not in ("kind", "format_version")}
    return StackedModel(axis_params, fusion, metadata)


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_plain(params: NetworkParams, path: Path | str, plane: SlicePlane | str, **metadata) -> Path:
    path = Path(path)
    save_params(params, path)
    sidecar = {"kind": "plain", "plane": SlicePlane.parse(plane).value, **metadata}
    atomic_write_bytes(_sidecar(path), (json.dumps(sidecar, indent=2) + "\n").encode("utf-8"))
    return path


def load_plain(path: Path | str) -> tuple[NetworkParams, dict]:
    path = Path(path)
    params = load_params(path)
    sidecar = _sidecar(path)
    try:
        metadata = json.loads(sidecar.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise IoError(f"plain checkpoint has no sidecar: {sidecar}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{sidecar}: invalid JSON: {exc}") from exc
    metadata["plane"] = SlicePlane.parse(metadata.get("plane", "")).value
    return params, metadata
