"""Training schedule for one U-Net: weighted cross-entropy, decaying learning
rate and class weight, best-validation-Dice checkpoint selection.

Datasets are lists of ``(volume, mask)`` pairs where ``volume`` is a
(X, Y, Z, C) array (normalized peaks, or fusion probabilities) and ``mask``
a BinaryMask or a (X, Y, Z) 0/1 array. Slices are cut along the network's
plane, zero-padded to a common grid, and the loss ignores padded voxels.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal, Sequence

import numpy as np

from tract_stack.config import TrainConfig
from tract_stack.diffcore import new_generator
from tract_stack.errors import ConfigError, DegenerateDataset, DivergenceError, IoError, ShapeError
from tract_stack.metrics import dice
from tract_stack.optim import make_optimizer
from tract_stack.planes import SlicePlane, extract_slices, predict_axis_array
from tract_stack.unet import NetworkParams, UNet, UNetConfig, build, split_pad
from tract_stack.volume_io import BinaryMask, PeakVolume, ProbabilityVolume, save_nifti

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-7
NORM_EPS = 1e-8

Pair = tuple[np.ndarray, "BinaryMask | np.ndarray"]
ValMetric = Callable[[NetworkParams, int], float]
PredictionSink = Callable[[int, int, np.ndarray], None]


# --- preprocessing ---


def normalize(
    volume: PeakVolume | np.ndarray, mode: Literal["joint", "channel"] = "joint"
) -> PeakVolume | np.ndarray:
    """Per-volume z-score; ``joint`` pools all voxels and channels."""
    data = volume.data if isinstance(volume, PeakVolume) else np.asarray(volume)
    x = data.astype(np.float64)
    if mode == "joint":
        mean, std = x.mean(), x.std()
    elif mode == "channel":
        axes = tuple(range(x.ndim - 1))
        mean, std = x.mean(axis=axes), x.std(axis=axes)
    else:
        raise ConfigError(f"unknown normalization mode '{mode}'")
    out = ((x - mean) / np.maximum(std, NORM_EPS)).astype(np.float32)
    if isinstance(volume, PeakVolume):
        return PeakVolume(out, voxel_size_mm=volume.voxel_size_mm, affine=volume.affine)
    return out


def _mask_data(mask: BinaryMask | np.ndarray) -> np.ndarray:
    return mask.data if isinstance(mask, BinaryMask) else np.asarray(mask, dtype=np.uint8)


# --- class weighting and schedule ---


def initial_fg_weight(masks: Sequence[BinaryMask | np.ndarray]) -> float:
    """Inverse class frequency N_bg / N_fg over the whole training set, at least 1."""
    fg = sum(int(np.count_nonzero(_mask_data(m))) for m in masks)
    total = sum(int(_mask_data(m).size) for m in masks)
    if fg == 0:
        raise DegenerateDataset("training masks contain no foreground voxels")
    return max((total - fg) / fg, 1.0)


def class_weight_at(w0: float, epoch: int, total: int) -> float:
    if total == 1:
        return w0
    return 1.0 + (w0 - 1.0) * (total - 1 - epoch) / (total - 1)


def learning_rate_at(config: TrainConfig, epoch: int) -> float:
    return config.learning_rate * (1.0 - config.lr_decay_per_epoch) ** epoch


# --- loss ---


def _check_loss_shapes(probs: np.ndarray, target: np.ndarray, valid: np.ndarray | None) -> None:
    if probs.ndim != 4 or probs.shape[1] != 2:
        raise ShapeError(f"probs must be (B, 2, H, W), got {probs.shape}")
    expected = (probs.shape[0], 1, probs.shape[2], probs.shape[3])
    if target.shape != expected:
        raise ShapeError(f"target must be {expected}, got {target.shape}")
    if valid is not None and valid.shape != expected:
        raise ShapeError(f"valid mask must be {expected}, got {valid.shape}")


def _voxel_weights(target: np.ndarray, w_fg: float, valid: np.ndarray | None) -> tuple[np.ndarray, int]:
    fg = target[:, 0] > 0
    weights = np.where(fg, w_fg, 1.0)
    if valid is None:
        return weights, fg.size
    keep = valid[:, 0].astype(bool)
    return weights * keep, int(np.count_nonzero(keep))


def weighted_cross_entropy(
    probs: np.ndarray, target: np.ndarray, w_fg: float, valid: np.ndarray | None = None
) -> float:
    """Mean over voxels of -w(c) log p_c, with p clamped at 1e-7."""
    _check_loss_shapes(probs, target, valid)
    weights, count = _voxel_weights(target, w_fg, valid)
    if count == 0:
        return 0.0
    fg = target[:, 0] > 0
    p_true = np.where(fg, probs[:, 1], probs[:, 0]).astype(np.float64)
    losses = -weights * np.log(np.maximum(p_true, PROB_FLOOR))
    return float(losses.sum() / count)


def weighted_cross_entropy_grad(
    probs: np.ndarray, target: np.ndarray, w_fg: float, valid: np.ndarray | None = None
) -> np.ndarray:
    """Gradient of the loss with respect to the logits feeding softmax2."""
    _check_loss_shapes(probs, target, valid)
    weights, count = _voxel_weights(target, w_fg, valid)
    onehot = np.stack([target[:, 0] == 0, target[:, 0] > 0], axis=1).astype(probs.dtype)
    scale = (weights / max(count, 1)).astype(probs.dtype)[:, None]
    return (probs - onehot) * scale


# --- batching ---


def make_epoch_batches(n_items: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index batches covering every item once; the last may be short."""
    order = rng.permutation(n_items)
    return [order[i : i + batch_size] for i in range(0, n_items, batch_size)]


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return new_generator([seed, 2, epoch])


@dataclass(frozen=True, eq=False)
class SliceSet:
    """Slices of several volumes padded to one (H, W) grid."""

    inputs: np.ndarray  # (N, C, H, W) float32
    targets: np.ndarray  # (N, 1, H, W) uint8
    valid: np.ndarray  # (N, 1, H, W) bool

    def __len__(self) -> int:
        return self.inputs.shape[0]


def build_slice_set(pairs: Sequence[Pair], plane: SlicePlane | str, grid: int) -> SliceSet:
    """Cut and pad every volume's slices into one grid.

    Each volume's slices start at the low offset ``pad_to_grid`` gives them,
    so training and inference share one pooling alignment. Any extra room in
    the common grid goes to the high side.
    """
    plane = SlicePlane.parse(plane)
    cut = [
        (extract_slices(np.asarray(v, dtype=np.float32), plane), extract_slices(_mask_data(m), plane))
        for v, m in pairs
    ]
    height = max(s.shape[2] for s, _ in cut)
    width = max(s.shape[3] for s, _ in cut)
    height += -height % grid
    width += -width % grid
    n = sum(s.shape[0] for s, _ in cut)
    channels = cut[0][0].shape[1]
    inputs = np.zeros((n, channels, height, width), dtype=np.float32)
    targets = np.zeros((n, 1, height, width), dtype=np.uint8)
    valid = np.zeros((n, 1, height, width), dtype=bool)
    row = 0
    for slices, masks in cut:
        k, _, h, w = slices.shape
        top, _ = split_pad(h, grid)
        left, _ = split_pad(w, grid)
        rows, hs, ws = slice(row, row + k), slice(top, top + h), slice(left, left + w)
        inputs[rows, :, hs, ws] = slices
        targets[rows, 0, hs, ws] = masks
        valid[rows, 0, hs, ws] = True
        row += k
    return SliceSet(inputs, targets, valid)


# --- training loop ---


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_dice: float
    lr: float
    fg_weight: float

    def as_record(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val_dice": self.val_dice,
            "lr": self.lr,
            "fg_weight": self.fg_weight,
        }


@dataclass(eq=False)
class TrainResult:
    best: NetworkParams
    best_epoch: int
    best_dice: float
    history: list[EpochRecord] = field(default_factory=list)


def validation_dice(
    params: NetworkParams,
    val_set: Sequence[Pair],
    plane: SlicePlane | str,
    config: TrainConfig,
    *,
    epoch: int = 0,
    sink: PredictionSink | None = None,
) -> float:
    """Mean per-volume Dice of thresholded predictions.

    ``sink(epoch, index, probs)`` receives each validation prediction.
    """
    scores = []
    for index, (volume, mask) in enumerate(val_set):
        probs = predict_axis_array(params, np.asarray(volume), plane, config.batch_size_eval)
        if sink is not None:
            sink(epoch, index, probs)
        scores.append(dice(probs >= config.threshold, _mask_data(mask)))
    return float(np.mean(scores))


def val_prediction_path(directory: Path | str, epoch: int, index: int) -> Path:
    return Path(directory) / f"epoch_{epoch:03d}_val_{index}_prob.nii.gz"


def nifti_prediction_sink(directory: Path | str) -> PredictionSink:
    """A sink that saves every validation prediction under ``directory``."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {directory}: {exc}") from exc

    def sink(epoch: int, index: int, probs: np.ndarray) -> None:
        save_nifti(ProbabilityVolume(probs), val_prediction_path(directory, epoch, index))

    return sink


def train_network(
    net_config: UNetConfig,
    train_set: Sequence[Pair],
    val_set: Sequence[Pair],
    config: TrainConfig,
    *,
    plane: SlicePlane | str = SlicePlane.XY,
    seed: int | None = None,
    val_metric: ValMetric | None = None,
    val_sink: PredictionSink | None = None,
    label: str = "unet",
) -> TrainResult:
    """Train one network and return the parameters of its best validation epoch.

    ``val_metric(params, epoch)`` replaces the validation Dice when given.
    ``val_sink`` receives every validation prediction of every epoch.
    Ties in validation Dice keep the earliest epoch.
    """
    config.validate()
    if not train_set:
        raise DegenerateDataset("training set is empty")
    if not val_set and val_metric is None:
        raise DegenerateDataset("validation set is empty")
    plane = SlicePlane.parse(plane)
    seed = config.seed if seed is None else seed

    params = build(net_config, seed)
    data = build_slice_set(train_set, plane, net_config.grid)
    if data.inputs.shape[1] != net_config.in_channels:
        raise ShapeError(
            f"{label}: data has {data.inputs.shape[1]} channels, network expects {net_config.in_channels}"
        )
    w0 = initial_fg_weight([m for _, m in train_set])
    optimizer = make_optimizer(config.optimizer, config.adam_beta1, config.adam_beta2, config.adam_eps)
    net = UNet(net_config)
    net.reseed(seed + 1)
    log.info("%s: %d training slices, w0=%.3f, %d epochs", label, len(data), w0, config.epochs)

    best, best_epoch, best_dice = params.copy(), -1, -math.inf
    history: list[EpochRecord] = []
    for epoch in range(config.epochs):
        lr = learning_rate_at(config, epoch)
        w_fg = class_weight_at(w0, epoch, config.epochs)
        losses = []
        for b, idx in enumerate(make_epoch_batches(len(data), config.batch_size, epoch_rng(seed, epoch))):
            probs = net.forward(data.inputs[idx], params, mode="train")
            target, valid = data.targets[idx], data.valid[idx]
            loss = weighted_cross_entropy(probs, target, w_fg, valid)
            if not math.isfinite(loss):
                raise DivergenceError("non-finite training loss", epoch=epoch, batch=b, stage=label)
            dlogits = weighted_cross_entropy_grad(probs, target, w_fg, valid)
            _, grads = net.backward(dlogits, from_logits=True)
            optimizer.step(params.tensors, grads, lr)
            losses.append(loss)
            log.debug("%s epoch %d batch %d loss %.5f", label, epoch, b, loss)

        if val_metric is not None:
            val = float(val_metric(params, epoch))
        else:
            val = validation_dice(params, val_set, plane, config, epoch=epoch, sink=val_sink)
        record = EpochRecord(epoch, float(np.mean(losses)), val, lr, w_fg)
        history.append(record)
        log.info(
            "%s epoch %d: loss %.4f val_dice %.4f lr %.6f fg_weight %.3f",
            label, epoch, record.train_loss, val, lr, w_fg,
        )
        if val > best_dice:
            best, best_epoch, best_dice = params.copy(), epoch, val

    return TrainResult(best=best, best_epoch=best_epoch, best_dice=best_dice, history=history)
