"""Finite-difference verification of every differentiable op and the U-Net.

Checks run in float64. The scalar objective is ``sum(R * layer(x))`` for a
seeded projection tensor ``R`` (a plain sum would be constant under softmax).
Relative error per element is ``|a - n| / max(|a|, |n|, 1e-8)``; an op's
score is the maximum over all inputs and parameters and over all its shapes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from tract_stack.diffcore import (
    ConcatChannels,
    Conv2d,
    Dropout,
    MaxPool2,
    ReLU,
    Softmax2,
    UpConv2,
    new_generator,
    softmax2,
)
from tract_stack.train import weighted_cross_entropy, weighted_cross_entropy_grad
from tract_stack.unet import UNet, UNetConfig, build

log = logging.getLogger(__name__)

OP_THRESHOLD = 1e-3
NET_THRESHOLD = 5e-3
OP_EPS = 1e-3
NET_EPS = 1e-5

Shape = tuple[int, ...]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _numeric_grad(objective: Callable[[], float], array: np.ndarray, eps: float) -> np.ndarray:
    flat = array.reshape(-1)
    grad = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        plus = objective()
        flat[i] = orig - eps
        minus = objective()
        flat[i] = orig
        grad[i] = (plus - minus) / (2 * eps)
    return grad.reshape(array.shape)


def grad_check(
    layer,
    inputs: np.ndarray | tuple[np.ndarray, ...],
    params: dict[str, np.ndarray] | None = None,
    *,
    eps: float = OP_EPS,
    seed: int = 0,
    projection: np.ndarray | None = None,
) -> float:
    """Max relative error between backward() and central differences.

    ``inputs`` and ``params`` are modified in place during the check and
    restored afterwards; pass float64 arrays. Layers with ``reseed`` are
    reseeded before every forward so random masks stay fixed.
    """
    params = params if params is not None else {}
    args = inputs if isinstance(inputs, tuple) else (inputs,)
    reseed = getattr(layer, "reseed", None)

    def run() -> np.ndarray:
        if reseed is not None:
            reseed(seed)
        return layer.forward(inputs, params)

    out = run()
    if projection is None:
        projection = new_generator([seed, 99]).standard_normal(out.shape)

    def objective() -> float:
        return float(np.sum(projection * run()))

    objective()
    dx, grads = layer.backward(projection)
    analytic_inputs = dx if isinstance(dx, tuple) else (dx,)

    worst = 0.0
    for x, analytic in zip(args, analytic_inputs):
        worst = max(worst, relative_error(analytic, _numeric_grad(objective, x, eps)))
    for name, tensor in params.items():
        worst = max(worst, relative_error(grads[name], _numeric_grad(objective, tensor, eps)))
    return worst


# --- suite ---


@dataclass(frozen=True)
class CheckResult:
    op: str
    max_rel_error: float
    threshold: float
    shapes: tuple[Shape, ...]

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error < self.threshold

    def as_record(self) -> dict:
        return {
            "op": self.op,
            "max_rel_error": self.max_rel_error,
            "threshold": self.threshold,
            "shapes": [list(s) for s in self.shapes],
            "passed": self.passed,
        }


def _params64(layer, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {k: rng.standard_normal(s) for k, s in layer.param_shapes().items()}


def _away_from_zero(shape: Shape, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(0.1, 1.0, shape) * rng.choice([-1.0, 1.0], size=shape)


def _distinct(shape: Shape, rng: np.random.Generator) -> np.ndarray:
    # spacing well above eps keeps the argmax stable under perturbation
    return rng.permutation(int(np.prod(shape))).reshape(shape) * 0.1


def _two_class_projection(shape: Shape, rng: np.random.Generator) -> np.ndarray:
    magnitude = rng.uniform(0.5, 1.5, (shape[0], 1, *shape[2:]))
    return np.concatenate([-magnitude, magnitude], axis=1)


class _SoftmaxCrossEntropy:
    """softmax2 followed by the weighted loss, as one scalar-valued layer."""

    name = "softmax_cross_entropy"

    def __init__(self, target: np.ndarray, w_fg: float):
        self.target = target
        self.w_fg = w_fg
        self._probs: np.ndarray | None = None

    def forward(self, x, params=None):
        self._probs = softmax2(x)
        return np.array([weighted_cross_entropy(self._probs, self.target, self.w_fg)])

    def backward(self, dout):
        return float(dout[0]) * weighted_cross_entropy_grad(self._probs, self.target, self.w_fg), {}


def _check_op(name: str, shapes: Sequence, make: Callable, threshold: float, eps: float, seed: int) -> CheckResult:
    worst = 0.0
    for i, shape in enumerate(shapes):
        rng = new_generator([seed, i])
        layer, inputs, params, projection = make(shape, rng)
        err = grad_check(layer, inputs, params, eps=eps, seed=seed + i, projection=projection)
        log.debug("gradcheck %s %s: %.3e", name, shape, err)
        worst = max(worst, err) if np.isfinite(err) else float("inf")
    return CheckResult(name, worst, threshold, tuple(tuple(s) for s in shapes))


def _make_conv(spec, rng):
    shape, cout, k = spec[0], spec[1], spec[2]
    layer = Conv2d(shape[1], cout, kernel=k)
    return layer, rng.standard_normal(shape), _params64(layer, rng), None


def _make_relu(shape, rng):
    return ReLU(), _away_from_zero(shape, rng), {}, None


def _make_maxpool(shape, rng):
    return MaxPool2(), _distinct(shape, rng), {}, None


def _make_upconv(spec, rng):
    shape, cout = spec
    layer = UpConv2(shape[1], cout)
    return layer, rng.standard_normal(shape), _params64(layer, rng), None


def _make_concat(spec, rng):
    a, b = spec
    return ConcatChannels(), (rng.standard_normal(a), rng.standard_normal(b)), {}, None


def _make_dropout(shape, rng):
    layer = Dropout(0.4)
    layer.training = True
    return layer, rng.standard_normal(shape), {}, None


def _make_softmax(shape, rng):
    return Softmax2(), rng.standard_normal(shape), {}, _two_class_projection(shape, rng)


def _make_ce(shape, rng):
    target = (rng.random((shape[0], 1, *shape[2:])) < 0.3).astype(np.float64)
    return _SoftmaxCrossEntropy(target, 10.0), rng.standard_normal(shape), {}, None


def _make_net(depth: int):
    def make(shape, rng):
        config = UNetConfig(in_channels=shape[1], depth=depth, base_filters=2)
        params = build(config, int(rng.integers(0, 2**31)))
        tensors = {k: v.astype(np.float64) for k, v in params.tensors.items()}
        for key in tensors:
            if key.endswith(".b"):
                tensors[key] = rng.normal(0.0, 0.1, tensors[key].shape)
        out_shape = (shape[0], 2, *shape[2:])
        return UNet(config), rng.standard_normal(shape), tensors, _two_class_projection(out_shape, rng)

    return make


def run_suite(seed: int = 7) -> list[CheckResult]:
    """One result per op, each over at least three shapes."""
    checks = [
        ("conv2d", [((1, 2, 3, 3), 2, 3), ((2, 3, 4, 5), 2, 3), ((1, 2, 4, 4), 3, 1)], _make_conv),
        ("relu", [(1, 2, 3, 3), (2, 1, 4, 5), (1, 3, 2, 2)], _make_relu),
        ("maxpool2", [(1, 1, 4, 4), (2, 2, 2, 4), (1, 3, 4, 6)], _make_maxpool),
        ("upconv2", [((1, 2, 2, 2), 3), ((2, 1, 3, 2), 2), ((1, 3, 1, 1), 1)], _make_upconv),
        (
            "concat_channels",
            [((1, 2, 2, 2), (1, 3, 2, 2)), ((2, 1, 3, 4), (2, 1, 3, 4)), ((1, 0, 2, 2), (1, 2, 2, 2))],
            _make_concat,
        ),
        ("dropout", [(1, 2, 3, 3), (2, 3, 4, 4), (1, 1, 5, 2)], _make_dropout),
        ("softmax2", [(1, 2, 3, 3), (2, 2, 4, 4), (1, 2, 1, 5)], _make_softmax),
        ("softmax_cross_entropy", [(2, 2, 4, 4), (1, 2, 3, 5), (3, 2, 2, 2)], _make_ce),
    ]
    results = [
        _check_op(name, shapes, make, OP_THRESHOLD, OP_EPS, seed) for name, shapes, make in checks
    ]
    results.append(
        _check_op("unet_depth1", [(1, 2, 4, 4), (2, 2, 4, 4), (1, 3, 2, 6)], _make_net(1), OP_THRESHOLD, NET_EPS, seed)
    )
    results.append(
        _check_op("unet_depth2", [(1, 2, 4, 4), (1, 2, 8, 4), (2, 1, 4, 4)], _make_net(2), NET_THRESHOLD, NET_EPS, seed)
    )
    return results
