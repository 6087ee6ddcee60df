"""Interval bound propagation through affine and monotone layers.

Boxes are carried as ``IntervalTensor`` (lower/upper).  Affine maps go
through the center/radius form internally: the center moves through the
layer, the radius through the elementwise absolute value of the weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

__all__ = [
    "ACTIVATIONS",
    "CenterRadius",
    "IntervalTensor",
    "input_interval",
    "interval_widths",
    "propagate_affine",
    "propagate_channel_affine",
    "propagate_conv2d",
    "propagate_monotonic",
    "propagate_reshape",
    "rotation_45",
    "wrapping_demo",
]


@dataclass(frozen=True)
class IntervalTensor:
    lower: Tensor
    upper: Tensor

    def __post_init__(self):
        if self.lower.shape != self.upper.shape:
            raise ShapeError(f"interval bounds disagree: {self.lower.shape} vs {self.upper.shape}")

    @property
    def shape(self) -> tuple:
        return self.lower.shape

    @classmethod
    def point(cls, x) -> "IntervalTensor":
        x = x if isinstance(x, Tensor) else Tensor(x)
        return cls(x, x)

    def to_center_radius(self) -> "CenterRadius":
        mu = T.scale(T.add(self.upper, self.lower), 0.5)
        r = T.scale(T.sub(self.upper, self.lower), 0.5)
        return CenterRadius(mu, r)

    def contains(self, values, slack: float = 0.0) -> bool:
        v = values.data if isinstance(values, Tensor) else np.asarray(values)
        return bool(np.all(v >= self.lower.data - slack) and np.all(v <= self.upper.data + slack))


@dataclass(frozen=True)
class CenterRadius:
    mu: Tensor
    r: Tensor

    def to_interval(self) -> IntervalTensor:
        return IntervalTensor(T.sub(self.mu, self.r), T.add(self.mu, self.r))


def input_interval(x, epsilon: float, clamp: tuple[float, float] | None = (0.0, 1.0)) -> IntervalTensor:
    """The l-inf box of radius ``epsilon`` around ``x``, optionally clipped to ``clamp``."""
    if epsilon < 0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon}")
    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(T.get_default_dtype())
    eps = x.dtype.type(epsilon)
    lo, hi = x - eps, x + eps
    if clamp is not None:
        lo = np.maximum(lo, x.dtype.type(clamp[0]))
        hi = np.minimum(hi, x.dtype.type(clamp[1]))
    return IntervalTensor(Tensor(lo), Tensor(hi))


def propagate_affine(z: IntervalTensor, weight: Tensor, bias: Tensor | None = None) -> IntervalTensor:
    """Tightest box around ``{W v + b : v in z}``."""
    cr = z.to_center_radius()
    mu = T.linear(cr.mu, weight, bias)
    r = T.linear(cr.r, T.abs(weight))
    return CenterRadius(mu, r).to_interval()


def propagate_conv2d(
    z: IntervalTensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0
) -> IntervalTensor:
    cr = z.to_center_radius()
    mu = T.conv2d(cr.mu, kernel, bias, stride, padding)
    r = T.conv2d(cr.r, T.abs(kernel), None, stride, padding)
    return CenterRadius(mu, r).to_interval()


def propagate_channel_affine(z: IntervalTensor, scale, shift) -> IntervalTensor:
    """Fixed per-channel affine map; requires positive scales so bounds keep their order."""
    if np.any(np.asarray(scale) <= 0):
        raise ValueError("channel scales must be positive")
    return IntervalTensor(T.channel_affine(z.lower, scale, shift), T.channel_affine(z.upper, scale, shift))


def propagate_reshape(z: IntervalTensor, shape) -> IntervalTensor:
    return IntervalTensor(T.reshape(z.lower, shape), T.reshape(z.upper, shape))


# monotone nondecreasing elementwise maps; extend by registering more
ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": T.relu,
    "sigmoid": T.sigmoid,
}


def propagate_monotonic(z: IntervalTensor, activation: str) -> IntervalTensor:
    try:
        h = ACTIVATIONS[activation]
    except KeyError:
        raise ValueError(
            f"unknown activation {activation!r}; registered: {sorted(ACTIVATIONS)}"
        ) from None
    return IntervalTensor(h(z.lower), h(z.upper))


def interval_widths(z: IntervalTensor) -> Tensor:
    return T.sub(z.upper, z.lower)


def rotation_45(dtype=np.float64) -> np.ndarray:
    c = 1.0 / math.sqrt(2.0)
    return np.array([[c, -c], [c, c]], dtype=dtype)


def wrapping_demo(steps: int) -> list[float]:
    """Half-width of the box after each of ``steps`` 45-degree rotations of the unit box.

    The true reachable set is always a rotated unit square, while the box
    around it grows by sqrt(2) per step.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    w = Tensor(rotation_45(), dtype=np.float64)
    b = Tensor(np.zeros(2), dtype=np.float64)
    z = IntervalTensor(Tensor(-np.ones(2)), Tensor(np.ones(2)))
    out = []
    for _ in range(steps):
        z = propagate_affine(z, w, b)
        out.append(float(z.to_center_radius().r.data[0]))
    return out
