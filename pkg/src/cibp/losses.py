"""Training objectives and error metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .interval import IntervalTensor, input_interval, interval_widths
from .network import AFFINE_KINDS, LayerBounds, Network, forward, forward_interval
from .tensor import Tensor

__all__ = [
    "LossBreakdown",
    "constrained_ibp_loss",
    "ibp_loss",
    "interval_metrics",
    "nominal_error",
    "softmax_cross_entropy",
    "verified_error",
    "width_penalty",
    "worst_case_logits",
]


@dataclass
class LossBreakdown:
    nominal_ce: float
    robust_ce: float
    width_penalty: float
    total: float
    kappa: float
    epsilon: float = float("nan")
    lam: float = 0.0
    # differentiable total; None once detached
    loss: Tensor | None = None

    def as_dict(self) -> dict:
        return {
            "nominal_ce": self.nominal_ce,
            "robust_ce": self.robust_ce,
            "width_penalty": self.width_penalty,
            "total": self.total,
            "kappa": self.kappa,
            "epsilon": self.epsilon,
        }


def softmax_cross_entropy(logits, y_true) -> Tensor:
    """Mean cross-entropy; ``logits`` is [N] with an int label or [batch, N] with a label array."""
    return T.cross_entropy(logits, y_true)


def _onehot(y, n: int, shape) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if np.any(y < 0) or np.any(y >= n):
        raise IndexError(f"class index out of range [0, {n})")
    mask = np.zeros((y.size, n), dtype=bool)
    mask[np.arange(y.size), y] = True
    return mask.reshape(shape)


def worst_case_logits(logit_interval: IntervalTensor, y_true) -> Tensor:
    """Lower bound for the true class, upper bound for every other class."""
    shape = logit_interval.shape
    mask = _onehot(y_true, shape[-1], shape)
    return T.select(mask, logit_interval.lower, logit_interval.upper)


def _check_kappa(kappa: float) -> None:
    if not 0.0 <= kappa <= 1.0:
        raise ValueError(f"kappa must lie in [0, 1], got {kappa}")


def ibp_loss(logits: Tensor, logit_interval: IntervalTensor, y_true, kappa: float, epsilon=float("nan")) -> LossBreakdown:
    _check_kappa(kappa)
    nominal = T.cross_entropy(logits, y_true)
    robust = T.cross_entropy(worst_case_logits(logit_interval, y_true), y_true)
    total = T.add(T.scale(nominal, kappa), T.scale(robust, 1.0 - kappa))
    return LossBreakdown(
        nominal_ce=float(nominal.data),
        robust_ce=float(robust.data),
        width_penalty=0.0,
        total=float(total.data),
        kappa=kappa,
        epsilon=epsilon,
        loss=total,
    )


def _penalised(layers: list[LayerBounds], include_output: bool) -> list[LayerBounds]:
    chosen = [lb for lb in layers if lb.kind in AFFINE_KINDS]
    if not include_output:
        chosen = chosen[:-1]
    return chosen


def width_penalty(
    layers: list[LayerBounds], reduction: str = "mean", include_output: bool = True
) -> Tensor:
    """Sum over affine layers of the squared box widths, averaged over the batch.

    ``reduction="mean"`` averages the squared widths within each layer;
    ``"sum"`` adds them up (the literal squared norm).
    """
    if reduction not in ("mean", "sum"):
        raise ValueError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
    total = None
    for lb in _penalised(layers, include_output):
        w2 = T.square(interval_widths(lb.bounds))
        batched = w2.ndim == (4 if lb.kind == "conv" else 2)
        flat = T.reshape(w2, (w2.shape[0], -1) if batched else (-1,))
        per = T.mean(flat, axis=-1) if reduction == "mean" else T.sum(flat, axis=-1)
        term = T.mean(per) if batched else per
        total = term if total is None else T.add(total, term)
    if total is None:
        return Tensor(np.zeros((), dtype=T.get_default_dtype()))
    return total


def constrained_ibp_loss(
    logits: Tensor,
    layers: list[LayerBounds],
    y_true,
    kappa: float,
    lam: float = 1.0,
    reduction: str = "mean",
    include_output: bool = True,
    epsilon=float("nan"),
) -> LossBreakdown:
    """IBP objective plus ``lam`` times the per-layer interval-width penalty."""
    if lam < 0:
        raise ValueError(f"penalty weight must be non-negative, got {lam}")
    base = ibp_loss(logits, layers[-1].bounds, y_true, kappa, epsilon)
    penalty = width_penalty(layers, reduction, include_output)
    total = base.loss if lam == 0 else T.add(base.loss, T.scale(penalty, lam))
    return LossBreakdown(
        nominal_ce=base.nominal_ce,
        robust_ce=base.robust_ce,
        width_penalty=float(penalty.data),
        total=float(total.data),
        kappa=kappa,
        epsilon=epsilon,
        lam=lam,
        loss=total,
    )


def _batches(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield slice(start, min(start + batch_size, n))


def nominal_error(net: Network, dataset, batch_size: int = 500) -> float:
    """Fraction misclassified; a tie for the maximum logit counts as an error."""
    wrong = 0
    with T.no_grad():
        for sl in _batches(len(dataset.labels), batch_size):
            z = forward(net, dataset.images[sl]).data
            wrong += int(np.sum(~_strict_argmax_is(z, dataset.labels[sl])))
    return wrong / len(dataset.labels)


def _strict_argmax_is(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    rows = np.arange(len(y))
    true = z[rows, y]
    others = z.copy()
    others[rows, y] = -np.inf
    return true > others.max(axis=1)


def interval_metrics(
    net: Network,
    dataset,
    epsilon: float,
    clamp=(0.0, 1.0),
    batch_size: int = 500,
    reduction: str = "mean",
    include_output: bool = True,
) -> dict:
    """Nominal error, verified error and mean width penalty over ``dataset`` at radius ``epsilon``."""
    if epsilon < 0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon}")
    n = len(dataset.labels)
    wrong = unverified = 0
    width_sum = 0.0
    with T.no_grad():
        for sl in _batches(n, batch_size):
            x, y = dataset.images[sl], dataset.labels[sl]
            z = forward(net, x).data
            nominal_ok = _strict_argmax_is(z, y)
            layers, logits = forward_interval(net, input_interval(x, epsilon, clamp))
            worst = worst_case_logits(logits, y).data
            # a certified example is also nominally correct; the conjunction only guards rounding
            verified_ok = _strict_argmax_is(worst, y) & nominal_ok
            wrong += int(np.sum(~nominal_ok))
            unverified += int(np.sum(~verified_ok))
            width_sum += float(width_penalty(layers, reduction, include_output).data) * len(y)
    return {"nominal_error": wrong / n, "verified_error": unverified / n, "width_sum": width_sum / n}


def verified_error(net: Network, dataset, epsilon: float, clamp=(0.0, 1.0), batch_size: int = 500) -> float:
    """Fraction of examples whose whole input box is not provably classified correctly."""
    return interval_metrics(net, dataset, epsilon, clamp, batch_size)["verified_error"]
