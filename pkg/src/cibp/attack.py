"""Projected gradient descent under the l-inf ball."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .network import Network, forward
from .tensor import Tensor

__all__ = ["AttackConfig", "pgd_attack", "pgd_attack_batch", "pgd_error"]


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    iterations: int = 200
    restarts: int = 10
    step_size: float | None = None  # None -> epsilon / 8
    clamp: tuple | None = (0.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")
        if self.iterations < 1 or self.restarts < 1:
            raise ValueError("iterations and restarts must be >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive")

    @property
    def alpha(self) -> float:
        return self.epsilon / 8 if self.step_size is None else self.step_size


def _project(x_adv, x, eps, clamp):
    x_adv = np.clip(x_adv, x - eps, x + eps)
    if clamp is not None:
        x_adv = np.clip(x_adv, clamp[0], clamp[1])
    return x_adv


def _misclassified(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    rows = np.arange(len(y))
    others = logits.copy()
    others[rows, y] = -np.inf
    return logits[rows, y] <= others.max(axis=1)


def pgd_attack_batch(net: Network, x: np.ndarray, y: np.ndarray, cfg: AttackConfig, seed=None):
    """Untargeted sign-gradient PGD on a batch [N,C,H,W].

    Returns ``(x_adv, success)``.  For each example, ``x_adv`` is the first
    point found that is misclassified (ties count), or the last iterate of
    the last restart.
    """
    x = np.asarray(x, dtype=net.dtype)
    y = np.asarray(y, dtype=np.int64)
    eps = x.dtype.type(cfg.epsilon)
    alpha = x.dtype.type(cfg.alpha)
    with T.no_grad():
        found = _misclassified(forward(net, x).data, y)
    best = x.copy()
    if cfg.epsilon == 0:
        return best, found
    seed = [int(s) for s in np.atleast_1d(cfg.seed if seed is None else seed)]
    for restart in range(cfg.restarts):
        rng = np.random.default_rng([*seed, restart])
        active = ~found
        if not active.any():
            break
        xa = x[active]
        ya = y[active]
        noise = rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape).astype(x.dtype)[active]
        adv = _project(xa + noise, xa, eps, cfg.clamp)
        hit = np.zeros(len(ya), dtype=bool)
        hit_at = adv.copy()
        for _ in range(cfg.iterations):
            inp = Tensor(adv, requires_grad=True)
            logits = forward(net, inp)
            newly = _misclassified(logits.data, ya) & ~hit
            hit_at[newly] = adv[newly]
            hit |= newly
            if hit.all():
                break
            T.cross_entropy(logits, ya, reduction="sum").backward()
            step = adv + alpha * np.sign(inp.grad)
            adv = np.where(hit[:, None, None, None], adv, _project(step, xa, eps, cfg.clamp))
        else:
            with T.no_grad():
                newly = _misclassified(forward(net, adv).data, ya) & ~hit
            hit_at[newly] = adv[newly]
            hit |= newly
        idx = np.flatnonzero(active)
        best[idx] = np.where(hit[:, None, None, None], hit_at, adv)
        found[idx[hit]] = True
    return best, found


def pgd_attack(net: Network, x, y_true: int, cfg: AttackConfig):
    """Attack a single example [C,H,W]; returns ``(x_adv, success)``."""
    adv, ok = pgd_attack_batch(net, np.asarray(x)[None], np.array([y_true]), cfg)
    return adv[0], bool(ok[0])


def pgd_error(net: Network, dataset, cfg: AttackConfig, batch_size: int = 200) -> float:
    """Fraction of examples misclassified either as given or after the attack."""
    n = len(dataset.labels)
    wrong = 0
    for b, start in enumerate(range(0, n, batch_size)):
        sl = slice(start, min(start + batch_size, n))
        _, ok = pgd_attack_batch(net, dataset.images[sl], dataset.labels[sl], cfg, seed=[cfg.seed, b])
        wrong += int(ok.sum())
    return wrong / n
