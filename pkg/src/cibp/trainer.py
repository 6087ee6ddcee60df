"""Training loop with epsilon/kappa ramps, optimizers, metrics and checkpoints."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .attack import AttackConfig, pgd_error
from .data import Dataset, augment
from .interval import input_interval
from .losses import LossBreakdown, constrained_ibp_loss, ibp_loss, interval_metrics
from .network import CheckpointError, Network, forward, forward_interval, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

__all__ = [
    "METRICS_HEADER",
    "Adam",
    "EpochMetrics",
    "FAST_RAMP_FACTOR",
    "NumericError",
    "SGD",
    "Schedule",
    "TrainConfig",
    "TrainResult",
    "batch_order",
    "cifar_config",
    "evaluate",
    "mnist_config",
    "mnist_desk_config",
    "mnist_fast_config",
    "read_metrics",
    "schedule_value",
    "train",
]

METRICS_HEADER = (
    "epoch,epsilon,kappa,train_total,train_nominal_ce,train_robust_ce,"
    "train_width_penalty,test_error,verified_test_error,width_sum,wall_time_s"
).split(",")


class NumericError(RuntimeError):
    """The training loss became NaN or infinite."""


@dataclass(frozen=True)
class Schedule:
    start_value: float
    end_value: float
    warmup_epochs: float = 0
    ramp_epochs: float = 0

    def value(self, epoch: float) -> float:
        return schedule_value(self, epoch)

    def faster(self, factor: float) -> "Schedule":
        """Same endpoints, ramp shortened by ``factor``."""
        return replace(self, ramp_epochs=self.ramp_epochs / factor)


def schedule_value(s: Schedule, epoch: float, epoch_fraction: float = 0.0) -> float:
    """Constant ``start_value`` through warmup, linear over the ramp, then ``end_value``."""
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    t = epoch + epoch_fraction - s.warmup_epochs
    if t <= 0:
        return s.start_value
    if s.ramp_epochs <= 0 or t >= s.ramp_epochs:
        return s.end_value
    return s.start_value + (s.end_value - s.start_value) * (t / s.ramp_epochs)


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "constrained-ibp"
    lam: float = 1.0
    penalty_reduction: str = "mean"
    penalty_include_output: bool = True
    epsilon: float = 0.4
    eval_epsilon: float | None = None  # None -> same as epsilon
    warmup_epochs: float = 3
    ramp_epochs: float = 15
    kappa_start: float = 1.0
    kappa_end: float = 0.5
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    lr_milestones: tuple = ()
    lr_decay: float = 0.1
    epochs: int = 25
    batch_size: int = 100
    seed: int = 0
    augmentation: bool = False
    clamp: tuple | None = (0.0, 1.0)
    checkpoint_every: int = 0
    eval_batch_size: int = 500

    def __post_init__(self):
        if self.loss not in ("ibp", "constrained-ibp"):
            raise ValueError(f"loss must be 'ibp' or 'constrained-ibp', got {self.loss!r}")
        if self.epsilon < 0 or (self.eval_epsilon is not None and self.eval_epsilon < 0):
            raise ValueError("epsilon must be non-negative")
        if not (0.5 <= self.kappa_end <= 1 and 0.5 <= self.kappa_start <= 1):
            raise ValueError("kappa must stay within [1/2, 1]")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        object.__setattr__(self, "lr_milestones", tuple(int(m) for m in self.lr_milestones))
        if self.clamp is not None:
            object.__setattr__(self, "clamp", tuple(float(c) for c in self.clamp))

    @property
    def eps_schedule(self) -> Schedule:
        return Schedule(0.0, self.epsilon, self.warmup_epochs, self.ramp_epochs)

    @property
    def kappa_schedule(self) -> Schedule:
        return Schedule(self.kappa_start, self.kappa_end, self.warmup_epochs, self.ramp_epochs)

    @property
    def test_epsilon(self) -> float:
        return self.epsilon if self.eval_epsilon is None else self.eval_epsilon

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        d["clamp"] = None if self.clamp is None else list(self.clamp)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        d = {k: v for k, v in d.items() if k in names}
        if d.get("clamp") is not None:
            d["clamp"] = tuple(d["clamp"])
        if "lr_milestones" in d:
            d["lr_milestones"] = tuple(d["lr_milestones"])
        return cls(**d)


def mnist_config(**overrides) -> TrainConfig:
    """Warmup 3 epochs, 15-epoch ramp, Adam 1e-3, decays late in training."""
    epochs = overrides.get("epochs", 25)
    base = dict(epsilon=0.4, warmup_epochs=3, ramp_epochs=15, epochs=epochs,
                lr_milestones=(int(epochs * 0.6), int(epochs * 0.8)))
    base.update(overrides)
    return TrainConfig(**base)


FAST_RAMP_FACTOR = 2.5


def mnist_fast_config(**overrides) -> TrainConfig:
    """The stress schedule: the MNIST preset with its epsilon/kappa ramp 2.5 times shorter."""
    cfg = mnist_config(**overrides)
    ramp = overrides.get("ramp_epochs", cfg.ramp_epochs)
    return replace(cfg, ramp_epochs=ramp / FAST_RAMP_FACTOR)


# lambda and learning-rate schedule for 25 epochs on a few thousand digits: the
# ramp is only a few hundred steps long, larger lambda collapses the network to
# a constant predictor, and decaying the rate freezes it before it converges
DESK_OVERRIDES = dict(lam=1e-3, lr_milestones=())


def mnist_desk_config(**overrides) -> TrainConfig:
    """The fast-ramp MNIST preset tuned for a short single-core run."""
    return mnist_fast_config(**{**DESK_OVERRIDES, **overrides})


def cifar_config(**overrides) -> TrainConfig:
    epochs = overrides.get("epochs", 350)
    base = dict(epsilon=8 / 255, warmup_epochs=10, ramp_epochs=150, epochs=epochs, augmentation=True,
                lr_milestones=(int(epochs * 0.7), int(epochs * 0.85)))
    base.update(overrides)
    return TrainConfig(**base)


# -- optimizers --------------------------------------------------------------


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1 - b1**self.step_count
        c2 = 1 - b2**self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype)

    def state(self) -> dict:
        st = {"step": np.array([self.step_count], dtype=np.float32)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            st[f"adam.m{i}"] = m
            st[f"adam.v{i}"] = v
        return st

    def load_state(self, st: dict) -> None:
        self.step_count = int(st["step"][0])
        for i in range(len(self.params)):
            self.m[i] = np.array(st[f"adam.m{i}"], dtype=self.params[i].dtype)
            self.v[i] = np.array(st[f"adam.v{i}"], dtype=self.params[i].dtype)


class SGD:
    def __init__(self, params, lr=1e-2, momentum=0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.step_count = 0
        self.buf = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        for p, b in zip(self.params, self.buf):
            if p.grad is None:
                continue
            b *= self.momentum
            b += p.grad
            p.data = (p.data - self.lr * b).astype(p.dtype)

    def state(self) -> dict:
        st = {"step": np.array([self.step_count], dtype=np.float32)}
        for i, b in enumerate(self.buf):
            st[f"sgd.buf{i}"] = b
        return st

    def load_state(self, st: dict) -> None:
        self.step_count = int(st["step"][0])
        for i in range(len(self.params)):
            self.buf[i] = np.array(st[f"sgd.buf{i}"], dtype=self.params[i].dtype)


def _make_optimizer(net: Network, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        return Adam(net.parameters(), lr=cfg.lr)
    return SGD(net.parameters(), lr=cfg.lr, momentum=cfg.momentum)


def _lr_at(cfg: TrainConfig, epoch: int) -> float:
    return cfg.lr * cfg.lr_decay ** sum(epoch >= m for m in cfg.lr_milestones)


# -- training ----------------------------------------------------------------


@dataclass
class EpochMetrics:
    epoch: int
    epsilon: float
    kappa: float
    train_total: float
    train_nominal_ce: float
    train_robust_ce: float
    train_width_penalty: float
    test_error: float
    verified_test_error: float
    width_sum: float
    wall_time_s: float

    def row(self) -> list[str]:
        return [str(self.epoch)] + [repr(float(getattr(self, k))) for k in METRICS_HEADER[1:]]


@dataclass
class TrainResult:
    net: Network
    history: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)


def batch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """The shuffled example order of one epoch; depends only on (seed, epoch)."""
    return np.random.default_rng([seed, epoch, 0]).permutation(n)


def compute_loss(net: Network, x: np.ndarray, y: np.ndarray, cfg: TrainConfig, epsilon: float, kappa: float) -> LossBreakdown:
    logits = forward(net, x)
    layers, logit_box = forward_interval(net, input_interval(x, epsilon, cfg.clamp))
    if cfg.loss == "ibp":
        return ibp_loss(logits, logit_box, y, kappa, epsilon)
    return constrained_ibp_loss(
        logits, layers, y, kappa, cfg.lam, cfg.penalty_reduction, cfg.penalty_include_output, epsilon
    )


def _checkpoint_meta(cfg: TrainConfig, epoch: int, epsilon: float, kappa: float) -> dict:
    return {
        "epoch": epoch,
        "epsilon": epsilon,
        "kappa": kappa,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "version": __version__,
    }


def _write_metrics(path: Path, rows: list[EpochMetrics], header: bool = False) -> None:
    """Append ``rows`` to the CSV; ``header`` starts a fresh file."""
    with open(path, "w" if header else "a", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        if header:
            w.writerow(METRICS_HEADER)
        for m in rows:
            w.writerow(m.row())


def read_metrics(path) -> list[EpochMetrics]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [EpochMetrics(int(r["epoch"]), *(float(r[k]) for k in METRICS_HEADER[1:])) for r in rows]


def train(
    net: Network,
    train_set: Dataset,
    test_set: Dataset,
    cfg: TrainConfig,
    out_dir=None,
    resume=None,
    stop_after: int | None = None,
) -> TrainResult:
    """Train ``net`` in place and return it with the per-epoch metrics.

    ``resume`` is a checkpoint path written by an earlier call with the
    same config; training continues from the epoch after it.  ``stop_after``
    ends the run early after that many epochs (for abort/resume tests).
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    opt = _make_optimizer(net, cfg)
    history: list[EpochMetrics] = []
    start_epoch = 0
    if resume is not None:
        loaded, meta, extra = load_checkpoint(resume, dtype=net.dtype)
        for p, q in zip(net.parameters(), loaded.parameters()):
            p.data = q.data.copy()
        opt.load_state(extra)
        start_epoch = int(meta["epoch"]) + 1
        history = [EpochMetrics(**h) for h in meta.get("history", [])]
    result = TrainResult(net, history)
    if out is not None:
        _write_metrics(out / "metrics.csv", history, header=True)

    n = len(train_set)
    steps = math.ceil(n / cfg.batch_size)
    eps_s, kappa_s = cfg.eps_schedule, cfg.kappa_schedule
    last = cfg.epochs if stop_after is None else min(cfg.epochs, start_epoch + stop_after)
    for epoch in range(start_epoch, last):
        t0 = time.perf_counter()
        opt.lr = _lr_at(cfg, epoch)
        order = batch_order(n, cfg.seed, epoch)
        sums = np.zeros(4)
        eps = kappa = 0.0
        for step in range(steps):
            idx = order[step * cfg.batch_size : (step + 1) * cfg.batch_size]
            x = train_set.images[idx]
            if cfg.augmentation:
                x = augment(x, [cfg.seed, epoch, step + 1])
            y = train_set.labels[idx]
            eps = schedule_value(eps_s, epoch, step / steps)
            kappa = schedule_value(kappa_s, epoch, step / steps)
            net.zero_grad()
            br = compute_loss(net, x, y, cfg, eps, kappa)
            if not np.isfinite(br.total):
                raise NumericError(
                    f"non-finite loss {br.total} at epoch {epoch}, batch {step} "
                    f"(epsilon={eps:.6g}, kappa={kappa:.6g})"
                )
            br.loss.backward()
            opt.step()
            sums += len(idx) * np.array([br.total, br.nominal_ce, br.robust_ce, br.width_penalty])
        means = sums / n
        test = interval_metrics(
            net, test_set, cfg.test_epsilon, cfg.clamp, cfg.eval_batch_size,
            cfg.penalty_reduction, cfg.penalty_include_output,
        )
        m = EpochMetrics(
            epoch, eps, kappa, *means, test["nominal_error"], test["verified_error"], test["width_sum"],
            time.perf_counter() - t0,
        )
        history.append(m)
        log.info(
            "epoch %d eps=%.4f kappa=%.3f loss=%.4f test_err=%.4f verified_err=%.4f width_sum=%.4g",
            epoch, eps, kappa, m.train_total, m.test_error, m.verified_test_error, m.width_sum,
        )
        if out is not None:
            _write_metrics(out / "metrics.csv", [m])
            periodic = cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0
            if periodic or epoch == cfg.epochs - 1 or epoch == last - 1:
                meta = _checkpoint_meta(cfg, epoch, eps, kappa)
                meta["history"] = [asdict(h) for h in history]
                path = out / f"checkpoint_epoch{epoch:04d}.ibpc"
                save_checkpoint(path, net, meta, opt.state())
                if epoch == cfg.epochs - 1:
                    save_checkpoint(out / "final.ibpc", net, meta, opt.state())
                result.checkpoints.append(path)
    return result


def evaluate(checkpoint, dataset: Dataset, epsilon: float, attack: AttackConfig | None = None, clamp=(0.0, 1.0)) -> dict:
    """Test error, verified error and (when ``attack`` is given) PGD error of a saved network."""
    net = checkpoint if isinstance(checkpoint, Network) else load_checkpoint(checkpoint)[0]
    if net.spec.input_shape != dataset.input_shape:
        raise CheckpointError(
            f"checkpoint expects inputs {net.spec.input_shape}, dataset provides {dataset.input_shape}"
        )
    m = interval_metrics(net, dataset, epsilon, clamp)
    report = {"epsilon": epsilon, "test_error": m["nominal_error"], "verified_error": m["verified_error"]}
    if attack is not None:
        report["pgd_error"] = pgd_error(net, dataset, replace(attack, epsilon=epsilon, clamp=clamp))
    return report
