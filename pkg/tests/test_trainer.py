import csv
import math

import numpy as np
import pytest

from cibp.attack import AttackConfig
from cibp.data import synthetic
from cibp.network import init, load_checkpoint, save_checkpoint
from cibp.tensor import Tensor
from cibp.trainer import (
    METRICS_HEADER,
    NumericError,
    Schedule,
    TrainConfig,
    batch_order,
    cifar_config,
    evaluate,
    mnist_config,
    mnist_desk_config,
    mnist_fast_config,
    read_metrics,
    schedule_value,
    train,
)
from conftest import plain_classifier_reference, tiny_spec

TRAIN = synthetic(120, seed=0)
TEST = synthetic(40, seed=0, split="test")


def small_cfg(**kw):
    base = dict(epsilon=0.1, warmup_epochs=1, ramp_epochs=1, epochs=3, batch_size=32, seed=3, eval_batch_size=64)
    base.update(kw)
    return TrainConfig(**base)


def run(cfg, seed=0, **kw):
    net = init(tiny_spec(), seed)
    return train(net, TRAIN, TEST, cfg, **kw)


def rows(history):
    """Metric rows without the wall-clock column."""
    return [m.row()[:-1] for m in history]


def param_bytes(net):
    return [p.data.tobytes() for p in net.parameters()]


# -- schedules ---------------------------------------------------------------


def test_schedule_examples():
    s = Schedule(0.0, 8 / 255, warmup_epochs=10, ramp_epochs=100)
    assert schedule_value(s, 10) == 0
    assert schedule_value(s, 60) == pytest.approx(4 / 255, rel=1e-12)
    for e in (110, 111, 500):
        assert schedule_value(s, e) == 8 / 255
    assert schedule_value(s, 0) == 0
    assert schedule_value(s, 59, 0.5) == pytest.approx(schedule_value(s, 59.5), rel=1e-12)


def test_schedule_faster_and_constant():
    s = Schedule(0.0, 0.4, 3, 15)
    fast = s.faster(2.5)
    assert (fast.start_value, fast.end_value, fast.warmup_epochs, fast.ramp_epochs) == (0.0, 0.4, 3, 6.0)
    assert fast.value(6) == pytest.approx(0.2)
    const = Schedule(0.7, 0.7, 2, 5)
    assert {const.value(e) for e in (0, 2, 4.5, 100)} == {0.7}
    with pytest.raises(ValueError):
        schedule_value(s, -1)


def test_schedule_is_continuous_and_monotone():
    s = Schedule(1.0, 0.5, 3, 6)
    grid = np.linspace(0, 12, 1201)
    vals = np.array([s.value(e) for e in grid])
    assert np.all(np.diff(vals) <= 0)
    assert np.max(np.abs(np.diff(vals))) <= 0.5 / 6 * 0.01 + 1e-12


def test_presets():
    m = mnist_config()
    assert (m.epsilon, m.warmup_epochs, m.ramp_epochs, m.kappa_end, m.lr) == (0.4, 3, 15, 0.5, 1e-3)
    assert m.lr_milestones == (15, 20)
    assert mnist_fast_config().ramp_epochs == 6.0
    assert mnist_fast_config(ramp_epochs=10).ramp_epochs == 4.0
    d = mnist_desk_config()
    assert (d.ramp_epochs, d.lam, d.lr_milestones, d.epochs) == (6.0, 1e-3, (), 25)
    assert mnist_desk_config(lam=0.5, loss="ibp").lam == 0.5
    c = cifar_config()
    assert (c.epsilon, c.warmup_epochs, c.ramp_epochs, c.augmentation) == (8 / 255, 10, 150, True)


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        TrainConfig(loss="pgd")
    with pytest.raises(ValueError):
        TrainConfig(kappa_end=0.3)
    with pytest.raises(ValueError):
        TrainConfig(epsilon=-1)
    with pytest.raises(ValueError):
        TrainConfig(lam=-0.5)
    cfg = mnist_config(seed=4, lam=0.3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.test_epsilon == 0.4 and TrainConfig(eval_epsilon=0.3).test_epsilon == 0.3


def test_batch_order_depends_only_on_seed_and_epoch():
    a = batch_order(50, 1, 2)
    assert np.array_equal(a, batch_order(50, 1, 2))
    assert sorted(a.tolist()) == list(range(50))
    assert not np.array_equal(a, batch_order(50, 1, 3))


# -- training ----------------------------------------------------------------


def test_metrics_follow_per_step_schedule():
    cfg = small_cfg(epochs=3, warmup_epochs=1, ramp_epochs=2)
    hist = run(cfg).history
    assert [m.epoch for m in hist] == [0, 1, 2]
    steps = math.ceil(len(TRAIN) / cfg.batch_size)
    for m in hist:
        # the recorded epsilon/kappa are those of the epoch's last step
        assert m.epsilon == pytest.approx(schedule_value(cfg.eps_schedule, m.epoch, (steps - 1) / steps))
        assert m.kappa == pytest.approx(schedule_value(cfg.kappa_schedule, m.epoch, (steps - 1) / steps))
    assert hist[0].epsilon == 0 and hist[0].train_width_penalty == 0
    assert hist[2].train_width_penalty > 0


def test_fixed_seed_is_deterministic():
    a, b = run(small_cfg()), run(small_cfg())
    assert rows(a.history) == rows(b.history)
    assert param_bytes(a.net) == param_bytes(b.net)
    c = run(small_cfg(seed=4))
    assert rows(c.history) != rows(a.history)


def test_lambda_zero_is_bit_identical_to_ibp():
    a = run(small_cfg(loss="constrained-ibp", lam=0.0))
    b = run(small_cfg(loss="ibp"))
    assert param_bytes(a.net) == param_bytes(b.net)
    # the constrained run still logs the (unweighted) penalty it would have added
    penalty = METRICS_HEADER.index("train_width_penalty")
    strip = lambda hist: [r[:penalty] + r[penalty + 1 :] for r in rows(hist)]
    assert strip(a.history) == strip(b.history)
    assert a.history[-1].train_width_penalty > 0 == b.history[-1].train_width_penalty


def test_warmup_is_identical_for_both_objectives():
    a = run(small_cfg(loss="constrained-ibp", warmup_epochs=2, epochs=2))
    b = run(small_cfg(loss="ibp", warmup_epochs=2, epochs=2))
    assert param_bytes(a.net) == param_bytes(b.net)
    assert [m.train_total for m in a.history] == [m.train_total for m in b.history]


@pytest.mark.parametrize("loss", ["ibp", "constrained-ibp"])
def test_kappa_one_eps_zero_matches_plain_classifier(loss):
    cfg = small_cfg(loss=loss, epsilon=0.0, kappa_start=1.0, kappa_end=1.0, epochs=3)
    ref_net, ref_losses = plain_classifier_reference(init(tiny_spec(), 0), TRAIN, cfg.seed, cfg.lr, cfg.batch_size, 3)
    res = run(cfg)
    np.testing.assert_allclose([m.train_total for m in res.history], ref_losses, rtol=1e-5)
    for p, q in zip(res.net.parameters(), ref_net.parameters()):
        np.testing.assert_allclose(p.data, q.data, rtol=1e-4, atol=1e-6)
    for m in res.history:
        assert m.verified_test_error == m.test_error and m.width_sum == 0


def test_checkpoints_and_metrics_file(tmp_path):
    cfg = small_cfg(checkpoint_every=1)
    res = run(cfg, out_dir=tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == [
        "checkpoint_epoch0000.ibpc", "checkpoint_epoch0001.ibpc", "checkpoint_epoch0002.ibpc", "final.ibpc", "metrics.csv"
    ]
    with open(tmp_path / "metrics.csv", newline="") as f:
        table = list(csv.reader(f))
    assert table[0] == METRICS_HEADER and len(table) == 4
    assert [m.row()[:-1] for m in read_metrics(tmp_path / "metrics.csv")] == rows(res.history)
    net, meta, extra = load_checkpoint(tmp_path / "final.ibpc")
    assert param_bytes(net) == param_bytes(res.net)
    assert meta["epoch"] == 2 and meta["seed"] == cfg.seed
    assert TrainConfig.from_dict(meta["config"]) == cfg
    assert meta["epsilon"] == res.history[-1].epsilon and meta["kappa"] == res.history[-1].kappa
    assert len(meta["history"]) == 3 and "adam.m0" in extra


@pytest.mark.parametrize("optimizer", ["adam", "sgd"])
def test_abort_and_resume_reproduces_the_run(tmp_path, optimizer):
    cfg = small_cfg(epochs=4, checkpoint_every=1, optimizer=optimizer, lr=1e-3 if optimizer == "adam" else 1e-2)
    full = run(cfg, out_dir=tmp_path / "full")
    part = run(cfg, out_dir=tmp_path / "part", stop_after=2)
    assert len(part.history) == 2
    resumed = run(cfg, seed=99, out_dir=tmp_path / "part", resume=tmp_path / "part" / "checkpoint_epoch0001.ibpc")
    assert rows(resumed.history) == rows(full.history)
    assert param_bytes(resumed.net) == param_bytes(full.net)
    full_csv = [r[:-1] for r in csv.reader(open(tmp_path / "full" / "metrics.csv"))]
    part_csv = [r[:-1] for r in csv.reader(open(tmp_path / "part" / "metrics.csv"))]
    assert full_csv == part_csv


def test_non_finite_loss_names_batch_and_schedule():
    net = init(tiny_spec(), 0)
    net.parameters()[0].data[...] = np.nan
    with pytest.raises(NumericError, match=r"epoch 0, batch 0 \(epsilon=0, kappa=1\)"):
        train(net, TRAIN, TEST, small_cfg())


def test_augmentation_changes_the_trajectory():
    plain = run(small_cfg(epochs=1))
    aug = run(small_cfg(epochs=1, augmentation=True))
    assert param_bytes(plain.net) != param_bytes(aug.net)
    assert rows(run(small_cfg(epochs=1, augmentation=True)).history) == rows(aug.history)


def test_learning_rate_milestones_take_effect():
    frozen = run(small_cfg(epochs=2, lr_milestones=(1,), lr_decay=0.0))
    net_after_one = run(small_cfg(epochs=1)).net
    assert param_bytes(frozen.net) == param_bytes(net_after_one)


# -- evaluation --------------------------------------------------------------


def test_evaluate_saved_equals_in_memory(tmp_path):
    net = run(small_cfg()).net
    save_checkpoint(tmp_path / "n.ibpc", net)
    a = evaluate(net, TEST, 0.05)
    b = evaluate(tmp_path / "n.ibpc", TEST, 0.05)
    assert a == b
    assert a["test_error"] <= a["verified_error"]


def test_evaluate_at_zero_eps_collapses_all_errors():
    net = run(small_cfg()).net
    r = evaluate(net, TEST, 0.0, AttackConfig(0.0, iterations=5, restarts=1))
    assert r["test_error"] == r["pgd_error"] == r["verified_error"]


def test_evaluate_ordering_and_shape_check():
    net = run(small_cfg()).net
    r = evaluate(net, TEST, 0.1, AttackConfig(0.1, iterations=20, restarts=2))
    assert r["test_error"] <= r["pgd_error"] <= r["verified_error"]
    from cibp.network import CheckpointError

    with pytest.raises(CheckpointError, match="expects inputs"):
        evaluate(net, synthetic(4, size=10), 0.1)


def test_train_does_not_touch_tensor_state():
    run(small_cfg(epochs=1))
    assert Tensor([1.0]).dtype == np.float32
