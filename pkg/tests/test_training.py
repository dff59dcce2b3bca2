import numpy as np
import pytest

from fmchan import autodiff as ad
from fmchan import training
from fmchan.channels import ArrayGeometry, ClusterProfile, ChannelDataset, build_dataset
from fmchan.tensor import Rng, StructureError
from fmchan.training import TrainConfig, TrainLog, cfm_loss, interpolate, train
from fmchan.velocity import Arch, TrainingError, VelocityNet, load_checkpoint


def test_interpolate_endpoints_and_linearity():
    r = Rng(0)
    x0, x1 = r.normal((2, 4, 4)), r.normal((2, 4, 4))
    assert np.array_equal(interpolate(x0, x1, 0.0), x0)
    assert np.array_equal(interpolate(x0, x1, 1.0), x1)
    assert np.array_equal(interpolate(np.zeros_like(x1), x1, 0.25), 0.25 * x1)
    with pytest.raises(StructureError):
        interpolate(x0, x1[:, :2], 0.5)


def test_interpolate_per_example_t():
    r = Rng(1)
    x0, x1 = r.normal((3, 2, 2, 2)), r.normal((3, 2, 2, 2))
    t = np.array([0.0, 0.5, 1.0])
    xt = interpolate(x0, x1, t)
    assert np.array_equal(xt[0], x0[0]) and np.array_equal(xt[2], x1[2])


def test_loss_with_zero_field_is_path_length():
    net = VelocityNet(Arch(4, 4, (4, 8), 8))
    r = Rng(2)
    x0, x1 = r.normal((5, 2, 4, 4)), r.normal((5, 2, 4, 4))
    expect = np.mean(np.sum((x1 - x0) ** 2, axis=(1, 2, 3)))
    assert cfm_loss(net, x0, x1, r.uniform(5)) == pytest.approx(expect, rel=1e-13)


def test_loss_single_all_ones_target():
    net = VelocityNet(Arch(2, 2, (2,), 4))
    assert cfm_loss(net, np.zeros((2, 2, 2)), np.ones((2, 2, 2)), 0.3) == 8.0


class _OracleNet:
    """Returns x1 - x0 exactly; stands in for a perfectly trained field."""

    def __init__(self, target):
        self.target = target

    def trace(self, tape, x, t):
        return tape.leaf(self.target), {}


def test_loss_zero_for_oracle_field():
    r = Rng(3)
    x0, x1 = r.normal((4, 2, 2, 2)), r.normal((4, 2, 2, 2))
    assert cfm_loss(_OracleNet(x1 - x0), x0, x1, r.uniform(4)) == 0.0


def _tiny_dataset(n=8):
    return build_dataset(ArrayGeometry(4, 4), ClusterProfile(), n, Rng(4))


def test_training_is_deterministic():
    cfg = TrainConfig(epochs=2, steps_per_epoch=3, batch_size=4, lr=1e-3, levels=2)
    _, a = train(_tiny_dataset(), cfg)
    _, b = train(_tiny_dataset(), cfg)
    assert a.step_loss == b.step_loss
    assert len(a.step_loss) == 6 and len(a.epoch_loss) == 2


def test_training_reduces_loss():
    cfg = TrainConfig(epochs=4, steps_per_epoch=25, batch_size=16, lr=3e-3, levels=2)
    _, tlog = train(_tiny_dataset(), cfg)
    assert tlog.epoch_loss[-1] < 0.9 * tlog.epoch_loss[0]


def test_checkpoints_and_log(tmp_path):
    cfg = TrainConfig(epochs=3, steps_per_epoch=2, batch_size=2, ckpt_every=2, levels=2)
    net, tlog = train(_tiny_dataset(), cfg, out_dir=tmp_path)
    assert (tmp_path / "ckpt_epoch0002.fmck").exists()
    assert not (tmp_path / "ckpt_epoch0003.fmck").exists()
    final = load_checkpoint(tmp_path / "final.fmck")
    assert final.arch == net.arch
    tlog.write_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "step,epoch,loss,wallclock_ms"
    assert len(lines) == 7


def test_non_finite_loss_aborts_keeping_checkpoint(tmp_path, monkeypatch):
    real = training.loss_and_grad
    calls = {"n": 0}

    def flaky(*args):
        calls["n"] += 1
        loss, g = real(*args)
        return (float("nan"), g) if calls["n"] == 5 else (loss, g)

    monkeypatch.setattr(training, "loss_and_grad", flaky)
    cfg = TrainConfig(epochs=3, steps_per_epoch=2, batch_size=2, ckpt_every=1, levels=2)
    with pytest.raises(TrainingError, match="step 5"):
        train(_tiny_dataset(), cfg, out_dir=tmp_path)
    assert load_checkpoint(tmp_path / "ckpt_epoch0002.fmck") is not None
    assert not (tmp_path / "final.fmck").exists()


def test_reference_schedule_defaults():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.steps_per_epoch, cfg.batch_size, cfg.lr) == (400, 311, 32, 1e-4)
    assert cfg.epochs * cfg.steps_per_epoch == 124_400
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_cosine_schedule_follows_half_cosine(monkeypatch):
    seen = []
    real = training.adam_step

    def spy(state, params, grads):
        seen.append(state.lr)
        return real(state, params, grads)

    monkeypatch.setattr(training, "adam_step", spy)
    cfg = TrainConfig(epochs=2, steps_per_epoch=2, batch_size=2, lr=0.4, levels=2,
                      lr_schedule="cosine")
    train(_tiny_dataset(), cfg)
    expect = [0.2 * (1 + np.cos(np.pi * k / 4)) for k in range(4)]
    assert np.allclose(seen, expect)
    with pytest.raises(ValueError):
        TrainConfig(lr_schedule="step")
