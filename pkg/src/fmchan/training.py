"""Conditional flow-matching training on straight-line paths.

Nothing here knows about pilots or noise levels: the prior is learned from
channels alone.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .channels import ChannelDataset
from .tensor import Rng, StructureError, stack
from .velocity import (ARCHES, AdamState, TrainingError, VelocityNet, adam_step,
                       save_checkpoint)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 400
    steps_per_epoch: int = 311
    batch_size: int = 32
    lr: float = 1e-4
    seed: int = 0
    ckpt_every: int = 10
    arch: str = "lite"
    levels: int | None = None  # None: deepest the input allows, up to 3
    lr_schedule: str = "constant"  # or "cosine": anneal to 0 over the run

    def __post_init__(self):
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")
        for name in ("epochs", "steps_per_epoch", "batch_size", "ckpt_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.arch not in ARCHES:
            raise ValueError(f"arch must be one of {sorted(ARCHES)}")


@dataclass
class TrainLog:
    step_loss: list = field(default_factory=list)
    epoch_loss: list = field(default_factory=list)
    epoch_ms: list = field(default_factory=list)
    steps_per_epoch: int = 1

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "epoch", "loss", "wallclock_ms"])
            for i, loss in enumerate(self.step_loss):
                e = i // self.steps_per_epoch
                ms = self.epoch_ms[e] if e < len(self.epoch_ms) else ""
                w.writerow([i + 1, e + 1, repr(float(loss)), ms])


def interpolate(x0: np.ndarray, x1: np.ndarray, t) -> np.ndarray:
    """Point ``(1 - t) x0 + t x1`` on the straight path (t per leading batch row)."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise StructureError(f"shape mismatch {x0.shape} vs {x1.shape}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    if t.ndim == 1:
        t = t.reshape((-1,) + (1,) * (x0.ndim - 1))
    return (1 - t) * x0 + t * x1


def cfm_loss(net: VelocityNet, x0: np.ndarray, x1: np.ndarray, t,
             tape: ad.Tape | None = None):
    """Mean over the batch of ``||psi(x_t, t) - (x1 - x0)||^2``.

    Returns ``(loss Var, leaves)`` when a recording tape is supplied,
    otherwise the float loss.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if x0.ndim == 3:
        x0, x1 = x0[None], x1[None]
    own = tape is None
    tape = ad.Tape(record=False) if own else tape
    xt = interpolate(x0, x1, t)
    pred, leaves = net.trace(tape, xt, t)
    diff = ad.sub(pred, tape.leaf(x1 - x0))
    loss = ad.scale(ad.sum_squares(diff), 1.0 / x0.shape[0])
    if not np.isfinite(loss.value):
        raise TrainingError("non-finite flow-matching loss")
    return float(loss.value) if own else (loss, leaves)


def loss_and_grad(net: VelocityNet, x0, x1, t) -> tuple[float, np.ndarray]:
    tape = ad.Tape()
    loss, leaves = cfm_loss(net, x0, x1, t, tape)
    adj = tape.backward(loss)
    return float(loss.value), net.flat_grad(tape, adj, leaves)


def train(dataset: ChannelDataset, config: TrainConfig, out_dir=None,
          net: VelocityNet | None = None) -> tuple[VelocityNet, TrainLog]:
    """Run the epoch/step loop; checkpoints go to ``out_dir`` if given.

    On a non-finite loss the last cadence checkpoint is left in place and
    :class:`TrainingError` is raised.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    rng = Rng(config.seed)
    if net is None:
        g = dataset.geometry
        arch = ARCHES[config.arch](g.n_r, g.n_t, config.levels)
        net = VelocityNet.initialized(arch, rng.fork("init"))
    data = stack(dataset.samples)
    state = AdamState(net.param_count, lr=config.lr)
    batch_rng = rng.fork("training-batch")
    out = Path(out_dir) if out_dir is not None else None
    tlog = TrainLog(steps_per_epoch=config.steps_per_epoch)
    B = config.batch_size
    total = config.epochs * config.steps_per_epoch

    for epoch in range(config.epochs):
        t_start = time.perf_counter()
        losses = []
        for _ in range(config.steps_per_epoch):
            idx = batch_rng.integers(len(data), B)
            x1 = data[idx]
            x0 = batch_rng.normal(x1.shape)
            t = batch_rng.uniform(B)
            if config.lr_schedule == "cosine":
                state.lr = 0.5 * config.lr * (1 + np.cos(np.pi * state.step / total))
            loss, grad = loss_and_grad(net, x0, x1, t)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at step {state.step + 1}")
            net.params = adam_step(state, net.params, grad)
            losses.append(loss)
        tlog.step_loss.extend(losses)
        tlog.epoch_loss.append(float(np.mean(losses)))
        tlog.epoch_ms.append(round((time.perf_counter() - t_start) * 1e3, 3))
        log.info("epoch %d/%d loss %.5f", epoch + 1, config.epochs, tlog.epoch_loss[-1])
        if out is not None and (epoch + 1) % config.ckpt_every == 0:
            save_checkpoint(net, out / f"ckpt_epoch{epoch + 1:04d}.fmck")
    if out is not None:
        save_checkpoint(net, out / "final.fmck")
    return net, tlog
