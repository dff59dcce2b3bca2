"""Velocity-field U-Net, Adam, and the FMCK checkpoint format."""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .tensor import DomainError, Rng, StructureError

MAGIC = b"FMCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Arch:
    """U-Net descriptor.  ``levels`` is ``len(widths)``."""

    n_r: int
    n_t: int
    widths: tuple = (32, 64, 128)
    emb_dim: int = 64

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not self.widths or min(self.widths) < 1:
            raise DomainError("widths must be a non-empty list of positive ints")
        if self.emb_dim < 2 or self.emb_dim % 2:
            raise DomainError("time-embedding dimension must be even and >= 2")
        f = 2 ** self.levels
        if self.n_r % f or self.n_t % f:
            raise StructureError(
                f"input {self.n_r}x{self.n_t} is not divisible by 2^{self.levels}={f}")

    @property
    def levels(self) -> int:
        return len(self.widths)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (2, self.n_r, self.n_t)

    def to_json(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


def max_levels(n_r: int, n_t: int, cap: int = 3) -> int:
    """Deepest pooling depth (at most ``cap``) that both dimensions allow."""
    k = 0
    while k < cap and n_r % 2 ** (k + 1) == 0 and n_t % 2 ** (k + 1) == 0:
        k += 1
    return k


def _levels(n_r, n_t, levels):
    if levels is None:
        levels = max_levels(n_r, n_t)
        if levels == 0:
            raise StructureError(f"input {n_r}x{n_t} has an odd dimension; no U-Net level fits")
    if not 1 <= levels <= 3:
        raise DomainError("levels must be 1, 2 or 3")
    return levels


def lite_arch(n_r: int, n_t: int, levels: int | None = 3) -> Arch:
    """Widths (8, 16, 32), embedding 32.  ``levels=None`` picks the deepest that fits."""
    return Arch(n_r, n_t, (8, 16, 32)[:_levels(n_r, n_t, levels)], 32)


def full_arch(n_r: int, n_t: int, levels: int | None = 3) -> Arch:
    """Widths (32, 64, 128), embedding 64."""
    return Arch(n_r, n_t, (32, 64, 128)[:_levels(n_r, n_t, levels)], 64)


ARCHES = {"lite": lite_arch, "full": full_arch}


def layer_table(arch: Arch) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) of every parameter segment.

    Encoder blocks carry two 3x3 convs, the bottleneck (at twice the last
    width) three, and each decoder block three: the first maps the
    skip-concatenated input back to the incoming width.  Every block's first
    conv receives an additive time bias from its own dense layer.
    """
    E = arch.emb_dim
    table: list[tuple[str, tuple[int, ...]]] = []

    def conv(name, ci, co, k=3):
        table.append((f"{name}.w", (k, k, ci, co)))
        table.append((f"{name}.b", (co,)))

    def dense(name, ci, co):
        table.append((f"{name}.w", (ci, co)))
        table.append((f"{name}.b", (co,)))

    c = 2
    for i, w in enumerate(arch.widths):
        conv(f"enc{i}.conv1", c, w)
        dense(f"enc{i}.time", E, w)
        conv(f"enc{i}.conv2", w, w)
        c = w
    m = 2 * arch.widths[-1]
    conv("mid.conv1", c, m)
    dense("mid.time", E, m)
    conv("mid.conv2", m, m)
    conv("mid.conv3", m, m)
    c = m
    for i in reversed(range(arch.levels)):
        w = arch.widths[i]
        conv(f"dec{i}.conv1", c + w, c)
        dense(f"dec{i}.time", E, c)
        conv(f"dec{i}.conv2", c, w)
        conv(f"dec{i}.conv3", w, w)
        c = w
    conv("out", c, 2, k=1)
    return table


def param_count(arch: Arch) -> int:
    return sum(int(np.prod(s)) for _, s in layer_table(arch))


def time_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features: half sines, half cosines, angular frequencies 1 .. 1e4."""
    half = dim // 2
    freqs = 10000.0 ** (np.arange(half) / max(half - 1, 1))
    arg = np.asarray(t, dtype=np.float64)[:, None] * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def init_params(arch: Arch, rng: Rng) -> np.ndarray:
    """He-normal weights, zero biases, zero output layer."""
    parts = []
    for name, shape in layer_table(arch):
        size = int(np.prod(shape))
        if name.endswith(".b") or name.startswith("out."):
            parts.append(np.zeros(size))
        else:
            fan_in = int(np.prod(shape[:-1]))
            parts.append(rng.fork(name).normal(size) * np.sqrt(2.0 / fan_in))
    return np.concatenate(parts)


class VelocityNet:
    """psi(x, t): maps a stacked (2, n_r, n_t) channel and a time to a velocity."""

    def __init__(self, arch: Arch, params: np.ndarray | None = None):
        self.arch = arch
        self.segments: dict[str, tuple[int, tuple[int, ...]]] = {}
        off = 0
        for name, shape in layer_table(arch):
            self.segments[name] = (off, shape)
            off += int(np.prod(shape))
        self.param_count = off
        if params is None:
            params = np.zeros(off)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (off,):
            raise StructureError(f"expected {off} parameters, got {params.shape}")
        self.params = params

    @classmethod
    def initialized(cls, arch: Arch, rng: Rng) -> "VelocityNet":
        return cls(arch, init_params(arch, rng))

    def view(self, name: str) -> np.ndarray:
        off, shape = self.segments[name]
        return self.params[off:off + int(np.prod(shape))].reshape(shape)

    def _check(self, x: np.ndarray, t) -> tuple[np.ndarray, np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.ndim != 4 or x.shape[1:] != self.arch.input_shape:
            raise StructureError(
                f"input shape {x.shape} does not match network {self.arch.input_shape}")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        if np.any(t < 0) or np.any(t > 1):
            raise DomainError("t must lie in [0, 1]")
        return x, t, single

    def trace(self, tape: ad.Tape, x: np.ndarray, t) -> tuple[ad.Var, dict]:
        """Record the forward pass on ``tape``.

        ``x`` is (B, 2, n_r, n_t); returns the NCHW output Var and the
        parameter leaves keyed by segment name.
        """
        x, t, _ = self._check(x, t)
        p = {name: tape.leaf(self.view(name)) for name in self.segments}
        emb = tape.leaf(time_embedding(t, self.arch.emb_dim))
        h = tape.leaf(x.transpose(0, 2, 3, 1))

        def block(prefix, h, nconv):
            h = ad.conv2d(h, p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"])
            tb = ad.dense(emb, p[f"{prefix}.time.w"], p[f"{prefix}.time.b"])
            h = ad.silu(ad.add_channel_bias(h, tb))
            for j in range(2, nconv + 1):
                h = ad.silu(ad.conv2d(h, p[f"{prefix}.conv{j}.w"], p[f"{prefix}.conv{j}.b"]))
            return h

        skips = []
        for i in range(self.arch.levels):
            h = block(f"enc{i}", h, 2)
            skips.append(h)
            h = ad.avgpool2(h)
        h = block("mid", h, 3)
        for i in reversed(range(self.arch.levels)):
            h = ad.concat(ad.upsample2(h), skips[i])
            h = block(f"dec{i}", h, 3)
        out = ad.conv2d(h, p["out.w"], p["out.b"])
        nchw = tape.push(out.value.transpose(0, 3, 1, 2), (out,),
                         lambda g: (g.transpose(0, 2, 3, 1),))
        return nchw, p

    def forward(self, x: np.ndarray, t) -> np.ndarray:
        """Velocity at ``x`` (single (2, n_r, n_t) or batched) and time ``t``."""
        x, t, single = self._check(x, t)
        out, _ = self.trace(ad.Tape(record=False), x, t)
        return out.value[0] if single else out.value

    def flat_grad(self, tape: ad.Tape, adjoints: list, leaves: dict) -> np.ndarray:
        g = np.empty(self.param_count)
        for name, (off, shape) in self.segments.items():
            g[off:off + int(np.prod(shape))] = tape.grad(adjoints, leaves[name]).ravel()
        return g


@dataclass
class AdamState:
    size: int
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """One bias-corrected Adam update; returns new params, mutates ``state``."""
    if grads.shape != params.shape or params.shape != state.m.shape:
        raise StructureError("params, grads and optimizer state must have equal length")
    if not np.all(np.isfinite(grads)):
        raise TrainingError(f"non-finite gradient at optimizer step {state.step + 1}")
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    m_hat = state.m / (1 - state.beta1**state.step)
    v_hat = state.v / (1 - state.beta2**state.step)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


_CKHEAD = struct.Struct("<4sII")


def encode_checkpoint(net: VelocityNet) -> bytes:
    blob = json.dumps(net.arch.to_json(), sort_keys=True).encode("utf-8")
    payload = (_CKHEAD.pack(MAGIC, VERSION, len(blob)) + blob
               + struct.pack("<Q", net.param_count)
               + net.params.astype("<f4").tobytes())
    return payload + struct.pack("<I", zlib.crc32(payload))


def decode_checkpoint(buf: bytes) -> VelocityNet:
    if len(buf) < _CKHEAD.size + 12:
        raise CheckpointError("truncated checkpoint")
    magic, version, blob_len = _CKHEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    payload, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(payload) != crc:
        raise CheckpointError("CRC mismatch; file is corrupt or truncated")
    pos = _CKHEAD.size
    try:
        arch = Arch(**json.loads(payload[pos:pos + blob_len].decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"bad architecture blob: {exc}") from None
    pos += blob_len
    (count,) = struct.unpack_from("<Q", payload, pos)
    pos += 8
    expected = param_count(arch)
    if count != expected:
        raise CheckpointError(f"param_count {count} does not match architecture ({expected})")
    if len(payload) - pos != 4 * count:
        raise CheckpointError("parameter payload has the wrong length")
    params = np.frombuffer(payload, dtype="<f4", offset=pos, count=count).astype(np.float64)
    return VelocityNet(arch, params)


def save_checkpoint(net: VelocityNet, path) -> None:
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(encode_checkpoint(net))
    tmp.replace(path)


def load_checkpoint(path) -> VelocityNet:
    return decode_checkpoint(Path(path).read_bytes())
