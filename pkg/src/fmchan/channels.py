"""Synthetic clustered multipath MIMO channels and the FMCH dataset format.

The cluster geometry (mean angles of departure/arrival and the LOS
direction) is a fixed property of a :class:`ClusterProfile`, derived from
``profile.seed``; each realization redraws the ray perturbations and the
complex ray gains.  This mirrors how tabulated CDL models behave.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensor import DomainError, Rng

MAGIC = b"FMCH"
VERSION = 1


@dataclass(frozen=True)
class ArrayGeometry:
    n_t: int
    n_r: int
    spacing_wavelengths: float = 0.5

    def __post_init__(self):
        if self.n_t < 1 or self.n_r < 1:
            raise DomainError("antenna counts must be positive")
        if not self.spacing_wavelengths > 0:
            raise DomainError("element spacing must be positive")


@dataclass(frozen=True)
class ClusterProfile:
    num_clusters: int = 8
    rays_per_cluster: int = 20
    angular_spread_deg: float = 5.0
    cluster_power_decay_db: float = 3.0
    los: bool = False
    rician_k_db: float = 13.0
    seed: int = 0
    sector_deg: float = 60.0  # cluster mean angles are uniform in +-sector_deg

    def __post_init__(self):
        if self.num_clusters < 1 or self.rays_per_cluster < 1:
            raise DomainError("need at least one cluster and one ray")
        if self.angular_spread_deg < 0:
            raise DomainError("angular spread must be non-negative")
        if self.los and not np.isfinite(self.rician_k_db):
            raise DomainError("Rician K-factor must be finite for LOS profiles")

    def cluster_powers(self) -> np.ndarray:
        """Exponentially decaying cluster powers, normalized to sum to one."""
        p = 10.0 ** (-self.cluster_power_decay_db * np.arange(self.num_clusters) / 10.0)
        return p / p.sum()

    def cluster_angles(self) -> tuple[np.ndarray, np.ndarray, float, float]:
        """Fixed (aoa, aod, los_aoa, los_aod) in degrees for this profile."""
        g = Rng(self.seed, ("profile-geometry",))
        u = g.uniform((2, self.num_clusters + 1)) * 2.0 - 1.0
        ang = u * self.sector_deg
        return ang[0, 1:], ang[1, 1:], float(ang[0, 0]), float(ang[1, 0])


PROFILES = {
    "nlos-c-like": ClusterProfile(),
    "los-d-like": ClusterProfile(los=True, rician_k_db=13.0),
}


def get_profile(name: str, **overrides) -> ClusterProfile:
    try:
        base = PROFILES[name]
    except KeyError:
        raise DomainError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None
    fields = asdict(base)
    fields.update({k: v for k, v in overrides.items() if v is not None})
    return ClusterProfile(**fields)


def steering_vector(n: int, angle_deg, spacing: float = 0.5) -> np.ndarray:
    """ULA response ``exp(i 2 pi d m sin(angle))`` for ``m = 0..n-1``.

    ``angle_deg`` may be an array; the antenna index becomes the last axis.
    """
    if n < 1:
        raise DomainError("antenna count must be positive")
    s = np.sin(np.deg2rad(np.asarray(angle_deg, dtype=np.float64)))
    m = np.arange(n)
    return np.exp(2j * np.pi * spacing * s[..., None] * m)


def generate_channel(geometry: ArrayGeometry, profile: ClusterProfile, rng: Rng) -> np.ndarray:
    """One ``n_r x n_t`` realization with unit expected per-entry power."""
    L, R = profile.num_clusters, profile.rays_per_cluster
    aoa, aod, los_aoa, los_aod = profile.cluster_angles()
    p = profile.cluster_powers()

    theta = aoa[:, None] + profile.angular_spread_deg * rng.normal((L, R))
    phi = aod[:, None] + profile.angular_spread_deg * rng.normal((L, R))
    g = (rng.normal((L, R)) + 1j * rng.normal((L, R))) * np.sqrt(p[:, None] / 2.0)

    d = geometry.spacing_wavelengths
    a_r = steering_vector(geometry.n_r, theta.ravel(), d)  # (L*R, n_r)
    a_t = steering_vector(geometry.n_t, phi.ravel(), d)    # (L*R, n_t)
    h = (a_r.T * g.ravel()) @ a_t.conj()

    if profile.los:
        k = 10.0 ** (profile.rician_k_db / 10.0)
        c_nlos = np.sqrt(1.0 / ((k + 1.0) * R))
        c_los = np.sqrt(k / (k + 1.0))
        los = np.outer(steering_vector(geometry.n_r, los_aoa, d),
                       steering_vector(geometry.n_t, los_aod, d).conj())
        return c_nlos * h + c_los * los
    return h / np.sqrt(R)


@dataclass
class ChannelDataset:
    geometry: ArrayGeometry
    profile: ClusterProfile
    samples: np.ndarray  # (num_samples, n_r, n_t) complex128
    normalization_power: float = 1.0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.samples.shape[0]

    def __post_init__(self):
        s = self.samples
        if s.ndim != 3 or s.shape[1:] != (self.geometry.n_r, self.geometry.n_t):
            raise DomainError(
                f"samples shape {s.shape} does not match geometry "
                f"({self.geometry.n_r}, {self.geometry.n_t})")


def build_dataset(geometry: ArrayGeometry, profile: ClusterProfile, num_samples: int,
                  rng: Rng, normalize: bool = True,
                  power: float | None = None) -> ChannelDataset:
    """Draw ``num_samples`` channels and scale them to unit average entry power.

    Sample ``i`` uses the stream ``rng.fork("dataset", i)``, so results do
    not depend on generation order.  Pass the training set's
    ``normalization_power`` as ``power`` to scale a test set consistently.
    """
    if num_samples < 1:
        raise DomainError("num_samples must be at least 1")
    samples = np.stack([generate_channel(geometry, profile, rng.fork("dataset", i))
                        for i in range(num_samples)])
    rho = float(np.mean(samples.real**2 + samples.imag**2)) if power is None else float(power)
    if normalize:
        samples = samples / np.sqrt(rho)
    return ChannelDataset(geometry, profile, samples, rho if normalize else 1.0)


def renormalize(dataset: ChannelDataset) -> ChannelDataset:
    rho = float(np.mean(dataset.samples.real**2 + dataset.samples.imag**2))
    return ChannelDataset(dataset.geometry, dataset.profile, dataset.samples / np.sqrt(rho),
                          dataset.normalization_power * rho, dict(dataset.meta))


class DatasetFormatError(ValueError):
    """Malformed dataset file; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


_HEAD = struct.Struct("<4sIIIIdI")


def encode_dataset(dataset: ChannelDataset) -> bytes:
    blob = json.dumps({
        "profile": asdict(dataset.profile),
        "spacing_wavelengths": dataset.geometry.spacing_wavelengths,
        "meta": dataset.meta,
    }, sort_keys=True).encode("utf-8")
    n, n_r, n_t = dataset.samples.shape
    head = _HEAD.pack(MAGIC, VERSION, n, n_r, n_t, dataset.normalization_power, len(blob))
    body = np.empty((n, n_r, n_t, 2), dtype="<f4")
    body[..., 0] = dataset.samples.real
    body[..., 1] = dataset.samples.imag
    return head + blob + body.tobytes()


def decode_dataset(buf: bytes) -> ChannelDataset:
    if len(buf) < _HEAD.size:
        raise DatasetFormatError("truncated header", len(buf))
    magic, version, n, n_r, n_t, rho, blob_len = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}", 4)
    if n < 1 or n_r < 1 or n_t < 1:
        raise DatasetFormatError(f"invalid dimensions ({n}, {n_r}, {n_t})", 8)
    pos = _HEAD.size
    if len(buf) < pos + blob_len:
        raise DatasetFormatError("truncated profile blob", len(buf))
    try:
        info = json.loads(buf[pos:pos + blob_len].decode("utf-8"))
        profile = ClusterProfile(**info["profile"])
        geometry = ArrayGeometry(n_t, n_r, info["spacing_wavelengths"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetFormatError(f"bad profile blob: {exc}", pos) from None
    pos += blob_len
    need = n * n_r * n_t * 2 * 4
    if len(buf) - pos != need:
        raise DatasetFormatError(
            f"sample payload has {len(buf) - pos} bytes, expected {need}", pos)
    raw = np.frombuffer(buf, dtype="<f4", offset=pos).reshape(n, n_r, n_t, 2)
    samples = raw[..., 0].astype(np.float64) + 1j * raw[..., 1].astype(np.float64)
    return ChannelDataset(geometry, profile, samples, float(rho), info.get("meta", {}))


def save_dataset(dataset: ChannelDataset, path) -> None:
    Path(path).write_bytes(encode_dataset(dataset))


def load_dataset(path) -> ChannelDataset:
    return decode_dataset(Path(path).read_bytes())
