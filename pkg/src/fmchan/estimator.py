"""Channel estimators: flow-matching PnP-PGD, posterior averaging, LS, LMMSE."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .channels import ChannelDataset
from .tensor import (DomainError, Rng, StructureError, draw_complex_gaussian_matrix,
                     stack, unstack)


class SolverError(RuntimeError):
    pass


class CapabilityError(RuntimeError):
    pass


@dataclass(frozen=True)
class EstimatorConfig:
    """Solver settings.

    Step rules, all scaled by ``(1 - t) ** decay``:

    * ``normalized``: ``sigma2 * gamma_c / N_p``
    * ``spectral``: ``sigma2 * gamma_c / lambda_max(P P^H)``, which keeps the
      data-consistency map non-expansive for any pilot matrix
    * ``matched`` (default): ``spectral`` capped at ``((1 - t) / t) ** 2`` so the
      injected measurement noise never exceeds the noise level the denoiser
      was trained for at time ``t``
    * ``fixed``: ``gamma`` verbatim

    Re-noising uses CN(0, 2), whose stacked form is the N(0, 1) source seen in
    training; ``unit_variance_noise`` switches to CN(0, 1).
    """

    K: int = 100
    step_rule: str = "matched"
    gamma_c: float = 1.0
    gamma: float = 1.0
    decay: float = 0.0
    m_samples: int = 1
    seed: int = 0
    unit_variance_noise: bool = False

    def __post_init__(self):
        if self.K < 1:
            raise DomainError("K must be >= 1")
        if self.m_samples < 1:
            raise DomainError("m_samples must be >= 1")
        if self.step_rule not in ("normalized", "spectral", "matched", "fixed"):
            raise DomainError(f"unknown step rule {self.step_rule!r}")
        if not (self.gamma_c > 0 and self.gamma > 0):
            raise DomainError("step-size constants must be positive")

    @property
    def noise_variance(self) -> float:
        return 1.0 if self.unit_variance_noise else 2.0

    def step_size(self, obs: "PilotObservation", t: float = 0.0) -> float:
        if self.step_rule == "fixed":
            g = self.gamma
        elif self.step_rule == "spectral":
            g = obs.sigma2 * self.gamma_c / obs.pilot_gain
        elif self.step_rule == "matched":
            g = obs.sigma2 * self.gamma_c / obs.pilot_gain
            if t > 0:
                g = min(g, ((1.0 - t) / t) ** 2)
        else:
            g = obs.sigma2 * self.gamma_c / obs.P.shape[1]
        return g * (1.0 - t) ** self.decay


@dataclass(frozen=True)
class PilotObservation:
    Y: np.ndarray
    P: np.ndarray
    sigma2: float
    snr_db: float = float("nan")
    alpha: float = float("nan")

    def __post_init__(self):
        if self.Y.shape[1] != self.P.shape[1]:
            raise StructureError(f"Y {self.Y.shape} and P {self.P.shape} disagree on N_p")
        if not self.sigma2 > 0:
            raise DomainError("sigma2 must be positive")

    @cached_property
    def pilot_gain(self) -> float:
        """Largest eigenvalue of ``P P^H``."""
        return float(np.linalg.eigvalsh(self.P @ self.P.conj().T)[-1])

    @property
    def n_r(self) -> int:
        return self.Y.shape[0]

    @property
    def n_t(self) -> int:
        return self.P.shape[0]


def snr_to_sigma2(snr_db: float, n_t: int) -> float:
    """Noise variance for ``SNR = N_t / sigma^2``."""
    return n_t / 10.0 ** (snr_db / 10.0)


def pilot_count(alpha: float, n_t: int) -> int:
    n_p = int(round(alpha * n_t))
    if n_p < 1:
        raise DomainError(f"alpha={alpha} gives no pilots for N_t={n_t}")
    return n_p


def simulate_observation(h: np.ndarray, p: np.ndarray, snr_db: float,
                         rng: Rng) -> PilotObservation:
    """``Y = H P + N`` with ``N`` entrywise CN(0, N_t / 10^(snr/10))."""
    if h.shape[1] != p.shape[0]:
        raise StructureError(f"H {h.shape} and P {p.shape} are not conformable")
    n_t, n_p = p.shape
    sigma2 = snr_to_sigma2(snr_db, n_t)
    n = draw_complex_gaussian_matrix(rng, h.shape[0], n_p, sigma2)
    return PilotObservation(h @ p + n, p, sigma2, snr_db, n_p / n_t)


def denoise(net, x: np.ndarray, t) -> np.ndarray:
    """One-shot endpoint prediction ``x + (1 - t) psi(x, t)``.

    ``net`` is anything with ``forward(x, t)``; batched ``x`` takes a
    per-row ``t``.
    """
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr >= 1):
        raise DomainError("denoiser is undefined at t >= 1")
    v = net.forward(x, t)
    if np.ndim(x) == 4:
        t_arr = np.broadcast_to(t_arr, (np.shape(x)[0],)).reshape(-1, 1, 1, 1)
    return x + (1.0 - t_arr) * v


def fidelity_step(h_k: np.ndarray, obs: PilotObservation, gamma: float) -> np.ndarray:
    """Gradient step on ``||Y - H P||^2 / (2 sigma^2)``."""
    if not gamma > 0:
        raise DomainError("step size must be positive")
    resid = obs.Y - h_k @ obs.P
    return h_k + (gamma / obs.sigma2) * (resid @ obs.P.conj().T)


def renoise(z: np.ndarray, t: float, rng: Rng, variance: float = 2.0) -> np.ndarray:
    """Stacked ``(1 - t) eps + t z`` with ``eps`` entrywise CN(0, variance)."""
    if not 0 <= t <= 1:
        raise DomainError("t must lie in [0, 1]")
    eps = draw_complex_gaussian_matrix(rng, z.shape[0], z.shape[1], variance)
    return stack((1.0 - t) * eps + t * z)


def _streams(rng: Rng, index: int) -> tuple[Rng, Rng]:
    return rng.fork("estimator-init", index), rng.fork("estimator-renoise", index)


def estimate_batch(net, observations: list[PilotObservation], config: EstimatorConfig,
                   rngs: list[Rng], sample_index: int = 0) -> np.ndarray:
    """Run the PnP-PGD loop for many observations at once.

    Observation ``j`` draws from ``rngs[j]`` exactly as a solo call would,
    so each result matches :func:`estimate` up to BLAS rounding.
    """
    if len(observations) != len(rngs):
        raise ValueError("need one rng per observation")
    shape = (2, observations[0].n_r, observations[0].n_t)
    if tuple(net.arch.input_shape) != shape:
        raise StructureError(f"network expects {net.arch.input_shape}, observations give {shape}")
    streams = [_streams(r, sample_index) for r in rngs]
    var = config.noise_variance
    h = [draw_complex_gaussian_matrix(s[0], shape[1], shape[2], 1.0) for s in streams]
    K = config.K
    for k in range(K):
        t = k / K
        x = np.stack([renoise(fidelity_step(h[j], o, config.step_size(o, t)), t, streams[j][1], var)
                      for j, o in enumerate(observations)])
        d = denoise(net, x, t)
        h = list(unstack(d))
        if not np.all(np.isfinite(d)):
            raise SolverError(f"non-finite iterate at iteration {k}")
    return np.stack(h)


def estimate(net, obs: PilotObservation, config: EstimatorConfig, rng: Rng) -> np.ndarray:
    """One posterior sample of the channel from pilot observations."""
    return estimate_batch(net, [obs], config, [rng])[0]


def estimate_mmse(net, obs: PilotObservation, config: EstimatorConfig, rng: Rng) -> np.ndarray:
    """Entrywise mean of ``config.m_samples`` independent posterior samples."""
    samples = [estimate_batch(net, [obs], config, [rng], sample_index=m)[0]
               for m in range(config.m_samples)]
    out = samples[0].copy()
    for s in samples[1:]:
        out += s
    return out / config.m_samples


def estimate_ls(obs: PilotObservation) -> np.ndarray:
    """Minimum-norm least squares ``Y P^H (P P^H)^+``."""
    ph = obs.P.conj().T
    return obs.Y @ ph @ np.linalg.pinv(obs.P @ ph, rcond=1e-10, hermitian=True)


def channel_covariance(samples: np.ndarray) -> np.ndarray:
    """Sample covariance of column-major vectorized channels (zero mean assumed)."""
    n = samples.shape[0]
    v = samples.transpose(0, 2, 1).reshape(n, -1)
    return v.T @ v.conj() / n


LMMSE_MAX_DIM = 4096


def estimate_lmmse(obs: PilotObservation, train: ChannelDataset | None = None,
                   covariance: np.ndarray | None = None) -> np.ndarray:
    """Linear MMSE estimate under the training-set sample covariance."""
    dim = obs.n_r * obs.n_t
    if dim > LMMSE_MAX_DIM:
        raise CapabilityError(
            f"LMMSE needs a dense {dim}x{dim} covariance; limit is {LMMSE_MAX_DIM}. "
            "Use desk-scale dimensions.")
    C = channel_covariance(train.samples) if covariance is None else covariance
    A = np.kron(obs.P.T, np.eye(obs.n_r))
    y = obs.Y.T.reshape(-1)
    CAh = C @ A.conj().T
    G = A @ CAh + obs.sigma2 * np.eye(A.shape[0])
    h = CAh @ np.linalg.solve(G, y)
    return h.reshape(obs.n_t, obs.n_r).T
