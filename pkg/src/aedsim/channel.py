"""Synthetic fluid-antenna channel process and derived prediction datasets.

The channel is a first-order Gauss-Markov (AR(1)) complex fading process per
port, with exponentially decaying spatial correlation between ports:

    h_t = rho_t * h_{t-1} + sqrt(1 - rho_t^2) * w_t,
    corr(w[i], w[j]) = rho_s ** |i - j|   (per I and Q component)

The stationary per-component variance is 1, and the initial state is drawn
from the stationary distribution, so traces have no transient. Magnitudes
optionally carry additive measurement noise (``noise_floor``), clamped at 0.

A supervised dataset is built by sliding a length-K window of magnitudes and
labeling each window with the argmax-magnitude port of the next step. The
digital-twin forecast is the analytic conditional mean of the process.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class EnvConfig:
    """Channel process parameters.

    n_ports: number of fluid-antenna ports (>= 2)
    window: history length K in time steps (>= 1)
    rho_t: temporal correlation in [0, 1]
    rho_s: spatial correlation base between adjacent ports, in [0, 1)
    trace_len: number of time steps T (> window + 1)
    noise_floor: std of additive Gaussian noise on magnitudes (>= 0)
    """

    n_ports: int = 8
    window: int = 4
    rho_t: float = 0.98
    rho_s: float = 0.7
    trace_len: int = 24_000
    noise_floor: float = 0.01

    def validate(self) -> None:
        if self.n_ports < 2:
            raise ConfigurationError("n_ports", f"must be >= 2, got {self.n_ports}")
        if self.window < 1:
            raise ConfigurationError("window", f"must be >= 1, got {self.window}")
        if not 0.0 <= self.rho_t <= 1.0:
            raise ConfigurationError("rho_t", f"must be in [0, 1], got {self.rho_t}")
        if not 0.0 <= self.rho_s < 1.0:
            raise ConfigurationError("rho_s", f"must be in [0, 1), got {self.rho_s}")
        if self.trace_len <= self.window + 1:
            raise ConfigurationError(
                "trace_len", f"must exceed window + 1 = {self.window + 1}, got {self.trace_len}"
            )
        if self.noise_floor < 0.0:
            raise ConfigurationError("noise_floor", f"must be >= 0, got {self.noise_floor}")


@dataclass(frozen=True)
class ChannelTrace:
    """Time-indexed per-port complex gains and their (noisy) magnitudes."""

    gains: np.ndarray  # (T, n_ports) complex128
    mags: np.ndarray  # (T, n_ports) float64, >= 0
    seed: int

    @property
    def trace_len(self) -> int:
        return self.gains.shape[0]

    @property
    def n_ports(self) -> int:
        return self.gains.shape[1]


@dataclass(frozen=True)
class Dataset:
    """Flattened magnitude windows and next-step best-port labels."""

    features: np.ndarray  # (M, K * n_ports) float64
    labels: np.ndarray  # (M,) int64, each in [0, n_ports)

    def __len__(self) -> int:
        return self.features.shape[0]


def _spatial_chol(n_ports: int, rho_s: float) -> np.ndarray:
    """Cholesky factor of the exponential spatial correlation matrix."""
    idx = np.arange(n_ports)
    corr = rho_s ** np.abs(idx[:, None] - idx[None, :])
    return np.linalg.cholesky(corr)


def generate_trace(cfg: EnvConfig, seed: int) -> ChannelTrace:
    """Simulate the channel for cfg.trace_len steps; pure in (cfg, seed)."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    chol = _spatial_chol(cfg.n_ports, cfg.rho_s)
    innov_scale = np.sqrt(1.0 - cfg.rho_t**2)

    # (T, n_ports, 2) spatially correlated unit-variance noise, I and Q.
    raw = rng.standard_normal((cfg.trace_len, cfg.n_ports, 2))
    noise = np.einsum("pq,tqc->tpc", chol, raw)

    state = np.empty((cfg.trace_len, cfg.n_ports, 2))
    state[0] = noise[0]  # stationary covariance equals the innovation covariance
    for t in range(1, cfg.trace_len):
        state[t] = cfg.rho_t * state[t - 1] + innov_scale * noise[t]

    gains = state[..., 0] + 1j * state[..., 1]
    mags = np.abs(gains)
    if cfg.noise_floor > 0.0:
        mags = mags + cfg.noise_floor * rng.standard_normal(mags.shape)
        mags = np.maximum(mags, 0.0)
    return ChannelTrace(gains=gains, mags=mags, seed=seed)


def best_port(mags_row: np.ndarray) -> int:
    """Index of the largest magnitude; ties go to the lowest index."""
    row = np.asarray(mags_row)
    if row.size == 0:
        raise ValueError("mags_row must be nonempty")
    return int(np.argmax(row))


def make_dataset(trace: ChannelTrace, window: int) -> Dataset:
    """Slide a length-``window`` magnitude window over the trace.

    Sample i covers mags[i : i+window) flattened row-major and is labeled
    with the best port at step i+window. Yields trace_len - window samples.
    """
    t_len, n_ports = trace.mags.shape
    if t_len <= window:
        raise ValueError(f"trace_len {t_len} must exceed window {window}")
    m = t_len - window
    features = np.empty((m, window * n_ports))
    labels = np.empty(m, dtype=np.int64)
    for i in range(m):
        features[i] = trace.mags[i : i + window].reshape(-1)
        labels[i] = best_port(trace.mags[i + window])
    return Dataset(features=features, labels=labels)


def dt_forecast(trace: ChannelTrace, cfg: EnvConfig, horizon: int) -> np.ndarray:
    """Conditional mean of the gains ``horizon`` steps past the trace end.

    For the AR(1) process this is rho_t**horizon times the last gain row;
    horizon 0 returns the last row unchanged.
    """
    if horizon < 0:
        raise ValueError(f"horizon must be >= 0, got {horizon}")
    return cfg.rho_t**horizon * trace.gains[-1]


def normalize_features(
    features: np.ndarray, mean: np.ndarray, std: np.ndarray
) -> np.ndarray:
    """Z-score features with the supplied per-dimension statistics."""
    return (features - mean) / std


def feature_norm_stats(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and std of a clean training matrix (std floored)."""
    mean = features.mean(axis=0)
    std = np.maximum(features.std(axis=0), 1e-9)
    return mean, std
