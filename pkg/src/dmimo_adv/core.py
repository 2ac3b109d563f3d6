"""Closed-form large-scale-fading metrics for a D-MIMO downlink with MRT.

Arrays follow the ``(..., M, K)`` convention: RU index first, UE index second.
Every function broadcasts over leading batch dimensions.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateStd, NegativeSinr, ShapeMismatch, ZeroPower

LN2 = np.log(2.0)
LOAD_SLACK = 1e-12


def to_db(x):
    return 10.0 * np.log10(x)


def from_db(x_db):
    return np.power(10.0, np.asarray(x_db, dtype=float) / 10.0)


def _check_shapes(beta, eta):
    beta = np.asarray(beta, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if beta.shape != eta.shape or beta.ndim < 2:
        raise ShapeMismatch(f"beta {beta.shape} and eta {eta.shape} must match and be (..., M, K)")
    return beta, eta


def compute_sinr(beta, eta, p_t, noise_power):
    """Per-user SINR of MRT precoding under large-scale-fading knowledge.

    The interference term sums over every user, the served one included, so the
    coherent-gain uncertainty of user ``k`` counts against it.

    Parameters
    ----------
    beta : ndarray, shape (..., M, K)
        Large-scale fading coefficients (linear).
    eta : ndarray, shape (..., M, K)
        Power-control coefficients, non-negative.
    p_t : float
        Maximum transmit power per RU in watts.
    noise_power : float
        Receiver noise power in watts.

    Returns
    -------
    ndarray, shape (..., K)
    """
    beta, eta = _check_shapes(beta, eta)
    coherent = (np.sqrt(eta) * beta).sum(axis=-2) ** 2
    ru_power = (eta * beta).sum(axis=-1)
    interference = (ru_power[..., :, None] * beta).sum(axis=-2)
    return p_t * coherent / (p_t * interference + noise_power)


def compute_se(sinr):
    sinr = np.asarray(sinr, dtype=float)
    if np.any(sinr < 0):
        raise NegativeSinr("SINR must be non-negative")
    return np.log2(1.0 + sinr)


def compute_ee(beta, eta, se, bandwidth, p_t):
    """Access-link energy efficiency in bits per joule.

    ``bandwidth`` is a scalar or a per-user array broadcastable against ``se``.
    """
    beta, eta = _check_shapes(beta, eta)
    consumed = p_t * (eta * beta).sum(axis=(-2, -1))
    if np.any(consumed <= 0):
        raise ZeroPower("total allocated power is zero")
    delivered = (np.asarray(bandwidth, dtype=float) * np.asarray(se, dtype=float)).sum(axis=-1)
    return delivered / consumed


def power_violation(beta, eta):
    """Per-RU normalized power ``sum_k eta*beta``; the allocation is feasible iff all <= 1."""
    beta, eta = _check_shapes(beta, eta)
    return (eta * beta).sum(axis=-1)


def project_feasible(beta, eta):
    """Clamp negatives to zero and scale down every RU row whose load exceeds one.

    Rows within ``LOAD_SLACK`` of one are left alone so the map is idempotent.
    """
    beta, eta = _check_shapes(beta, eta)
    eta = np.maximum(eta, 0.0)
    load = (eta * beta).sum(axis=-1, keepdims=True)
    over = load > 1.0 + LOAD_SLACK
    return np.where(over, eta / np.where(over, load, 1.0), eta)


@dataclass
class SpectralMetrics:
    sinr: np.ndarray
    se: np.ndarray
    min_se: np.ndarray
    sum_se: np.ndarray
    ee: np.ndarray


def evaluate(beta, eta, p_t, noise_power, bandwidth):
    sinr = compute_sinr(beta, eta, p_t, noise_power)
    se = compute_se(sinr)
    return SpectralMetrics(
        sinr=sinr,
        se=se,
        min_se=se.min(axis=-1),
        sum_se=se.sum(axis=-1),
        ee=compute_ee(beta, eta, se, bandwidth, p_t),
    )


@dataclass
class FeatureStats:
    """Per-entry mean and std of ``beta`` in dB, flattened row-major (index m*K + k)."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).ravel()
        self.std = np.asarray(self.std, dtype=float).ravel()
        if self.mean.shape != self.std.shape:
            raise ShapeMismatch("mean and std lengths differ")
        if np.any(self.std < 1e-12):
            raise DegenerateStd("feature std below 1e-12")

    @classmethod
    def fit(cls, beta_db):
        flat = np.asarray(beta_db, dtype=float).reshape(len(beta_db), -1)
        return cls(flat.mean(axis=0), flat.std(axis=0))

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["mean"]), np.array(d["std"]))


def flatten(a):
    """``(..., M, K) -> (..., M*K)`` in row-major order."""
    a = np.asarray(a)
    return a.reshape(a.shape[:-2] + (-1,))


def unflatten(x, m, k):
    x = np.asarray(x)
    if x.shape[-1] != m * k:
        raise ShapeMismatch(f"expected {m * k} features, got {x.shape[-1]}")
    return x.reshape(x.shape[:-1] + (m, k))


def standardize_db(beta_db, stats):
    """dB gains, either ``(..., M, K)`` or already flat ``(..., M*K)``, to features."""
    flat = np.asarray(beta_db, dtype=float)
    if flat.shape[-1] != stats.mean.size:
        flat = flatten(flat)
    if flat.shape[-1] != stats.mean.size:
        raise ShapeMismatch(f"expected {stats.mean.size} features, got {flat.shape[-1]}")
    return (flat - stats.mean) / stats.std


def standardize(beta, stats):
    """Linear-scale ``beta`` -> standardized dB feature vector."""
    return standardize_db(to_db(beta), stats)


def destandardize_db(x, stats):
    return np.asarray(x, dtype=float) * stats.std + stats.mean


def destandardize(x, stats, m, k):
    """Feature vector -> linear-scale ``beta`` of shape ``(..., M, K)``."""
    return unflatten(from_db(destandardize_db(x, stats)), m, k)
