"""Input perturbations against the power-allocation network.

All perturbations live in the dB domain of the reported channel gains and are
bounded per entry by ``epsilon`` dB. Gradient attacks ascend the attack loss
``L = -sum_k SE_k``: the adversary wants every user's spectral efficiency down.
``sign(0)`` is taken as ``+1``.

Functions accept a single vector ``(M*K,)`` or a batch ``(B, M*K)``; masks are
boolean arrays broadcastable to the same shape.
"""

import enum
from dataclasses import dataclass

import numpy as np

from .core import flatten, from_db, standardize_db, to_db, unflatten
from .errors import DegenerateSpectrum, DmimoError, IndexOutOfRange
from .nn import forward, input_gradient, sum_se_and_grad
from .scenario import DEFAULT_NOISE_W


class Threat(str, enum.Enum):
    FULL = "FULL"
    MALICIOUS_RUS = "MALICIOUS_RUS"
    MALICIOUS_UES = "MALICIOUS_UES"


@dataclass(frozen=True)
class AttackMask:
    known: np.ndarray
    modifiable: np.ndarray
    threat: Threat
    indices: tuple = ()

    def __post_init__(self):
        if np.any(self.modifiable & ~self.known):
            raise ValueError("modifiable entries must be known")

    @property
    def flat_known(self):
        return flatten(self.known)

    @property
    def flat_modifiable(self):
        return flatten(self.modifiable)


def make_mask(threat, malicious_indices, m, k):
    """Boolean ``(M, K)`` grids for a threat; malicious RUs own rows, malicious UEs own columns."""
    threat = Threat(threat)
    grid = np.zeros((m, k), dtype=bool)
    idx = tuple(sorted(int(i) for i in (malicious_indices or ())))
    if threat is Threat.FULL:
        grid[:] = True
    elif threat is Threat.MALICIOUS_RUS:
        if any(i < 0 or i >= m for i in idx):
            raise IndexOutOfRange(f"RU index out of range 0..{m - 1}: {idx}")
        grid[list(idx), :] = True
    else:
        if any(i < 0 or i >= k for i in idx):
            raise IndexOutOfRange(f"UE index out of range 0..{k - 1}: {idx}")
        grid[:, list(idx)] = True
    return AttackMask(grid, grid.copy(), threat, idx)


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    alpha: float = None
    bim_iters: int = 10
    uap_samples: int = 32
    seed: int = 0
    mask_uap: bool = True
    total_power: float = 0.2
    noise_power: float = DEFAULT_NOISE_W

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.alpha is None:
            object.__setattr__(self, "alpha", self.epsilon / 8.0)
        if self.epsilon > 0 and not 0 < self.alpha <= self.epsilon:
            raise ValueError("need 0 < alpha <= epsilon")
        if self.bim_iters < 1 or self.uap_samples < 1:
            raise ValueError("bim_iters and uap_samples must be >= 1")


@dataclass
class Perturbation:
    delta: np.ndarray
    diagnostics: dict = None


class BudgetViolation(DmimoError, AssertionError):
    pass


def check_budget(delta, epsilon, modifiable=None):
    """Raise unless ``|delta| <= epsilon`` everywhere and ``delta == 0`` off ``modifiable``."""
    delta = np.asarray(delta)
    if np.any(np.abs(delta) > epsilon + 1e-12):
        raise BudgetViolation(f"perturbation exceeds {epsilon} dB")
    if modifiable is not None and np.any(delta[~np.broadcast_to(modifiable, delta.shape)] != 0):
        raise BudgetViolation("perturbation touches entries outside the mask")


def sign_pos(x):
    return np.where(x >= 0, 1.0, -1.0)


def gaussian_attack(beta_true, modifiable, cfg, rng):
    """Baseline noise: ``N(0, epsilon^2)`` dB per modifiable entry, clipped to ``[-eps, eps]``."""
    shape = flatten(np.asarray(beta_true)).shape
    noise = cfg.epsilon * rng.standard_normal(shape)
    delta = np.where(modifiable, np.clip(noise, -cfg.epsilon, cfg.epsilon), 0.0)
    check_budget(delta, cfg.epsilon, modifiable)
    return Perturbation(delta, {"raw": noise})


def _objective_grad_db(model, z, beta_belief, cfg):
    """Sum SE and its gradient w.r.t. the dB input ``z``."""
    stats = model.feature_stats
    j, gx = input_gradient(model, standardize_db(z, stats), beta_belief, cfg.total_power, cfg.noise_power)
    return j, gx / stats.std


def bim(model, z_start, beta_belief, modifiable, cfg):
    """Basic iterative method in the dB domain.

    Each step moves every modifiable entry by ``alpha`` along the sign of the
    attack-loss gradient and clips back to within ``epsilon`` of ``z_start``.

    Parameters
    ----------
    model : MlpModel
        The network used to craft the perturbation (surrogate or original).
    z_start : ndarray, shape (B, M*K)
        Starting reported gains in dB.
    beta_belief : ndarray, shape (B, M, K)
        The adversary's stand-in for the physical channel in the SE formula.
    modifiable : ndarray of bool, broadcastable to ``z_start``
    cfg : AttackConfig

    Returns
    -------
    z_adv : ndarray, shape (B, M*K)
    rho : ndarray, shape (B, M*K)
        Masked attack-loss gradients accumulated over the iterations.
    """
    z0 = np.atleast_2d(np.asarray(z_start, dtype=float))
    mod = np.broadcast_to(modifiable, z0.shape)
    beta_belief = np.asarray(beta_belief, dtype=float).reshape((len(z0),) + np.shape(beta_belief)[-2:])
    z = z0.copy()
    rho = np.zeros_like(z0)
    if cfg.epsilon == 0:
        return z, rho
    for _ in range(cfg.bim_iters):
        _, grad_j = _objective_grad_db(model, z, beta_belief, cfg)
        grad = np.where(mod, -grad_j, 0.0)
        rho += grad
        z = np.clip(z + cfg.alpha * np.where(mod, sign_pos(grad), 0.0), z0 - cfg.epsilon, z0 + cfg.epsilon)
    check_budget(z - z0, cfg.epsilon, mod)
    return z, rho


def fgsm(model, z, beta_belief, modifiable, cfg):
    """Single full-size sign step; identical to :func:`bim` with one iteration and ``alpha = epsilon``."""
    one_step = AttackConfig(
        epsilon=cfg.epsilon,
        alpha=cfg.epsilon if cfg.epsilon > 0 else None,
        bim_iters=1,
        uap_samples=cfg.uap_samples,
        seed=cfg.seed,
        mask_uap=cfg.mask_uap,
        total_power=cfg.total_power,
        noise_power=cfg.noise_power,
    )
    return bim(model, z, beta_belief, modifiable, one_step)[0]


def sum_se_of_inputs(model, z, beta_belief, cfg):
    """Sum SE the adversary predicts when the network sees dB input ``z``."""
    m, k = beta_belief.shape[-2:]
    nu = unflatten(forward(model, standardize_db(z, model.feature_stats)), m, k)
    return sum_se_and_grad(nu, cfg.total_power * beta_belief / cfg.noise_power)[0]


def principal_direction(p, tol=1e-9):
    """Top right singular vector of each ``(N, D)`` matrix in a batch ``(B, N, D)``.

    The sign is fixed so that the largest-magnitude entry is positive. Also returns
    a flag per matrix telling whether the top two singular values tie within ``tol``.
    """
    _, s, vh = np.linalg.svd(p, full_matrices=False)
    v = vh[:, 0, :]
    lead = np.take_along_axis(v, np.abs(v).argmax(axis=-1)[:, None], axis=-1)
    v = v * sign_pos(lead)
    if s.shape[-1] > 1:
        tied = np.abs(s[:, 0] - s[:, 1]) <= tol * np.maximum(s[:, 0], 1.0)
    else:
        tied = np.zeros(len(s), dtype=bool)
    return v, tied


def m_uap(z_partial, known, modifiable, pool, model, cfg, strict=False):
    """Universal perturbation from partial input knowledge (PCA over BIM gradients).

    For each live input (row of ``z_partial``):

    1. copy its known entries into every row of its pool ``X``;
    2. run :func:`bim` on every row of ``X``, stacking accumulated gradients into ``P``;
    3. take the principal right singular vector ``v1`` of ``P``;
    4. form ``+eps*sign(v1)`` and its negation (masked), and keep the one whose
       predicted sum SE over the rows of ``X`` is lower;
    5. zero the perturbation outside the modifiable entries.

    Parameters
    ----------
    z_partial : ndarray, shape (B, M*K)
        Live inputs in dB; only entries under ``known`` are read.
    known, modifiable : ndarray of bool, broadcastable to ``(B, M*K)``
    pool : ndarray, shape (B, N, M*K)
        Held-out inputs in dB available to the adversary.
    model : MlpModel
        Crafting model (normally the surrogate).
    cfg : AttackConfig
    strict : bool
        Raise :class:`DegenerateSpectrum` on tied singular values instead of flagging.

    Returns
    -------
    Perturbation
        ``delta`` with shape ``(B, M*K)``; ``diagnostics`` holds the chosen sign per
        input and the tie flags.
    """
    z_partial = np.atleast_2d(np.asarray(z_partial, dtype=float))
    b, d = z_partial.shape
    pool = np.asarray(pool, dtype=float).reshape(b, -1, d)
    n = pool.shape[1]
    known = np.broadcast_to(known, (b, d))
    mod = np.broadcast_to(modifiable, (b, d))
    m, k = model.grid

    rows = np.where(known[:, None, :], z_partial[:, None, :], pool)
    flat_rows = rows.reshape(b * n, d)
    belief = unflatten(from_db(flat_rows), m, k)
    row_mod = np.repeat(mod, n, axis=0)
    _, rho = bim(model, flat_rows, belief, row_mod, cfg)

    v1, tied = principal_direction(rho.reshape(b, n, d))
    if strict and tied.any():
        raise DegenerateSpectrum("top singular values tie")
    delta1 = cfg.epsilon * sign_pos(v1)
    if cfg.mask_uap:
        delta1 = np.where(mod, delta1, 0.0)
    scores = []
    for cand in (delta1, -delta1):
        shifted = flat_rows + np.repeat(cand, n, axis=0)
        scores.append(sum_se_of_inputs(model, shifted, belief, cfg).reshape(b, n).sum(axis=1))
    use_second = scores[1] < scores[0]
    delta = np.where(use_second[:, None], -delta1, delta1)
    if cfg.mask_uap:
        delta = np.where(mod, delta, 0.0)
        check_budget(delta, cfg.epsilon, mod)
    else:
        check_budget(delta, cfg.epsilon)
    return Perturbation(delta, {"sign": np.where(use_second, -1, 1), "degenerate": tied})


def apply_attack(beta_true, delta):
    """Reported gains: ``beta_true`` shifted by ``delta`` dB (flattened or ``(M, K)`` delta)."""
    beta_true = np.asarray(beta_true, dtype=float)
    delta = np.asarray(delta, dtype=float).reshape(beta_true.shape)
    return from_db(to_db(beta_true) + delta)


def pool_rows(pool_db, rng, n):
    """``n`` distinct rows of the adversary's held-out pool (with replacement if the pool is small)."""
    replace = n > len(pool_db)
    return pool_db[rng.choice(len(pool_db), size=n, replace=replace)]


__all__ = [
    "AttackConfig",
    "AttackMask",
    "BudgetViolation",
    "Perturbation",
    "Threat",
    "apply_attack",
    "bim",
    "check_budget",
    "fgsm",
    "gaussian_attack",
    "m_uap",
    "make_mask",
    "pool_rows",
    "principal_direction",
]
