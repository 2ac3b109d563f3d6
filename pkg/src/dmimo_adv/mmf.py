"""Max-min-fair power control by bisection on the common SINR target.

Variables are handled in the normalized form ``c[m, k] = sqrt(eta * beta)`` with
SNR-scaled gains ``g = P_t * beta / sigma^2``. Then

    SINR_k = (sum_m c_mk sqrt(g_mk))^2 / (sum_m g_mk ||c_m||^2 + 1),   ||c_m|| <= 1,

and ``eta = c^2 / beta``. Everything is vectorized over a leading batch axis.

Two feasibility checks are available for a target ``t``:

``"dual"`` (default)
    Multiplicative-gradient ascent on per-RU price weights ``q`` (a point of the
    simplex). For fixed ``q`` the weighted-power minimization has a closed-form
    dual: the uplink balance ``lam_k * sum_m g_mk / (sum_l lam_l g_ml + q_m) = t``
    (solved by Newton), whose optimal downlink directions are
    ``c_mk ∝ sqrt(g_mk) / (sum_l lam_l g_ml + q_m)``. ``sum(lam) > 1`` certifies
    infeasibility; a direction set whose balanced per-RU powers all fit certifies
    feasibility.

``"projected-gradient"``
    Accelerated projected gradient on the squared cone violations over the
    product of per-RU balls. Simpler, slower and less tight near the optimum.
"""

from dataclasses import dataclass, replace

import numpy as np

from .core import compute_sinr
from .errors import InfeasibleModel, InnerNoConvergence, NoConvergence

FEASIBLE, INFEASIBLE, UNDECIDED = 1, -1, 0


@dataclass(frozen=True)
class SolverConfig:
    bisection_tol: float = 1e-4
    max_bisection_iters: int = 60
    max_inner_iters: int = 60
    max_newton_iters: int = 40
    newton_tol: float = 1e-10
    primal_tol: float = 1e-9
    method: str = "dual"
    pg_iters: int = 400
    batch_size: int = 2048
    debug: bool = False

    def __post_init__(self):
        if not (self.bisection_tol > 0 and self.newton_tol > 0 and self.primal_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.method not in ("dual", "projected-gradient"):
            raise ValueError(f"unknown feasibility method {self.method!r}")


@dataclass
class MmfSolution:
    eta: np.ndarray
    achieved_sinr_target: float
    sinr: np.ndarray
    iterations: int
    bracket_width: float
    inner_failures: int


@dataclass
class MmfBatch:
    eta: np.ndarray
    target: np.ndarray
    sinr: np.ndarray
    iterations: np.ndarray
    bracket_width: np.ndarray
    inner_failures: np.ndarray

    def __getitem__(self, i):
        return MmfSolution(
            eta=self.eta[i],
            achieved_sinr_target=float(self.target[i]),
            sinr=self.sinr[i],
            iterations=int(self.iterations[i]),
            bracket_width=float(self.bracket_width[i]),
            inner_failures=int(self.inner_failures[i]),
        )


@dataclass
class FeasibilityResult:
    feasible: bool
    zeta: np.ndarray = None
    certificate: np.ndarray = None
    decided: bool = True
    iterations: int = 0


def batched_solve(a, b):
    """Solve ``a[i] x[i] = b[i]``; singular or non-finite systems give NaN rows."""
    out = np.full(b.shape, np.nan)
    ok = np.isfinite(a).all(axis=(-2, -1)) & np.isfinite(b).all(axis=-1)
    if not ok.any():
        return out
    a_ok, b_ok = a[ok], b[ok]
    try:
        out[ok] = np.linalg.solve(a_ok, b_ok[..., None])[..., 0]
    except np.linalg.LinAlgError:
        sub = np.full(b_ok.shape, np.nan)
        for i in range(len(b_ok)):
            try:
                sub[i] = np.linalg.solve(a_ok[i], b_ok[i])
            except np.linalg.LinAlgError:
                pass
        out[ok] = sub
    return out


def snr_gains(beta, p_t, noise_power):
    return p_t * np.asarray(beta, dtype=float) / noise_power


def sinr_from_c(g, c):
    coherent = (np.sqrt(g) * c).sum(axis=-2) ** 2
    load = (c * c).sum(axis=-1)
    return coherent / ((g * load[..., :, None]).sum(axis=-2) + 1.0)


def _coupling(g, u):
    """Signal gains ``N_k`` and interference couplings ``G[k, l] = sum_m g_mk u_ml^2``."""
    signal = (np.sqrt(g) * u).sum(axis=-2) ** 2
    coupling = np.einsum("bmk,bml->bkl", g, u * u)
    return signal, coupling


def _user_powers(signal, coupling, t):
    """User powers that put every SINR exactly at ``t`` for fixed directions."""
    k = signal.shape[-1]
    a = signal[..., :, None] * np.eye(k) - t[:, None, None] * coupling
    return batched_solve(a, np.repeat(t[:, None], k, axis=1))


def balance_powers(g, directions):
    """Largest common SINR reachable by rescaling each user's column of ``directions``.

    Solves ``max s`` subject to equal SINRs ``s`` and every RU load ``<= 1``. For RU
    ``m`` tight, the user powers are the Perron vector of
    ``diag(1/N) (G + 1 u_m^2)``; the binding RU is the one with the largest Perron
    root. Returns ``c`` with equal SINRs and maximum RU load exactly one.
    """
    u = np.asarray(directions, dtype=float)
    signal, coupling = _coupling(g, u)
    with np.errstate(divide="ignore", invalid="ignore"):
        ext = (coupling[:, None] + (u * u)[:, :, None, :]) / signal[:, None, :, None]
        roots = np.abs(np.linalg.eigvals(np.nan_to_num(ext, nan=np.inf, posinf=1e300))).max(axis=-1)
        s = 1.0 / roots.max(axis=-1)
    powers = _user_powers(signal, coupling, s)
    load = ((u * u) * powers[:, None, :]).sum(axis=-1).max(axis=-1)
    powers = powers / load[:, None]
    return u * np.sqrt(np.maximum(powers, 0.0))[:, None, :]


def _uplink_newton(g, t, q, lam, cfg):
    """Solve ``lam_k r_k(lam) = t`` with ``r_k = sum_m g_mk / (sum_l lam_l g_ml + q_m)``.

    Newton steps that leave the positive orthant fall back to the fixed-point map
    ``t / r(lam)``, which is always positive.
    """
    k = g.shape[-1]
    lam = np.where(np.isfinite(lam) & (lam > 0), lam, 0.0)
    converged = np.zeros(len(g), dtype=bool)
    for _ in range(cfg.max_newton_iters):
        denom = (g * lam[:, None, :]).sum(axis=-1) + q
        w = g / denom[..., None]
        r = w.sum(axis=-2)
        resid = lam * r - t[:, None]
        jac = np.eye(k) * r[:, None, :] - lam[..., None] * np.einsum("bmk,bmj->bkj", w, w)
        with np.errstate(all="ignore"):
            new = lam - batched_solve(jac, resid)
            fixed_point = t[:, None] / r
        bad = ~np.isfinite(new).all(axis=-1) | (new <= 0).any(axis=-1)
        new = np.where(bad[:, None], fixed_point, new)
        converged = (np.abs(new - lam) <= cfg.newton_tol * np.abs(new)).all(axis=-1)
        lam = new
        if converged.all():
            break
    denom = (g * lam[:, None, :]).sum(axis=-1) + q
    return lam, denom, converged & np.isfinite(lam).all(axis=-1)


def _check_dual(g, t, q, lam, cfg):
    """Decide feasibility of target ``t`` per sample; ``q`` and ``lam`` are updated in place."""
    n = len(g)
    status = np.full(n, UNDECIDED)
    c_out = np.zeros_like(g)
    iters = np.zeros(n, dtype=int)
    active = np.arange(n)
    for _ in range(cfg.max_inner_iters):
        ga, ta, qa = g[active], t[active], q[active]
        lam_a, denom, ok = _uplink_newton(ga, ta, qa, lam[active], cfg)
        lam[active] = np.where(ok[:, None], lam_a, lam[active])
        u = np.sqrt(ga) / denom[..., None]
        with np.errstate(all="ignore"):
            signal, coupling = _coupling(ga, u)
            powers = _user_powers(signal, coupling, ta)
            load = ((u * u) * powers[:, None, :]).sum(axis=-1)
        iters[active] += 1
        bad_powers = ~np.isfinite(powers).all(axis=-1) | (powers < 0).any(axis=-1)
        infeasible = ~ok | (lam_a.sum(axis=-1) > 1.0) | bad_powers
        feasible = ~infeasible & (load.max(axis=-1) <= 1.0)
        status[active[infeasible]] = INFEASIBLE
        status[active[feasible]] = FEASIBLE
        c_out[active[feasible]] = u[feasible] * np.sqrt(powers[feasible])[:, None, :]
        pending = ~(infeasible | feasible)
        with np.errstate(all="ignore"):
            step = qa * load
            step = np.maximum(step / step.sum(axis=-1, keepdims=True), 1e-15)
        q[active[pending]] = step[pending]
        active = active[pending]
        if len(active) == 0:
            break
    return status, c_out, iters


def _project_rows(c):
    c = np.maximum(c, 0.0)
    norm = np.sqrt((c * c).sum(axis=-1, keepdims=True))
    return c / np.maximum(norm, 1.0)


def _penalty(g, c, t):
    """Squared cone violations ``0.5 sum_k max(0, sqrt(t I_k) - a_k.c_k)^2 / ||a_k||^2`` and gradient."""
    a = np.sqrt(g)
    load = (c * c).sum(axis=-1)
    root = np.sqrt((g * load[..., :, None]).sum(axis=-2) + 1.0)
    st = np.sqrt(t)[:, None]
    scale = g.sum(axis=-2)
    viol = np.maximum(st * root - (a * c).sum(axis=-2), 0.0)
    value = 0.5 * (viol**2 / scale).sum(axis=-1)
    r = viol / scale
    coef = (g * (st * r / root)[:, None, :]).sum(axis=-1)
    grad = c * coef[..., None] - a * r[:, None, :]
    return value, grad


def _check_pg(g, t, c0, cfg):
    """FISTA with backtracking and adaptive restart on the cone-violation penalty."""
    n = len(g)
    lip = np.ones(n)
    x = _project_rows(c0)
    y = x.copy()
    fx = _penalty(g, x, t)[0]
    theta = 1.0
    status = np.full(n, UNDECIDED)
    c_out = np.zeros_like(g)
    for it in range(cfg.pg_iters):
        f, grad = _penalty(g, y, t)
        while True:
            xn = _project_rows(y - grad / lip[:, None, None])
            fn = _penalty(g, xn, t)[0]
            d = xn - y
            ok = fn <= f + (grad * d).sum(axis=(-2, -1)) + 0.5 * lip * (d * d).sum(axis=(-2, -1)) + 1e-15
            if ok.all():
                break
            lip = np.where(ok, lip, 2.0 * lip)
        theta_n = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * theta * theta))
        y = xn + ((theta - 1.0) / theta_n) * (xn - x)
        y = np.where((fn > fx)[:, None, None], xn, y)
        x, fx, theta = xn, fn, theta_n
        lip *= 0.9
        hit = (status == UNDECIDED) & (sinr_from_c(g, x).min(axis=-1) >= t * (1.0 - cfg.primal_tol))
        status[hit] = FEASIBLE
        c_out[hit] = x[hit]
        if (status == FEASIBLE).all():
            break
    return status, c_out, np.full(n, it + 1)


def _upper_bound(g):
    """``t*`` never exceeds any user's ``min(M, (sum_m sqrt g_mk)^2)``.

    The second term bounds the numerator with every amplitude at one and the
    denominator below by one; the first is Cauchy-Schwarz against the self term.
    """
    m = g.shape[-2]
    return np.minimum(float(m), np.sqrt(g).sum(axis=-2) ** 2).min(axis=-1)


def _solve_chunk(g, cfg):
    n, m, k = g.shape
    best = balance_powers(g, np.sqrt(g))
    lo = sinr_from_c(g, best).min(axis=-1)
    if not np.isfinite(lo).all():
        raise InfeasibleModel("equal-direction start is not finite")
    hi = np.maximum(_upper_bound(g), lo)
    q = np.full((n, m), 1.0 / m)
    lam = np.zeros((n, k))
    t_prev = np.maximum(lo, 1e-300)
    iters = np.zeros(n, dtype=int)
    failures = np.zeros(n, dtype=int)
    for _ in range(cfg.max_bisection_iters):
        active = np.nonzero(hi - lo > cfg.bisection_tol * hi)[0]
        if len(active) == 0:
            break
        t = 0.5 * (lo[active] + hi[active])
        if cfg.method == "dual":
            lam_a = lam[active] * (t / t_prev[active])[:, None]
            q_a = q[active]
            status, c, _ = _check_dual(g[active], t, q_a, lam_a, cfg)
            q[active], lam[active], t_prev[active] = q_a, lam_a, t
        else:
            status, c, _ = _check_pg(g[active], t, best[active], cfg)
        iters[active] += 1
        failures[active] += status == UNDECIDED
        ok = status == FEASIBLE
        if ok.any():
            idx = active[ok]
            polished = balance_powers(g[idx], c[ok])
            reached = sinr_from_c(g[idx], polished).min(axis=-1)
            better = reached > lo[idx]
            best[idx[better]] = polished[better]
            lo[idx[better]] = reached[better]
        hi[active[~ok]] = t[~ok]
    if (hi - lo > cfg.bisection_tol * hi).any():
        raise NoConvergence(f"bracket still open after {cfg.max_bisection_iters} bisection steps")
    return best, lo, hi, iters, failures


def solve_mmf_batch(beta, p_t, noise_power, cfg=SolverConfig()):
    """Max-min-fair power coefficients for a ``(B, M, K)`` batch of channels."""
    beta = np.asarray(beta, dtype=float)
    if np.any(~(beta > 0)) or not np.isfinite(beta).all():
        raise InfeasibleModel("beta must be strictly positive and finite", beta=beta)
    g = snr_gains(beta, p_t, noise_power)
    n = len(g)
    c = np.empty_like(g)
    lo = np.empty(n)
    hi = np.empty(n)
    iters = np.empty(n, dtype=int)
    failures = np.empty(n, dtype=int)
    for s in range(0, n, cfg.batch_size):
        sl = slice(s, s + cfg.batch_size)
        try:
            c[sl], lo[sl], hi[sl], iters[sl], failures[sl] = _solve_chunk(g[sl], cfg)
        except (NoConvergence, InfeasibleModel) as exc:
            raise type(exc)(str(exc), beta=beta[sl]) from exc
    eta = c * c / beta
    sinr = compute_sinr(beta, eta, p_t, noise_power)
    out = MmfBatch(eta, sinr.min(axis=-1), sinr, iters, hi - lo, failures)
    if cfg.debug:
        _assert_monotone(beta, p_t, noise_power, out.target, cfg)
    return out


def solve_mmf(beta, p_t, noise_power, cfg=SolverConfig()):
    """Max-min-fair power coefficients for a single ``(M, K)`` channel.

    Examples
    --------
    >>> sol = solve_mmf(np.ones((1, 1)), 1.0, 1.0)
    >>> round(float(sol.eta[0, 0]), 6), round(sol.achieved_sinr_target, 6)
    (1.0, 0.5)
    """
    return solve_mmf_batch(np.asarray(beta, dtype=float)[None], p_t, noise_power, cfg)[0]


def check_feasibility(beta, t, p_t, noise_power, cfg=SolverConfig(), strict=False, warm=None):
    """Is SINR target ``t`` reachable for every user under the per-RU constraints?

    Returns a :class:`FeasibilityResult`. When feasible, ``zeta`` holds square-root
    power coefficients ``sqrt(eta)`` meeting the target. With the dual method an
    infeasible verdict carries the per-RU price vector ``certificate`` whose
    weighted minimum power exceeds the budget. Checks that reach their iteration
    limit report ``feasible=False, decided=False``, or raise
    :class:`InnerNoConvergence` when ``strict``.
    """
    beta = np.asarray(beta, dtype=float)
    g = snr_gains(beta, p_t, noise_power)[None]
    m, k = beta.shape
    tt = np.array([float(t)])
    if t <= 0:
        return FeasibilityResult(True, zeta=np.zeros_like(beta), iterations=0)
    if cfg.method == "dual":
        q = np.full((1, m), 1.0 / m)
        lam = np.zeros((1, k))
        status, c, iters = _check_dual(g, tt, q, lam, cfg)
        cert = q[0]
    else:
        start = np.sqrt(np.full((1, m, k), 1.0 / k)) if warm is None else np.sqrt(warm * beta)[None]
        status, c, iters = _check_pg(g, tt, start, cfg)
        cert = None
    st = int(status[0])
    if st == UNDECIDED and strict:
        raise InnerNoConvergence(f"feasibility of t={t} undecided", beta=beta)
    zeta = c[0] / np.sqrt(beta) if st == FEASIBLE else None
    return FeasibilityResult(
        feasible=st == FEASIBLE,
        zeta=zeta,
        certificate=cert if st == INFEASIBLE else None,
        decided=st != UNDECIDED,
        iterations=int(iters[0]),
    )


def _assert_monotone(beta, p_t, noise_power, target, cfg):
    relaxed = replace(cfg, debug=False)
    for b, t in zip(beta, target):
        for frac in (0.25, 0.5, 0.75):
            res = check_feasibility(b, frac * t, p_t, noise_power, relaxed)
            if not res.feasible:
                raise NoConvergence(f"target {frac * t} below optimum {t} judged infeasible", beta=b)


def equal_power_baseline(beta):
    """Every RU splits its budget equally over the users: ``eta = 1 / (K beta)``."""
    beta = np.asarray(beta, dtype=float)
    return 1.0 / (beta.shape[-1] * beta)
