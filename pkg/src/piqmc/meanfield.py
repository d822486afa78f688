"""Discrete transfer-matrix free energies and their saddle points.

A single spin in the field profile lambda(tau) contributes the chain

    V = tr( L[lam(R-1)] ... L[lam(1)] L[lam(0)] ),
    L(lam) = C D(lam),
    C = [[e^(bJ), e^(-bJ)], [e^(-bJ), e^(bJ)]],
    D(lam) = diag(e^(d lam), e^(-d lam)),      d = beta/R,

for the periodic chain, and V~ = tr(omega D[lam(R-1)] C ... C D[lam(0)])
with omega = 1 + sigma_x for the open chain (R slices but only R - 1
couplings).  Writing C = c exp(Gamma d sigma_x) with c = e^(bJ)/cosh(Gamma d)
is exact because of how J is derived from Gamma, so every chain factor is
the exponential of sigma_x or sigma_z.  Conjugating insertion operators
through such factors preserves the combination m_x^2 - (i m_y)^2 + m_z^2,
which is why that norm is conserved slot to slot to rounding error, equals
1 identically on open chains (sigma_x omega = omega pins the end slots),
and is a constant ell <= 1 on periodic chains.

free_energy is the per-spin functional

    F = (1/R) sum_tau (lam(tau) m(tau) - g[m(tau)]) - ln(V) / beta,

stationary where lam = g'(m) and m equals the chain magnetization.
free_energy_continuum removes the per-bond factor c so that values at
different R share the continuum normalization and can be extrapolated.

All transfer products run in log-scaled form (running max-entry rescaling);
magnetizations are ratios of traces built from the same scaled prefix and
suffix arrays, so the rescaling factors drop out exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .model import Boundary, ModelSpec, QmcParams

KIND_MINIMUM = "minimum"
KIND_SADDLE = "saddle"


@dataclass(frozen=True)
class TransferMatrix:
    """One slice factor L(lambda); entries strictly positive."""

    entries: np.ndarray


@dataclass
class FieldProfile:
    """Mean field lambda(tau) and magnetization m(tau) on R slices."""

    lambdas: np.ndarray
    magnetizations: np.ndarray
    boundary: Boundary

    def __post_init__(self) -> None:
        self.lambdas = np.asarray(self.lambdas, dtype=float)
        self.magnetizations = np.asarray(self.magnetizations, dtype=float)
        if self.lambdas.shape != self.magnetizations.shape or self.lambdas.ndim != 1:
            raise ValueError("lambdas and magnetizations must be equal-length vectors")
        self.boundary = Boundary(self.boundary)

    @property
    def replicas(self) -> int:
        return len(self.lambdas)


@dataclass(frozen=True)
class SaddleResult:
    profile: FieldProfile
    free_energy: float
    residual_norm: float
    kind: str


def transfer_matrix(lam: float, spec: ModelSpec, params: QmcParams) -> TransferMatrix:
    bj = spec.beta * params.coupling
    d = spec.beta / params.replicas
    c = np.array([[math.exp(bj), math.exp(-bj)], [math.exp(-bj), math.exp(bj)]])
    entries = c @ np.diag([math.exp(d * lam), math.exp(-d * lam)])
    if not np.all(np.isfinite(entries)):
        raise ValueError("transfer matrix overflow; rescale beta*J or lambda")
    return TransferMatrix(entries)


@njit(cache=True)
def _mul2(a, b, out):
    out[0, 0] = a[0, 0] * b[0, 0] + a[0, 1] * b[1, 0]
    out[0, 1] = a[0, 0] * b[0, 1] + a[0, 1] * b[1, 1]
    out[1, 0] = a[1, 0] * b[0, 0] + a[1, 1] * b[1, 0]
    out[1, 1] = a[1, 0] * b[0, 1] + a[1, 1] * b[1, 1]


@njit(cache=True)
def _chain_arrays(lam, bj, delta, open_bc):
    """Scaled prefix/suffix products of the slice blocks, plus ln V.

    pref[k] = B_{k-1} ... B_0 (pref[0] = I), suf[k] = T B_{R-2} ... B_k
    (suf[R] = I), where B_tau = C D_tau and the top factor T is D_{R-1}
    alone on open chains.  Every stored matrix is divided by its largest
    entry; the logs accumulate only into lnv.
    """
    r = lam.shape[0]
    ec = math.exp(bj)
    es = math.exp(-bj)
    pref = np.empty((r + 1, 2, 2))
    suf = np.empty((r + 1, 2, 2))
    blocks = np.empty((r, 2, 2))
    for t in range(r):
        d = math.exp(delta * lam[t])
        if open_bc and t == r - 1:
            blocks[t, 0, 0] = d
            blocks[t, 0, 1] = 0.0
            blocks[t, 1, 0] = 0.0
            blocks[t, 1, 1] = 1.0 / d
        else:
            blocks[t, 0, 0] = ec * d
            blocks[t, 0, 1] = es / d
            blocks[t, 1, 0] = es * d
            blocks[t, 1, 1] = ec / d
    pref[0, 0, 0] = 1.0
    pref[0, 0, 1] = 0.0
    pref[0, 1, 0] = 0.0
    pref[0, 1, 1] = 1.0
    lnv = 0.0
    tmp = np.empty((2, 2))
    for t in range(r):
        _mul2(blocks[t], pref[t], tmp)
        s = abs(tmp[0, 0])
        for i in range(2):
            for j in range(2):
                if abs(tmp[i, j]) > s:
                    s = abs(tmp[i, j])
        lnv += math.log(s)
        pref[t + 1] = tmp / s
    suf[r, 0, 0] = 1.0
    suf[r, 0, 1] = 0.0
    suf[r, 1, 0] = 0.0
    suf[r, 1, 1] = 1.0
    for t in range(r - 1, -1, -1):
        _mul2(suf[t + 1], blocks[t], tmp)
        s = abs(tmp[0, 0])
        for i in range(2):
            for j in range(2):
                if abs(tmp[i, j]) > s:
                    s = abs(tmp[i, j])
        suf[t] = tmp / s
    full = pref[r]
    if open_bc:
        tr = full[0, 0] + full[0, 1] + full[1, 0] + full[1, 1]
    else:
        tr = full[0, 0] + full[1, 1]
    lnv += math.log(tr)
    return pref, suf, blocks, lnv


@njit(cache=True)
def _slot_ratio(suf_k, pref_k, open_bc):
    """Traces (with or without omega) of S*P, S*sx*P, S*isy*P, S*sz*P."""
    den = 0.0
    num_x = 0.0
    num_y = 0.0
    num_z = 0.0
    for i in range(2):
        for j in range(2):
            # (sigma_a P) rows: sx swaps, i sy swaps with sign, sz signs
            pxj = pref_k[1 - i, j]
            pij = pref_k[i, j]
            sgn_y = 1.0 if i == 0 else -1.0
            sgn_z = 1.0 if i == 0 else -1.0
            if open_bc:
                # tr(omega S M P) = sum over all entries of (S M P)
                w = suf_k[0, i] + suf_k[1, i]
            else:
                w = suf_k[j, i]
            den += w * pij
            num_x += w * pxj
            num_y += w * sgn_y * pxj
            num_z += w * sgn_z * pij
    return den, num_x, num_y, num_z


@njit(cache=True)
def _chain_observables(lam, bj, delta, open_bc):
    """ln V and the slice magnetizations m(tau) of one chain."""
    r = lam.shape[0]
    pref, suf, _, lnv = _chain_arrays(lam, bj, delta, open_bc)
    mbar = np.empty(r)
    for t in range(r):
        den, _, _, num_z = _slot_ratio(suf[t], pref[t], open_bc)
        mbar[t] = num_z / den
    return lnv, mbar


@njit(cache=True)
def _chain_vector(lam, bj, delta, open_bc):
    """(m_x, i m_y, m_z) at the insertion slots; R+1 slots when open."""
    r = lam.shape[0]
    pref, suf, _, _ = _chain_arrays(lam, bj, delta, open_bc)
    n_slots = r + 1 if open_bc else r
    out = np.empty((n_slots, 3))
    for k in range(n_slots):
        den, num_x, num_y, num_z = _slot_ratio(suf[k], pref[k], open_bc)
        out[k, 0] = num_x / den
        out[k, 1] = num_y / den
        out[k, 2] = num_z / den
    return out


def _chain_args(spec: ModelSpec, params: QmcParams):
    return (spec.beta * params.coupling, spec.beta / params.replicas,
            params.boundary is Boundary.OPEN)


def log_trace_partition(profile: FieldProfile, spec: ModelSpec, params: QmcParams) -> float:
    """ln V (periodic) or ln V~ (open) for the profile's lambda(tau)."""
    if profile.replicas != params.replicas:
        raise ValueError("profile length does not match replicas")
    lnv, _ = _chain_observables(profile.lambdas, *_chain_args(spec, params))
    return float(lnv)


def trace_partition(profile: FieldProfile, spec: ModelSpec, params: QmcParams) -> float:
    """V or V~ itself; overflows to inf for very large beta*J*R."""
    with np.errstate(over="ignore"):
        return float(np.exp(log_trace_partition(profile, spec, params)))


def slice_magnetization(profile: FieldProfile, spec: ModelSpec, params: QmcParams) -> np.ndarray:
    """Chain magnetization m(tau) = (R/beta) d ln V / d lambda(tau)."""
    _, mbar = _chain_observables(profile.lambdas, *_chain_args(spec, params))
    return mbar


def vector_magnetization(profile: FieldProfile, spec: ModelSpec, params: QmcParams):
    """Arrays (m_x, i m_y, m_z) along the chain.

    Open chains return R + 1 slots (tau = 0, delta, ..., beta); both end
    slots sit next to omega, which forces m_x = 1 and i m_y = m_z there.
    Periodic chains return R slots (the slot at beta closes onto tau = 0).
    """
    vec = _chain_vector(profile.lambdas, *_chain_args(spec, params))
    return vec[:, 0].copy(), vec[:, 1].copy(), vec[:, 2].copy()


def loop_action(profile: FieldProfile, spec: ModelSpec, params: QmcParams) -> float:
    """Tunneling action sum |p| |dm| accumulated along a saddle profile.

    p = arccosh(m_x / sqrt(ell^2 - m_z^2)) slice by slice, with ell the
    local length of the Bloch vector; stretches where the argument drops
    below one (classically allowed travel) contribute zero.  Periodic
    profiles close the loop through the wrap segment.
    """
    mx, imy, mz = vector_magnetization(profile, spec, params)
    ell_sq = mx * mx - imy * imy + mz * mz
    base = np.sqrt(np.clip(ell_sq - mz * mz, 1e-300, None))
    p = np.arccosh(np.clip(mx / base, 1.0, None))
    if params.boundary is Boundary.PERIODIC:
        p = np.append(p, p[0])
        mz = np.append(mz, mz[0])
    return float(np.sum(0.5 * (p[1:] + p[:-1]) * np.abs(np.diff(mz))))


def free_energy(profile: FieldProfile, spec: ModelSpec, params: QmcParams) -> float:
    """Per-spin functional (1/R) sum (lam m - g(m)) - ln(V)/beta."""
    r = params.replicas
    lam = profile.lambdas
    m = profile.magnetizations
    g = np.asarray(spec.cost.g(m), dtype=float)
    lnv = log_trace_partition(profile, spec, params)
    return float(np.sum(lam * m - g) / r - lnv / spec.beta)


def bonds_per_spin(params: QmcParams) -> int:
    return params.replicas if params.boundary is Boundary.PERIODIC else params.replicas - 1


def free_energy_continuum(profile: FieldProfile, spec: ModelSpec, params: QmcParams) -> float:
    """free_energy with the per-bond factor c = e^(bJ)/cosh(Gamma d) removed.

    Values at different R then approach the continuum functional, so they
    can be extrapolated in 1/R against the instanton closed forms.
    """
    d = spec.beta / params.replicas
    lnc = spec.beta * params.coupling - math.log(math.cosh(spec.gamma * d))
    return free_energy(profile, spec, params) + bonds_per_spin(params) * lnc / spec.beta


def profile_from_m(m: np.ndarray, spec: ModelSpec, params: QmcParams) -> FieldProfile:
    m = np.asarray(m, dtype=float)
    return FieldProfile(np.asarray(spec.cost.gp(m), dtype=float), m, params.boundary)


def functional_of_m(m: np.ndarray, spec: ModelSpec, params: QmcParams) -> float:
    """Free energy as a function of m alone, with lambda = g'(m) substituted."""
    return free_energy(profile_from_m(m, spec, params), spec, params)


def free_energy_gradient(m: np.ndarray, spec: ModelSpec, params: QmcParams) -> np.ndarray:
    """Analytic d F / d m(tau) = g''(m)(m - mbar)/R of functional_of_m."""
    m = np.asarray(m, dtype=float)
    lam = np.asarray(spec.cost.gp(m), dtype=float)
    _, mbar = _chain_observables(lam, *_chain_args(spec, params))
    return np.asarray(spec.cost.gpp(m), dtype=float) * (m - mbar) / params.replicas


def _residual(m: np.ndarray, spec: ModelSpec, params: QmcParams) -> np.ndarray:
    lam = np.asarray(spec.cost.gp(m), dtype=float)
    _, mbar = _chain_observables(lam, *_chain_args(spec, params))
    return m - mbar


def solve_saddle(spec: ModelSpec, params: QmcParams, initial_guess: FieldProfile,
                 kind: str = KIND_MINIMUM, tol: float = 1e-11, max_iter: int = 240,
                 fd_step: float = 1e-6) -> SaddleResult:
    """Damped Newton on m(tau) - mbar[g'(m)](tau) = 0.

    The Jacobian is dense forward finite differences; saddles are fixed
    points of the map, not attractors, so plain iteration would diverge.
    Raises RuntimeError when Newton stalls or the Jacobian is singular.
    """
    if kind not in (KIND_MINIMUM, KIND_SADDLE):
        raise ValueError(f"kind must be '{KIND_MINIMUM}' or '{KIND_SADDLE}'")
    if initial_guess.replicas != params.replicas:
        raise ValueError("initial guess length does not match replicas")
    r = params.replicas
    m = initial_guess.magnetizations.astype(float).copy()
    res = _residual(m, spec, params)
    norm = float(np.max(np.abs(res)))
    mu = 0.0
    for _ in range(max_iter):
        if norm <= tol:
            break
        jac = np.empty((r, r))
        for col in range(r):
            m_h = m.copy()
            m_h[col] += fd_step
            jac[:, col] = (_residual(m_h, spec, params) - res) / fd_step
        m_new = res_new = norm_new = None
        if mu == 0.0:
            try:
                step = np.linalg.solve(jac, res)
            except np.linalg.LinAlgError:
                step = None
            if step is not None:
                scale = 1.0
                for _ in range(12):
                    trial = m - scale * step
                    if np.max(np.abs(trial)) < 1.0:
                        res_t = _residual(trial, spec, params)
                        norm_t = float(np.max(np.abs(res_t)))
                        if norm_t < norm:
                            m_new, res_new, norm_new = trial, res_t, norm_t
                            break
                    scale *= 0.5
        if m_new is None:
            # plain Newton stops paying once the Jacobian is near-singular
            # along a soft mode (wall translations near phase degeneracy,
            # endpoint-slice relaxation); switch to Levenberg-Marquardt on
            # the squared residual and keep the damping across iterations
            jtj = jac.T @ jac
            jtr = jac.T @ res
            if mu == 0.0:
                mu = 1e-8 * float(np.trace(jtj)) / r
            sq = float(res @ res)
            for _ in range(60):
                trial = m - np.linalg.solve(jtj + mu * np.eye(r), jtr)
                if np.max(np.abs(trial)) < 1.0:
                    res_t = _residual(trial, spec, params)
                    if float(res_t @ res_t) < sq:
                        m_new, res_new = trial, res_t
                        norm_new = float(np.max(np.abs(res_t)))
                        mu = max(mu * 0.3, 1e-14)
                        break
                mu *= 4.0
            else:
                raise RuntimeError(f"Newton stalled at residual {norm:.3e}")
        m, res, norm = m_new, res_new, norm_new
    else:
        raise RuntimeError(f"no convergence after {max_iter} iterations "
                           f"(residual {norm:.3e})")
    profile = profile_from_m(m, spec, params)
    return SaddleResult(profile, free_energy(profile, spec, params), norm, kind)


def tau_grid(spec: ModelSpec, params: QmcParams) -> np.ndarray:
    return np.arange(params.replicas) * spec.beta / params.replicas


def static_profile(spec: ModelSpec, params: QmcParams, m0: float) -> FieldProfile:
    m = np.full(params.replicas, float(m0))
    return profile_from_m(m, spec, params)


def ramp_profile(spec: ModelSpec, params: QmcParams, m_start: float, m_end: float,
                 width: float | None = None) -> FieldProfile:
    """Logistic interpolation m_start -> m_end; up then down when periodic."""
    tau = tau_grid(spec, params)
    beta = spec.beta
    w = beta / 20 if width is None else width
    if params.boundary is Boundary.PERIODIC:
        s = (1.0 / (1.0 + np.exp(-(tau - beta / 4) / w))
             - 1.0 / (1.0 + np.exp(-(tau - 3 * beta / 4) / w)))
    else:
        s = 1.0 / (1.0 + np.exp(-(tau - beta / 2) / w))
    return profile_from_m(m_start + (m_end - m_start) * s, spec, params)


def bump_profile(spec: ModelSpec, params: QmcParams, m_base: float, m_peak: float,
                 width: float | None = None) -> FieldProfile:
    """Gaussian excursion centered at beta/2, for out-and-back saddles."""
    tau = tau_grid(spec, params)
    beta = spec.beta
    w = beta / 8 if width is None else width
    s = np.exp(-0.5 * ((tau - beta / 2) / w) ** 2)
    return profile_from_m(m_base + (m_peak - m_base) * s, spec, params)


def extrapolate_in_replicas(replicas, values) -> float:
    """Fit F(R) = F_inf + a/R + b/R^2 and return F_inf."""
    rs = np.asarray(replicas, dtype=float)
    vals = np.asarray(values, dtype=float)
    if len(rs) < 3:
        raise ValueError("need at least three R values")
    design = np.vstack([np.ones_like(rs), 1.0 / rs, 1.0 / rs**2]).T
    coeff, *_ = np.linalg.lstsq(design, vals, rcond=None)
    return float(coeff[0])


def _pin_seed_profiles(target: float, m_low: float, m_high: float, r: int):
    """Candidate m(tau) shapes averaging to the target magnetization.

    Domain-wall and droplet shapes compete with the uniform one near phase
    degeneracy, and whichever entered the basket decides which basin the
    constrained minimizer lands in, so all of them are always tried.
    """
    span = m_high - m_low
    seeds = [np.full(r, target)]
    if abs(span) > 1e-12:
        frac = min(max((target - m_low) / span, 0.0), 1.0)
        k = frac * r
        for flipped in (False, True):
            ramp = np.clip(np.arange(r) - (r - k), 0.0, 1.0) if not flipped \
                else np.clip(k - np.arange(r), 0.0, 1.0)
            seeds.append(m_low + span * ramp)
        center = np.abs(np.arange(r) - 0.5 * (r - 1))
        seeds.append(np.where(center < 0.5 * k, m_high, m_low) + 0.0)
        # high-phase plateau with relaxed end slices
        bent = np.full(r, m_high)
        edge = max(1, r // 8)
        bent[:edge] = np.linspace(0.45 * m_high, m_high, edge, endpoint=False)
        bent[r - edge:] = bent[:edge][::-1]
        seeds.append(bent + (target - bent.mean()))
    return seeds


def pinned_free_energy(spec: ModelSpec, params: QmcParams, target: float,
                       m_low: float = 0.0, m_high: float = 0.9) -> SaddleResult:
    """Least free energy among profiles with slice-averaged m pinned to target.

    Minimizes over lambda with m = mbar[lambda] substituted, which keeps the
    value on the physical branch: the Legendre form functional_of_m can be
    pushed arbitrarily low by fields whose m disagrees with the chain
    response.  Each seed shape from _pin_seed_profiles is relaxed separately
    and the lowest survivor wins, because walls, droplets, and uniform
    profiles are separate local minima near phase degeneracy.
    """
    from scipy.optimize import minimize

    args = _chain_args(spec, params)
    r = params.replicas

    def fe_of(lam):
        m = _chain_observables(lam, *args)[1]
        return free_energy(FieldProfile(lam, m, params.boundary), spec, params)

    def pin(lam, t=float(target)):
        return float(np.mean(_chain_observables(lam, *args)[1])) - t

    best = None
    for m_seed in _pin_seed_profiles(float(target), m_low, m_high, r):
        lam0 = np.asarray(spec.cost.gp(m_seed), dtype=float)
        res = minimize(fe_of, lam0, method="SLSQP",
                       constraints=[{"type": "eq", "fun": pin}],
                       options={"maxiter": 400, "ftol": 1e-13})
        if not res.success and abs(pin(res.x)) > 1e-7:
            continue
        if best is None or res.fun < best[0]:
            best = (res.fun, res.x)
    if best is None:
        raise RuntimeError(f"no pinned profile found at mbar={target}")
    lam = best[1]
    m = _chain_observables(lam, *args)[1]
    profile = FieldProfile(lam, m, params.boundary)
    return SaddleResult(profile, float(best[0]),
                        abs(float(np.mean(m)) - float(target)), KIND_MINIMUM)


def escape_barrier(spec: ModelSpec, params: QmcParams, start: float, stop: float,
                   points: int = 25, m_high: float | None = None) -> tuple[float, float]:
    """beta * (highest pinned free energy between start and stop, minus start).

    This is the exponent-per-spin that gates first passage of the
    slice-averaged magnetization: when the lowest crossing is a stationary
    saddle the two agree, but near phase degeneracy the crossing is a
    translation-degenerate domain-wall family that Newton cannot pin down,
    while the pinned sweep walks straight across it.

    Returns (barrier, mbar at the top).
    """
    from scipy.optimize import minimize_scalar

    if m_high is None:
        # seed shapes need the competing well's magnetization, which can sit
        # far beyond the sweep window (walls carry the full phase contrast
        # even when the crossing mbar is small)
        hunt = minimize_scalar(
            lambda m: free_energy(static_profile(spec, params, m), spec, params),
            bounds=(max(stop, 0.2), 0.999), method="bounded")
        m_high = float(hunt.x)
    f_start = pinned_free_energy(spec, params, start, start, m_high).free_energy
    top, top_at = -math.inf, start
    for mb in np.linspace(start, stop, points):
        f = pinned_free_energy(spec, params, float(mb), start, m_high).free_energy
        if f > top:
            top, top_at = f, float(mb)
    return spec.beta * (top - f_start), top_at
