"""Continuous-imaginary-time instanton solver for the open-boundary chain.

In the R -> infinity limit the single-site saddle dynamics becomes a
classical flow for the magnetization vector (m_x, i m_y, m_z) with two
conserved quantities: the energy

    -Gamma * m_x - g(m_z) = eps

and the (complexified) squared length m_x^2 - (i m_y)^2 + m_z^2 = ell^2.
Open boundaries force ell = 1, so the whole problem collapses onto a
one-dimensional quadrature for m := m_z,

    |dm/dtau| = 2 sqrt(W(m)),    W(m) = (eps + g(m))^2 - Gamma^2 (1 - m^2),

on the branch m_x = -(eps + g(m))/Gamma > 0.  Motion is allowed wherever
eps <= edge(m) with

    edge(m) = -g(m) - Gamma sqrt(1 - m^2),

and folds back at turning points where W = 0.  The endpoints are roots of
eps + g(m) = -Gamma (there m_x = 1), leaving with velocity sign(m1) and
arriving with velocity -sign(m2), so a valid path is an itinerary of
monotone legs joined at turning points.  For a monotone cost function the
endpoint roots coincide and the path is a single out-and-back bump; its
time of flight T(eps) diverges at both the metastable and the global well
edge, and the "saddle" versus "minimum" branch of the shooter is just the
solution of T(eps) = beta adjacent to one edge or the other.

Near either divergence the energy loses float resolution (eps approaches
the band-edge value to below one ulp already at moderate beta), so the
shooter never bisects in eps.  It bisects in the position of the
degenerating geometric feature: the endpoint root when the governing well
sits at m = 0, the turning point otherwise.  All cancellation-prone
quantities are evaluated in difference form anchored at that feature; in
particular (edge(m) - eps) / (m - e) is computed through a
synthetic-division quotient of the cost polynomial, which keeps the
quadratures accurate arbitrarily close to the edge.

Free energy of a solved trajectory, three equivalent ways:

    beta*F = integral (m g'(m) - g(m)) dtau - ln 2 - I
             + (1/4) [ln(1 - m1^2) + ln(1 - m2^2)]            (closed form)
    beta*F = beta*eps + (A - Q(m1) - Q(m2)) / 2               (WKB assembly)
    F      = limit of the discrete chain free energy in R      (meanfield)

with I = integral |eps + g| / (1 - m^2) dtau, A = integral p dm >= 0 the
tunneling action, p = arccosh(|eps + g| / (Gamma sqrt(1 - m^2))) signed by
the direction of motion, and Q the binary entropy.  kappa = exp(2 I -
(1/2)[ln(1-m1^2) + ln(1-m2^2)]) reproduces the squared half-trace of the
2x2 propagator generated by Gamma sigma_x + g'(m(tau)) sigma_z, which this
module also integrates directly as a cross-check.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
from numpy.polynomial import polynomial as npoly
from scipy import integrate, interpolate, optimize

from .model import ModelSpec, binary_entropy

BRANCH_SADDLE = "saddle"
BRANCH_MINIMUM = "minimum"
WELL_GLOBAL = "global"
WELL_METASTABLE = "metastable"

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(7)
_NODES_PER_HALF = 2049
_UNIFORM_GRID = 1024
_LADDER_STEPS = 320


def lower_band_edge(m, spec: ModelSpec):
    """Lower edge -g(m) - Gamma*sqrt(1-m^2) of the classically allowed band.

    Instanton energies lie at or below this curve; its local minima are
    the wells and the local maximum between them is the barrier top.
    """
    m = np.asarray(m, dtype=float)
    out = -spec.cost.g(m) - spec.gamma * np.sqrt(np.clip(1.0 - m * m, 0.0, None))
    return out if out.ndim else float(out)


def _edge_deriv(m: float, spec: ModelSpec) -> float:
    phi = math.sqrt(1.0 - m * m)
    return -float(spec.cost.gp(m)) + spec.gamma * m / phi


def velocity(m, eps: float, spec: ModelSpec):
    """|dm_z/dtau| = 2*sqrt((eps+g(m))^2 - Gamma^2 (1-m^2)) on the path."""
    m = np.asarray(m, dtype=float)
    shifted = eps + spec.cost.g(m)
    w = shifted * shifted - spec.gamma**2 * (1.0 - m * m)
    scale = max(spec.gamma**2, float(np.max(shifted * shifted)), 1e-30)
    if np.any(w < -1e-12 * scale):
        raise ValueError("classically allowed point: velocity is not real here")
    out = 2.0 * np.sqrt(np.clip(w, 0.0, None))
    return out if out.ndim else float(out)


def momentum(m, eps: float, spec: ModelSpec):
    """Magnitude of the conjugate momentum, arccosh(|eps+g| / (Gamma sqrt(1-m^2))).

    Written through log1p so the value stays accurate as the arccosh
    argument approaches one at a turning point.  The trajectory builder
    attaches the sign of i*m_y.
    """
    m = np.asarray(m, dtype=float)
    absshift = np.abs(eps + spec.cost.g(m))
    base = spec.gamma * np.sqrt(np.clip(1.0 - m * m, 0.0, None))
    if np.any(base <= 0.0):
        raise ValueError("momentum undefined at m = +-1")
    w = absshift * absshift - base * base
    if np.any(w < -1e-12 * max(spec.gamma**2, 1e-30)):
        raise ValueError("classically allowed point: momentum is not real here")
    w = np.clip(w, 0.0, None)
    out = np.log1p(w / ((absshift + base) * base) + np.sqrt(w) / base)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# energy frames: cancellation-free evaluation anchored at a path feature

@dataclasses.dataclass(frozen=True)
class _Frame:
    """Energy bookkeeping in which -(eps + g(m)) never cancels.

    -(eps + g(m)) = gamphi_a - (g(m) - g_a) with (g_a, gamphi_a) equal to
    (g(r), Gamma) for an endpoint anchor r, (g(e), Gamma*phi(e)) for a
    turning anchor e, and (0, -eps) for a raw energy value.
    """

    kind: str            # "raw" | "endpoint" | "turning"
    anchor: float | None
    g_a: float
    gamphi_a: float

    @property
    def eps(self) -> float:
        return -(self.g_a + self.gamphi_a)

    def neg_shift(self, m, spec: ModelSpec):
        return self.gamphi_a - (spec.cost.g(m) - self.g_a)

    def pfun(self, m, spec: ModelSpec):
        # eps_+(m) - eps, strictly positive on the m_x > 0 branch
        phi = np.sqrt(np.clip(1.0 - np.asarray(m, dtype=float) ** 2, 0.0, None))
        return spec.gamma * phi + self.neg_shift(m, spec)

    def edge_shift(self, m, spec: ModelSpec):
        # edge(m) - eps, stable near the anchor
        m = np.asarray(m, dtype=float)
        phi = np.sqrt(np.clip(1.0 - m * m, 0.0, None))
        if self.kind == "endpoint":
            gap = spec.gamma * m * m / (1.0 + phi)  # Gamma * (1 - phi)
            out = gap - (spec.cost.g(m) - self.g_a)
        elif self.kind == "turning":
            e = self.anchor
            phi_e = math.sqrt(1.0 - e * e)
            gap = spec.gamma * (m - e) * (m + e) / (phi + phi_e)
            out = gap - (spec.cost.g(m) - self.g_a)
        else:
            out = self.neg_shift(m, spec) - spec.gamma * phi
        return out if np.ndim(out) else float(out)


def _frame_raw(eps: float) -> _Frame:
    return _Frame("raw", None, 0.0, -eps)


def _frame_endpoint(r: float, spec: ModelSpec) -> _Frame:
    return _Frame("endpoint", r, float(spec.cost.g(r)), spec.gamma)


def _frame_turning(e: float, spec: ModelSpec) -> _Frame:
    phi = math.sqrt(1.0 - e * e)
    return _Frame("turning", e, float(spec.cost.g(e)), spec.gamma * phi)


def _quotient_coeffs(coeffs, e: float) -> np.ndarray:
    # synthetic division: g(m) - g(e) = (m - e) * q(m)
    c = np.asarray(coeffs, dtype=float)
    b = np.empty_like(c)
    b[-1] = c[-1]
    for k in range(c.size - 2, -1, -1):
        b[k] = c[k] + e * b[k + 1]
    return b[1:]


def _edge_quotient(e: float, spec: ModelSpec):
    """Return f with f(m) = (edge(m) - edge(e)) / (m - e), in difference form."""
    q = _quotient_coeffs(spec.cost.coefficients, e)
    phi_e = math.sqrt(1.0 - e * e)
    gam = spec.gamma

    def quotient(m):
        m = np.asarray(m, dtype=float)
        phi = np.sqrt(np.clip(1.0 - m * m, 0.0, None))
        return -npoly.polyval(m, q) + gam * (m + e) / (phi + phi_e)

    return quotient


# ---------------------------------------------------------------------------
# roots, turning points, landscape

def _polish(fun, dfun, root: float, steps: int = 4) -> float:
    for _ in range(steps):
        f = float(fun(root))
        d = float(dfun(root))
        if d == 0.0:
            break
        step = f / d
        if not math.isfinite(step) or abs(step) > 0.1:
            break
        root -= step
    return root


def _clipped_real_roots(coeffs, bound: float = 1.0) -> np.ndarray:
    coeffs = np.trim_zeros(np.asarray(coeffs, dtype=float), "b")
    if coeffs.size < 2:
        return np.empty(0)
    roots = npoly.polyroots(coeffs)
    real = roots.real[np.abs(roots.imag) <= 1e-8]
    real = real[(real >= -bound - 1e-12) & (real <= bound + 1e-12)]
    return np.clip(real, -bound, bound)


def _endpoint_roots(frame: _Frame, spec: ModelSpec) -> np.ndarray:
    # roots of neg_shift(m) = Gamma, i.e. eps + g(m) = -Gamma
    coeffs = np.array(spec.cost.coefficients, dtype=float)
    coeffs[0] -= frame.g_a + frame.gamphi_a - spec.gamma
    fun = lambda m: float(frame.neg_shift(m, spec)) - spec.gamma
    dfun = lambda m: -float(spec.cost.gp(m))
    roots = sorted(_polish(fun, dfun, r) for r in _clipped_real_roots(coeffs))
    out = []
    for r in roots:
        if not out or r - out[-1] > 1e-11:
            out.append(r)
    return np.array(out)


def _turning_points(frame: _Frame, spec: ModelSpec) -> np.ndarray:
    # roots of W(m) on the m_x > 0 branch, polished against the band edge
    eps = frame.eps
    shifted = np.array(spec.cost.coefficients, dtype=float)
    shifted[0] += eps
    w = npoly.polymul(shifted, shifted)
    w[0] -= spec.gamma**2
    w[2] += spec.gamma**2
    fun = lambda m: float(frame.edge_shift(m, spec))
    dfun = lambda m: _edge_deriv(m, spec)
    keep = []
    for r in _clipped_real_roots(w, bound=1.0 - 1e-12):
        if float(frame.neg_shift(r, spec)) <= 0.0:
            continue
        r = _polish(fun, dfun, r)
        if not keep or r - keep[-1] > 1e-11:
            keep.append(r)
    return np.array(keep)


def endpoints_for_energy(eps: float, spec: ModelSpec) -> tuple[float, float]:
    """Endpoint pair (m1, m2): roots of eps + g(m) = -Gamma in [-1, 1].

    These are the magnetizations where m_x = 1, the only places an
    open-boundary path may start or stop.  Returns the outermost pair
    sorted ascending; a single root is reported as a degenerate pair (the
    out-and-back case of a monotone cost function).  Raises when the
    energy admits no root.
    """
    roots = _endpoint_roots(_frame_raw(eps), spec)
    if roots.size == 0:
        raise ValueError("no endpoint roots: eps + g(m) = -Gamma has no solution in [-1, 1]")
    if roots.size == 1:
        return float(roots[0]), float(roots[0])
    return float(roots[0]), float(roots[-1])


@dataclasses.dataclass(frozen=True)
class Landscape:
    """Well and barrier geometry of the lower band edge."""

    wells: tuple[float, float]
    barrier_top: float
    well_edges: tuple[float, float]

    @property
    def global_well(self) -> float:
        return self.wells[0] if self.well_edges[0] <= self.well_edges[1] else self.wells[1]

    @property
    def metastable_well(self) -> float:
        return self.wells[1] if self.well_edges[0] <= self.well_edges[1] else self.wells[0]

    def well_for(self, label: str) -> float:
        if label == WELL_GLOBAL:
            return self.global_well
        if label == WELL_METASTABLE:
            return self.metastable_well
        raise ValueError(f"unknown well label {label!r}")


def landscape(spec: ModelSpec) -> Landscape:
    """Locate the two deepest wells of the band edge and the barrier between them.

    Critical points solve g'(m) = Gamma*m/sqrt(1-m^2); squaring gives a
    polynomial whose sign-flipped spurious roots are removed by direct
    residual evaluation.  Raises when no two-well structure exists.
    """
    gam = spec.gamma
    d1 = npoly.polyder(np.array(spec.cost.coefficients, dtype=float))
    poly = npoly.polymul(npoly.polymul(d1, d1), np.array([1.0, 0.0, -1.0]))
    poly = np.asarray(poly, dtype=float).copy()
    poly[2] -= gam * gam
    candidates = np.sort(_clipped_real_roots(poly, bound=1.0 - 1e-9))
    clusters: list[list[float]] = []
    for r in candidates:
        if clusters and abs(r - clusters[-1][-1]) < 1e-7:
            clusters[-1].append(r)
        else:
            clusters.append([r])
    scale = max(gam, float(np.max(np.abs(d1))) if d1.size else 0.0)
    minima, maxima = [], []
    for group in clusters:
        r = float(np.mean(group))
        phi = math.sqrt(1.0 - r * r)
        if abs(-float(spec.cost.gp(r)) + gam * r / phi) > 1e-6 * scale:
            continue
        curv = -float(spec.cost.gpp(r)) + gam / phi**3
        if curv > 0.0:
            minima.append(r)
        elif curv < 0.0:
            maxima.append(r)
    if len(minima) < 2:
        raise ValueError("no metastable structure: fewer than two wells in the band edge")
    edges = [float(lower_band_edge(m, spec)) for m in minima]
    order = np.argsort(edges)
    pair = sorted([minima[order[0]], minima[order[1]]])
    between = [t for t in maxima if pair[0] < t < pair[1]]
    if not between:
        raise ValueError("no barrier top between the two deepest wells")
    top = max(between, key=lambda t: float(lower_band_edge(t, spec)))
    return Landscape(
        wells=(pair[0], pair[1]),
        barrier_top=float(top),
        well_edges=(float(lower_band_edge(pair[0], spec)), float(lower_band_edge(pair[1], spec))),
    )


# ---------------------------------------------------------------------------
# itinerary enumeration

@dataclasses.dataclass(frozen=True)
class _Leg:
    start: float
    stop: float
    turn_start: bool
    turn_stop: bool

    @property
    def direction(self) -> float:
        return 1.0 if self.stop > self.start else -1.0


@dataclasses.dataclass(frozen=True)
class _Candidate:
    legs: tuple[_Leg, ...]
    spans_barrier: bool
    basin: str


def _walk(frame: _Frame, spec: ModelSpec, start: float, land: Landscape,
          max_legs: int = 8) -> list[_Candidate]:
    """Enumerate valid itineraries launched from one endpoint root.

    Marches with the mandatory initial velocity sign(start), folding at
    turning points, recording a candidate at every legal arrival on an
    endpoint root, and aborting on a boundary runaway.
    """
    ends = _endpoint_roots(frame, spec)
    turns = _turning_points(frame, spec)
    if start == 0.0:
        return []
    for t in turns:
        if ends.size and np.min(np.abs(ends - t)) < 1e-10:
            return []  # endpoint collides with a turning point: degenerate
    out: list[_Candidate] = []
    legs: list[_Leg] = []
    pos = start
    pos_is_turn = False
    direction = 1.0 if start > 0.0 else -1.0
    glob_side = math.copysign(1.0, land.global_well - land.barrier_top)
    start_side = math.copysign(1.0, start - land.barrier_top)
    basin = WELL_GLOBAL if start_side == glob_side else WELL_METASTABLE
    for _ in range(max_legs):
        events: list[tuple[float, float, str]] = []
        for t in turns:
            if (t - pos) * direction > 1e-13:
                events.append((abs(t - pos), t, "turn"))
        for e in ends:
            if (e - pos) * direction > 1e-13:
                events.append((abs(e - pos), e, "end"))
        events.sort(key=lambda item: item[0])
        moved = False
        for _, point, kind in events:
            if kind == "turn":
                legs.append(_Leg(pos, point, pos_is_turn, True))
                pos, pos_is_turn, direction = point, True, -direction
                moved = True
                break
            if point != 0.0 and direction == -math.copysign(1.0, point):
                legs.append(_Leg(pos, point, pos_is_turn, False))
                pts = [l.start for l in legs] + [l.stop for l in legs]
                spans = min(pts) < land.barrier_top < max(pts)
                out.append(_Candidate(tuple(legs), spans, basin))
                # march on through the root to enumerate longer itineraries
                pos, pos_is_turn = point, False
                moved = True
                break
            # wrong-sign arrival: the path passes straight through
        if not moved or len(out) >= 4:
            break
    return out


def _candidates(frame: _Frame, spec: ModelSpec, land: Landscape) -> list[_Candidate]:
    seen = set()
    out = []
    for root in _endpoint_roots(frame, spec):
        for cand in _walk(frame, spec, float(root), land):
            key = tuple((round(l.start, 12), round(l.stop, 12)) for l in cand.legs)
            if key not in seen:
                seen.add(key)
                out.append(cand)
    return out


def _fold_points(cand: _Candidate) -> list[float]:
    out = [leg.stop for leg in cand.legs if leg.turn_stop]
    if cand.legs and cand.legs[0].turn_start:
        out.append(cand.legs[0].start)
    return out


def _select(frame: _Frame, spec: ModelSpec, branch: str, well: str,
            land: Landscape) -> _Candidate:
    cands = _candidates(frame, spec, land)
    if branch == BRANCH_SADDLE:
        picks = [c for c in cands if c.spans_barrier]
    elif branch == BRANCH_MINIMUM:
        # a minimum lingers at its well: every fold must hug that well's
        # flank, regardless of where the endpoint root happens to sit
        m_w = land.well_for(well)
        w_side = math.copysign(1.0, m_w - land.barrier_top)
        picks = []
        for c in cands:
            folds = _fold_points(c)
            if folds and all(math.copysign(1.0, t - land.barrier_top) == w_side
                             for t in folds):
                picks.append(c)
    else:
        raise ValueError(f"unknown branch {branch!r}")
    if not picks:
        raise ValueError(f"no {branch} itinerary at eps={frame.eps}")
    picks.sort(key=lambda c: (len(c.legs), c.legs[0].start))
    return picks[0]


# ---------------------------------------------------------------------------
# leg quadratures (u^2 = |m - turning point| substitution throughout)

def _rho_eval(m, u, quot, frame: _Frame, spec: ModelSpec, s: float,
              umax_sq: float):
    """rho = (edge(m) - eps) / u^2, by whichever route is stable locally.

    Near the fold (small u) the synthetic-division quotient is exact;
    near the far end of the half-leg the band-edge difference form
    divided by u^2 avoids the O(1) cancellation the quotient suffers
    when the endpoint root itself is nearly degenerate.
    """
    m = np.asarray(m, dtype=float)
    u = np.asarray(u, dtype=float)
    usq = u * u
    fold = np.clip(-s * quot(m), 0.0, None)
    usq_safe = np.where(usq > 0.0, usq, 1.0)
    endp = np.clip(frame.edge_shift(m, spec), 0.0, None) / usq_safe
    out = np.where(usq < 0.5 * umax_sq, fold, endp)
    return out if out.ndim else float(out)


def _half_quad(reg_end: float, turn_end: float, frame: _Frame,
               spec: ModelSpec, fweight, measure: str) -> float:
    s = math.copysign(1.0, turn_end - reg_end)
    umax = math.sqrt(abs(turn_end - reg_end))
    if umax == 0.0:
        return 0.0
    quot = _edge_quotient(turn_end, spec)
    umax_sq = umax * umax

    def integrand(u: float) -> float:
        m = turn_end - s * u * u
        rho = float(_rho_eval(m, u, quot, frame, spec, s, umax_sq))
        if rho <= 0.0:
            return 0.0
        if measure == "length":
            return 2.0 * u * fweight(m, u, rho)
        p_val = float(frame.pfun(m, spec))
        return fweight(m, u, rho) / math.sqrt(p_val * rho)

    out = integrate.quad(integrand, 0.0, umax, epsabs=1e-13,
                         epsrel=1e-12, limit=300, full_output=1)
    return out[0]


def _leg_quad(leg: _Leg, frame: _Frame, spec: ModelSpec, fweight,
              measure: str) -> float:
    if leg.turn_stop and not leg.turn_start:
        return _half_quad(leg.start, leg.stop, frame, spec, fweight, measure)
    if leg.turn_start and not leg.turn_stop:
        return _half_quad(leg.stop, leg.start, frame, spec, fweight, measure)
    if leg.turn_start and leg.turn_stop:
        mid = 0.5 * (leg.start + leg.stop)
        return (_half_quad(mid, leg.start, frame, spec, fweight, measure)
                + _half_quad(mid, leg.stop, frame, spec, fweight, measure))
    raise ValueError("leg without a turning end cannot occur in a valid itinerary")


def _momentum_from(frame: _Frame, spec: ModelSpec, m, u, rho):
    # |p| from W = P * rho * u^2, stable right up to the turning points
    m = np.asarray(m, dtype=float)
    ns = frame.neg_shift(m, spec)
    base = spec.gamma * np.sqrt(np.clip(1.0 - m * m, 1e-300, None))
    w = np.clip(frame.pfun(m, spec) * rho, 0.0, None) * np.asarray(u) ** 2
    return np.log1p(w / ((ns + base) * base) + np.sqrt(w) / base)


def _path_integrals(legs: tuple[_Leg, ...], frame: _Frame, spec: ModelSpec):
    g = spec.cost
    one = lambda m, u, rho: 1.0
    work = lambda m, u, rho: float(m * g.gp(m) - g.g(m))
    focus = lambda m, u, rho: float(frame.neg_shift(m, spec)) / (1.0 - m * m)
    pmag = lambda m, u, rho: float(_momentum_from(frame, spec, m, u, rho))
    total_t = sum(_leg_quad(leg, frame, spec, one, "time") for leg in legs)
    total_i = sum(_leg_quad(leg, frame, spec, focus, "time") for leg in legs)
    total_w = sum(_leg_quad(leg, frame, spec, work, "time") for leg in legs)
    total_a = sum(_leg_quad(leg, frame, spec, pmag, "length") for leg in legs)
    return total_t, total_i, total_w, total_a


def _path_time(legs: tuple[_Leg, ...], frame: _Frame, spec: ModelSpec) -> float:
    one = lambda m, u, rho: 1.0
    return sum(_leg_quad(leg, frame, spec, one, "time") for leg in legs)


def time_of_flight(eps: float, spec: ModelSpec, branch: str,
                   well: str = WELL_GLOBAL) -> float:
    """Total imaginary time of the branch itinerary at energy eps.

    Sums integral dm / (2 sqrt(W)) over the legs of the selected
    itinerary, including the fold-back legs imposed by the endpoint
    velocity signs.  Raises when the branch has no valid itinerary at
    this energy.
    """
    land = landscape(spec)
    frame = _frame_raw(eps)
    cand = _select(frame, spec, branch, well, land)
    return _path_time(cand.legs, frame, spec)


# ---------------------------------------------------------------------------
# structure-preserving refinement for the shooter

@dataclasses.dataclass(frozen=True)
class _Structure:
    kinds: tuple[str, ...]           # feature sequence along the path
    lock_positions: tuple[float, ...]
    anchor_index: int
    side: float                      # sign of (anchor - m_deg)
    m_deg: float                     # degeneration point of the anchor


def _structure_from(cand: _Candidate, anchor_kind: str, m_deg: float) -> _Structure:
    kinds = ["end"]
    positions = [cand.legs[0].start]
    for leg in cand.legs:
        kinds.append("turn" if leg.turn_stop else "end")
        positions.append(leg.stop)
    target = "turn" if anchor_kind == "turning" else "end"
    matches = [i for i, k in enumerate(kinds) if k == target]
    if not matches:
        raise ValueError("itinerary has no feature of the anchoring kind")
    idx = min(matches, key=lambda i: abs(positions[i] - m_deg))
    side = math.copysign(1.0, positions[idx] - m_deg)
    return _Structure(tuple(kinds), tuple(positions), idx, side, m_deg)


def _refine(structure: _Structure, x: float, spec: ModelSpec,
            anchor_kind: str) -> tuple[_Frame, tuple[_Leg, ...]]:
    """Rebuild the locked itinerary with the anchoring feature moved to x."""
    if anchor_kind == "endpoint":
        frame = _frame_endpoint(x, spec)
    else:
        frame = _frame_turning(x, spec)
    ends = _endpoint_roots(frame, spec)
    turns = _turning_points(frame, spec)
    fun = lambda m: float(frame.edge_shift(m, spec))
    dfun = lambda m: _edge_deriv(m, spec)
    positions: list[float] = []
    for i, kind in enumerate(structure.kinds):
        if i == structure.anchor_index:
            positions.append(x)
            continue
        ref = structure.lock_positions[i]
        pool = ends if kind == "end" else turns
        if kind == "turn" and pool.size == 0:
            pool = np.array([_polish(fun, dfun, ref)])
        if pool.size == 0:
            raise ValueError("itinerary feature vanished during refinement")
        positions.append(float(pool[np.argmin(np.abs(pool - ref))]))
    legs = []
    for i in range(len(positions) - 1):
        a, b = positions[i], positions[i + 1]
        ref_dir = structure.lock_positions[i + 1] - structure.lock_positions[i]
        if not (math.isfinite(a) and math.isfinite(b)) or (b - a) * ref_dir <= 0.0:
            raise ValueError("leg collapsed or flipped during refinement")
        legs.append(_Leg(a, b, structure.kinds[i] == "turn",
                         structure.kinds[i + 1] == "turn"))
    return frame, tuple(legs)


def _min_fold_strength(legs: tuple[_Leg, ...], spec: ModelSpec) -> float:
    """Smallest |d edge/dm| over the folds of an itinerary.

    Sets the evaluation-noise floor of the time quadrature: near a fold
    of strength rho0 the integrand is known only to ~1e-15 / rho0
    absolute, which bounds how precisely T can match beta."""
    out = math.inf
    for leg in legs:
        pairs = []
        if leg.turn_stop:
            pairs.append((leg.stop, leg.start))
        if leg.turn_start:
            pairs.append((leg.start, leg.stop))
        for turn, other in pairs:
            s = math.copysign(1.0, turn - other)
            quot = _edge_quotient(turn, spec)
            out = min(out, max(-s * float(quot(turn)), 0.0))
    return out


def _anchor_plan(spec: ModelSpec, branch: str, well: str,
                 land: Landscape) -> tuple[str, float, float]:
    """Pick the degenerating feature: its kind, limit point, ladder span."""
    if branch == BRANCH_SADDLE:
        idx = 0 if land.well_edges[0] >= land.well_edges[1] else 1
        m_deg = land.wells[idx]
    else:
        m_deg = land.well_for(well)
    anchor_kind = "endpoint" if abs(m_deg) < 1e-9 else "turning"
    if anchor_kind == "endpoint":
        span = 0.5
    else:
        span = 0.45 * min(1.0 - abs(m_deg), abs(m_deg - land.barrier_top))
    return anchor_kind, m_deg, span


def shoot(spec: ModelSpec, beta: float, branch: str,
          well: str = WELL_GLOBAL, tol: float = 1e-8) -> "InstantonTrajectory":
    """Solve T = beta for the requested branch and grid the trajectory.

    Walks a geometric ladder of distances between the degenerating
    feature and its limit point, locks the itinerary structure from the
    first admissible sample, brackets the crossing of beta (the time of
    flight is monotone on the segment adjacent to the degeneration),
    bisects in log-distance, polishes with secant steps, and assembles
    the trajectory at the converged geometry.  The returned grid spans
    the quadrature time, which matches beta to the stated relative
    tolerance.
    """
    if beta <= 0.0:
        raise ValueError("beta must be positive")
    if branch not in (BRANCH_SADDLE, BRANCH_MINIMUM):
        raise ValueError(f"unknown branch {branch!r}")
    land = landscape(spec)
    anchor_kind, m_deg, span = _anchor_plan(spec, branch, well, land)

    def resolvable(dist: float) -> bool:
        return m_deg == 0.0 or dist >= 4.0 * abs(m_deg) * 2.3e-16

    structure = None
    k_lock = 0
    for k in range(_LADDER_STEPS):
        dist = span * 2.0**-k
        if not resolvable(dist):
            break
        for side in (1.0, -1.0):
            x = m_deg + side * dist
            if not -1.0 + 1e-12 < x < 1.0 - 1e-12:
                continue
            probe = (_frame_endpoint(x, spec) if anchor_kind == "endpoint"
                     else _frame_turning(x, spec))
            try:
                cand = _select(probe, spec, branch, well, land)
                trial = _structure_from(cand, anchor_kind, m_deg)
            except (ValueError, ArithmeticError):
                continue
            if abs(trial.lock_positions[trial.anchor_index] - x) > 0.5 * dist:
                continue  # path anchors on the mirror feature: wrong side
            structure = trial
            k_lock = k
            break
        if structure is not None:
            break
    if structure is None:
        raise ValueError(f"no {branch} itinerary found while scanning toward the band edge")

    def t_at(logd: float) -> float:
        x = m_deg + structure.side * math.exp(logd)
        frame, legs = _refine(structure, x, spec, anchor_kind)
        return _path_time(legs, frame, spec)

    ln2 = math.log(2.0)
    log_span = math.log(span)
    lo = hi = log_span - k_lock * ln2   # lo: T >= beta side, hi: T < beta side
    t_lo = t_hi = t_at(lo)
    if t_lo < beta:
        found = False
        for k in range(k_lock + 1, _LADDER_STEPS):
            logd = log_span - k * ln2
            if not resolvable(math.exp(logd)):
                raise ValueError("beta exceeds the float-resolvable range of this branch")
            t_val = t_at(logd)
            if t_val >= beta:
                lo, t_lo = logd, t_val
                found = True
                break
            hi, t_hi = logd, t_val
        if not found:
            raise ValueError(f"no crossing of beta={beta} found toward the band edge")
    else:
        found = False
        for k in range(k_lock - 1, -1, -1):
            logd = log_span - k * ln2
            try:
                t_val = t_at(logd)
            except (ValueError, ArithmeticError):
                break
            if t_val < beta:
                hi, t_hi = logd, t_val
                found = True
                break
            lo, t_lo = logd, t_val
        if not found:
            raise ValueError(
                f"no {branch} trajectory as short as beta={beta}"
                f" (shortest time found {min(t_lo, t_hi):.6g})"
            )

    exhausted = False
    for _ in range(90):
        mid = 0.5 * (lo + hi)
        t_mid = t_at(mid)
        if t_mid >= beta:
            lo, t_lo = mid, t_mid
        else:
            hi, t_hi = mid, t_mid
        if abs(hi - lo) <= 4e-16 * max(1.0, abs(lo), abs(hi)):
            exhausted = True
            break
        if abs(t_mid - beta) < 1e-12 * beta:
            break
    if abs(t_lo - beta) <= abs(t_hi - beta):
        root, f_root, prev, f_prev = lo, t_lo - beta, hi, t_hi - beta
    else:
        root, f_root, prev, f_prev = hi, t_hi - beta, lo, t_lo - beta
    for _ in range(4):
        if f_root == f_prev or f_root == 0.0:
            break
        nxt = root - f_root * (root - prev) / (f_root - f_prev)
        if not (min(lo, hi) - 1e-9 <= nxt <= max(lo, hi) + 1e-9):
            break
        prev, f_prev = root, f_root
        root, f_root = nxt, t_at(nxt) - beta

    x_star = m_deg + structure.side * math.exp(root)
    frame, legs = _refine(structure, x_star, spec, anchor_kind)
    traj = _assemble(frame, spec, branch, legs)
    noise = min(2e-15 / max(_min_fold_strength(legs, spec), 1e-300), 1e-3 * beta)
    if exhausted:
        # the log-distance bracket hit float granularity: one ulp of the
        # anchor coordinate moves T by the bracket width, so that width is
        # the resolution limit of this branch, not a convergence failure
        noise = max(noise, 4.0 * abs(t_lo - t_hi))
    allowed = max(tol * max(1.0, beta), noise)
    # f_root is the residual of the converged leg quadrature; the grid
    # time traj.beta additionally carries graded-node discretization
    # error, which near a degeneration can exceed the solution residual
    if abs(f_root) > allowed and abs(traj.beta - beta) > allowed:
        raise ValueError(
            f"shooting tolerance not reached: |T - beta| = {abs(traj.beta - beta):.3g}"
        )
    return traj


# ---------------------------------------------------------------------------
# trajectory assembly

@dataclasses.dataclass(frozen=True)
class InstantonTrajectory:
    """A solved open-boundary instanton on a uniform imaginary-time grid.

    taus spans [0, beta]; m_x, i_m_y and momentum are reconstructed from
    m_z through the two integrals of motion.  integral_I, kappa and
    action are leg quadratures, not grid sums, so grid resolution never
    limits their accuracy.
    """

    taus: np.ndarray
    m_z: np.ndarray
    m_x: np.ndarray
    i_m_y: np.ndarray
    momentum: np.ndarray
    energy: float
    ell: float
    m1: float
    m2: float
    p1: float
    p2: float
    integral_I: float
    kappa: float
    action: float
    branch: str
    beta: float
    spec: ModelSpec
    legs: tuple[_Leg, ...] = dataclasses.field(repr=False, default=())
    frame: _Frame = dataclasses.field(repr=False, default=None)
    dense_tau: np.ndarray = dataclasses.field(repr=False, default=None)
    dense_m: np.ndarray = dataclasses.field(repr=False, default=None)


def _graded_u_nodes(umax: float) -> np.ndarray:
    # log-graded toward both ends: the time measure diverges only
    # logarithmically there, so geometric u-spacing keeps the cumulative
    # time increments roughly uniform across any boundary layer
    n_end = 596
    lo = umax * 1e-13
    left = np.geomspace(lo, umax / 3.0, n_end)
    inner = np.linspace(umax / 3.0, 2.0 * umax / 3.0,
                        _NODES_PER_HALF - 2 * n_end - 1)[1:-1]
    right = umax - left[::-1]
    return np.concatenate(([0.0], left, inner, right, [umax]))


def _segment_grid(reg_end: float, turn_end: float, frame: _Frame, spec: ModelSpec):
    """Dense (u, m, time-from-the-turning-end) nodes for one leg half."""
    s = math.copysign(1.0, turn_end - reg_end)
    umax = math.sqrt(abs(turn_end - reg_end))
    quot = _edge_quotient(turn_end, spec)
    umax_sq = umax * umax
    u_nodes = _graded_u_nodes(umax)

    def integrand(u: np.ndarray) -> np.ndarray:
        m = turn_end - s * u * u
        rho = _rho_eval(m, u, quot, frame, spec, s, umax_sq)
        p_val = frame.pfun(m, spec)
        return 1.0 / np.sqrt(np.clip(p_val * rho, 1e-300, None))

    half = 0.5 * (u_nodes[1:] - u_nodes[:-1])
    center = 0.5 * (u_nodes[1:] + u_nodes[:-1])
    pts = center[:, None] + half[:, None] * _GL_NODES[None, :]
    vals = integrand(pts.ravel()).reshape(pts.shape)
    panel = (vals * _GL_WEIGHTS[None, :]).sum(axis=1) * half
    cumtime = np.concatenate(([0.0], np.cumsum(panel)))
    m_nodes = turn_end - s * u_nodes * u_nodes
    return u_nodes, m_nodes, cumtime


def _assemble(frame: _Frame, spec: ModelSpec, branch: str,
              legs: tuple[_Leg, ...]) -> InstantonTrajectory:
    pieces = []  # (tau_nodes ascending, m_nodes, turning position, fold sign, direction, umax)
    offset = 0.0
    for leg in legs:
        halves = []
        if leg.turn_stop and not leg.turn_start:
            halves.append((leg.start, leg.stop, True))
        elif leg.turn_start and not leg.turn_stop:
            halves.append((leg.stop, leg.start, False))
        else:
            mid = 0.5 * (leg.start + leg.stop)
            halves.append((mid, leg.start, False))
            halves.append((mid, leg.stop, True))
        for reg_end, turn_end, reversed_time in halves:
            s = math.copysign(1.0, turn_end - reg_end)
            umax = math.sqrt(abs(turn_end - reg_end))
            _, m_nodes, cum = _segment_grid(reg_end, turn_end, frame, spec)
            if reversed_time:
                leg_t = cum[-1]
                taus = offset + (leg_t - cum[::-1])
                pieces.append((taus, m_nodes[::-1], turn_end, s, leg.direction, umax))
            else:
                pieces.append((offset + cum, m_nodes, turn_end, s, leg.direction, umax))
            offset += cum[-1]
    total = offset

    taus = np.linspace(0.0, total, _UNIFORM_GRID)
    m_z = np.empty_like(taus)
    i_m_y = np.empty_like(taus)
    p_arr = np.empty_like(taus)
    for idx, (t_nodes, m_nodes, turn_pos, s, sign, umax) in enumerate(pieces):
        hi = t_nodes[-1] if idx < len(pieces) - 1 else np.inf
        mask = taus <= hi
        if idx > 0:
            mask &= taus > pieces[idx - 1][0][-1]
        if not np.any(mask):
            continue
        strict = np.concatenate(([True], np.diff(t_nodes) > 0.0))
        spline = interpolate.CubicSpline(t_nodes[strict], m_nodes[strict])
        m_here = np.clip(spline(np.clip(taus[mask], t_nodes[0], t_nodes[-1])), -1.0, 1.0)
        u_here = np.sqrt(np.clip(s * (turn_pos - m_here), 0.0, None))
        quot = _edge_quotient(turn_pos, spec)
        rho_here = _rho_eval(m_here, u_here, quot, frame, spec, s, umax * umax)
        m_z[mask] = m_here
        i_m_y[mask] = sign * u_here * np.sqrt(
            np.clip(frame.pfun(m_here, spec) * rho_here, 0.0, None)) / spec.gamma
        p_arr[mask] = sign * _momentum_from(frame, spec, m_here, u_here, rho_here)

    m_x = frame.neg_shift(m_z, spec) / spec.gamma
    m1 = legs[0].start
    m2 = legs[-1].stop
    total_t, total_i, total_w, total_a = _path_integrals(legs, frame, spec)
    ln_kappa = 2.0 * total_i - 0.5 * (math.log1p(-m1 * m1) + math.log1p(-m2 * m2))
    ell_sq = m_x * m_x - i_m_y * i_m_y + m_z * m_z
    dense_tau = np.concatenate([p[0] for p in pieces])
    dense_m = np.concatenate([p[1] for p in pieces])
    keep = np.concatenate(([True], np.diff(dense_tau) > 1e-15))
    return InstantonTrajectory(
        taus=taus,
        m_z=m_z,
        m_x=np.asarray(m_x, dtype=float),
        i_m_y=i_m_y,
        momentum=p_arr,
        energy=frame.eps,
        ell=float(np.sqrt(np.mean(ell_sq))),
        m1=float(m1),
        m2=float(m2),
        p1=float(math.atanh(m1)),
        p2=float(-math.atanh(m2)),
        integral_I=float(total_i),
        kappa=float(math.exp(ln_kappa)),
        action=float(total_a),
        branch=branch,
        beta=float(total),
        spec=spec,
        legs=legs,
        frame=frame,
        dense_tau=dense_tau[keep],
        dense_m=dense_m[keep],
    )


# ---------------------------------------------------------------------------
# free energies and propagator checks

def integral_I(traj: InstantonTrajectory) -> float:
    """Focusing integral of |eps + g(m)| / (1 - m^2) dtau over the path.

    Recomputed from the stored legs as an m-quadrature, so the value is
    independent of the output time grid.
    """
    frame, spec = traj.frame, traj.spec
    focus = lambda m, u, rho: float(frame.neg_shift(m, spec)) / (1.0 - m * m)
    return float(sum(_leg_quad(leg, frame, spec, focus, "time") for leg in traj.legs))


def free_energy_ob(traj: InstantonTrajectory, spec: ModelSpec) -> float:
    """Closed-form open-boundary free energy of a solved trajectory.

    beta*F = integral (m g' - g) dtau - ln 2 - I
             + (1/4)[ln(1-m1^2) + ln(1-m2^2)].
    """
    if spec != traj.spec:
        raise ValueError("trajectory was solved for a different model")
    _, total_i, total_w, _ = _path_integrals(traj.legs, traj.frame, spec)
    logs = math.log1p(-traj.m1**2) + math.log1p(-traj.m2**2)
    return (total_w - math.log(2.0) - total_i + 0.25 * logs) / traj.beta


def wkb_free_energy(traj: InstantonTrajectory, spec: ModelSpec) -> float:
    """Tunneling-action assembly of the same free energy.

    F = eps + (A - Q(m1) - Q(m2)) / (2 beta) with A the momentum integral
    along the path (positive on every leg).
    """
    if spec != traj.spec:
        raise ValueError("trajectory was solved for a different model")
    q1 = float(binary_entropy(traj.m1))
    q2 = float(binary_entropy(traj.m2))
    return traj.energy + (traj.action - q1 - q2) / (2.0 * traj.beta)


def _dense_spline(traj: InstantonTrajectory) -> interpolate.CubicSpline:
    return interpolate.CubicSpline(traj.dense_tau, traj.dense_m)


def propagator_kappa(traj: InstantonTrajectory, spec: ModelSpec) -> tuple[float, float]:
    """Endpoint-overlap normalizer kappa: closed form and direct propagation.

    Closed form: ln kappa = 2 I - (1/2)[ln(1-m1^2) + ln(1-m2^2)].  Direct
    route: integrate dK/dtau = (Gamma sigma_x + g'(m(tau)) sigma_z) K from
    the identity and square half the sum of the entries of K(beta).
    """
    if spec != traj.spec:
        raise ValueError("trajectory was solved for a different model")
    logs = math.log1p(-traj.m1**2) + math.log1p(-traj.m2**2)
    kappa_closed = math.exp(2.0 * traj.integral_I - 0.5 * logs)

    spline = _dense_spline(traj)
    gam = spec.gamma
    gp = spec.cost.gp

    def rhs(tau, k):
        lam = float(gp(float(spline(tau))))
        k00, k01, k10, k11 = k
        return [
            gam * k10 + lam * k00,
            gam * k11 + lam * k01,
            gam * k00 - lam * k10,
            gam * k01 - lam * k11,
        ]

    sol = integrate.solve_ivp(rhs, (0.0, traj.beta), [1.0, 0.0, 0.0, 1.0],
                              method="DOP853", rtol=1e-12, atol=1e-14)
    if not sol.success:
        raise ValueError(f"propagator integration failed: {sol.message}")
    half_trace = 0.5 * float(np.sum(sol.y[:, -1]))
    return kappa_closed, half_trace**2


def zeta_propagation(traj: InstantonTrajectory, spec: ModelSpec) -> tuple[float, float]:
    """Propagate the companion vector and read kappa off its endpoint.

    The vector (a, b, c) = (zeta_x, i zeta_y, zeta_z) obeys a' = -2 g' b,
    b' = -2 g' a + 2 Gamma c, c' = 2 Gamma b.  From (0, 1, 1)/sqrt(2) one
    has kappa = (b + c)(beta)/sqrt(2), and b/c at beta must equal
    (1 + m2^2)/(1 - m2^2).  Returns (kappa, b/c).
    """
    if spec != traj.spec:
        raise ValueError("trajectory was solved for a different model")
    spline = _dense_spline(traj)
    gam = spec.gamma
    gp = spec.cost.gp

    def rhs(tau, v):
        lam = float(gp(float(spline(tau))))
        a, b, c = v
        return [-2.0 * lam * b, -2.0 * lam * a + 2.0 * gam * c, 2.0 * gam * b]

    start = [0.0, 1.0 / math.sqrt(2.0), 1.0 / math.sqrt(2.0)]
    sol = integrate.solve_ivp(rhs, (0.0, traj.beta), start,
                              method="DOP853", rtol=1e-12, atol=1e-14)
    if not sol.success:
        raise ValueError(f"companion-vector integration failed: {sol.message}")
    a, b, c = sol.y[:, -1]
    return float((b + c) / math.sqrt(2.0)), float(b / c)


# ---------------------------------------------------------------------------
# static profiles and the escape barrier

def static_free_energy(spec: ModelSpec, beta: float, mbar: float) -> float:
    """Continuum open-boundary free energy of the constant profile m = mbar.

    F = mbar g'(mbar) - g(mbar) - (1/beta) ln(2[cosh(beta L) +
    (Gamma/L) sinh(beta L)]) with L = sqrt(Gamma^2 + g'(mbar)^2), written
    through exponentials so large beta*L cannot overflow.
    """
    lam = float(spec.cost.gp(mbar))
    gam = spec.gamma
    ell = math.hypot(gam, lam)
    ratio = gam / ell
    x = beta * ell
    log_tr = x + math.log1p(ratio) + math.log1p(
        math.exp(-2.0 * x) * (1.0 - ratio) / (1.0 + ratio))
    return mbar * lam - float(spec.cost.g(mbar)) - log_tr / beta


def static_solutions(spec: ModelSpec, beta: float) -> list[float]:
    """Self-consistent constant profiles: m = (g'(m)/L) tanh(beta L).

    These are the static branches (paramagnetic, barrier top, ordered)
    of the bulk saddle equations; the functional evaluated away from
    self-consistency has no variational meaning, so static comparisons
    must be made at these points only.
    """
    gam = spec.gamma

    def eq(m: float) -> float:
        lam = float(spec.cost.gp(m))
        ell = math.hypot(gam, lam)
        return m - lam / ell * math.tanh(beta * ell)

    grid = np.linspace(-1.0 + 1e-9, 1.0 - 1e-9, 1601)
    vals = np.array([eq(m) for m in grid])
    roots = []
    for a, b, fa, fb in zip(grid[:-1], grid[1:], vals[:-1], vals[1:]):
        if fa == 0.0:
            roots.append(float(a))
        elif fa * fb < 0.0:
            roots.append(float(optimize.brentq(eq, a, b, xtol=1e-14)))
    if abs(vals[-1]) < 1e-12:
        roots.append(float(grid[-1]))
    out = []
    for r in sorted(roots):
        if not out or r - out[-1] > 1e-9:
            out.append(r)
    return out


def _static_basin_minimum(spec: ModelSpec, beta: float, land: Landscape) -> float:
    top = land.barrier_top
    meta = land.metastable_well
    side = [m for m in static_solutions(spec, beta)
            if (m - top) * (meta - top) > 0.0 or m == meta]
    if not side:
        side = [meta]
    return min(static_free_energy(spec, beta, m) for m in side)


def barrier(spec: ModelSpec, beta: float) -> tuple[float, float, float]:
    """Escape barrier: saddle free energy minus the metastable-basin bottom.

    The basin bottom is the lower of the best constant profile inside the
    metastable basin and, where one exists, the nonstatic dip attached to
    the metastable well.  Returns (dF, F_saddle, F_min).
    """
    land = landscape(spec)
    traj = shoot(spec, beta, BRANCH_SADDLE)
    f_saddle = free_energy_ob(traj, spec)
    f_min = _static_basin_minimum(spec, beta, land)
    try:
        dip = shoot(spec, beta, BRANCH_MINIMUM, well=WELL_METASTABLE)
    except ValueError:
        dip = None
    if dip is not None:
        f_min = min(f_min, free_energy_ob(dip, spec))
    return f_saddle - f_min, f_saddle, f_min
