"""Per-spin Bloch trajectories for collective tunneling, hbar = 1.

Each spin j carries a unit Bloch vector written in a hyperbolic chart,

    n_j = (sin(theta_j) cosh(varphi_j), -i sin(theta_j) sinh(varphi_j),
           cos(theta_j)),

where varphi is the azimuthal angle continued to the imaginary axis.  In
imaginary time the precession of n_j around the molecular field becomes a
real flow in (theta_j, varphi_j):

    d theta_j / d tau  = -2 Gamma sinh(varphi_j)
    d varphi_j / d tau =  2 Gamma cot(theta_j) cosh(varphi_j) - 2 g'(m_z)

with the collective coordinate m_z = (1/N) sum_j cos(theta_j).  The chart
keeps n_x**2 - (i n_y)**2 + n_z**2 = 1 exactly, and when every spin moves
in lockstep the flow collapses onto the single-vector equations used by
the shooting solver, component for component.

The weight of a trajectory is exp(-action) with

    action = (1/2) sum_j integral (1 - cos theta_j) dvarphi_j/dtau dtau
             + integral H[n_1..n_N] dtau,

a geometric term plus the energy integral; both are real in this chart.
Only the exponent is computed here, never the fluctuation prefactor.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.integrate import simpson, solve_ivp

from .model import ModelSpec

_RTOL = 1e-12
_ATOL = 1e-12


@dataclass(frozen=True)
class BlochTrajectory:
    """N-spin trajectory sampled on a uniform imaginary-time grid.

    theta and varphi are (N, T) arrays; row j is the polar angle and the
    hyperbolic azimuth of spin j at the T grid times.  action is the full
    N-spin exponent, extensive in the number of rows.
    """

    taus: np.ndarray
    theta: np.ndarray
    varphi: np.ndarray
    action: float

    def __post_init__(self) -> None:
        taus = np.asarray(self.taus, dtype=float)
        theta = np.atleast_2d(np.asarray(self.theta, dtype=float))
        varphi = np.atleast_2d(np.asarray(self.varphi, dtype=float))
        if theta.shape != varphi.shape or theta.shape[1] != taus.size:
            raise ValueError("theta and varphi must be (N, T) with T grid times")
        object.__setattr__(self, "taus", taus)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "varphi", varphi)

    @property
    def n_spins(self) -> int:
        return self.theta.shape[0]


def bloch_rhs(state: np.ndarray, spec: ModelSpec) -> np.ndarray:
    """Flow of the (theta, varphi) chart; state has shape (2, N).

    Row 0 holds the polar angles, row 1 the hyperbolic azimuths.  The
    returned array is real and has the same shape.  Poles of the chart
    (sin theta = 0) are genuine coordinate singularities and propagate as
    infs rather than being masked.
    """
    state = np.asarray(state, dtype=float)
    theta, varphi = state[0], state[1]
    m_z = float(np.mean(np.cos(theta)))
    gp = spec.cost.gp(m_z)
    d_theta = -2.0 * spec.gamma * np.sinh(varphi)
    d_varphi = (2.0 * spec.gamma * np.cosh(varphi) * np.cos(theta) / np.sin(theta)
                - 2.0 * gp)
    return np.stack((d_theta, d_varphi))


def components(theta, varphi):
    """Bloch components (n_x, i n_y, n_z) of the chart, all real."""
    s = np.sin(theta)
    return s * np.cosh(varphi), s * np.sinh(varphi), np.cos(theta)


def collective_energy(theta: np.ndarray, varphi: np.ndarray,
                      spec: ModelSpec) -> np.ndarray:
    """H[n_1..n_N] on (N, T) angle arrays: -Gamma sum_j n_x,j - N g(m_z)."""
    n_x, _, n_z = components(theta, varphi)
    m_z = np.mean(n_z, axis=0)
    n = theta.shape[0]
    return -spec.gamma * np.sum(n_x, axis=0) - n * spec.cost.g(m_z)


def evolve(spec: ModelSpec, theta0, varphi0, samples: int = 1025,
           taus=None) -> BlochTrajectory:
    """Integrate the flow from per-spin initial angles.

    Samples [0, beta] uniformly unless an explicit grid is handed in (for
    comparisons against a trajectory solved elsewhere, whose final time
    may differ from beta in the last few digits).  The initial-value
    problem is all this module solves; trajectories that should satisfy
    endpoint conditions must be seeded from a solved boundary-value
    trajectory (see from_instanton).
    """
    theta0 = np.atleast_1d(np.asarray(theta0, dtype=float))
    varphi0 = np.atleast_1d(np.asarray(varphi0, dtype=float))
    if theta0.shape != varphi0.shape:
        raise ValueError("theta0 and varphi0 must have matching shapes")
    n = theta0.size
    taus = np.linspace(0.0, spec.beta, samples) if taus is None \
        else np.asarray(taus, dtype=float)

    def rhs(_t, y):
        return bloch_rhs(y.reshape(2, n), spec).ravel()

    sol = solve_ivp(rhs, (taus[0], taus[-1]), np.concatenate((theta0, varphi0)),
                    t_eval=taus, method="DOP853", rtol=_RTOL, atol=_ATOL)
    if not sol.success:
        raise RuntimeError(f"trajectory integration failed: {sol.message}")
    y = sol.y.reshape(2, n, taus.size)
    traj = BlochTrajectory(taus, y[0], y[1], action=0.0)
    return replace(traj, action=action(traj, spec))


def _action_parts(traj: BlochTrajectory, spec: ModelSpec,
                  stride: int = 1) -> tuple[float, float]:
    # keep the final time in the subsample or the domain shrinks
    idx = np.arange(0, traj.taus.size, stride)
    if idx[-1] != traj.taus.size - 1:
        idx = np.append(idx, traj.taus.size - 1)
    taus = traj.taus[idx]
    theta = traj.theta[:, idx]
    varphi = traj.varphi[:, idx]
    # analytic d varphi/d tau, re-evaluated from the flow rather than
    # differenced, so the quadrature error is purely in tau
    m_z = np.mean(np.cos(theta), axis=0)
    gp = spec.cost.gp(m_z)
    d_varphi = (2.0 * spec.gamma * np.cosh(varphi) * np.cos(theta) / np.sin(theta)
                - 2.0 * gp)
    geometric = 0.5 * simpson(np.sum((1.0 - np.cos(theta)) * d_varphi, axis=0),
                              x=taus)
    potential = simpson(collective_energy(theta, varphi, spec), x=taus)
    return float(geometric), float(potential)


def action(traj: BlochTrajectory, spec: ModelSpec) -> float:
    """Exponent of the trajectory weight; raises if the grid is too coarse.

    Quadrature runs once on the stored grid and once on every second
    point; disagreement beyond 1e-6 of scale means the grid does not
    resolve the integrand.
    """
    if traj.taus.size < 9:
        raise ValueError("grid too coarse: need at least 9 samples")
    geometric, potential = _action_parts(traj, spec)
    full = geometric + potential
    coarse = sum(_action_parts(traj, spec, stride=2))
    if abs(full - coarse) > 1e-6 * max(1.0, abs(full)):
        raise ValueError(f"grid too coarse: quadrature drift {full - coarse:.3e}")
    return full


def tunneling_exponent(traj: BlochTrajectory) -> float:
    """Decay exponent: the matrix element is prefactor * exp(-action)."""
    return traj.action


def from_instanton(itraj, n_spins: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric per-spin initial angles matching an instanton start point.

    All n_spins rows start at the same point on the unit sphere, with the
    hyperbolic azimuth read off the instanton's own component arrays so
    the travel direction is inherited rather than guessed.
    """
    theta0 = float(np.arccos(itraj.m_z[0]))
    s = np.sin(theta0)
    if s < 1e-12:
        raise ValueError("instanton starts at a chart pole")
    varphi0 = float(np.arcsinh(itraj.i_m_y[0] / s))
    return np.full(n_spins, theta0), np.full(n_spins, varphi0)


def instanton_deviation(traj: BlochTrajectory, itraj) -> float:
    """Max pointwise gap between the mean Bloch vector and an instanton.

    Both trajectories must be sampled on the same tau grid.  The gap is
    taken over all three components (n_x, i n_y, n_z) and all grid times.
    """
    if traj.taus.shape != itraj.taus.shape or not np.allclose(
            traj.taus, itraj.taus, rtol=0.0, atol=1e-12):
        raise ValueError("trajectories are sampled on different grids")
    n_x, i_n_y, n_z = components(traj.theta, traj.varphi)
    dev = max(np.max(np.abs(np.mean(n_x, axis=0) - itraj.m_x)),
              np.max(np.abs(np.mean(i_n_y, axis=0) - itraj.i_m_y)),
              np.max(np.abs(np.mean(n_z, axis=0) - itraj.m_z)))
    return float(dev)


def flow_residuals(traj: BlochTrajectory, spec: ModelSpec) -> float:
    """Largest violation of the single-vector equations along a trajectory.

    Differentiates the mean reconstructed components with a five-point
    stencil and checks them against the collective flow

        d n_x = -2 g'(m_z) (i n_y),  d(i n_y) = -2 g'(m_z) n_x + 2 Gamma n_z,
        d n_z = 2 Gamma (i n_y),

    returning the max residual over interior grid points.  Small values
    certify that the integrated path obeys the collective dynamics; the
    check is meaningful only for symmetric (lockstep) trajectories.
    """
    taus = traj.taus
    if taus.size < 5:
        raise ValueError("need at least 5 samples for the stencil")
    h = taus[1] - taus[0]
    n_x, i_n_y, n_z = (np.mean(a, axis=0) for a in
                       components(traj.theta, traj.varphi))
    gp = spec.cost.gp(n_z)

    def d5(f):
        return (f[:-4] - 8.0 * f[1:-3] + 8.0 * f[3:-1] - f[4:]) / (12.0 * h)

    sl = slice(2, -2)
    res_x = d5(n_x) + 2.0 * gp[sl] * i_n_y[sl]
    res_y = d5(i_n_y) + 2.0 * gp[sl] * n_x[sl] - 2.0 * spec.gamma * n_z[sl]
    res_z = d5(n_z) - 2.0 * spec.gamma * i_n_y[sl]
    return float(max(np.max(np.abs(res_x)), np.max(np.abs(res_y)),
                     np.max(np.abs(res_z))))
