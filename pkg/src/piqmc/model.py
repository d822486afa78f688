"""Fully connected transverse-field spin models and their replica image.

The quantum Hamiltonian acting on N spins is

    H = -2 Gamma S_x - N g(2 S_z / N),

with collective spin operators S_x, S_z and a smooth polynomial cost
function g of the magnetization m = (1/N) sum_j sigma_j^z.  Trotter
slicing with R replicas maps Z = tr exp(-beta H) onto a classical system
of R x N Ising spins,

    H_qmc = -J sum_{tau,j} s_j(tau) s_j(tau+1) - (N/R) sum_tau g[m(tau)],

where the inter-replica coupling is J = -(1/(2 beta)) ln tanh(Gamma beta/R).
The replica chain is either closed into a ring (periodic boundary, the
trace) or cut open (open boundary, free end slices).  For R = 2 the
periodic sum over tau visits the single bond twice; that double bond is
kept literally everywhere (energies, brute-force sums, transfer products)
so all routes agree configuration by configuration.

Conventions: spins take values +-1, slice magnetizations lie on the grid
{-1, -1 + 2/N, ..., 1}, and all energies are extensive (not per spin).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from numpy.polynomial import polynomial as npoly
from scipy.special import xlogy

LN2 = math.log(2.0)


class Boundary(str, enum.Enum):
    """Boundary condition of the replica chain."""

    PERIODIC = "periodic"
    OPEN = "open"


@dataclass(frozen=True)
class CostFunction:
    """Polynomial cost g(m) = sum_k c_k m^k, coefficients in increasing order.

    Degree zero is rejected: a constant g exerts no force and produces no
    dynamics.  Derivatives up to third order are exposed because the
    instanton quadratures Taylor-expand the integrand at turning points.
    """

    coefficients: tuple[float, ...]

    def __post_init__(self) -> None:
        coeffs = tuple(float(c) for c in self.coefficients)
        if not all(math.isfinite(c) for c in coeffs):
            raise ValueError("cost coefficients must be finite")
        if len(coeffs) < 2 or all(c == 0.0 for c in coeffs[1:]):
            raise ValueError("cost polynomial must have degree >= 1")
        object.__setattr__(self, "coefficients", coeffs)

    @property
    def degree(self) -> int:
        d = len(self.coefficients) - 1
        while d > 1 and self.coefficients[d] == 0.0:
            d -= 1
        return d

    @cached_property
    def _d1(self) -> np.ndarray:
        return npoly.polyder(np.asarray(self.coefficients))

    @cached_property
    def _d2(self) -> np.ndarray:
        return npoly.polyder(np.asarray(self.coefficients), 2)

    @cached_property
    def _d3(self) -> np.ndarray:
        return npoly.polyder(np.asarray(self.coefficients), 3)

    def g(self, m):
        return npoly.polyval(m, self.coefficients)

    def gp(self, m):
        return npoly.polyval(m, self._d1)

    def gpp(self, m):
        return npoly.polyval(m, self._d2)

    def gppp(self, m):
        return npoly.polyval(m, self._d3)


def p_spin(p: int = 3) -> CostFunction:
    """g(m) = m^p; odd p >= 3 has a metastable paramagnet at m = 0."""
    if p < 1:
        raise ValueError("p must be >= 1")
    return CostFunction((0.0,) * p + (1.0,))


def tilted_quadratic(h: float) -> CostFunction:
    """g(m) = m^2/2 + h m, a double well with bias h."""
    return CostFunction((0.0, float(h), 0.5))


@dataclass(frozen=True)
class ModelSpec:
    """Physical problem: N spins at inverse temperature beta, field gamma.

    n_spins >= 1 is accepted so the N = 1 closed forms remain usable as
    oracle anchors; physical experiments use N >= 2.
    """

    n_spins: int
    beta: float
    gamma: float
    cost: CostFunction

    def __post_init__(self) -> None:
        if self.n_spins < 1:
            raise ValueError("n_spins must be a positive integer")
        if not (math.isfinite(self.beta) and self.beta > 0):
            raise ValueError("beta must be positive and finite")
        if not (math.isfinite(self.gamma) and self.gamma > 0):
            raise ValueError("gamma must be positive and finite")


def coupling_j(beta: float, gamma: float, replicas: int) -> float:
    """Inter-replica coupling J = -(1/(2 beta)) ln tanh(gamma beta / R)."""
    if beta <= 0 or gamma <= 0:
        raise ValueError("beta and gamma must be positive")
    if replicas < 2:
        raise ValueError("replicas must be >= 2")
    t = math.tanh(gamma * beta / replicas)
    if t <= 0.0:
        raise ValueError("tanh(gamma beta / R) underflowed; increase gamma beta / R")
    j = -math.log(t) / (2.0 * beta)
    if not math.isfinite(j):
        raise ValueError("coupling overflowed for gamma beta / R = "
                         f"{gamma * beta / replicas!r}")
    return j


@dataclass(frozen=True)
class QmcParams:
    """Replica-lattice parameters; coupling is derived, see derive()."""

    replicas: int
    boundary: Boundary
    coupling: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "boundary", Boundary(self.boundary))
        if self.replicas < 2:
            raise ValueError("replicas must be >= 2")
        if not (math.isfinite(self.coupling) and self.coupling >= 0):
            raise ValueError("coupling must be finite and >= 0")

    @classmethod
    def derive(cls, spec: ModelSpec, replicas: int, boundary) -> "QmcParams":
        return cls(replicas, Boundary(boundary),
                   coupling_j(spec.beta, spec.gamma, replicas))


@dataclass(frozen=True)
class SpinPath:
    """R x N matrix of +-1 spins; row tau is one imaginary-time slice."""

    spins: np.ndarray
    boundary: Boundary

    def __post_init__(self) -> None:
        spins = np.ascontiguousarray(self.spins, dtype=np.int8)
        if spins.ndim != 2:
            raise ValueError("spins must be an R x N matrix")
        if not np.all(np.abs(spins) == 1):
            raise ValueError("spin entries must be +-1")
        spins.setflags(write=False)
        object.__setattr__(self, "spins", spins)
        object.__setattr__(self, "boundary", Boundary(self.boundary))

    @classmethod
    def uniform(cls, replicas: int, n_spins: int, boundary, value: int = 1) -> "SpinPath":
        return cls(np.full((replicas, n_spins), value, dtype=np.int8), Boundary(boundary))


def binary_entropy(m):
    """Per-spin entropy Q(m), with Q(+-1) = 0 by continuity.

    Q(m) = ln 2 - [(1+m) ln(1+m) + (1-m) ln(1-m)] / 2.
    """
    arr = np.asarray(m, dtype=float)
    if np.any(np.abs(arr) > 1.0):
        raise ValueError("magnetization must lie in [-1, 1]")
    q = LN2 - 0.5 * (xlogy(1.0 + arr, 1.0 + arr) + xlogy(1.0 - arr, 1.0 - arr))
    return float(q) if arr.ndim == 0 else q


def entropy_prime(m):
    """Q'(m) = (1/2) ln((1-m)/(1+m)) = -artanh(m); -+inf at m = +-1."""
    arr = np.asarray(m, dtype=float)
    if np.any(np.abs(arr) > 1.0):
        raise ValueError("magnetization must lie in [-1, 1]")
    with np.errstate(divide="ignore"):
        qp = -np.arctanh(arr)
    return float(qp) if arr.ndim == 0 else qp


def classical_free_energy(spec: ModelSpec, m):
    """Per-spin classical free energy -g(m) - Q(m)/beta at fixed m."""
    val = -spec.cost.g(m) - binary_entropy(m) / spec.beta
    return float(val) if np.ndim(m) == 0 else np.asarray(val)


def magnetization_profile(path: SpinPath) -> np.ndarray:
    """Slice magnetizations m(tau) = (1/N) sum_j s_j(tau)."""
    n = path.spins.shape[1]
    return path.spins.sum(axis=1, dtype=np.int64) / n


def qmc_energy(path: SpinPath, spec: ModelSpec, params: QmcParams) -> float:
    """Replica-lattice energy of Eq.-level bookkeeping, extensive units.

    Periodic boundary sums the bond sigma(tau) sigma(tau+1 mod R) over all
    R values of tau (hence the literal double bond at R = 2); open boundary
    keeps the R - 1 interior bonds only.
    """
    s = path.spins
    r, n = s.shape
    if n != spec.n_spins or r != params.replicas:
        raise ValueError("path dimensions do not match spec/params")
    if path.boundary != params.boundary:
        raise ValueError("path and params disagree on boundary condition")
    bonds = np.sum(s[:-1] * s[1:], dtype=np.int64)
    if params.boundary is Boundary.PERIODIC:
        bonds += np.sum(s[-1] * s[0], dtype=np.int64)
    m = magnetization_profile(path)
    return -params.coupling * float(bonds) - (n / r) * float(np.sum(spec.cost.g(m)))


def flip_energy_delta(path: SpinPath, spec: ModelSpec, params: QmcParams,
                      tau: int, j: int) -> float:
    """Energy change of flipping spin j of slice tau, from local terms only.

    Matches qmc_energy(after) - qmc_energy(before) exactly; the QMC engine
    reimplements this arithmetic with lookup tables.
    """
    s = path.spins
    r, n = s.shape
    sig = int(s[tau, j])
    nb = 0
    if params.boundary is Boundary.PERIODIC:
        nb = int(s[tau - 1, j]) + int(s[(tau + 1) % r, j])
    else:
        if tau > 0:
            nb += int(s[tau - 1, j])
        if tau < r - 1:
            nb += int(s[tau + 1, j])
    m_old = float(s[tau].sum(dtype=np.int64)) / n
    m_new = m_old - 2.0 * sig / n
    g = spec.cost.g
    return (2.0 * params.coupling * sig * nb
            - (n / r) * (float(g(m_new)) - float(g(m_old))))


def to_config(spec: ModelSpec, params: QmcParams) -> dict:
    """JSON-ready block; from_config inverts it losslessly."""
    return {
        "n": spec.n_spins,
        "beta": spec.beta,
        "gamma": spec.gamma,
        "g": {"poly": list(spec.cost.coefficients)},
        "replicas": params.replicas,
        "boundary": params.boundary.value,
    }


def from_config(block: dict) -> tuple[ModelSpec, QmcParams]:
    """Parse the model/qmc config block, rejecting unknown keys."""
    known = {"n", "beta", "gamma", "g", "replicas", "boundary"}
    extra = set(block) - known
    if extra:
        raise ValueError(f"unknown config keys: {sorted(extra)}")
    missing = known - set(block)
    if missing:
        raise ValueError(f"missing config keys: {sorted(missing)}")
    gblock = block["g"]
    if set(gblock) != {"poly"}:
        raise ValueError("g block must be {'poly': [c0, ..., cd]}")
    spec = ModelSpec(int(block["n"]), float(block["beta"]), float(block["gamma"]),
                     CostFunction(tuple(gblock["poly"])))
    params = QmcParams.derive(spec, int(block["replicas"]), block["boundary"])
    return spec, params
