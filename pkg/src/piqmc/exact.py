"""Exact small-system oracles: spectra, partition functions, path sums.

The collective Hamiltonian H = -2 Gamma S_x - N g(2 S_z / N) commutes with
total spin, so it block-diagonalizes into tridiagonal sectors of dimension
2S + 1 with multiplicity C(N, N/2 - S) - C(N, N/2 - S - 1).  The periodic
partition function traces over every sector; the open one is the matrix
element <s| exp(-beta H) |s> of the uniform superposition |s> = sum_sigma
|sigma>, which lives entirely in the maximal-spin sector with amplitudes
<m_k|s> = sqrt(C(N, k)).

Two discrete-time evaluators mirror the replica lattice at finite R.
brute_force_qmc_partition enumerates all 2^(N R) spin paths with the
explicit per-bond normalization

    A = sqrt(cosh(Gamma beta/R) sinh(Gamma beta/R)),

which follows from <s'|exp(x sigma_x)|s> = cosh x (s'=s) or sinh x
(s'!=s), rewritten as A exp(beta J s s'); absolute values therefore match
exact diagonalization, not just ratios.  trotter_partition evaluates the
identical path sum through per-sector transfer operators, so it has no
size cap in R; equality of the two on the enumeration domain is part of
the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .model import Boundary, ModelSpec, QmcParams

DEFAULT_DENSE_CAP = 4096
DEFAULT_SECTOR_CAP = 24
DEFAULT_PATH_CAP = 22


@dataclass(frozen=True)
class SymmetricHamiltonian:
    """Dense H restricted to the maximal-spin sector, basis m = -1..1."""

    dimension: int
    matrix: np.ndarray


@dataclass(frozen=True)
class SpinSector:
    """One total-spin block: tridiagonal H_S plus its degeneracy count."""

    total_spin: float
    multiplicity: int
    diagonal: np.ndarray
    offdiagonal: np.ndarray

    def matrix(self) -> np.ndarray:
        h = np.diag(self.diagonal)
        if len(self.offdiagonal):
            h += np.diag(self.offdiagonal, 1) + np.diag(self.offdiagonal, -1)
        return h


def _ladder(s: float) -> np.ndarray:
    """S_x off-diagonal elements (1/2) sqrt(S(S+1) - M(M+1)), M = -S..S-1."""
    m = -s + np.arange(int(round(2 * s)))
    return 0.5 * np.sqrt(s * (s + 1) - m * (m + 1))


def _sector_block(spec: ModelSpec, s: float) -> tuple[np.ndarray, np.ndarray]:
    n = spec.n_spins
    m_z = (-s + np.arange(int(round(2 * s)) + 1)) * 2.0 / n
    diag = -n * np.asarray(spec.cost.g(m_z), dtype=float)
    off = -2.0 * spec.gamma * _ladder(s)
    return diag, off


def sector_decomposition(spec: ModelSpec) -> list[SpinSector]:
    """All total-spin blocks of H, largest S first."""
    n = spec.n_spins
    sectors = []
    for k in range(n // 2 + 1):
        s = n / 2 - k
        mult = math.comb(n, k) - (math.comb(n, k - 1) if k >= 1 else 0)
        diag, off = _sector_block(spec, s)
        sectors.append(SpinSector(s, mult, diag, off))
    return sectors


def build_symmetric_hamiltonian(spec: ModelSpec, cap: int = DEFAULT_DENSE_CAP) -> SymmetricHamiltonian:
    """Maximal-spin block as a dense symmetric matrix."""
    if spec.n_spins > cap:
        raise ValueError(f"n_spins {spec.n_spins} exceeds cap {cap}")
    diag, off = _sector_block(spec, spec.n_spins / 2)
    h = np.diag(diag)
    if len(off):
        h += np.diag(off, 1) + np.diag(off, -1)
    return SymmetricHamiltonian(spec.n_spins + 1, h)


def _sector_eig(sector: SpinSector) -> tuple[np.ndarray, np.ndarray]:
    if len(sector.diagonal) == 1:
        return sector.diagonal.copy(), np.ones((1, 1))
    return eigh_tridiagonal(sector.diagonal, sector.offdiagonal)


def partition_periodic(spec: ModelSpec, cap: int = DEFAULT_SECTOR_CAP) -> float:
    """Z = tr exp(-beta H), summed over all total-spin sectors."""
    if spec.n_spins > cap:
        raise ValueError(f"n_spins {spec.n_spins} exceeds cap {cap}")
    z = 0.0
    for sector in sector_decomposition(spec):
        evals, _ = _sector_eig(sector)
        z += sector.multiplicity * float(np.sum(np.exp(-spec.beta * evals)))
    return z


def partition_open(spec: ModelSpec, cap: int = DEFAULT_SECTOR_CAP) -> float:
    """Z_ob = <s| exp(-beta H) |s> with <m_k|s> = sqrt(C(N, k))."""
    if spec.n_spins > cap:
        raise ValueError(f"n_spins {spec.n_spins} exceeds cap {cap}")
    n = spec.n_spins
    diag, off = _sector_block(spec, n / 2)
    sector = SpinSector(n / 2, 1, diag, off)
    evals, vecs = _sector_eig(sector)
    amp = np.sqrt([math.comb(n, k) for k in range(n + 1)])
    overlaps = vecs.T @ amp
    return float(np.sum(overlaps**2 * np.exp(-spec.beta * evals)))


def spectrum_head(spec: ModelSpec, count: int = 8, cap: int = DEFAULT_SECTOR_CAP) -> np.ndarray:
    """Lowest eigenvalues of H across all sectors, repeated per multiplicity."""
    if spec.n_spins > cap:
        raise ValueError(f"n_spins {spec.n_spins} exceeds cap {cap}")
    lows = []
    for sector in sector_decomposition(spec):
        evals, _ = _sector_eig(sector)
        lows.extend(np.repeat(np.sort(evals)[:count], sector.multiplicity))
    return np.sort(np.asarray(lows))[:count]


def spectral_gap(spec: ModelSpec, cap: int = DEFAULT_SECTOR_CAP) -> float:
    """E_1 - E_0 including sector degeneracies (0 for a degenerate ground state)."""
    head = spectrum_head(spec, count=2, cap=cap)
    return float(head[1] - head[0])


def bond_normalization(spec: ModelSpec, params: QmcParams) -> float:
    """Per spin, per bond factor A = sqrt(cosh(Gamma delta) sinh(Gamma delta))."""
    x = spec.gamma * spec.beta / params.replicas
    return math.sqrt(math.cosh(x) * math.sinh(x))


def brute_force_qmc_partition(spec: ModelSpec, params: QmcParams,
                              cap: int = DEFAULT_PATH_CAP) -> float:
    """Exhaustive sum A^(N b) sum_paths exp(-beta H_qmc) over all 2^(N R) paths.

    b is the bond count (R periodic, R - 1 open).  Kept strictly
    enumerative; use trotter_partition for sizes beyond the cap.
    """
    n, r = spec.n_spins, params.replicas
    nr = n * r
    if nr > cap:
        raise ValueError(f"N*R = {nr} exceeds enumeration cap {cap}")
    j = params.coupling
    periodic = params.boundary is Boundary.PERIODIC
    n_bonds = r if periodic else r - 1
    total = 0.0
    chunk = 1 << 16
    codes = np.arange(1 << nr, dtype=np.int64)
    for lo in range(0, codes.size, chunk):
        block = codes[lo:lo + chunk]
        bits = (block[:, None] >> np.arange(nr)) & 1
        s = (2 * bits - 1).astype(np.int8).reshape(-1, r, n)
        bonds = np.sum(s[:, :-1] * s[:, 1:], axis=(1, 2), dtype=np.int64)
        if periodic:
            bonds += np.sum(s[:, -1] * s[:, 0], axis=1, dtype=np.int64)
        m = s.sum(axis=2, dtype=np.int64) / n
        energy = -j * bonds - (n / r) * np.sum(spec.cost.g(m), axis=1)
        total += float(np.sum(np.exp(-spec.beta * energy)))
    return bond_normalization(spec, params) ** (n * n_bonds) * total


def trotter_partition(spec: ModelSpec, params: QmcParams,
                      cap: int = DEFAULT_SECTOR_CAP) -> float:
    """The identical finite-R path sum, via per-sector transfer operators.

    Within a total-spin sector the one-step operator is
    M = D^(1/2) exp(2 Gamma delta S_x) D^(1/2) with D = exp(delta N g(m));
    Z_pbc = sum_S mult(S) tr M_S^R and Z_ob = w^T M^(R-1) w in the maximal
    sector, where w = D^(1/2) sqrt(C(N, k)).  Agrees with the brute-force
    enumeration to rounding error and with the exact partitions as R grows.
    """
    n, r = spec.n_spins, params.replicas
    if n > cap:
        raise ValueError(f"n_spins {n} exceeds cap {cap}")
    delta = spec.beta / r
    x = spec.gamma * delta
    periodic = params.boundary is Boundary.PERIODIC

    def sector_step(s: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        dim = int(round(2 * s)) + 1
        m_z = (-s + np.arange(dim)) * 2.0 / n
        half_d = np.exp(0.5 * delta * n * np.asarray(spec.cost.g(m_z), dtype=float))
        if dim == 1:
            xmat = np.ones((1, 1))
        else:
            ev, u = eigh_tridiagonal(np.zeros(dim), _ladder(s))
            xmat = (u * np.exp(2.0 * x * ev)) @ u.T
        step = xmat * half_d[:, None] * half_d[None, :]
        lam, vec = np.linalg.eigh(step)
        return lam, vec, half_d

    if periodic:
        z = 0.0
        for sector in sector_decomposition(spec):
            lam, _, _ = sector_step(sector.total_spin)
            z += sector.multiplicity * float(np.sum(lam**r))
        return z
    lam, vec, half_d = sector_step(n / 2)
    w = half_d * np.sqrt([math.comb(n, k) for k in range(n + 1)])
    overlaps = vec.T @ w
    lam = np.clip(lam, 0.0, None)
    return float(np.sum(overlaps**2 * lam ** (r - 1)))
