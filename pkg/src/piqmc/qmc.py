"""Single-spin-flip Metropolis dynamics on the replica lattice.

The sampled weight is exp(-beta * E) with E from model.qmc_energy, so a
flip of spin j in slice tau is accepted with probability

    min(1, exp(-beta * dE)),
    dE = 2 J s (s_left + s_right) - (N/R) [g(m - 2s/N) - g(m)],

where s is the current spin, the neighbor sum runs over the one or two
coupled slices (open chains have no wrap bond and single-neighbor ends),
and m is the slice magnetization before the flip.  Both pieces take a
finite number of values, so the kernel works entirely from lookup tables:
the bond factor is indexed by s*(s_left+s_right) in {-2..2} and the cost
factor by (slice spin sum, s).  No transcendental is evaluated inside the
sweep loop, and the energy ledger is updated from matching delta tables.

A sweep proposes every one of the R*N sites exactly once, in a fresh
random permutation.  Randomness comes from a counter-based Philox
generator; escape experiments derive one independent stream per (N, seed)
task through SeedSequence spawn keys, so chains can run in any order and
still reproduce bit for bit.

First-passage measurement follows the slice-averaged magnetization
m_bar = sum_tau m(tau) / R, an integer accumulator in units of 1/(N R),
and reports the first sweep after which m_bar sits at or beyond the
threshold.  Runs that exhaust their sweep budget are returned as censored
records carrying the budget as a lower bound, never as errors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .model import (Boundary, ModelSpec, QmcParams, SpinPath,
                    classical_free_energy, qmc_energy)

ENERGY_AUDIT_EVERY = 10_000
ENERGY_AUDIT_RTOL = 1e-9

# chunk sizing: order + uniforms arrays together stay near this many bytes
_CHUNK_BUDGET_BYTES = 32 << 20
_BOOTSTRAP_DEFAULT = 2000


class BudgetError(RuntimeError):
    """Raised when censoring leaves too few records to fit a slope.

    Carries the partial records so callers can still emit them.
    """

    def __init__(self, message: str, records: list):
        super().__init__(message)
        self.records = records


@njit(cache=True)
def _sweep_chunk(spins, slice_sums, order, uni, bond_exp, bond_de,
                 cost_exp, cost_de, periodic, total_start, threshold_sum,
                 direction, codes, totals):
    """Run len(order) sweeps in place; early exit on threshold crossing.

    Returns (crossed_sweep_or_-1, accepted_energy_sum, new_total).
    codes is filled with the bit pattern of the lattice after each sweep
    when its length matches, totals with the running spin sum; callers
    pass length-0 arrays to skip either.
    """
    r, n = spins.shape
    total = total_start
    de_sum = 0.0
    crossed = -1
    record = codes.shape[0] == order.shape[0]
    keep_totals = totals.shape[0] == order.shape[0]
    for t in range(order.shape[0]):
        for k in range(order.shape[1]):
            site = order[t, k]
            tau = site // n
            j = site - tau * n
            s = spins[tau, j]
            nb = 0
            if periodic:
                tm = r - 1 if tau == 0 else tau - 1
                tp = 0 if tau == r - 1 else tau + 1
                nb = spins[tm, j] + spins[tp, j]
            else:
                if tau > 0:
                    nb += spins[tau - 1, j]
                if tau < r - 1:
                    nb += spins[tau + 1, j]
            kidx = s * nb + 2
            sidx = (s + 1) >> 1
            midx = (slice_sums[tau] + n) >> 1
            if uni[t, k] < bond_exp[kidx] * cost_exp[midx, sidx]:
                spins[tau, j] = -s
                slice_sums[tau] -= 2 * s
                total -= 2 * s
                de_sum += bond_de[kidx] + cost_de[midx, sidx]
        if record:
            code = 0
            bit = 0
            for tt in range(r):
                for jj in range(n):
                    if spins[tt, jj] > 0:
                        code |= 1 << bit
                    bit += 1
            codes[t] = code
        if keep_totals:
            totals[t] = total
        if direction > 0:
            if total >= threshold_sum:
                crossed = t
                break
        elif direction < 0:
            if total <= threshold_sum:
                crossed = t
                break
    return crossed, de_sum, total


def _acceptance_tables(spec: ModelSpec, params: QmcParams):
    """Bond and cost tables: exp(-beta dE) factors plus raw dE addends."""
    n, r = spec.n_spins, params.replicas
    beta, j = spec.beta, params.coupling
    k = np.arange(-2, 3, dtype=float)
    bond_de = 2.0 * j * k
    bond_exp = np.exp(np.clip(-beta * bond_de, -700.0, 700.0))
    sums = np.arange(-n, n + 1, 2, dtype=float)
    g_of = spec.cost.g(sums / n)
    cost_de = np.empty((n + 1, 2))
    for sidx, s in enumerate((-1.0, 1.0)):
        m_new = (sums - 2.0 * s) / n
        inside = np.abs(m_new) <= 1.0
        g_new = np.where(inside, spec.cost.g(np.clip(m_new, -1.0, 1.0)), 0.0)
        de = -(n / r) * (g_new - g_of)
        # flipping the last aligned spin past saturation cannot happen;
        # poison those slots so a table bug surfaces as a rejection
        cost_de[:, sidx] = np.where(inside, de, np.inf)
    cost_exp = np.exp(np.clip(-beta * cost_de, -700.0, 700.0))
    return bond_exp, bond_de, cost_exp, cost_de


@dataclass
class SweepEngine:
    """Mutable Metropolis chain over one SpinPath.

    All randomness flows from a Philox stream keyed by rng_seed.
    Permutations and uniforms are drawn in blocks sized per run() call,
    so reconstructing the engine and replaying the same sequence of
    run() calls reproduces the trajectory bit for bit.
    """

    path: SpinPath
    spec: ModelSpec
    params: QmcParams
    rng_seed: int
    sweep_count: int = 0
    _rng: np.random.Generator = field(init=False, repr=False)
    _spins: np.ndarray = field(init=False, repr=False)
    _slice_sums: np.ndarray = field(init=False, repr=False)
    _energy: float = field(init=False, repr=False)
    _tables: tuple = field(init=False, repr=False)
    _audit_mark: int = field(init=False, repr=False)

    def __post_init__(self) -> None:
        r, n = self.path.spins.shape
        if (n, r) != (self.spec.n_spins, self.params.replicas):
            raise ValueError("path dimensions do not match spec/params")
        if self.path.boundary != self.params.boundary:
            raise ValueError("path and params disagree on boundary condition")
        self._rng = np.random.Generator(
            np.random.Philox(np.random.SeedSequence(self.rng_seed)))
        self._spins = np.array(self.path.spins, dtype=np.int8, order="C")
        self._slice_sums = self._spins.sum(axis=1, dtype=np.int64)
        self._energy = qmc_energy(self.path, self.spec, self.params)
        self._tables = _acceptance_tables(self.spec, self.params)
        self._audit_mark = 0

    @property
    def energy(self) -> float:
        """Incrementally tracked qmc_energy of the current path."""
        return self._energy

    @property
    def mean_magnetization(self) -> float:
        """Slice-averaged magnetization of the current path."""
        r, n = self._spins.shape
        return float(self._slice_sums.sum()) / (r * n)

    def snapshot(self) -> SpinPath:
        return SpinPath(self._spins.copy(), self.params.boundary)

    def reset_path(self, path: SpinPath) -> None:
        """Replace the configuration without touching the RNG stream."""
        if path.spins.shape != self._spins.shape:
            raise ValueError("replacement path has wrong dimensions")
        if path.boundary != self.params.boundary:
            raise ValueError("replacement path has wrong boundary condition")
        self.path = path
        self._spins = np.array(path.spins, dtype=np.int8, order="C")
        self._slice_sums = self._spins.sum(axis=1, dtype=np.int64)
        self._energy = qmc_energy(path, self.spec, self.params)

    def draw_start(self, m: float) -> SpinPath:
        """Fresh uniform-magnetization start drawn from the engine stream."""
        return path_at_magnetization(self.spec, self.params, m, self._rng)

    def audit_energy(self) -> float:
        """Compare the ledger against a from-scratch recompute.

        Returns the recomputed energy; raises if the ledger drifted
        beyond 1e-9 relative, which would indicate a table bug.
        """
        fresh = qmc_energy(self.snapshot(), self.spec, self.params)
        tol = ENERGY_AUDIT_RTOL * max(1.0, abs(fresh))
        if abs(self._energy - fresh) > tol:
            raise RuntimeError(
                f"energy ledger drift {self._energy - fresh:.3e} after "
                f"{self.sweep_count} sweeps")
        self._energy = fresh
        return fresh

    def run(self, sweeps: int, threshold: float | None = None,
            direction: int = 0, record_codes: bool = False,
            record_totals: bool = False):
        """Advance up to `sweeps` sweeps; stop early at a threshold.

        threshold is in slice-averaged magnetization units and is tested
        after each full sweep, in the sense of `direction` (+1 crossing
        upward, -1 downward).  Returns (crossed_sweep_index_or_None,
        codes_or_None, totals_or_None); the index counts from the current
        sweep_count, codes are 62-bit state patterns, totals the running
        spin sum after each sweep.  Every ENERGY_AUDIT_EVERY sweeps the
        energy ledger is audited against a recompute.
        """
        r, n = self._spins.shape
        sites = r * n
        if threshold is None:
            threshold_sum = 0
            direction = 0
        else:
            # integer threshold in spin-sum units; ceil/floor so that the
            # float comparison m_bar >= threshold is reproduced exactly
            raw = threshold * sites
            threshold_sum = math.ceil(raw) if direction > 0 else math.floor(raw)
        bond_exp, bond_de, cost_exp, cost_de = self._tables
        periodic = self.params.boundary is Boundary.PERIODIC
        if record_codes and sites > 62:
            raise ValueError("state codes only fit 62 sites")
        chunk = max(64, min(8192, _CHUNK_BUDGET_BYTES // (12 * sites)))
        done = 0
        all_codes = [] if record_codes else None
        all_totals = [] if record_totals else None
        base = np.arange(sites, dtype=np.int32)
        crossed_at = None
        while done < sweeps:
            t = min(chunk, sweeps - done)
            order = np.tile(base, (t, 1))
            self._rng.permuted(order, axis=1, out=order)
            uni = self._rng.random((t, sites))
            codes = np.empty(t if record_codes else 0, dtype=np.int64)
            totals = np.empty(t if record_totals else 0, dtype=np.int64)
            total = int(self._slice_sums.sum())
            crossed, de_sum, _ = _sweep_chunk(
                self._spins, self._slice_sums, order, uni, bond_exp,
                bond_de, cost_exp, cost_de, periodic, total,
                threshold_sum, direction, codes, totals)
            ran = crossed + 1 if crossed >= 0 else t
            self._energy += de_sum
            self.sweep_count += ran
            done += ran
            if record_codes:
                all_codes.append(codes[:ran])
            if record_totals:
                all_totals.append(totals[:ran])
            if self.sweep_count - self._audit_mark >= ENERGY_AUDIT_EVERY:
                self.audit_energy()
                self._audit_mark = self.sweep_count
            if crossed >= 0:
                crossed_at = done - 1
                break
        self.path = self.snapshot()
        return (crossed_at,
                np.concatenate(all_codes) if record_codes else None,
                np.concatenate(all_totals) if record_totals else None)


def metropolis_sweep(engine: SweepEngine) -> SweepEngine:
    """One sweep of R*N randomized single-flip proposals, in place."""
    engine.run(1)
    return engine


def path_at_magnetization(spec: ModelSpec, params: QmcParams, m: float,
                          rng: np.random.Generator) -> SpinPath:
    """Uniform-magnetization start: every slice gets round(N(1+m)/2) ups.

    Up positions are shuffled independently per slice so repeated starts
    decorrelate everything except the conserved slice counts.
    """
    n, r = spec.n_spins, params.replicas
    ups = round(n * (1.0 + m) / 2.0)
    if not 0 <= ups <= n:
        raise ValueError("start magnetization outside [-1, 1]")
    row = np.full(n, -1, dtype=np.int8)
    row[:ups] = 1
    spins = np.tile(row, (r, 1))
    for tau in range(r):
        rng.shuffle(spins[tau])
    return SpinPath(spins, params.boundary)


def default_threshold(spec: ModelSpec, lo: float = 0.0, hi: float = 1.0) -> float:
    """Classical barrier top: argmax of classical_free_energy on [lo, hi]."""
    grid = np.linspace(lo, hi, 2001)
    vals = classical_free_energy(spec, grid)
    return float(grid[np.argmax(vals)])


@dataclass(frozen=True)
class EscapeRecord:
    """One first-passage measurement; censored means budget exhausted."""

    n_spins: int
    seed: int
    first_passage_sweeps: int
    threshold: float
    censored: bool


def first_passage(engine: SweepEngine, start_well: float, threshold: float,
                  budget: int) -> EscapeRecord:
    """Sweeps until m_bar crosses threshold, restarting from start_well.

    The engine path is re-initialized at uniform slice magnetization
    start_well (using the engine stream, so the record stays a pure
    function of the seed).  A threshold equal to the start magnetization
    crosses at sweep 0.
    """
    spec = engine.spec
    engine.reset_path(engine.draw_start(start_well))
    direction = 1 if threshold >= engine.mean_magnetization else -1
    if (engine.mean_magnetization >= threshold if direction > 0
            else engine.mean_magnetization <= threshold):
        return EscapeRecord(spec.n_spins, engine.rng_seed, 0, threshold, False)
    crossed, _, _ = engine.run(budget, threshold=threshold, direction=direction)
    if crossed is None:
        return EscapeRecord(spec.n_spins, engine.rng_seed, budget, threshold, True)
    return EscapeRecord(spec.n_spins, engine.rng_seed, crossed + 1, threshold, False)


@dataclass(frozen=True)
class EscapeFit:
    """ln(mean sweeps) = intercept + slope * N, with bootstrap CI."""

    slope: float
    intercept: float
    ci_low: float
    ci_high: float
    n_values: tuple
    mean_sweeps: tuple
    records: tuple


def _slope(ns, log_means):
    a = np.vstack([np.ones_like(ns), ns]).T
    coef, *_ = np.linalg.lstsq(a, log_means, rcond=None)
    return coef


def escape_experiment(spec: ModelSpec, params: QmcParams, n_values,
                      seeds: int, threshold: float | None = None,
                      start_well: float = 0.0, budget: int = 10_000_000,
                      seed_root: int = 0, min_uncensored: int = 20,
                      bootstrap: int = _BOOTSTRAP_DEFAULT,
                      progress=None) -> EscapeFit:
    """Escape-rate slope b from ln(mean first passage) = a + b N.

    spec supplies beta, gamma and the cost; its n_spins is overridden by
    each entry of n_values (params carries no N dependence).  One
    independent Philox stream per (N, seed index) via
    SeedSequence(seed_root, spawn_key=(N, i)); records are reproducible
    and order-independent.  Censored records are excluded from the means;
    if fewer than min_uncensored remain for some N the fit is refused
    with BudgetError carrying the partial records.
    """
    if threshold is None:
        threshold = default_threshold(spec)
    records = []
    means = []
    ns = sorted(int(n) for n in n_values)
    for n in ns:
        nspec = ModelSpec(n_spins=n, beta=spec.beta, gamma=spec.gamma,
                          cost=spec.cost)
        passages = []
        for i in range(seeds):
            ss = np.random.SeedSequence(seed_root, spawn_key=(n, i))
            seed64 = int(ss.generate_state(1, dtype=np.uint64)[0])
            blank = SpinPath.uniform(params.replicas, n, params.boundary)
            engine = SweepEngine(blank, nspec, params, rng_seed=seed64)
            rec = first_passage(engine, start_well, threshold, budget)
            records.append(rec)
            if not rec.censored:
                passages.append(rec.first_passage_sweeps)
            if progress is not None:
                progress(rec)
        if len(passages) < min_uncensored:
            raise BudgetError(
                f"only {len(passages)} uncensored records at N={n} "
                f"(need {min_uncensored})", records)
        means.append((n, passages))
    ns_arr = np.array([n for n, _ in means], dtype=float)
    mean_sweeps = np.array([np.mean(p) for _, p in means])
    coef = _slope(ns_arr, np.log(mean_sweeps))
    rng = np.random.Generator(np.random.Philox(
        np.random.SeedSequence(seed_root, spawn_key=(0xB007,))))
    slopes = np.empty(bootstrap)
    for b in range(bootstrap):
        lm = np.empty(len(means))
        for idx, (_, passages) in enumerate(means):
            sample = rng.choice(passages, size=len(passages), replace=True)
            lm[idx] = math.log(np.mean(sample))
        slopes[b] = _slope(ns_arr, lm)[1]
    lo, hi = np.percentile(slopes, [2.5, 97.5])
    return EscapeFit(slope=float(coef[1]), intercept=float(coef[0]),
                     ci_low=float(lo), ci_high=float(hi),
                     n_values=tuple(int(n) for n in ns_arr),
                     mean_sweeps=tuple(float(m) for m in mean_sweeps),
                     records=tuple(records))
