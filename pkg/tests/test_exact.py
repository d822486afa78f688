import math

import numpy as np
import pytest

from piqmc.exact import (
    bond_normalization,
    brute_force_qmc_partition,
    build_symmetric_hamiltonian,
    partition_open,
    partition_periodic,
    sector_decomposition,
    spectral_gap,
    spectrum_head,
    trotter_partition,
)
from piqmc.model import CostFunction, ModelSpec, QmcParams, p_spin

# vanishes at m = -1, 0, +1, so it acts like g = 0 on small grids
G_NULL = CostFunction((0.0, 1.0, 0.0, -1.0))


def full_space_hamiltonian(spec):
    n = spec.n_spins
    dim = 1 << n
    bits = (np.arange(dim)[:, None] >> np.arange(n)) & 1
    m = (2 * bits - 1).sum(axis=1) / n
    h = np.diag(-n * np.asarray(spec.cost.g(m), dtype=float))
    idx = np.arange(dim)
    for j in range(n):
        h[idx, idx ^ (1 << j)] += -spec.gamma
    return h


def test_symmetric_hamiltonian_n1():
    spec = ModelSpec(1, 1.0, 0.8, G_NULL)
    ham = build_symmetric_hamiltonian(spec)
    assert ham.dimension == 2
    assert np.allclose(ham.matrix, [[0.0, -0.8], [-0.8, 0.0]], atol=1e-15)


def test_symmetric_hamiltonian_n2():
    spec = ModelSpec(2, 1.0, 0.6, CostFunction((0.0, 0.0, 0.5)))
    ham = build_symmetric_hamiltonian(spec)
    off = -0.6 * math.sqrt(2)
    expect = np.array([[-1.0, off, 0.0], [off, 0.0, off], [0.0, off, -1.0]])
    assert np.allclose(ham.matrix, expect, atol=1e-14)
    assert np.allclose(ham.matrix, ham.matrix.T)


def test_symmetric_block_within_full_spectrum():
    spec = ModelSpec(8, 1.0, 0.7, p_spin(3))
    block = build_symmetric_hamiltonian(spec).matrix
    block_eigs = np.linalg.eigvalsh(block)
    full_eigs = np.linalg.eigvalsh(full_space_hamiltonian(spec))
    for ev in block_eigs:
        assert np.min(np.abs(full_eigs - ev)) < 1e-8


@pytest.mark.parametrize("n", [2, 3, 4, 10, 24])
def test_sector_multiplicities_sum(n):
    spec = ModelSpec(n, 1.0, 1.0, p_spin(3))
    total = sum(s.multiplicity * len(s.diagonal) for s in sector_decomposition(spec))
    assert total == 2**n


def test_partition_periodic_n1():
    spec = ModelSpec(1, 1.3, 0.8, G_NULL)
    assert partition_periodic(spec) == pytest.approx(2 * math.cosh(1.3 * 0.8), rel=1e-13)


def test_partition_periodic_free_limit():
    spec = ModelSpec(2, 1.0, 1e-9, G_NULL)
    assert partition_periodic(spec) == pytest.approx(4.0, abs=1e-8)


def test_partition_periodic_dense_oracle():
    spec = ModelSpec(3, 1.0, 0.7, p_spin(3))
    eigs = np.linalg.eigvalsh(full_space_hamiltonian(spec))
    assert partition_periodic(spec) == pytest.approx(
        float(np.sum(np.exp(-eigs))), rel=1e-12)


def test_partition_open_n1():
    spec = ModelSpec(1, 1.7, 0.5, G_NULL)
    assert partition_open(spec) == pytest.approx(2 * math.exp(1.7 * 0.5), rel=1e-13)


def test_partition_open_beta_to_zero():
    spec = ModelSpec(3, 1e-9, 1.0, p_spin(3))
    assert partition_open(spec) == pytest.approx(8.0, abs=1e-6)


@pytest.mark.parametrize("n", [3, 4])
def test_partition_open_dense_oracle(n):
    spec = ModelSpec(n, 1.2, 0.7, p_spin(3))
    h = full_space_hamiltonian(spec)
    evals, vecs = np.linalg.eigh(h)
    ones = np.ones(1 << n)
    overlaps = vecs.T @ ones
    expect = float(np.sum(overlaps**2 * np.exp(-spec.beta * evals)))
    assert partition_open(spec) == pytest.approx(expect, rel=1e-11)


def test_partition_open_bounds():
    for gamma, beta in ((0.4, 0.7), (1.1, 2.0), (0.05, 5.0)):
        spec = ModelSpec(5, beta, gamma, p_spin(3))
        z = partition_open(spec)
        e0 = spectrum_head(spec, count=1)[0]
        assert z > 0
        assert z <= 2**5 * math.exp(-beta * e0) * (1 + 1e-12)


def test_spectral_gap():
    spec = ModelSpec(1, 1.0, 0.8, G_NULL)
    assert spectral_gap(spec) == pytest.approx(1.6, rel=1e-12)
    spec2 = ModelSpec(2, 1.0, 0.6, p_spin(3))
    eigs = np.sort(np.linalg.eigvalsh(full_space_hamiltonian(spec2)))
    assert spectral_gap(spec2) == pytest.approx(float(eigs[1] - eigs[0]), abs=1e-12)


def test_brute_force_n1_r2_periodic_closed_form():
    spec = ModelSpec(1, 0.9, 1.1, p_spin(3))
    params = QmcParams.derive(spec, 2, "periodic")
    j, b = params.coupling, spec.beta
    # four single-spin paths; the tau sum hits the bond twice at R = 2
    terms = [
        math.exp(-b * (-2 * j - 1.0)),   # ++
        math.exp(-b * (+2 * j)),         # +-
        math.exp(-b * (+2 * j)),         # -+
        math.exp(-b * (-2 * j + 1.0)),   # --
    ]
    expect = bond_normalization(spec, params) ** 2 * sum(terms)
    assert brute_force_qmc_partition(spec, params) == pytest.approx(expect, rel=1e-13)


def test_brute_force_n1_r2_open_closed_form():
    spec = ModelSpec(1, 0.9, 1.1, p_spin(3))
    params = QmcParams.derive(spec, 2, "open")
    j, b = params.coupling, spec.beta
    terms = [
        math.exp(-b * (-j - 1.0)),
        math.exp(-b * (+j)),
        math.exp(-b * (+j)),
        math.exp(-b * (-j + 1.0)),
    ]
    expect = bond_normalization(spec, params) ** 1 * sum(terms)
    assert brute_force_qmc_partition(spec, params) == pytest.approx(expect, rel=1e-13)


@pytest.mark.parametrize("boundary", ["periodic", "open"])
@pytest.mark.parametrize("n,r", [(2, 2), (2, 3), (2, 4), (3, 2), (3, 3)])
def test_trotter_equals_brute_force(boundary, n, r):
    spec = ModelSpec(n, 1.1, 0.85, p_spin(3))
    params = QmcParams.derive(spec, r, boundary)
    zb = brute_force_qmc_partition(spec, params)
    zt = trotter_partition(spec, params)
    assert zt == pytest.approx(zb, rel=1e-11)


@pytest.mark.parametrize("boundary", ["periodic", "open"])
def test_trotter_equals_full_space_matrices(boundary):
    spec = ModelSpec(2, 1.4, 0.6, p_spin(3))
    r = 3
    params = QmcParams.derive(spec, r, boundary)
    delta = spec.beta / r
    x = spec.gamma * delta
    one = np.array([[math.cosh(x), math.sinh(x)], [math.sinh(x), math.cosh(x)]])
    xfull = np.kron(one, one)
    bits = (np.arange(4)[:, None] >> np.arange(2)) & 1
    m = (2 * bits - 1).sum(axis=1) / 2
    dhalf = np.diag(np.exp(0.5 * delta * 2 * np.asarray(spec.cost.g(m), dtype=float)))
    step = dhalf @ xfull @ dhalf
    if boundary == "periodic":
        expect = float(np.trace(np.linalg.matrix_power(step, r)))
    else:
        w = dhalf @ np.ones(4)
        expect = float(w @ np.linalg.matrix_power(step, r - 1) @ w)
    assert trotter_partition(spec, params) == pytest.approx(expect, rel=1e-11)


@pytest.mark.parametrize("boundary", ["periodic", "open"])
def test_trotter_convergence(boundary):
    # the open chain is first order in 1/R (R slices but R - 1 bonds),
    # so the quantitative bound needs a weak field; monotone decay holds
    # regardless
    spec = ModelSpec(2, 1.0, 0.9, p_spin(3))
    exact = partition_periodic(spec) if boundary == "periodic" else partition_open(spec)
    errs = []
    for r in (4, 8, 16, 32, 64):
        params = QmcParams.derive(spec, r, boundary)
        errs.append(abs(trotter_partition(spec, params) / exact - 1.0))
    assert all(a > b for a, b in zip(errs, errs[1:]))
    if boundary == "periodic":
        assert errs[-1] < 1e-2
    weak = ModelSpec(3, 1.0, 0.1, p_spin(3))
    exact_w = partition_periodic(weak) if boundary == "periodic" else partition_open(weak)
    err64 = abs(trotter_partition(weak, QmcParams.derive(weak, 64, boundary)) / exact_w - 1.0)
    assert err64 < 1e-2


def test_caps():
    spec = ModelSpec(5, 1.0, 1.0, p_spin(3))
    with pytest.raises(ValueError):
        brute_force_qmc_partition(spec, QmcParams.derive(spec, 5, "open"))
    big = ModelSpec(30, 1.0, 1.0, p_spin(3))
    with pytest.raises(ValueError):
        partition_periodic(big)
    with pytest.raises(ValueError):
        build_symmetric_hamiltonian(big, cap=16)
