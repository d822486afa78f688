import math

import numpy as np
import pytest

from piqmc import meanfield as mf
from piqmc.exact import bond_normalization, brute_force_qmc_partition
from piqmc.model import (
    ModelSpec,
    QmcParams,
    classical_free_energy,
    p_spin,
    tilted_quadratic,
)

WELL = tilted_quadratic(0.0)


def make(n=8, beta=2.0, gamma=0.5, cost=WELL, r=12, boundary="open"):
    spec = ModelSpec(n, beta, gamma, cost)
    return spec, QmcParams.derive(spec, r, boundary)


def test_transfer_matrix_entries():
    spec, params = make(beta=1.0, gamma=0.8, r=4, boundary="periodic")
    bj = spec.beta * params.coupling
    l0 = mf.transfer_matrix(0.0, spec, params).entries
    assert np.allclose(l0, [[math.exp(bj), math.exp(-bj)],
                            [math.exp(-bj), math.exp(bj)]], rtol=1e-14)
    det_expect = math.exp(2 * bj) - math.exp(-2 * bj)
    for lam in (0.0, 0.7, -1.3):
        det = np.linalg.det(mf.transfer_matrix(lam, spec, params).entries)
        assert det == pytest.approx(det_expect, rel=1e-12)


def test_transfer_matrix_zero_coupling():
    # J = 0, lambda = 1, beta = R: diagonal factor diag(e, 1/e) times ones
    spec = ModelSpec(4, 4.0, 1.0, WELL)
    params = QmcParams(4, "periodic", 0.0)
    ent = mf.transfer_matrix(1.0, spec, params).entries
    assert np.allclose(ent, [[math.e, 1 / math.e], [math.e, 1 / math.e]], rtol=1e-14)


def test_omega_idempotent():
    omega = np.ones((2, 2))
    assert np.allclose(omega @ omega, 2 * omega)


def test_trace_partition_r2_periodic_brute():
    spec, params = make(beta=1.3, gamma=0.9, r=2, boundary="periodic")
    lam = 0.45
    prof = mf.FieldProfile([lam, lam], [0.0, 0.0], "periodic")
    b, j = spec.beta, params.coupling
    expect = sum(
        math.exp(b * (lam * (s0 + s1) / 2 + 2 * j * s0 * s1))
        for s0 in (1, -1) for s1 in (1, -1))
    assert mf.trace_partition(prof, spec, params) == pytest.approx(expect, rel=1e-13)


def test_trace_partition_open_zero_field():
    spec, params = make(beta=1.1, gamma=0.7, r=2, boundary="open")
    prof = mf.FieldProfile([0.0, 0.0], [0.0, 0.0], "open")
    bj = spec.beta * params.coupling
    assert mf.trace_partition(prof, spec, params) == pytest.approx(
        4 * math.cosh(bj), rel=1e-13)


@pytest.mark.parametrize("boundary", ["periodic", "open"])
def test_slice_magnetization_fd(boundary):
    rng = np.random.default_rng(5)
    spec, params = make(r=3, boundary=boundary)
    lam = rng.normal(0.0, 0.6, 3)
    prof = mf.FieldProfile(lam, np.zeros(3), boundary)
    mbar = mf.slice_magnetization(prof, spec, params)
    h = 1e-6
    for t in range(3):
        up = lam.copy(); up[t] += h
        dn = lam.copy(); dn[t] -= h
        fd = (mf.log_trace_partition(mf.FieldProfile(up, np.zeros(3), boundary), spec, params)
              - mf.log_trace_partition(mf.FieldProfile(dn, np.zeros(3), boundary), spec, params))
        fd *= params.replicas / spec.beta / (2 * h)
        assert mbar[t] == pytest.approx(fd, abs=1e-6)


def test_slice_magnetization_limits():
    spec, params = make(r=8, boundary="periodic")
    zero = mf.FieldProfile(np.zeros(8), np.zeros(8), "periodic")
    assert np.max(np.abs(mf.slice_magnetization(zero, spec, params))) < 1e-14
    big = mf.FieldProfile(np.full(8, 4.0), np.zeros(8), "periodic")
    assert np.all(mf.slice_magnetization(big, spec, params) > 0.95)


def test_vector_magnetization_open_endpoints():
    rng = np.random.default_rng(0)
    spec, params = make(r=12, boundary="open")
    prof = mf.FieldProfile(rng.normal(0, 0.8, 12), np.zeros(12), "open")
    mx, imy, mz = mf.vector_magnetization(prof, spec, params)
    assert len(mx) == 13
    assert mx[0] == 1.0
    assert imy[0] == mz[0]
    assert abs(mx[-1] - 1.0) < 1e-12
    # omega on the other side flips the sign: i m_y(beta) = -m_z(beta)
    assert abs(imy[-1] + mz[-1]) < 1e-12
    norm = mx**2 - imy**2 + mz**2
    assert np.max(np.abs(norm - 1.0)) < 1e-12


def test_vector_magnetization_periodic_constant_norm():
    rng = np.random.default_rng(1)
    spec, params = make(r=12, boundary="periodic")
    prof = mf.FieldProfile(rng.normal(0, 0.8, 12), np.zeros(12), "periodic")
    mx, imy, mz = mf.vector_magnetization(prof, spec, params)
    assert len(mx) == 12
    norm = mx**2 - imy**2 + mz**2
    assert np.ptp(norm) < 1e-12
    assert norm[0] < 1.0 - 1e-3


def test_free_energy_open_static_zero():
    spec, params = make(beta=2.0, gamma=0.5, cost=p_spin(3), r=16, boundary="open")
    prof = mf.static_profile(spec, params, 0.0)
    r, beta, gamma = 16, 2.0, 0.5
    delta = beta / r
    lnc = beta * params.coupling - math.log(math.cosh(gamma * delta))
    expect = -(math.log(2) + (r - 1) * (gamma * delta + lnc)) / beta
    assert mf.free_energy(prof, spec, params) == pytest.approx(expect, rel=1e-12)
    fhat = mf.free_energy_continuum(prof, spec, params)
    closed = -math.log(2) / beta - gamma * (r - 1) / r
    assert fhat == pytest.approx(closed, abs=1e-12)
    assert fhat == pytest.approx(-gamma - math.log(2) / beta, abs=1.5 * gamma / r)


def test_free_energy_classical_limit():
    spec = ModelSpec(8, 2.0, 1e-9, WELL)
    params = QmcParams.derive(spec, 8, "periodic")
    m = 0.5
    for _ in range(200):
        m = math.tanh(spec.beta * spec.cost.gp(m))
    fhat = mf.free_energy_continuum(mf.static_profile(spec, params, m), spec, params)
    assert fhat == pytest.approx(classical_free_energy(spec, m), abs=1e-10)


def test_solve_saddle_uniform_minimum():
    spec, params = make(beta=2.0, gamma=0.3, r=16, boundary="periodic")
    res = mf.solve_saddle(spec, params, mf.static_profile(spec, params, 0.9), "minimum")
    assert res.residual_norm <= 1e-11
    assert np.ptp(res.profile.magnetizations) < 1e-12
    assert np.ptp(res.profile.lambdas) < 1e-12
    assert res.profile.magnetizations[0] == pytest.approx(0.909646, abs=1e-4)
    assert res.kind == "minimum"


def test_solve_saddle_open_minimum_nonuniform():
    spec, params = make(beta=2.0, gamma=0.3, r=24, boundary="open")
    res = mf.solve_saddle(spec, params, mf.static_profile(spec, params, 0.9), "minimum")
    m = res.profile.magnetizations
    assert res.residual_norm <= 1e-11
    assert np.ptp(m) > 1e-3
    assert abs(m[0] - m[-1]) < 1e-10
    assert (m[1] - m[0]) * (m[-1] - m[-2]) < 0


def test_open_pspin_static_zero_is_stationary():
    spec, params = make(cost=p_spin(3), r=16, boundary="open")
    res = mf.solve_saddle(spec, params, mf.static_profile(spec, params, 0.0), "minimum")
    assert res.residual_norm < 1e-14
    assert np.max(np.abs(res.profile.magnetizations)) < 1e-14


def test_stationarity_gradient():
    spec, params = make(beta=2.0, gamma=0.3, r=12, boundary="open")
    res = mf.solve_saddle(spec, params, mf.static_profile(spec, params, 0.9), "minimum")
    m = res.profile.magnetizations
    grad = mf.free_energy_gradient(m, spec, params)
    assert np.max(np.abs(grad)) < 1e-10
    h = 1e-6
    for t in (0, 5, 11):
        up = m.copy(); up[t] += h
        dn = m.copy(); dn[t] -= h
        fd = (mf.functional_of_m(up, spec, params)
              - mf.functional_of_m(dn, spec, params)) / (2 * h)
        assert abs(fd) < 1e-8
        assert fd == pytest.approx(grad[t], abs=1e-9)


def test_free_energy_vs_brute_force():
    gaps = []
    for n in (2, 3):
        spec = ModelSpec(n, 1.0, 0.7, WELL)
        params = QmcParams.derive(spec, 4, "periodic")
        res = mf.solve_saddle(spec, params, mf.static_profile(spec, params, 0.5), "minimum")
        lna = math.log(bond_normalization(spec, params))
        f_paths = (-math.log(brute_force_qmc_partition(spec, params)) / (spec.beta * n)
                   + mf.bonds_per_spin(params) * lna / spec.beta)
        gaps.append(res.free_energy - f_paths)
    assert 0 < gaps[1] < gaps[0] < 0.45


def test_solve_saddle_errors():
    spec, params = make(r=8)
    bad = mf.FieldProfile(np.zeros(4), np.zeros(4), "open")
    with pytest.raises(ValueError):
        mf.solve_saddle(spec, params, bad)
    with pytest.raises(ValueError):
        mf.solve_saddle(spec, params, mf.static_profile(spec, params, 0.0), kind="extremum")


def test_extrapolate_in_replicas():
    rs = np.array([64, 128, 256])
    vals = 2.5 - 1.3 / rs + 0.4 / rs**2
    assert mf.extrapolate_in_replicas(rs, vals) == pytest.approx(2.5, abs=1e-10)
    with pytest.raises(ValueError):
        mf.extrapolate_in_replicas([64, 128], [1.0, 2.0])


def test_guess_profiles():
    spec, params = make(r=16, boundary="open")
    ramp = mf.ramp_profile(spec, params, 0.1, 0.8)
    assert ramp.magnetizations[0] == pytest.approx(0.1, abs=0.01)
    assert ramp.magnetizations[-1] == pytest.approx(0.8, abs=0.01)
    bump = mf.bump_profile(spec, params, 0.0, 0.5)
    assert np.max(bump.magnetizations) == pytest.approx(0.5, abs=0.02)
    assert abs(bump.magnetizations[0]) < 0.01
    spec_p, params_p = make(r=16, boundary="periodic")
    updown = mf.ramp_profile(spec_p, params_p, 0.0, 0.6)
    assert updown.magnetizations[0] == pytest.approx(updown.magnetizations[-1], abs=0.05)
    assert np.max(updown.magnetizations) > 0.5
