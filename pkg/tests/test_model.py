import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from piqmc.model import (
    Boundary,
    CostFunction,
    ModelSpec,
    QmcParams,
    SpinPath,
    binary_entropy,
    classical_free_energy,
    coupling_j,
    entropy_prime,
    flip_energy_delta,
    from_config,
    magnetization_profile,
    p_spin,
    qmc_energy,
    tilted_quadratic,
    to_config,
)

# 40-digit Decimal arithmetic, rounded to double
J_1_1_10 = 1.1529553351760559
Q_HALF = 0.5623351446188084
QP_HALF = -0.5493061443340548
FCL_HALF_BETA2 = -0.4061675723094042


def test_coupling_value():
    assert coupling_j(1.0, 1.0, 10) == pytest.approx(J_1_1_10, abs=1e-14)


def test_coupling_scaling():
    # J depends on gamma*beta/R and an overall 1/beta
    assert coupling_j(2.0, 1.0, 20) == pytest.approx(coupling_j(1.0, 1.0, 10) / 2, rel=1e-15)


def test_coupling_limits_and_errors():
    assert coupling_j(1.0, 50.0, 2) >= 0.0
    assert coupling_j(1.0, 50.0, 2) < 1e-12
    assert coupling_j(1.0, 1.0, 10) > 0
    with pytest.raises(ValueError):
        coupling_j(1e-200, 1e-200, 2)
    with pytest.raises(ValueError):
        coupling_j(1.0, 1.0, 1)
    with pytest.raises(ValueError):
        coupling_j(-1.0, 1.0, 4)


def test_binary_entropy_values():
    assert binary_entropy(0.0) == pytest.approx(math.log(2), abs=1e-15)
    assert binary_entropy(1.0) == 0.0
    assert binary_entropy(-1.0) == 0.0
    assert binary_entropy(0.5) == pytest.approx(Q_HALF, abs=1e-14)
    assert entropy_prime(0.0) == 0.0
    assert entropy_prime(0.5) == pytest.approx(QP_HALF, abs=1e-14)
    assert entropy_prime(1.0) == -math.inf
    assert entropy_prime(-1.0) == math.inf
    with pytest.raises(ValueError):
        binary_entropy(1.5)
    with pytest.raises(ValueError):
        entropy_prime(-1.0000001)


@given(st.floats(min_value=-1.0, max_value=1.0, allow_nan=False))
def test_entropy_symmetry(m):
    assert binary_entropy(m) == pytest.approx(binary_entropy(-m), abs=1e-15)
    assert entropy_prime(m) == pytest.approx(-entropy_prime(-m), abs=1e-12)


@given(st.floats(min_value=-0.99, max_value=0.99, allow_nan=False))
def test_entropy_concave(m):
    h = 1e-4
    d2 = (binary_entropy(m + h) - 2 * binary_entropy(m) + binary_entropy(m - h)) / h / h
    assert d2 < 0


def test_entropy_vectorized():
    m = np.array([0.0, 0.5, -0.5, 1.0])
    q = binary_entropy(m)
    assert q.shape == (4,)
    assert q[1] == q[2]
    assert q[3] == 0.0


def test_cost_function_derivatives():
    g3 = p_spin(3)
    assert g3.degree == 3
    assert g3.g(0.5) == pytest.approx(0.125)
    assert g3.gp(0.5) == pytest.approx(0.75)
    assert g3.gpp(0.5) == pytest.approx(3.0)
    assert g3.gppp(0.5) == pytest.approx(6.0)
    gq = tilted_quadratic(0.3)
    assert gq.gp(0.2) == pytest.approx(0.5)
    assert gq.gpp(0.9) == pytest.approx(1.0)
    assert gq.gppp(0.1) == 0.0


def test_cost_function_rejects_constants():
    with pytest.raises(ValueError):
        CostFunction((1.0,))
    with pytest.raises(ValueError):
        CostFunction((0.5, 0.0, 0.0))
    with pytest.raises(ValueError):
        CostFunction((0.0, math.inf))


def test_classical_free_energy():
    spec = ModelSpec(8, 2.0, 1.0, tilted_quadratic(0.0))
    assert classical_free_energy(spec, 0.5) == pytest.approx(FCL_HALF_BETA2, abs=1e-14)
    spec1 = ModelSpec(8, 1.0, 1.0, tilted_quadratic(0.0))
    assert classical_free_energy(spec1, 0.0) == pytest.approx(-math.log(2), abs=1e-15)
    spec3 = ModelSpec(8, 1.0, 1.0, p_spin(3))
    assert classical_free_energy(spec3, 1.0) == pytest.approx(-1.0, abs=1e-15)


def test_model_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec(0, 1.0, 1.0, p_spin(3))
    with pytest.raises(ValueError):
        ModelSpec(4, 0.0, 1.0, p_spin(3))
    with pytest.raises(ValueError):
        ModelSpec(4, 1.0, -0.5, p_spin(3))


def test_spin_path_validation():
    with pytest.raises(ValueError):
        SpinPath(np.array([[1, 2], [1, 1]]), "open")
    with pytest.raises(ValueError):
        SpinPath(np.ones(4, dtype=np.int8), "open")
    path = SpinPath.uniform(3, 2, "periodic")
    with pytest.raises(ValueError):
        path.spins[0, 0] = -1


def test_magnetization_profile():
    s = np.array([[1, 1, 1, 1], [1, -1, 1, -1], [1, 1, 1, -1]], dtype=np.int8)
    m = magnetization_profile(SpinPath(s, "open"))
    assert np.allclose(m, [1.0, 0.0, 0.5])


def _random_path(rng, r, n, boundary):
    s = rng.choice(np.array([-1, 1], dtype=np.int8), size=(r, n))
    return SpinPath(s, boundary)


def test_qmc_energy_uniform():
    spec = ModelSpec(4, 1.5, 0.8, tilted_quadratic(0.0))
    for boundary, nbonds in (("periodic", 4 * 6), ("open", 4 * 5)):
        params = QmcParams.derive(spec, 6, boundary)
        path = SpinPath.uniform(6, 4, boundary)
        expect = -params.coupling * nbonds - 4 * 0.5
        assert qmc_energy(path, spec, params) == pytest.approx(expect, rel=1e-14)


def test_qmc_energy_r2_double_bond():
    # periodic tau-sum at R=2 hits the single bond twice
    spec = ModelSpec(3, 1.0, 1.0, p_spin(3))
    params = QmcParams.derive(spec, 2, "periodic")
    path = SpinPath.uniform(2, 3, "periodic")
    expect = -params.coupling * 2 * 3 - (3 / 2) * 2 * 1.0
    assert qmc_energy(path, spec, params) == pytest.approx(expect, rel=1e-14)


def test_qmc_energy_term_by_term():
    rng = np.random.default_rng(7)
    spec = ModelSpec(2, 1.3, 0.9, p_spin(3))
    for boundary in ("periodic", "open"):
        params = QmcParams.derive(spec, 2, boundary)
        path = _random_path(rng, 2, 2, boundary)
        s = path.spins.astype(float)
        e = 0.0
        taus = range(2) if boundary == "periodic" else range(1)
        for tau in taus:
            for j in range(2):
                e -= params.coupling * s[tau, j] * s[(tau + 1) % 2, j]
        for tau in range(2):
            e -= (2 / 2) * spec.cost.g(s[tau].mean())
        assert qmc_energy(path, spec, params) == pytest.approx(e, rel=1e-13)


def test_qmc_energy_global_flip_even_g():
    rng = np.random.default_rng(3)
    spec = ModelSpec(5, 2.0, 1.1, tilted_quadratic(0.0))
    params = QmcParams.derive(spec, 4, "periodic")
    path = _random_path(rng, 4, 5, "periodic")
    flipped = SpinPath(-path.spins, "periodic")
    assert qmc_energy(path, spec, params) == pytest.approx(
        qmc_energy(flipped, spec, params), rel=1e-13)


@pytest.mark.parametrize("boundary", ["periodic", "open"])
@pytest.mark.parametrize("shape", [(2, 2), (3, 5), (8, 4)])
def test_flip_delta_matches_energy_difference(boundary, shape):
    r, n = shape
    rng = np.random.default_rng(int(r * 100 + n))
    spec = ModelSpec(n, 1.7, 0.6, p_spin(3))
    params = QmcParams.derive(spec, r, boundary)
    for _ in range(40):
        path = _random_path(rng, r, n, boundary)
        tau = int(rng.integers(r))
        j = int(rng.integers(n))
        delta = flip_energy_delta(path, spec, params, tau, j)
        s2 = path.spins.copy()
        s2[tau, j] *= -1
        after = SpinPath(s2, boundary)
        diff = qmc_energy(after, spec, params) - qmc_energy(path, spec, params)
        assert delta == pytest.approx(diff, abs=1e-12)


def test_config_round_trip():
    spec = ModelSpec(16, 2.0, 0.5, p_spin(3))
    params = QmcParams.derive(spec, 64, "open")
    block = to_config(spec, params)
    spec2, params2 = from_config(block)
    assert spec2 == spec
    assert params2 == params
    assert block["boundary"] == "open"
    assert block["g"] == {"poly": [0.0, 0.0, 0.0, 1.0]}


def test_config_rejects_bad_blocks():
    spec = ModelSpec(4, 1.0, 1.0, p_spin(3))
    block = to_config(spec, QmcParams.derive(spec, 8, "periodic"))
    bad = dict(block, extra=1)
    with pytest.raises(ValueError):
        from_config(bad)
    short = {k: v for k, v in block.items() if k != "beta"}
    with pytest.raises(ValueError):
        from_config(short)
    with pytest.raises(ValueError):
        from_config(dict(block, g={"poly": [0.0, 1.0], "kind": "x"}))


def test_boundary_enum_round_trip():
    assert Boundary("open") is Boundary.OPEN
    assert Boundary("periodic").value == "periodic"
    with pytest.raises(ValueError):
        Boundary("twisted")
