import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from simtraj import mechanism as M
from simtraj.mechanism import (ArrheniusParams, MechanismError, Reaction, conservation_residual,
                               equilibrium_state, rate_constant)

from conftest import random_feasible

R = 8.314462618e-3

# H2 equilibrium from an independent BDF integration (scipy, rtol 1e-12) of the
# hand-written rate law below, started at c_H2=1, c_O2=0.5 and run to t=1e6
H2_EQUILIBRIUM = np.array([2.6999766270e-01, 1.3499884893e-01, 7.0000247876e-01,
                           4.9999793144e-02, 1.9999899437e-02, 9.9999239517e-03])


def h2_rate_law(c):
    kf = [2.0, 1.0, 1.0, 1000.0, 1000.0, 100.0]
    kb = [216.0, 337.5, 1400.0, 10800.0, 33750.0, 0.7714]
    H2, O2, H2O, H, O, OH = c
    r = [kf[0] * H2 - kb[0] * H * H, kf[1] * O2 - kb[1] * O * O, kf[2] * H2O - kb[2] * H * OH,
         kf[3] * H2 * O - kb[3] * H * OH, kf[4] * O2 * H - kb[4] * O * OH, kf[5] * H2 * O - kb[5] * H2O]
    return np.array([-r[0] - r[3] - r[5], -r[1] - r[4], -r[2] + r[5],
                     2 * r[0] + r[2] + r[3] - r[4], 2 * r[1] - r[3] + r[4] - r[5], r[2] + r[3] + r[4]])


def ozone_rate_law(c, T):
    def k(A, b, Ea):
        return A * T ** b * math.exp(-Ea / (R * T))
    O, O2, O3 = c
    M_ = 1.14 * O + 0.40 * O2 + 0.92 * O3
    r = [k(2.90e17, -1, 0) * O * O * M_, k(6.81e18, -1, 496) * O2 * M_,
         k(9.50e14, 0, 95) * O3 * M_, k(3.32e13, 0, -4.9) * O * O2 * M_,
         k(5.20e12, 0, 17.4) * O * O3, k(4.27e12, 0, 413.9) * O2 * O2]
    return np.array([-2 * r[0] + 2 * r[1] + r[2] - r[3] - r[4] + r[5],
                     r[0] - r[1] + r[2] - r[3] + 2 * r[4] - 2 * r[5],
                     -r[2] + r[3] - r[4] + r[5]])


def fd_jacobian(m, c, h=1e-6):
    n = c.size
    J = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h * max(1.0, abs(c[j]))
        J[:, j] = (m.rhs(c + e) - m.rhs(c - e)) / (2 * e[j])
    return J


def test_rate_constant_trivial():
    assert rate_constant(ArrheniusParams(2.0), 300.0) == 2.0
    assert rate_constant(ArrheniusParams(2.0), 1234.5) == 2.0


def test_rate_constant_ozone_examples():
    k = rate_constant(ArrheniusParams(9.50e14, 0.0, 95.0), 1000.0)
    assert k == pytest.approx(9.50e14 * math.exp(-95.0 / (R * 1000.0)), rel=1e-14)
    assert k == pytest.approx(1.03e10, rel=1e-2)
    assert rate_constant(ArrheniusParams(2.90e17, -1.0, 0.0), 1000.0) == pytest.approx(2.90e14, rel=1e-14)


def test_rate_constant_rejects_nonpositive_temperature():
    with pytest.raises(ValueError):
        rate_constant(ArrheniusParams(1.0), 0.0)
    with pytest.raises(MechanismError):
        ArrheniusParams(0.0)


@given(st.floats(0.0, 3.0), st.floats(1.0, 500.0), st.floats(200.0, 3000.0), st.floats(1.0, 500.0))
def test_rate_constant_monotone_in_temperature(b, Ea, T, dT):
    p = ArrheniusParams(1e10, b, Ea)
    assert rate_constant(p, T + dT) > rate_constant(p, T)


def test_davis_skodje_rhs_examples(ds6):
    np.testing.assert_allclose(ds6.rhs([1.0, 1.0]), [-1.0, -3.25], rtol=0, atol=1e-15)
    np.testing.assert_array_equal(ds6.rhs([0.0, 0.0]), [0.0, 0.0])


def test_davis_skodje_jacobian_examples(ds6):
    J = ds6.jacobian([1.0, 0.5])
    np.testing.assert_allclose(J, [[-1.0, 0.0], [1.5, -6.0]], atol=1e-14)
    np.testing.assert_allclose(J, fd_jacobian(ds6, np.array([1.0, 0.5])), rtol=1e-8, atol=1e-8)
    for g in (2.0, 6.0, 10.0):
        np.testing.assert_allclose(M.davis_skodje(g).jacobian([0.0, 0.0]), [[-1, 0], [g - 1, -g]],
                                   atol=1e-14)


def test_davis_skodje_requires_gamma_above_one():
    with pytest.raises(MechanismError):
        M.davis_skodje(1.0)


def test_h2_rhs_matches_hand_written_rate_law(h2, rng):
    for c in random_feasible(h2, rng, 20):
        np.testing.assert_allclose(h2.rhs(c), h2_rate_law(c), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("T", [350.0, 500.0, 1000.0])
def test_ozone_rhs_matches_hand_written_rate_law(T, rng):
    m = M.ozone(T)
    for c in random_feasible(m, rng, 20):
        ref = ozone_rate_law(c, T)
        np.testing.assert_allclose(m.rhs(c), ref, rtol=1e-12, atol=1e-12 * np.abs(ref).max())


def test_stoichiometry_is_annihilated_by_conservation(h2, ozone1000):
    for m in (h2, ozone1000):
        np.testing.assert_array_equal(m.conservation_matrix @ m.stoichiometry, 0)


@pytest.mark.parametrize("name", ["h2-6species", "ozone"])
def test_conservation_of_rhs_on_random_states(name):
    m = M.builtin(name)
    rng = np.random.default_rng(7)
    G = m.conservation_matrix
    for c in random_feasible(m, rng, 1000):
        f = m.rhs(c)
        assert np.max(np.abs(G @ f)) <= 1e-12 * max(np.abs(G).sum(axis=1).max() * np.abs(f).max(), 1e-300)


@given(st.lists(st.floats(0.0, 1.0), min_size=3, max_size=3))
def test_ozone_weighted_sum_vanishes(c):
    f = M.ozone(1000.0).rhs(np.array(c))
    scale = max(np.abs(f).max(), 1e-300)
    assert abs(f[0] + 2 * f[1] + 3 * f[2]) <= 1e-12 * scale * 6


@pytest.mark.parametrize("name", ["davis-skodje", "h2-6species", "ozone"])
def test_jacobian_matches_finite_differences(name):
    m = M.builtin(name)
    rng = np.random.default_rng(3)
    for c in random_feasible(m, rng, 100):
        J = m.jacobian(c)
        Jfd = fd_jacobian(m, c)
        assert np.max(np.abs(J - Jfd)) <= 1e-6 * max(np.abs(J).max(), 1.0)


def test_jacobian_rows_contract_to_zero(h2, ozone1000, rng):
    for m in (h2, ozone1000):
        for c in random_feasible(m, rng, 10):
            J = m.jacobian(c)
            assert np.max(np.abs(m.conservation_matrix @ J)) <= 1e-12 * np.abs(J).max()


def test_conservation_residual_examples(h2):
    np.testing.assert_array_equal(conservation_residual(h2, [1, 0.5, 0, 0, 0, 0]), [0, 0])
    np.testing.assert_array_equal(conservation_residual(h2, np.zeros(6)), [-2, -1])
    np.testing.assert_array_equal(conservation_residual(M.ozone(), [0, 0.5, 0]), [0])


def test_element_balance_checked_at_construction():
    species = (M.Species("A", {"X": 1}), M.Species("B", {"X": 2}))
    bad = Reaction({0: 1}, {1: 1}, ArrheniusParams(1.0))
    with pytest.raises(MechanismError):
        M.Mechanism(name="bad", species=species, reactions=(bad,))


def test_equilibrium_davis_skodje(ds6):
    np.testing.assert_allclose(equilibrium_state(ds6).c, [0.0, 0.0], atol=1e-12)


def test_equilibrium_ozone_reference_value(ozone1000):
    c = equilibrium_state(ozone1000).c
    assert abs(c[1] - 0.5) <= 1e-6
    assert np.linalg.norm(ozone1000.rhs(c)) <= 1e-12


def test_equilibrium_h2_golden(h2):
    c = equilibrium_state(h2).c
    np.testing.assert_allclose(c, H2_EQUILIBRIUM, rtol=1e-8, atol=1e-10)
    assert np.linalg.norm(h2.rhs(c)) <= 1e-12
    assert np.all(c >= 0)


def test_load_mechanism_round_trip(tmp_path):
    doc = {
        "name": "isomer",
        "species": [{"name": "A", "elements": {"C": 1}}, {"name": "B", "elements": {"C": 1}}],
        "reactions": [{"reactants": {"A": 1}, "products": {"B": 1}, "A": 3.0},
                      {"reactants": {"B": 1}, "products": {"A": 1}, "A": 1.0}],
        "conservation": [{"coefficients": [1, 1], "constant": 1.0}],
    }
    path = tmp_path / "iso.json"
    path.write_text(json.dumps(doc))
    m = M.load_mechanism(str(path))
    np.testing.assert_allclose(m.rhs([1.0, 0.0]), [-3.0, 3.0])
    np.testing.assert_allclose(equilibrium_state(m).c, [0.25, 0.75], atol=1e-12)
    with pytest.raises(KeyError):
        M.load_mechanism("no-such-mechanism")


def test_index_by_name_and_position(h2):
    assert h2.index("H2O") == 2
    assert h2.index(4) == 4
    with pytest.raises(KeyError):
        h2.index("N2")
