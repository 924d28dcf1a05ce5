import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.integrate import solve_ivp
from scipy.stats import special_ortho_group

from simtraj import mechanism as M
from simtraj.criteria import (AnalyticJacobian, CentralDifference, ComplexStep, CriterionKind,
                              SingularPointError, curvature, directional_second_derivative,
                              local_curvature, objective_integrand, phi_A, phi_B)
from simtraj.integrator import IntegratorOptions, StopCondition, integrate

from conftest import random_feasible

HARMONIC = [[0.0, 1.0], [-1.0, 0.0]]
vec3 = arrays(np.float64, 3, elements=st.floats(-10, 10))


def test_second_derivative_linear_example():
    m = M.linear_model(np.diag([-1.0, -2.0]))
    np.testing.assert_allclose(directional_second_derivative(m, [1.0, 1.0]), [1.0, 4.0], rtol=1e-15)


def test_second_derivative_davis_skodje_example(ds6):
    c = [1.0, 0.5]
    for scheme in (ComplexStep(), AnalyticJacobian(), CentralDifference()):
        np.testing.assert_allclose(directional_second_derivative(ds6, c, scheme), [1.0, 0.0],
                                   atol=1e-8 if scheme.kind == "central" else 1e-14)


@pytest.mark.parametrize("name", ["davis-skodje", "h2-6species", "ozone"])
def test_complex_step_matches_analytic(name):
    m = M.builtin(name)
    rng = np.random.default_rng(11)
    for c in random_feasible(m, rng, 100):
        a = directional_second_derivative(m, c, ComplexStep())
        b = directional_second_derivative(m, c, AnalyticJacobian())
        assert np.linalg.norm(a - b) <= 1e-12 * np.linalg.norm(b)


def test_phi_examples(ds6):
    assert phi_A(ds6, [1.0, 0.5]) == pytest.approx(1.0 / math.sqrt(1.0625), rel=1e-14)
    assert phi_A(ds6, [1.0, 0.5]) == pytest.approx(0.9701, abs=5e-5)
    assert phi_B(ds6, [1.0, 0.5]) == pytest.approx(1.0 / math.sqrt(1.125), rel=1e-14)
    assert phi_B(ds6, [1.0, 0.5]) == pytest.approx(0.9428, abs=5e-5)


@given(st.floats(0.1, 50.0), st.floats(0.01, 10.0))
def test_scalar_flow_closed_forms(lam, c):
    m = M.linear_model([[-lam]])
    assert phi_A(m, [c]) == pytest.approx(lam, rel=1e-13)
    assert phi_B(m, [c]) == pytest.approx(lam, rel=1e-13)
    assert objective_integrand(CriterionKind.A(), m, [c]) == pytest.approx(lam * lam * c, rel=1e-13)


@pytest.mark.parametrize("name", ["davis-skodje", "h2-6species", "ozone"])
def test_phi_a_between_singular_values(name):
    m = M.builtin(name)
    rng = np.random.default_rng(5)
    for c in random_feasible(m, rng, 30):
        s = np.linalg.svd(m.jacobian(c), compute_uv=False)
        v = phi_A(m, c)
        assert s[-1] * (1 - 1e-10) <= v <= s[0] * (1 + 1e-10)


def test_phi_b_equals_phi_a_for_equal_concentrations():
    m = M.linear_model([[-3.0, 1.0, 0.0], [1.0, -2.0, 0.5], [0.0, 0.5, -1.0]])
    c = np.full(3, 0.7)
    assert phi_B(m, c) == pytest.approx(phi_A(m, c), rel=1e-14)


def test_phi_a_rotation_invariance():
    rng = np.random.default_rng(2)
    A = -np.diag([1.0, 3.0, 7.0]) + 0.3 * rng.normal(size=(3, 3))
    c = rng.normal(size=3)
    for _ in range(10):
        Q = special_ortho_group.rvs(3, random_state=rng)
        rotated = M.linear_model(Q @ A @ Q.T)
        assert phi_A(rotated, Q @ c) == pytest.approx(phi_A(M.linear_model(A), c), rel=1e-12)


@given(vec3, vec3, st.floats(1e-3, 1e3), st.floats(-1e3, 1e3))
def test_curvature_reparametrization_invariance(cdot, cddot, alpha, beta):
    if np.linalg.norm(cdot) < 1e-3:
        return
    k = curvature(cdot, cddot)
    k2 = curvature(alpha * cdot, alpha ** 2 * cddot + beta * cdot)
    # relative to k, or to the size of the cancelled tangential terms when k is ~0
    cancelled = (np.linalg.norm(cddot) + abs(beta) * np.linalg.norm(cdot) / alpha ** 2) / (cdot @ cdot)
    assert abs(k2 - k) <= 1e-12 * max(k, cancelled)


@pytest.mark.parametrize("r", [0.5, 1.0, 4.0])
def test_circle_curvature(r):
    assert local_curvature(M.linear_model(HARMONIC), [r, 0.0]) == pytest.approx(1.0 / r, rel=1e-14)


def test_straight_lines_have_zero_curvature():
    m = M.linear_model(-np.eye(3))
    assert local_curvature(m, [1.0, -2.0, 0.5]) <= 1e-15


def _trajectory_curvature_oracle(f, c0, h):
    def point(t):
        sgn = 1.0 if t > 0 else -1.0
        sol = solve_ivp(lambda _, y: sgn * np.asarray(f(y)), (0, abs(t)), c0, method="DOP853",
                        rtol=1e-13, atol=1e-15)
        return sol.y[:, -1]

    def kappa(h):
        p, q = point(h), point(-h)
        v = (p - q) / (2 * h)
        a = (p - 2 * c0 + q) / (h * h)
        return abs(v[0] * a[1] - v[1] * a[0]) / np.linalg.norm(v) ** 3

    return (4 * kappa(h / 2) - kappa(h)) / 3


def test_curvature_matches_trajectory_difference_oracle(ds6):
    c0 = np.array([1.0, 0.5])
    ref = _trajectory_curvature_oracle(ds6.rhs, c0, 2e-3)
    assert local_curvature(ds6, c0) == pytest.approx(ref, rel=1e-6)


def test_metric_identity_equals_criterion_a(h2, rng):
    I = CriterionKind.metric(np.eye(6))
    for c in random_feasible(h2, rng, 20):
        assert objective_integrand(I, h2, c) == pytest.approx(
            objective_integrand(CriterionKind.A(), h2, c), rel=1e-14)


def test_metric_weight_validation():
    with pytest.raises(ValueError):
        CriterionKind.metric(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        CriterionKind.metric(np.array([[1.0, 0.0], [0.0, -1.0]]))
    with pytest.raises(ValueError):
        CriterionKind.metric(np.ones(3))


def test_total_curvature_of_circle_is_two_pi():
    m = M.linear_model(HARMONIC)
    tr = integrate(m, [1.0, 0.0], StopCondition.horizon(2 * math.pi), CriterionKind.C(),
                   opts=IntegratorOptions(rtol=1e-10, atol=1e-12))
    assert abs(tr.quadrature - 2 * math.pi) <= 1e-6


@pytest.mark.parametrize("name", ["h2-6species", "ozone"])
def test_integrands_nonnegative(name):
    m = M.builtin(name)
    rng = np.random.default_rng(13)
    kinds = [CriterionKind.A(), CriterionKind.B(), CriterionKind.C(),
             CriterionKind.metric(np.diag(np.arange(1.0, m.n_species + 1)))]
    for c in random_feasible(m, rng, 50):
        for kind in kinds:
            assert objective_integrand(kind, m, c) >= 0.0


def test_singular_point_raises(ds6):
    with pytest.raises(SingularPointError):
        phi_A(ds6, [0.0, 0.0])
    with pytest.raises(SingularPointError):
        local_curvature(ds6, [0.0, 0.0])


def test_criterion_parse_tokens(tmp_path):
    assert CriterionKind.parse("A").name == "A"
    assert CriterionKind.parse("C").name == "C"
    path = tmp_path / "w.json"
    path.write_text("[[2.0, 0.0], [0.0, 1.0]]")
    kind = CriterionKind.parse(f"metric:{path}")
    np.testing.assert_array_equal(kind.weight, [[2.0, 0.0], [0.0, 1.0]])
    with pytest.raises(ValueError):
        CriterionKind.parse("D")
