import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from simtraj import mechanism as M
from simtraj._pykernels import STATUS_EVENT
from simtraj.criteria import CriterionKind
from simtraj.integrator import IntegrationError, IntegratorOptions, StopCondition, integrate
from simtraj.mechanism import conservation_residual

from conftest import random_feasible

HARMONIC = [[0.0, 1.0], [-1.0, 0.0]]


def test_scalar_exponential_decay():
    m = M.linear_model([[-1.0]])
    opts = IntegratorOptions()
    tr = integrate(m, [1.0], StopCondition.horizon(1.0), opts=opts)
    assert tr.t_final == 1.0
    assert abs(tr.c_final[0] - math.exp(-1.0)) <= 10 * opts.rtol


@given(st.floats(0.05, 3.0), st.floats(0.0, 3.0))
def test_davis_skodje_first_component_is_exponential(y1, y2):
    m = M.davis_skodje(6.0)
    tr = integrate(m, [y1, y2], StopCondition.horizon(3.0))
    np.testing.assert_allclose(tr.states[:, 0], y1 * np.exp(-tr.times), rtol=1e-7, atol=1e-10)


def test_dense_output_matches_analytic_solution():
    m = M.davis_skodje(10.0)
    tr = integrate(m, [2.0, 0.0], StopCondition.horizon(5.0))
    t = np.linspace(0.0, 5.0, 97)
    np.testing.assert_allclose(tr.at(t)[:, 0], 2.0 * np.exp(-t), rtol=1e-7, atol=1e-10)


def test_h2_conservation_along_trajectory(h2, rng):
    for c0 in [np.array([1.0, 0.5, 0, 0, 0, 0])] + random_feasible(h2, rng, 3):
        tr = integrate(h2, c0, StopCondition.horizon(10.0))
        res = np.array([conservation_residual(h2, c) for c in tr.states])
        assert np.max(np.abs(res)) <= 1e-8


def test_ozone_conservation_along_trajectory():
    for T in (350.0, 1000.0):
        m = M.ozone(T)
        tr = integrate(m, [0.0, 0.0, 1.0 / 3.0], StopCondition.velocity(1e-10))
        res = np.array([conservation_residual(m, c) for c in tr.states])
        assert np.max(np.abs(res)) <= 1e-8


@pytest.mark.parametrize("name,c0,t_f", [
    ("davis-skodje", [2.0, 0.0], 5.0),
    ("h2-6species", [1.0, 0.5, 0.0, 0.0, 0.0, 0.0], 5.0),
    ("ozone", [0.0, 0.0, 1.0 / 3.0], 1e-3),
])
def test_self_convergence_under_tolerance_halving(name, c0, t_f):
    m = M.builtin(name)
    coarse = IntegratorOptions(rtol=1e-6, atol=1e-8)
    fine = IntegratorOptions(rtol=5e-7, atol=5e-9)
    a = integrate(m, c0, StopCondition.horizon(t_f), opts=coarse).c_final
    b = integrate(m, c0, StopCondition.horizon(t_f), opts=fine).c_final
    assert np.max(np.abs(a - b) / (coarse.atol + coarse.rtol * np.abs(b))) < 1.0


@pytest.mark.parametrize("T", [0.5, 3.0, 40.0])
def test_constant_integrand_quadrature(T):
    tr = integrate(M.davis_skodje(6.0), [1.0, 1.0], StopCondition.horizon(T), integrand=lambda c: 1.0)
    assert tr.quadrature == pytest.approx(T, rel=1e-10)


@pytest.mark.parametrize("eps", [1e-1, 1e-3, 1e-6])
def test_velocity_stop_is_localized(eps):
    m = M.davis_skodje(6.0)
    tr = integrate(m, [2.0, 1.0], StopCondition.velocity(eps))
    assert tr.stats["status"] == STATUS_EVENT
    assert abs(np.linalg.norm(m.rhs(tr.c_final)) - eps) <= 1e-6 * eps


def test_progress_stop(h2):
    tr = integrate(h2, [1.0, 0.5, 0, 0, 0, 0], StopCondition.progress(2, 0.3))
    assert tr.c_final[2] == pytest.approx(0.3, rel=1e-9)


def test_harmonic_radius_preserved_over_one_period():
    m = M.linear_model(HARMONIC)
    opts = IntegratorOptions()
    tr = integrate(m, [1.0, 0.0], StopCondition.horizon(2 * math.pi), opts=opts)
    r2 = np.sum(tr.states ** 2, axis=1)
    assert np.max(np.abs(r2 - 1.0)) <= 100 * opts.rtol
    np.testing.assert_allclose(tr.c_final, [1.0, 0.0], atol=100 * opts.rtol)


def test_quadrature_matches_fine_oracle_for_criterion_b(h2):
    # Criterion B integrand along an H2 trajectory against trapezoidal
    # quadrature on the dense output of a tighter run
    from simtraj.criteria import objective_integrand
    kind = CriterionKind.B()
    c0 = M.feasible_composition(h2, {2: 0.3})
    tr = integrate(h2, c0, StopCondition.horizon(2.0), integrand=kind)
    fine = integrate(h2, c0, StopCondition.horizon(2.0), opts=IntegratorOptions(rtol=1e-10, atol=1e-13))
    t = np.unique(np.concatenate([np.linspace(0, 2.0, 20001), np.geomspace(1e-8, 2e-2, 20001)]))
    phi = np.array([objective_integrand(kind, h2, c) for c in fine.at(t)])
    assert np.all(phi > 0)
    assert np.all(np.diff(phi[t > 1.0]) < 0)
    assert tr.quadrature == pytest.approx(np.trapezoid(phi, t), rel=1e-4)


def test_frozen_grid_reproduces_nominal_trajectory(h2):
    c0 = M.feasible_composition(h2, {2: 0.3})
    kind = CriterionKind.A()
    nominal = integrate(h2, c0, StopCondition.horizon(1.0), integrand=kind)
    again = integrate(h2, c0, StopCondition.horizon(1.0), integrand=kind, frozen_grid=nominal.grid)
    assert again.quadrature == pytest.approx(nominal.quadrature, rel=1e-10)
    assert len(again.times) == len(nominal.times)


def test_step_budget_exhaustion_raises(ozone1000):
    with pytest.raises(IntegrationError):
        integrate(ozone1000, [0.0, 0.0, 1.0 / 3.0], StopCondition.horizon(1.0),
                  opts=IntegratorOptions(max_steps=5))


def test_rejects_bad_initial_state(ds6):
    with pytest.raises(ValueError):
        integrate(ds6, [1.0, np.nan], StopCondition.horizon(1.0))
    with pytest.raises(ValueError):
        integrate(ds6, [1.0, 1.0, 1.0], StopCondition.horizon(1.0))
    with pytest.raises(ValueError):
        StopCondition.velocity(0.0)
