import numpy as np
import pytest
from scipy.optimize import brentq

from simtraj import mechanism as M
from simtraj.ildm import (DegenerateSplitError, IldmError, IldmSpec, fast_subspace, ildm_curve,
                          ildm_point, ildm_residual)


def test_linear_diagonal_system_gives_slow_axis():
    m = M.linear_model(np.diag([-1.0, -100.0]))
    for c1 in (0.1, 0.7, 2.0):
        p = ildm_point(IldmSpec(m, 1, {"x1": c1}), initial=[c1, 0.8])
        assert abs(p.composition[1]) <= 1e-10
        assert p.spectral_gap == pytest.approx(0.01, rel=1e-12)


def test_linear_system_matches_slow_eigenvector():
    P = np.array([[1.0, 0.3, 0.0], [0.4, 1.0, 0.2], [0.1, -0.5, 1.0]])
    A = P @ np.diag([-0.5, -40.0, -300.0]) @ np.linalg.inv(P)
    m = M.linear_model(A)
    slow = P[:, 0] / P[0, 0]
    for x1 in (0.2, 1.0):
        p = ildm_point(IldmSpec(m, 1, {"x1": x1}), initial=[x1, 1.0, 1.0])
        np.testing.assert_allclose(p.composition, x1 * slow, rtol=0, atol=1e-10)
    # two-dimensional ILDM: the span of the two slowest eigenvectors
    p = ildm_point(IldmSpec(m, 2, {"x1": 0.5, "x2": 0.2}), initial=[0.5, 0.2, 0.0])
    coef, *_ = np.linalg.lstsq(P[:, :2], p.composition, rcond=None)
    assert np.linalg.norm(P[:, :2] @ coef - p.composition) <= 1e-10


def _ds_ildm_oracle(gamma, y1):
    # fast left eigenvector of the triangular Jacobian [[-1, 0], [a, -gamma]] is (-a/(gamma-1), 1)
    a = ((gamma - 1) + 2 * gamma * y1) / (1 + y1) ** 2 - 2 * ((gamma - 1) * y1 + gamma * y1 ** 2) / (1 + y1) ** 3

    def r(y2):
        f1 = -y1
        f2 = -gamma * y2 + ((gamma - 1) * y1 + gamma * y1 ** 2) / (1 + y1) ** 2
        return -a / (gamma - 1) * f1 + f2

    scan = np.linspace(0.0, 2.0, 20001)
    vals = np.array([r(v) for v in scan])
    k = int(np.flatnonzero(np.sign(vals[:-1]) != np.sign(vals[1:]))[0])
    return brentq(r, scan[k], scan[k + 1], xtol=1e-15)


def test_davis_skodje_curve_matches_scan_oracle(ds6):
    y1 = np.linspace(0.2, 2.0, 10)
    points, errors = ildm_curve(IldmSpec(ds6, 1, {"y1": 0.2}), "y1", y1)
    assert errors == [None] * 10
    y2 = np.array([p.composition[1] for p in points])
    oracle = np.array([_ds_ildm_oracle(6.0, v) for v in y1])
    np.testing.assert_allclose(y2, oracle, rtol=0, atol=1e-9)
    # for finite gamma the ILDM is not the slow invariant manifold
    assert np.max(np.abs(y2 - y1 / (1 + y1))) > 1e-3
    for p in points:
        assert p.residual <= 1e-9 * max(np.linalg.norm(ds6.rhs(p.composition)), 1.0)
        assert p.spectral_gap == pytest.approx(1.0 / 6.0, rel=1e-9)


def test_degenerate_split_is_reported():
    m = M.linear_model([[-1.0, 2.0], [-2.0, -1.0]])
    with pytest.raises(DegenerateSplitError, match="equal real"):
        fast_subspace(m, [1.0, 1.0], 1)
    with pytest.raises(DegenerateSplitError):
        ildm_point(IldmSpec(m, 1, {"x1": 1.0}))


def test_conservation_directions_are_deflated(h2):
    c = M.feasible_composition(h2)
    Zf, ev = fast_subspace(h2, c, 1)
    assert ev.size == 4 and Zf.shape == (4, 3)
    assert np.all(ev.real < 0)
    full = np.linalg.eigvals(h2.jacobian(c))
    nonzero = np.sort(full[np.abs(full) > 1e-8 * np.abs(full).max()].real)
    np.testing.assert_allclose(np.sort(ev.real), nonzero, rtol=1e-9)
    # Zf spans a left invariant subspace of the reduced Jacobian
    V = h2.null_basis
    Jr = V.T @ h2.jacobian(c) @ V
    left = Zf.T @ Jr
    np.testing.assert_allclose(left - (left @ Zf) @ Zf.T, 0.0, atol=1e-10 * np.abs(Jr).max())


def test_h2_point_invariants(h2):
    p = ildm_point(IldmSpec(h2, 1, {"H2O": 0.3}))
    assert p.composition[2] == 0.3
    assert np.max(np.abs(M.conservation_residual(h2, p.composition))) <= 1e-10
    assert p.residual <= 1e-9 * max(np.linalg.norm(h2.rhs(p.composition)), 1.0)
    assert ildm_residual(h2, p.composition, 1) == pytest.approx(p.residual, rel=1e-6, abs=1e-12)
    assert 0 < p.spectral_gap < 1


def test_curve_records_failures():
    m = M.linear_model([[-1.0, 2.0], [-2.0, -1.0]])
    points, errors = ildm_curve(IldmSpec(m, 1, {"x1": 1.0}), "x1", [0.5, 1.0])
    assert points == [None, None]
    assert all(e.startswith("DegenerateSplitError") for e in errors)


def test_spec_validation(h2, ds6):
    with pytest.raises(ValueError):
        IldmSpec(ds6, 2, {"y1": 1.0, "y2": 0.5})
    with pytest.raises(ValueError):
        IldmSpec(h2, 1, {"H2O": 0.3, "H2": 0.2})
    with pytest.raises(ValueError):
        IldmSpec(h2, 0, {})
    assert issubclass(DegenerateSplitError, IldmError)
