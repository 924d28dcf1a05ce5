import math

import numpy as np
import pytest

from simtraj import mechanism as M
from simtraj.criteria import CriterionKind
from simtraj.integrator import StopCondition
from simtraj.landscape import (FAILED, INFEASIBLE, OK, LandscapeAxis, LandscapeGrid, distance_to_curve,
                               reference_sim_trajectory, scan_landscape, tail_on_progress)


@pytest.fixture(scope="module")
def ozone_tail():
    return reference_sim_trajectory(M.ozone(1000.0), [0.0, 0.0, 1.0 / 3.0])


def ds_grid(crit, n1=10, n2=101):
    return LandscapeGrid((LandscapeAxis("y1", 0.2, 2.0, n1), LandscapeAxis("y2", 0.0, 2.0, n2)),
                         CriterionKind.parse(crit))


def test_axis_values_and_validation():
    np.testing.assert_allclose(LandscapeAxis("a", 1e-4, 1e-1, 4, "log").values(), [1e-4, 1e-3, 1e-2, 1e-1])
    with pytest.raises(ValueError):
        LandscapeAxis("a", 0.0, 1.0, 5, "log")
    with pytest.raises(ValueError):
        LandscapeAxis("a", 0.0, 1.0, 1)
    with pytest.raises(ValueError):
        LandscapeGrid((LandscapeAxis("a", 0, 1, 2), LandscapeAxis("a", 0, 1, 2)), CriterionKind.A())


def test_scan_is_deterministic():
    m = M.davis_skodje(6.0)
    grid = ds_grid("C", 6, 21)
    a = scan_landscape(m, grid)
    b = scan_landscape(m, grid)
    c = scan_landscape(m, grid, jobs=2)
    fin = np.isfinite(a.values)
    assert fin.all()
    assert np.array_equal(a.values[fin], b.values[fin]) and np.array_equal(a.values[fin], c.values[fin])
    assert np.array_equal(a.argmin, c.argmin)


def test_infeasible_count_is_combinatorial():
    m = M.ozone(1000.0)
    grid = LandscapeGrid((LandscapeAxis("O2", 0.05, 0.45, 9), LandscapeAxis("O3", 1e-4, 0.3, 13, "log")),
                         CriterionKind.B())
    res = scan_landscape(m, grid)
    a1, a2 = np.meshgrid(grid.axes[0].values(), grid.axes[1].values(), indexing="ij")
    negative = 1.0 - 2.0 * a1 - 3.0 * a2 < 0
    assert res.infeasible_count == int(negative.sum())
    assert np.array_equal(res.status == INFEASIBLE, negative)
    assert np.all(res.status[~negative] == OK)
    assert np.all(np.isnan(res.values[negative]))


def test_ozone_valley_follows_sim(ozone_tail):
    m = M.ozone(1000.0)
    o3 = LandscapeAxis("O3", 1e-4, 0.3, 41, "log")
    grid = LandscapeGrid((LandscapeAxis("O2", 0.15, 0.45, 7), o3), CriterionKind.B())
    res = scan_landscape(m, grid)
    sim = tail_on_progress(ozone_tail, 1, res.axis1, species=[2])[:, 0]
    cell = math.log(o3.upper / o3.lower) / (o3.count - 1)
    assert np.all(np.abs(np.log(res.argmin_values / sim)) <= cell * (1 + 1e-9))


@pytest.mark.parametrize("crit", ["A", "B"])
def test_argmin_degrades_with_spectral_gap(crit):
    dev = {}
    for gamma in (10.0, 2.0):
        res = scan_landscape(M.davis_skodje(gamma), ds_grid(crit))
        dev[gamma] = np.nanmax(np.abs(res.argmin_values - res.axis1 / (1 + res.axis1)))
    assert dev[10.0] < dev[2.0]


def test_explicit_stop_is_used_for_every_column():
    grid = LandscapeGrid((LandscapeAxis("y1", 0.5, 1.5, 3), LandscapeAxis("y2", 0.0, 1.0, 3)),
                         CriterionKind.A(), stop=StopCondition.horizon(2.0))
    res = scan_landscape(M.davis_skodje(6.0), grid)
    assert all(s.kind == "horizon" and s.t_f == 2.0 for s in res.stops)
    assert not np.any(res.status == FAILED)


def test_davis_skodje_tail_on_sim():
    m = M.davis_skodje(10.0)
    # the fast transient of this model covers more than half of the arc length
    tail = reference_sim_trajectory(m, [2.0, 0.0], discard=0.6)
    y = tail.states
    assert np.max(np.abs(y[:, 1] - y[:, 0] / (1 + y[:, 0]))) <= 1e-3


def test_ozone_tail_ends_at_equilibrium(ozone_tail):
    assert abs(ozone_tail.c_final[1] - 0.5) <= 1e-4
    assert ozone_tail.times[0] > 0


def test_tail_of_tail_lies_on_tail(ozone_tail):
    m = M.ozone(1000.0)
    again = reference_sim_trajectory(m, ozone_tail.states[0])
    assert np.max(distance_to_curve(again.states, ozone_tail.states)) <= 1e-5


def test_distance_to_curve():
    curve = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]])
    np.testing.assert_allclose(distance_to_curve([[0.5, 0.5], [2.0, 2.0], [0.5, -1.0]], curve),
                               [0.5, math.sqrt(2.0), 1.0])


def test_tail_on_progress_range_check(ozone_tail):
    with pytest.raises(ValueError):
        tail_on_progress(ozone_tail, 1, [0.9])
