"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected and repeated in the terminal summary.  Each
criterion includes its runtime budget.
"""

import math
import os
import time

import numpy as np
import pytest

from simtraj import mechanism as M
from simtraj.criteria import (AnalyticJacobian, ComplexStep, CriterionKind, curvature,
                              directional_second_derivative)
from simtraj.ildm import IldmSpec, ildm_curve
from simtraj.integrator import IntegratorOptions, StopCondition, integrate
from simtraj.landscape import (LandscapeAxis, LandscapeGrid, reference_sim_trajectory, relaxation_defect,
                               scan_landscape, tail_on_progress)
from simtraj.simopt import ProblemSpec, SweepSpec, consistency_test, sweep_manifold

from conftest import ACCEPTANCE_LINES, random_feasible

SUITE_START = time.perf_counter()
JOBS = os.cpu_count() or 1


def report(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def ds_sweep(gamma, crit):
    values = np.linspace(0.2, 2.0, 10)
    spec = ProblemSpec(M.davis_skodje(gamma), CriterionKind.parse(crit), {"y1": 0.2})
    res = sweep_manifold(spec, SweepSpec([("y1", values)]))
    C = res.compositions()
    return res.all_converged, float(np.max(np.abs(C[:, 1] - C[:, 0] / (1 + C[:, 0]))))


def test_criterion_1_davis_skodje_sim_recovery():
    t0 = time.perf_counter()
    errors, converged = {}, True
    for gamma, bound in ((10.0, 0.05), (100.0, 0.005)):
        for crit in ("A", "B"):
            conv, err = ds_sweep(gamma, crit)
            converged &= conv
            errors[(gamma, crit)] = (err, bound)
    elapsed = time.perf_counter() - t0
    ok = converged and all(e <= b for e, b in errors.values()) and elapsed <= 30
    detail = ", ".join(f"g={g:g}/{c}: {e:.2e} (<= {b})" for (g, c), (e, b) in errors.items())
    report(1, ok, f"max |y2 - y1/(1+y1)| {detail}; all converged={converged}; {elapsed:.1f}s (<= 30s)")


def test_criterion_2_criterion_c_regime_boundary():
    t0 = time.perf_counter()
    out = {}
    for gamma in (6.0, 2.0):
        grid = LandscapeGrid((LandscapeAxis("y1", 0.2, 2.0, 101), LandscapeAxis("y2", 0.0, 2.0, 101)),
                             CriterionKind.C())
        res = scan_landscape(M.davis_skodje(gamma), grid, jobs=JOBS)
        dist = float(np.nanmax(np.abs(res.argmin_values - res.axis1 / (1 + res.axis1))))
        out[gamma] = (dist, int(res.interior.sum()), res.axis1.size)
    elapsed = time.perf_counter() - t0
    d6, d2 = out[6.0][0], out[2.0][0]
    near = out[6.0][1] == out[6.0][2]
    ok = near and d2 > 3 * d6 and elapsed <= 120
    report(2, ok, f"gamma=6 interior minima in {out[6.0][1]}/{out[6.0][2]} columns, max argmin distance "
                  f"{d6:.3f}; gamma=2 distance {d2:.3f} ({d2 / d6:.1f}x, need > 3x); {elapsed:.1f}s (<= 120s)")


def test_criterion_3_consistency_ordering():
    t0 = time.perf_counter()
    h2 = M.h2_6species()
    defects, conv = {}, True
    for crit in ("A", "B", "C"):
        rep = consistency_test(ProblemSpec(h2, CriterionKind.parse(crit), {"H2O": 0.3}), fraction=0.5)
        defects[crit] = rep.defect
        conv &= rep.first.converged and rep.second.converged
    elapsed = time.perf_counter() - t0
    finite = all(math.isfinite(v) for v in defects.values())
    ok = finite and defects["C"] < defects["B"] <= defects["A"] and defects["C"] <= 1e-3
    report(3, ok, "defects " + ", ".join(f"{k}={v:.3e}" for k, v in defects.items())
           + f" (need C < B <= A, C <= 1e-3); converged={conv}; {elapsed:.1f}s")


def test_criterion_4_ozone_equilibrium():
    t0 = time.perf_counter()
    c = M.equilibrium_state(M.ozone(1000.0, 1.0)).c
    elapsed = time.perf_counter() - t0
    ok = abs(c[1] - 0.5) <= 1e-6 and elapsed <= 1.0
    report(4, ok, f"c_O2 = {c[1]:.9f} (0.5 +- 1e-6); {elapsed:.2f}s (<= 1s)")


def test_criterion_5_low_temperature_robustness():
    t0 = time.perf_counter()
    grid = np.linspace(0.15, 0.45, 7)
    parts, ok = [], True
    for T in (500.0, 350.0):
        m = M.ozone(T)
        tail = reference_sim_trajectory(m, [0.0, 0.0, 1.0 / 3.0])
        sim_o3 = tail_on_progress(tail, 1, grid, species=[2])[:, 0]
        dev, conv = {}, {}
        for crit in ("A", "B", "C"):
            res = sweep_manifold(ProblemSpec(m, CriterionKind.parse(crit), {"O2": 0.15}),
                                 SweepSpec([("O2", grid)]))
            conv[crit] = res.all_converged
            dev[crit] = float(np.max(np.abs(res.compositions()[:, 2] / sim_o3 - 1)))
        bc_ok = conv["B"] and conv["C"] and dev["B"] <= 0.1 and dev["C"] <= 0.1
        a_worse = dev["A"] > max(dev["B"], dev["C"])
        ok &= bc_ok and a_worse
        parts.append(f"T={T:g}: rel. c_O3 deviation A={dev['A']:.1e} B={dev['B']:.1e} C={dev['C']:.1e}, "
                     f"B/C converged and within 10%: {bc_ok}, A worse than both: {a_worse}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed <= 120
    report(5, ok, "; ".join(parts) + f"; {elapsed:.1f}s (<= 120s)")


def test_criterion_6_ildm_comparison():
    t0 = time.perf_counter()
    m = M.ozone(1000.0)
    tail = reference_sim_trajectory(m, [0.0, 0.0, 1.0 / 3.0])
    grid = np.linspace(0.15, 0.45, 5)
    # working tolerance 1e-6 keeps the criterion-B sweep inside the runtime budget
    spec = ProblemSpec(m, CriterionKind.B(), {"O2": 0.15}, integrator=IntegratorOptions(rtol=1e-6, atol=1e-10))
    res = sweep_manifold(spec, SweepSpec([("O2", grid)]))
    C = res.compositions()
    points, errors = ildm_curve(IldmSpec(m, 1, {"O2": 0.15}), "O2", grid, initials=C)
    ratios = []
    for c, p in zip(C, points):
        if p is None:
            continue
        ratios.append(relaxation_defect(m, p.composition, tail) / relaxation_defect(m, c, tail))
    elapsed = time.perf_counter() - t0
    failed = sum(p is None for p in points)
    ok = res.all_converged and failed == 0 and min(ratios) >= 2.0 and elapsed <= 60
    report(6, ok, f"relaxation defect ratio ILDM/B per node {', '.join(f'{r:.2f}' for r in ratios)} "
                  f"(need >= 2); ILDM failures {failed}; B converged={res.all_converged}; "
                  f"{elapsed:.1f}s (<= 60s)")


def test_criterion_7_numerical_kernels():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for name in M.BUILTINS:
        m = M.builtin(name)
        for c in random_feasible(m, rng, 100):
            a = directional_second_derivative(m, c, ComplexStep())
            b = directional_second_derivative(m, c, AnalyticJacobian())
            worst = max(worst, float(np.linalg.norm(a - b) / np.linalg.norm(b)))
    circle = integrate(M.linear_model([[0.0, 1.0], [-1.0, 0.0]]), [1.0, 0.0], StopCondition.horizon(2 * math.pi),
                       CriterionKind.C(), opts=IntegratorOptions(rtol=1e-10, atol=1e-12)).quadrature
    starts = {"davis-skodje": ([2.0, 0.0], 5.0), "h2-6species": ([1.0, 0.5, 0, 0, 0, 0], 5.0),
              "ozone": ([0.0, 0.0, 1.0 / 3.0], 1e-3)}
    conv = {}
    for name, (c0, t_f) in starts.items():
        m = M.builtin(name)
        coarse, fine = IntegratorOptions(rtol=1e-6, atol=1e-8), IntegratorOptions(rtol=5e-7, atol=5e-9)
        a = integrate(m, c0, StopCondition.horizon(t_f), opts=coarse).c_final
        b = integrate(m, c0, StopCondition.horizon(t_f), opts=fine).c_final
        conv[name] = float(np.max(np.abs(a - b) / (coarse.atol + coarse.rtol * np.abs(b))))
    ok = worst <= 1e-12 and abs(circle - 2 * math.pi) <= 1e-6 and all(v < 1 for v in conv.values())
    report(7, ok, f"complex-step vs analytic worst rel. {worst:.1e} (<= 1e-12); circle total curvature "
                  f"error {abs(circle - 2 * math.pi):.1e} (<= 1e-6); tolerance-halving change / coarse tol "
                  + ", ".join(f"{k}={v:.2f}" for k, v in conv.items()) + " (< 1)")


def test_criterion_8_invariants_and_total_runtime():
    h2, oz = M.h2_6species(), M.ozone(1000.0)
    cons = 0.0
    for m, c0, stop in ((h2, [1.0, 0.5, 0, 0, 0, 0], StopCondition.horizon(50.0)),
                        (oz, [0.0, 0.0, 1.0 / 3.0], StopCondition.velocity(1e-10))):
        tr = integrate(m, c0, stop)
        cons = max(cons, float(np.max(np.abs(tr.states @ m.conservation_matrix.T - m.conservation_constants))))
    rng = np.random.default_rng(8)
    reparam = 0.0
    for _ in range(1000):
        v, a = rng.normal(size=6), rng.normal(size=6)
        alpha, beta = rng.uniform(0.1, 10.0), rng.normal()
        k = curvature(v, a)
        reparam = max(reparam, abs(curvature(alpha * v, alpha ** 2 * a + beta * v) - k) / k)
    grid = LandscapeGrid((LandscapeAxis("y1", 0.2, 2.0, 11), LandscapeAxis("y2", 0.0, 2.0, 41)), CriterionKind.B())
    first = scan_landscape(M.davis_skodje(10.0), grid)
    second = scan_landscape(M.davis_skodje(10.0), grid, jobs=JOBS)
    fin = np.isfinite(first.values)
    same = np.array_equal(first.argmin, second.argmin) and np.array_equal(first.values[fin], second.values[fin])
    total = time.perf_counter() - SUITE_START
    ok = cons <= 1e-8 and reparam <= 1e-12 and same and total <= 600
    report(8, ok, f"conservation drift {cons:.1e} (<= 1e-8); reparametrization rel. change {reparam:.1e} "
                  f"(<= 1e-12); landscape rescan bitwise identical: {same}; acceptance run so far "
                  f"{total:.0f}s (<= 600s)")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
