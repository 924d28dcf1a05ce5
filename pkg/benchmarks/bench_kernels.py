"""Compare the compiled and pure-Python integration kernels.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Each case integrates one trajectory with a criterion integrand; the table
reports the best wall time per backend and the speedup.
"""

import argparse
import time

import numpy as np

from simtraj import CriterionKind, StopCondition, davis_skodje, h2_6species, integrate, ozone
from simtraj._backend import compiled


def cases():
    ds = davis_skodje(10.0)
    yield "davis-skodje g=10, A", ds, np.array([1.0, 2.0]), StopCondition.horizon(5.0), CriterionKind.A()
    h2 = h2_6species()
    c0 = np.array([0.6, 0.3, 0.3, 0.1, 0.05, 0.05])
    c0[5] = 2 * 1.0 - 2 * c0[1] - c0[2] - c0[4]  # O balance
    c0[3] = 2 * 2.0 - 2 * c0[0] - 2 * c0[2] - c0[5]  # H balance
    yield "h2-6species, C", h2, c0, StopCondition.velocity(1e-2), CriterionKind.C()
    oz = ozone(1000.0)
    yield "ozone 1000 K, B", oz, np.array([0.1, 0.2, 0.5 / 3]), StopCondition.horizon(1e-8), CriterionKind.B()


def best_time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if compiled is None:
        raise SystemExit("the compiled extension is not built; run pip install -e . first")
    print(f"{'case':28s} {'steps':>7s} {'python [s]':>11s} {'cython [s]':>11s} {'speedup':>8s} {'rel dq':>9s}")
    for name, m, c0, stop, crit in cases():
        runs = {}
        for backend in ("python", "cython"):
            tr = integrate(m, c0, stop, crit, backend=backend)
            runs[backend] = (best_time(lambda: integrate(m, c0, stop, crit, backend=backend), args.repeat), tr)
        tp, tc = runs["python"][0], runs["cython"][0]
        qp, qc = runs["python"][1].quadrature, runs["cython"][1].quadrature
        dq = abs(qp - qc) / max(abs(qc), 1e-300)
        print(f"{name:28s} {len(runs['cython'][1].times):7d} {tp:11.4f} {tc:11.4f} {tp / tc:8.1f} {dq:9.2e}")


if __name__ == "__main__":
    main()
