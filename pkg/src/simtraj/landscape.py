"""Optimization landscapes and reference slow-manifold trajectories.

A landscape is the criterion integral evaluated on a grid of initial values
of two species; the other species follow from the conservation relations.
Each column (fixed value of the first axis) is one species-reconstruction
problem, so its argmin is what the optimizer would find by exhaustive
search.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _pykernels
from .criteria import CriterionKind
from .integrator import IntegratorOptions, StopCondition, Trajectory, integrate
from .mechanism import Mechanism
from .simopt import ProblemSpec, resolve_stop

__all__ = ["OK", "INFEASIBLE", "FAILED", "LandscapeAxis", "LandscapeGrid", "LandscapeResult",
           "scan_landscape", "reference_sim_trajectory", "tail_on_progress", "distance_to_curve",
           "relaxation_defect"]

OK, INFEASIBLE, FAILED = 0, 1, 2
STATUS_NAMES = {OK: "ok", INFEASIBLE: "infeasible", FAILED: "failed"}


@dataclass(frozen=True)
class LandscapeAxis:
    species: str
    lower: float
    upper: float
    count: int
    scale: str = "linear"

    def __post_init__(self):
        if self.count < 2:
            raise ValueError("an axis needs at least two nodes")
        if not self.lower < self.upper:
            raise ValueError("axis range must be increasing")
        if self.scale not in ("linear", "log"):
            raise ValueError("axis scale is 'linear' or 'log'")
        if self.scale == "log" and not self.lower > 0:
            raise ValueError("a log axis needs a positive range")

    def values(self) -> np.ndarray:
        if self.scale == "log":
            return np.logspace(math.log10(self.lower), math.log10(self.upper), self.count)
        return np.linspace(self.lower, self.upper, self.count)


@dataclass(frozen=True, eq=False)
class LandscapeGrid:
    """Two axes, the criterion, and the stop policy.

    With ``stop=None`` every column uses the stop condition the optimizer
    would use for the same progress value (see :class:`ProblemSpec`).
    """

    axes: tuple
    criterion: CriterionKind
    stop: StopCondition | None = None
    integrator: IntegratorOptions = field(default_factory=IntegratorOptions)
    horizon_decay: float = 1e-6
    epsilon_factor: float = 1e-4
    epsilon_reference: str = "initial"

    def __post_init__(self):
        if len(self.axes) != 2:
            raise ValueError("a landscape has exactly two axes")
        if self.axes[0].species == self.axes[1].species:
            raise ValueError("the two axes must be different species")

    @property
    def shape(self) -> tuple:
        return self.axes[0].count, self.axes[1].count


@dataclass(eq=False)
class LandscapeResult:
    """Objective values ``values[i, j]`` at ``(axis1[i], axis2[j])``.

    Non-OK nodes carry ``nan`` and a status code.  ``argmin[i]`` is the
    index of the smallest finite value in column ``i`` (``-1`` if none).
    """

    grid: LandscapeGrid
    axis1: np.ndarray
    axis2: np.ndarray
    values: np.ndarray
    status: np.ndarray
    argmin: np.ndarray
    stops: list
    reference: Trajectory | None = None

    @property
    def argmin_values(self) -> np.ndarray:
        out = np.full(self.axis1.size, np.nan)
        ok = self.argmin >= 0
        out[ok] = self.axis2[self.argmin[ok]]
        return out

    @property
    def interior(self) -> np.ndarray:
        """Columns whose minimum is strictly between the first and last finite node."""
        out = np.zeros(self.axis1.size, dtype=bool)
        for i in range(self.axis1.size):
            fin = np.flatnonzero(np.isfinite(self.values[i]))
            if fin.size >= 3:
                out[i] = fin[0] < self.argmin[i] < fin[-1]
        return out

    @property
    def infeasible_count(self) -> int:
        return int(np.count_nonzero(self.status == INFEASIBLE))


def _reconstruct(m: Mechanism, idx: tuple, v1: float, v2: float):
    """Full composition with species ``idx`` set to ``(v1, v2)``, the rest from conservation."""
    n = m.n_species
    c = np.zeros(n)
    c[idx[0]], c[idx[1]] = v1, v2
    rest = [k for k in range(n) if k not in idx]
    if rest:
        G = m.conservation_matrix
        rhs = m.conservation_constants - G[:, list(idx)] @ np.array([v1, v2])
        c[rest] = np.linalg.solve(G[:, rest], rhs)
    return c


def _check_axes(m: Mechanism, idx: tuple) -> None:
    n = m.n_species
    rest = [k for k in range(n) if k not in idx]
    G = m.conservation_matrix
    if len(rest) != G.shape[0] or (rest and np.linalg.matrix_rank(G[:, rest]) < len(rest)):
        raise ValueError("the two axes plus the conservation relations must determine the composition")


def _column_stop(m: Mechanism, grid: LandscapeGrid, idx: int, value: float) -> StopCondition:
    if grid.stop is not None:
        return grid.stop
    spec = ProblemSpec(m, grid.criterion, {idx: value}, integrator=grid.integrator,
                       horizon_decay=grid.horizon_decay, epsilon_factor=grid.epsilon_factor,
                       epsilon_reference=grid.epsilon_reference)
    return resolve_stop(spec)


def _scan_column(args):
    m, grid, idx, v1, axis2, stop = args
    vals = np.full(axis2.size, np.nan)
    status = np.full(axis2.size, OK, dtype=np.int8)
    for j, v2 in enumerate(axis2):
        c = _reconstruct(m, idx, v1, v2)
        if np.any(c < 0):
            status[j] = INFEASIBLE
            continue
        tr = integrate(m, c, stop, grid.criterion, opts=grid.integrator, raise_on_failure=False)
        st = tr.stats["status"]
        if st < 0 or (stop.kind != "horizon" and st != _pykernels.STATUS_EVENT):
            status[j] = FAILED
            continue
        vals[j] = tr.quadrature
    return vals, status


def scan_landscape(m: Mechanism, grid: LandscapeGrid, jobs: int = 1,
                   reference: Trajectory | None = None) -> LandscapeResult:
    """Evaluate the criterion integral on every grid node.

    Nodes whose reconstructed composition has a negative entry are marked
    ``INFEASIBLE``; integration failures are marked ``FAILED``.  Neither is
    fatal.  Columns run in ``jobs`` processes; the values do not depend on
    ``jobs``.
    """
    idx = (m.index(grid.axes[0].species), m.index(grid.axes[1].species))
    _check_axes(m, idx)
    a1, a2 = grid.axes[0].values(), grid.axes[1].values()
    stops = []
    for v1 in a1:
        try:
            stops.append(_column_stop(m, grid, idx[0], float(v1)))
        except (ValueError, RuntimeError):  # infeasible column or failed horizon probe
            stops.append(None)
    tasks = [(m, grid, idx, float(v1), a2, s) for v1, s in zip(a1, stops)]
    values = np.full((a1.size, a2.size), np.nan)
    status = np.full((a1.size, a2.size), INFEASIBLE, dtype=np.int8)
    live = [k for k, s in enumerate(stops) if s is not None]
    if jobs > 1 and len(live) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            out = list(pool.map(_scan_column, [tasks[k] for k in live]))
    else:
        out = [_scan_column(tasks[k]) for k in live]
    for k, (v, s) in zip(live, out):
        values[k], status[k] = v, s
    argmin = np.full(a1.size, -1, dtype=int)
    for i in range(a1.size):
        if np.any(np.isfinite(values[i])):
            argmin[i] = int(np.nanargmin(values[i]))
    return LandscapeResult(grid=grid, axis1=a1, axis2=a2, values=values, status=status, argmin=argmin,
                           stops=stops, reference=reference)


def reference_sim_trajectory(m: Mechanism, far_point, discard: float = 0.2,
                             end_speed: float | None = None,
                             opts: IntegratorOptions | None = None) -> Trajectory:
    """Trajectory from ``far_point`` with the first ``discard`` fraction of arc length removed.

    The trajectory runs until its speed drops to ``end_speed`` (default
    ``1e-12`` times the initial speed).  The remaining tail is a proxy for
    the slow manifold; it keeps the original time stamps.
    """
    if not 0.0 <= discard < 1.0:
        raise ValueError("discard must lie in [0, 1)")
    c0 = np.asarray(far_point, dtype=float)
    if np.any(c0 < 0):
        raise ValueError("far point has negative concentrations")
    speed = float(np.linalg.norm(m.rhs(c0)))
    if not speed > 0:
        raise ValueError("far point is a fixed point")
    eps = end_speed if end_speed is not None else 1e-12 * speed
    tr = integrate(m, c0, StopCondition.velocity(eps), opts=opts)
    s = tr.arc_length()
    k = int(np.searchsorted(s, discard * s[-1], side="left"))
    k = min(k, len(tr.times) - 2)
    return Trajectory(times=tr.times[k:], states=tr.states[k:], quadratures=tr.quadratures[k:],
                      termination=tr.termination, reason=tr.reason, steps=tr.steps[k:],
                      dense=tr.dense[k:], grid=None, stats=dict(tr.stats))


def tail_on_progress(tail: Trajectory, index: int, values, species=None) -> np.ndarray:
    """Tail compositions at given values of a monotone progress species (linear in arc)."""
    x = tail.states[:, index]
    order = np.argsort(x)
    xs = x[order]
    if np.any(np.diff(xs) <= 0):
        raise ValueError("progress species is not strictly monotone along the tail")
    values = np.atleast_1d(np.asarray(values, dtype=float))
    if np.any(values < xs[0]) or np.any(values > xs[-1]):
        raise ValueError("progress values outside the tail range")
    cols = range(tail.states.shape[1]) if species is None else np.atleast_1d(species)
    out = np.column_stack([np.interp(values, xs, tail.states[order, j]) for j in cols])
    return out


def distance_to_curve(points, curve) -> np.ndarray:
    """Euclidean distance from each point to the polyline ``curve``."""
    P = np.atleast_2d(np.asarray(points, dtype=float))
    C = np.asarray(curve, dtype=float)
    a, d = C[:-1], np.diff(C, axis=0)
    dd = np.einsum("ij,ij->i", d, d)
    dd[dd == 0] = np.inf
    out = np.empty(len(P))
    for k, p in enumerate(P):
        t = np.clip(np.einsum("ij,ij->i", p - a, d) / dd, 0.0, 1.0)
        proj = a + t[:, None] * d
        out[k] = np.sqrt(np.min(np.einsum("ij,ij->i", p - proj, p - proj)))
    return out


def relaxation_defect(m: Mechanism, c0, tail: Trajectory, opts: IntegratorOptions | None = None) -> float:
    """Largest distance to the tail curve along the trajectory from ``c0``.

    The trajectory runs until it reaches the speed at the end of the tail,
    so the measured part is the relaxation onto the tail and its drift
    alongside it.
    """
    end_speed = float(np.linalg.norm(m.rhs(tail.c_final)))
    tr = integrate(m, np.asarray(c0, dtype=float), StopCondition.velocity(end_speed), opts=opts)
    return float(np.max(distance_to_curve(tr.states, tail.states)))
