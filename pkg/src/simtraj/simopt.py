"""Species reconstruction by trajectory optimization.

For fixed values of the progress variables, the free initial concentrations
are chosen to minimize the integral of a criterion along the trajectory that
starts there.  Conservation relations are eliminated by an affine
parameterization ``c = c_ref + N z`` whose rows for fixed species vanish, so
fixed values are reproduced bitwise; nonnegativity and the upper bounds
implied by conservation become linear inequalities in ``z``.
"""

from __future__ import annotations

import copy
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import brentq

from ._optimize import minimize_polytope
from .criteria import CriterionKind
from .integrator import (IntegrationError, IntegratorOptions, StopCondition, Trajectory,
                         integrate)
from .mechanism import Mechanism, MechanismError, conservation_residual, feasible_composition

log = logging.getLogger(__name__)

EPS = np.finfo(float).eps


class InfeasibleProblemError(ValueError):
    """The fixed values and conservation relations admit no nonnegative composition."""


class OptimizationError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """One species-reconstruction problem.

    ``stop=None`` selects the horizon policy: criteria other than C run to a
    fixed horizon ``t_f`` at which a probe trajectory from the reference
    point has slowed to ``horizon_decay`` times its initial speed; criterion
    C stops when the speed reaches ``epsilon_factor`` times the speed at a
    reference point.  The horizon probe always starts at the interior point
    of the feasible set; for criterion C the reference is that interior
    point (``epsilon_reference="initial"``) or the slowest point of the
    feasible set (``"slow"``).

    ``start`` picks the cold-start composition: the slowest feasible point
    (default), which usually lies inside the narrow valley of the
    objective, or the interior point.
    """

    mechanism: Mechanism
    criterion: CriterionKind
    fixed: Mapping
    constants: Sequence[float] | None = None
    stop: StopCondition | None = None
    bounds: np.ndarray | None = None
    gtol: float = 1e-6
    xtol: float = 1e-12
    max_iter: int = 200
    integrator: IntegratorOptions = field(default_factory=IntegratorOptions)
    horizon_decay: float = 1e-6
    epsilon_factor: float = 1e-4
    epsilon_reference: str = "initial"
    start: str = "slow"

    def __post_init__(self):
        m = self.mechanism
        if self.constants is not None:
            m = m.with_constants(self.constants)
            object.__setattr__(self, "mechanism", m)
        fixed = {}
        for key, v in dict(self.fixed).items():
            i = m.index(key)
            if i in fixed:
                raise ValueError(f"species {m.species_names[i]} fixed twice")
            v = float(v)
            if not math.isfinite(v):
                raise ValueError("fixed values must be finite")
            fixed[i] = v
        object.__setattr__(self, "fixed", dict(sorted(fixed.items())))
        n = m.n_species
        rank = np.linalg.matrix_rank(m.conservation_matrix) if m.conservation else 0
        if len(fixed) + rank >= n:
            raise ValueError("no degrees of freedom left: fix fewer species")
        if self.bounds is None:
            object.__setattr__(self, "bounds", default_bounds(m))
        else:
            bnd = np.array(self.bounds, dtype=float)
            if bnd.shape != (n, 2):
                raise ValueError(f"bounds must have shape ({n}, 2)")
            if np.any(bnd[:, 0] < 0) or np.any(bnd[:, 1] < bnd[:, 0]):
                raise ValueError("bounds need 0 <= lower <= upper")
            object.__setattr__(self, "bounds", bnd)
        for i, v in self.fixed.items():
            lo, hi = self.bounds[i]
            if not lo <= v <= hi:
                raise ValueError(f"fixed value {v} of {m.species_names[i]} outside [{lo}, {hi}]")
        if self.epsilon_reference not in ("initial", "slow"):
            raise ValueError("epsilon_reference must be 'initial' or 'slow'")
        if self.start not in ("interior", "slow"):
            raise ValueError("start must be 'interior' or 'slow'")
        if not (self.horizon_decay > 0 and self.epsilon_factor > 0):
            raise ValueError("decay factors must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")

    def with_fixed(self, fixed: Mapping) -> "ProblemSpec":
        return replace(self, fixed=fixed, constants=None)

    def to_dict(self) -> dict:
        m = self.mechanism
        return {
            "mechanism": m.describe(),
            "criterion": self.criterion.to_dict(),
            "fixed": {m.species_names[i]: v for i, v in self.fixed.items()},
            "stop": None if self.stop is None else self.stop.to_dict(),
            "bounds": self.bounds.tolist(),
            "gtol": self.gtol,
            "xtol": self.xtol,
            "max_iter": self.max_iter,
            "rtol": self.integrator.rtol,
            "atol": self.integrator.atol,
            "horizon_decay": self.horizon_decay,
            "epsilon_factor": self.epsilon_factor,
            "epsilon_reference": self.epsilon_reference,
            "start": self.start,
        }


def default_bounds(m: Mechanism) -> np.ndarray:
    """Lower bound zero; upper bounds implied by nonnegative conservation rows."""
    n = m.n_species
    bnd = np.zeros((n, 2))
    bnd[:, 1] = np.inf
    G, C = m.conservation_matrix, m.conservation_constants
    for row, const in zip(G, C):
        if np.all(row >= 0):
            for i in np.flatnonzero(row > 0):
                bnd[i, 1] = min(bnd[i, 1], const / row[i])
    return bnd


class AffineSlice:
    """Free initial compositions for fixed progress values: ``c = ref + N z``.

    ``ref`` is an interior point of the feasible set and ``N`` has
    orthonormal columns spanning the directions that keep every fixed value
    and conserved quantity unchanged (rows of fixed species are exactly
    zero).  The feasible set is the polytope ``A z >= b``.
    """

    def __init__(self, m: Mechanism, fixed: Mapping[int, float], bounds: np.ndarray):
        n = m.n_species
        self.mechanism = m
        self.fixed = dict(fixed)
        self.free = [i for i in range(n) if i not in self.fixed]
        try:
            ref = feasible_composition(m, self.fixed, bounds[:, 1])
        except MechanismError as exc:
            raise InfeasibleProblemError(str(exc)) from None
        if np.any(ref < bounds[:, 0] - 1e-12):
            raise InfeasibleProblemError("no composition satisfies the lower bounds")
        for i, v in self.fixed.items():
            ref[i] = v
        self.ref = ref
        G = m.conservation_matrix
        Gf = G[:, self.free]
        Nf = null_space(Gf) if G.shape[0] else np.eye(len(self.free))
        N = np.zeros((n, Nf.shape[1]))
        N[self.free] = Nf
        self.N = N
        lo, hi = bounds[self.free, 0], bounds[self.free, 1]
        rows, rhs = [Nf], [lo - ref[self.free]]
        fin = np.isfinite(hi)
        if np.any(fin):
            rows.append(-Nf[fin])
            rhs.append(ref[self.free][fin] - hi[fin])
        self.A = np.vstack(rows)
        self.b = np.concatenate(rhs)
        self._lo, self._hi = lo, hi
        span = np.where(np.isfinite(hi), hi - lo, np.maximum(np.abs(ref[self.free]), 1.0))
        self.scale = float(max(np.max(span), 1e-300))

    @property
    def dim(self) -> int:
        return self.N.shape[1]

    def recentered(self, c) -> "AffineSlice":
        """Same slice with its origin moved to the feasible composition ``c``.

        Putting the origin at the starting point keeps small concentrations
        at full relative precision in ``c = ref + N z``.
        """
        new = copy.copy(self)
        ref = np.asarray(c, dtype=float).copy()
        for i, v in self.fixed.items():
            ref[i] = v
        new.ref = ref
        rf = ref[self.free]
        rhs = [self._lo - rf]
        fin = np.isfinite(self._hi)
        if np.any(fin):
            rhs.append(rf[fin] - self._hi[fin])
        new.b = np.minimum(np.concatenate(rhs), 0.0)
        return new

    def compose(self, z) -> np.ndarray:
        c = self.ref + self.N @ np.asarray(z, dtype=float)
        for i, v in self.fixed.items():
            c[i] = v
        return c

    def coordinates(self, c) -> np.ndarray:
        return self.N.T @ (np.asarray(c, dtype=float) - self.ref)

    def is_feasible(self, z, tol=0.0) -> bool:
        return bool(np.all(self.A @ z - self.b >= -tol))

    def project_inside(self, z) -> np.ndarray:
        """Pull ``z`` toward the interior point (``z = 0``) until it is feasible."""
        z = np.asarray(z, dtype=float)
        if self.is_feasible(z):
            return z
        Az = self.A @ z
        # A (t z) >= b with b <= 0 at the interior point
        t = 1.0
        for a, bi in zip(Az, self.b):
            if a < bi:
                t = min(t, bi / a if a != 0 else 0.0)
        return max(t, 0.0) * z * (1 - 1e-12)

    def slowest_point(self, max_iter: int = 60) -> np.ndarray:
        """Feasible composition of (locally) minimal speed ``|f|``, by projected Gauss-Newton."""
        m = self.mechanism
        z = np.zeros(self.dim)
        c = self.compose(z)
        f = m.rhs(c)
        fn = np.linalg.norm(f)
        for _ in range(max_iter):
            JN = m.jacobian(c) @ self.N
            dz, *_ = np.linalg.lstsq(JN, -f, rcond=None)
            alpha = 1.0
            Ad = self.A @ dz
            slack = self.A @ z - self.b
            neg = Ad < 0
            if np.any(neg):
                alpha = min(1.0, 0.99 * float(np.min(slack[neg] / -Ad[neg])))
            improved = False
            while alpha > 1e-12:
                z_new = z + alpha * dz
                c_new = self.compose(z_new)
                f_new = m.rhs(c_new)
                fn_new = np.linalg.norm(f_new)
                if fn_new < fn:
                    improved = True
                    break
                alpha *= 0.5
            if not improved:
                break
            rel = fn - fn_new
            z, c, f, fn = z_new, c_new, f_new, fn_new
            if rel <= 1e-12 * fn:
                break
        return c


@dataclass(eq=False)
class SolveResult:
    """Outcome of :func:`reconstruct_point`.

    ``objective`` equals ``trajectory.quadrature`` of the tight-tolerance
    re-integration from ``c0_opt``.  ``flat_valley`` flags a nearly
    singular reduced Hessian estimate (minimizer poorly determined).
    """

    c0_opt: np.ndarray
    objective: float
    trajectory: Trajectory
    iterations: int
    converged: bool
    kkt_residual: float
    message: str = ""
    stop: StopCondition | None = None
    nfev: int = 0
    hessian_min_eig: float = math.nan
    flat_valley: bool = False
    used_fallback: bool = False
    fixed: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def to_dict(self, names=None) -> dict:
        names = names or [f"c_{i + 1}" for i in range(len(self.c0_opt))]
        return {
            "c0_opt": dict(zip(names, map(float, self.c0_opt))),
            "objective": self.objective,
            "iterations": self.iterations,
            "converged": self.converged,
            "kkt_residual": self.kkt_residual,
            "message": self.message,
            "stop": None if self.stop is None else self.stop.to_dict(),
            "nfev": self.nfev,
            "hessian_min_eig": self.hessian_min_eig,
            "flat_valley": self.flat_valley,
            "used_fallback": self.used_fallback,
            "fixed": {names[i]: v for i, v in self.fixed.items()},
            "trajectory_end_time": self.trajectory.t_final,
            "trajectory_reason": self.trajectory.reason,
            "wall_time": self.wall_time,
        }


FLAT_VALLEY_THRESHOLD = 1e-6


def _probe_stop(spec: ProblemSpec, sl: AffineSlice) -> StopCondition:
    if spec.stop is not None:
        return spec.stop
    m = spec.mechanism
    if spec.criterion.name == "C":
        ref = sl.ref if spec.epsilon_reference == "initial" else sl.slowest_point()
        speed = float(np.linalg.norm(m.rhs(ref)))
        if not speed > 0:
            raise OptimizationError("reference point is a fixed point; supply an explicit stop condition")
        return StopCondition.velocity(spec.epsilon_factor * speed)
    speed = float(np.linalg.norm(m.rhs(sl.ref)))
    if not speed > 0:
        raise OptimizationError("reference point is a fixed point; supply an explicit stop condition")
    # the horizon spans the relaxation from the interior point, not the slow drift
    probe = integrate(m, sl.ref,StopCondition.velocity(spec.horizon_decay * speed),
                      opts=spec.integrator, raise_on_failure=False)
    if probe.stats["status"] < 0:
        log.warning("horizon probe ended early (%s); using t_f = %.3e", probe.reason, probe.t_final)
    if not probe.t_final > 0:
        raise OptimizationError("horizon probe made no progress")
    return StopCondition.horizon(probe.t_final)


def resolve_stop(spec: ProblemSpec) -> StopCondition:
    """Stop condition used for ``spec`` after applying the horizon policy."""
    return _probe_stop(spec, AffineSlice(spec.mechanism, spec.fixed, spec.bounds))


class _Objective:
    def __init__(self, spec: ProblemSpec, sl: AffineSlice, stop: StopCondition):
        self.spec, self.sl, self.stop = spec, sl, stop
        self.nominal_grid = None

    def traj(self, z, frozen=None, opts=None):
        return integrate(self.spec.mechanism, self.sl.compose(z), self.stop, self.spec.criterion,
                         opts=opts or self.spec.integrator, frozen_grid=frozen)

    def __call__(self, z):
        try:
            tr = self.traj(z)
        except IntegrationError as exc:
            log.debug("objective evaluation failed: %s", exc)
            return math.inf
        return tr.quadrature

    def gradient(self, z, f, cap):
        """Forward differences on the frozen step grid of the nominal trajectory."""
        try:
            nominal = self.traj(z)
            grid = nominal.grid
            f0 = self.traj(z, frozen=grid).quadrature
        except IntegrationError:
            return np.full(z.size, np.nan)
        g = np.empty(z.size)
        sl = self.sl
        c = sl.compose(z)
        for i in range(z.size):
            # step relative to the smallest concentration the coordinate moves
            col = np.abs(sl.N[:, i])
            moved = col > 1e-12
            size = float(np.min(np.maximum(c[moved], 1e-8 * sl.scale) / col[moved]))
            floor = 8 * EPS * max(abs(z[i]), 1e-300)
            h = max(math.sqrt(EPS) * size, floor)
            if cap is not None:
                h = min(h, max(cap, 4 * EPS * size, floor))
            for sign in (1.0, -1.0):
                zp = z.copy()
                zp[i] += sign * h
                if sl.is_feasible(zp):
                    break
            else:
                g[i] = 0.0
                continue
            step = zp[i] - z[i]
            try:
                fp = self.traj(zp, frozen=grid).quadrature
            except IntegrationError:
                g[i] = np.nan
                continue
            g[i] = (fp - f0) / step
        return g


def reconstruct_point(spec: ProblemSpec, initial=None) -> SolveResult:
    """Minimize the criterion integral over the admissible initial compositions.

    ``initial`` is an optional starting composition (warm start); it is
    re-projected onto the fixed values and conservation relations.
    """
    t_start = time.perf_counter()
    base = AffineSlice(spec.mechanism, spec.fixed, spec.bounds)
    stop = _probe_stop(spec, base)
    obj = _Objective(spec, base, stop)
    # the warm start and the slowest point compete; the interior point is
    # the cold start for start="interior" and the last resort otherwise
    candidates = []
    if initial is not None:
        candidates.append(base.project_inside(base.coordinates(initial)))
    if spec.start == "slow":
        candidates.append(base.project_inside(base.coordinates(base.slowest_point())))
    values = [obj(z) for z in candidates]
    if not any(math.isfinite(v) for v in values):
        candidates, values = [np.zeros(base.dim)], [obj(np.zeros(base.dim))]
    best = int(np.argmin(values))
    if not math.isfinite(values[best]):
        raise OptimizationError("objective undefined at the starting composition")
    sl = base.recentered(base.compose(candidates[best]))
    obj = _Objective(spec, sl, stop)
    z0 = np.zeros(sl.dim)

    res = minimize_polytope(obj, obj.gradient, z0, sl.A, sl.b, scale=sl.scale, gtol=spec.gtol,
                            xtol=spec.xtol, max_iter=spec.max_iter,
                            fd_step_hint=lambda s: 0.1 * s)
    c_opt = sl.compose(res.z)
    tight = spec.integrator.tightened()
    try:
        traj = integrate(spec.mechanism, c_opt, stop, spec.criterion, opts=tight)
    except IntegrationError as exc:
        log.warning("tight re-integration failed (%s); reporting the working-tolerance trajectory", exc)
        traj = obj.traj(res.z)
    flat = bool(math.isfinite(res.hessian_min_eig) and res.hessian_min_eig < FLAT_VALLEY_THRESHOLD)
    return SolveResult(c0_opt=c_opt, objective=traj.quadrature, trajectory=traj,
                       iterations=res.iterations, converged=res.converged,
                       kkt_residual=res.kkt_residual, message=res.message, stop=stop,
                       nfev=res.nfev, hessian_min_eig=res.hessian_min_eig, flat_valley=flat,
                       used_fallback=res.used_fallback, fixed=dict(spec.fixed),
                       wall_time=time.perf_counter() - t_start)


# ------------------------------------------------------------------ sweeps

@dataclass(frozen=True)
class SweepSpec:
    """Progress-variable grid: one or two ``(species, values)`` axes."""

    axes: tuple
    warm_start: bool = True
    jobs: int = 1

    def __post_init__(self):
        axes = tuple((key, tuple(float(v) for v in vals)) for key, vals in self.axes)
        if not 1 <= len(axes) <= 2:
            raise ValueError("a sweep has one or two progress axes")
        for key, vals in axes:
            if not vals:
                raise ValueError(f"empty grid for {key}")
        if len(axes) == 2 and axes[0][0] == axes[1][0]:
            raise ValueError("the two sweep axes must be different species")
        object.__setattr__(self, "axes", axes)

    @property
    def dimension(self) -> int:
        return len(self.axes)

    def nodes(self) -> list:
        """Grid nodes in continuation order: ascending, serpentine for two axes."""
        (_, v1), *rest = [(k, sorted(v)) for k, v in self.axes]
        if not rest:
            return [(a,) for a in v1]
        v2 = rest[0][1]
        out = []
        for r, a in enumerate(v1):
            row = v2 if r % 2 == 0 else v2[::-1]
            out.extend((a, b) for b in row)
        return out


@dataclass(eq=False)
class ManifoldResult:
    """Sweep results keyed by progress values (in the continuation order)."""

    keys: list
    results: list
    errors: list
    dimension: int
    progress_names: list

    def items(self):
        return zip(self.keys, self.results)

    @property
    def all_converged(self) -> bool:
        return all(r is not None and r.converged for r in self.results)

    def compositions(self) -> np.ndarray:
        return np.array([r.c0_opt if r is not None else np.full(len(self.progress_names), np.nan)
                         for r in self.results])


def _solve_node(args):
    spec, fixed, initial = args
    try:
        return reconstruct_point(spec.with_fixed(fixed), initial), None
    except (OptimizationError, InfeasibleProblemError, IntegrationError, ValueError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def sweep_manifold(spec: ProblemSpec, sweep: SweepSpec) -> ManifoldResult:
    """Solve the problem for every grid node of ``sweep``.

    With ``warm_start`` each node starts from the solution of the previous
    node in continuation order; otherwise all nodes start from their own
    interior point and may run in parallel (``sweep.jobs``).
    """
    m = spec.mechanism
    idx = [m.index(k) for k, _ in sweep.axes]
    names = [m.species_names[i] for i in idx]
    nodes = sweep.nodes()

    def fixed_for(node):
        f = dict(spec.fixed)
        for i, v in zip(idx, node):
            f[i] = v
        return f

    results, errors = [], []
    if sweep.warm_start or sweep.jobs <= 1:
        prev = None
        for node in nodes:
            res, err = _solve_node((spec, fixed_for(node), prev if sweep.warm_start else None))
            results.append(res)
            errors.append(err)
            if res is not None:
                prev = res.c0_opt
    else:
        with ProcessPoolExecutor(max_workers=sweep.jobs) as pool:
            for res, err in pool.map(_solve_node, [(spec, fixed_for(nd), None) for nd in nodes]):
                results.append(res)
                errors.append(err)
    return ManifoldResult(keys=list(nodes), results=results, errors=errors,
                          dimension=sweep.dimension, progress_names=names)


# ------------------------------------------------------------- consistency

def progress_time(traj: Trajectory, index: int, fraction: float) -> float:
    """Time at which species ``index`` has covered ``fraction`` of its total change."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    x = traj.states[:, index]
    target = x[0] + fraction * (x[-1] - x[0])
    if fraction == 0.0 or x[-1] == x[0]:
        return 0.0
    if fraction == 1.0:
        return traj.t_final
    sgn = np.sign(x[-1] - x[0])
    k = int(np.argmax(sgn * (x - target) >= 0))
    lo, hi = traj.times[k - 1], traj.times[k]
    return float(brentq(lambda t: traj.at(t)[index] - target, lo, hi, xtol=1e-15 * max(hi, 1e-300),
                        rtol=4 * EPS))


@dataclass(eq=False)
class ConsistencyReport:
    """Deviation between a solution trajectory and the re-solved one from a later point."""

    t1: float
    defect: float
    initial_defect: float
    species_defect: np.ndarray
    overlap: float
    first: SolveResult
    second: SolveResult | None

    def to_dict(self, names=None) -> dict:
        names = names or [f"c_{i + 1}" for i in range(len(self.species_defect))]
        return {
            "t1": self.t1,
            "defect": self.defect,
            "initial_defect": self.initial_defect,
            "species_defect": dict(zip(names, map(float, self.species_defect))),
            "overlap": self.overlap,
            "first_converged": self.first.converged,
            "second_converged": None if self.second is None else self.second.converged,
        }


def consistency_test(spec: ProblemSpec, t1: float | None = None, fraction: float | None = None,
                     first: SolveResult | None = None) -> ConsistencyReport:
    """Re-fix the progress variables at ``c(t1)`` of the solution and compare solutions.

    Give either ``t1`` or ``fraction`` (progress of the first fixed species
    along the first solution).  The defect is the largest max-norm distance
    between the re-solved trajectory and the shifted tail of the first one
    over their common time span; it includes the initial-point distance.
    """
    first = first or reconstruct_point(spec)
    tr = first.trajectory
    if t1 is None:
        if fraction is None:
            raise ValueError("give t1 or fraction")
        t1 = progress_time(tr, next(iter(spec.fixed)), fraction)
    t1 = float(t1)
    if not 0.0 <= t1 <= tr.t_final:
        raise ValueError(f"t1 = {t1} outside the solution span [0, {tr.t_final}]")
    n = spec.mechanism.n_species
    if t1 == 0.0:
        return ConsistencyReport(0.0, 0.0, 0.0, np.zeros(n), tr.t_final, first, first)
    c_t1 = tr.at(t1)
    fixed = {i: float(c_t1[i]) for i in spec.fixed}
    second = reconstruct_point(spec.with_fixed(fixed), initial=c_t1)
    tr2 = second.trajectory
    overlap = min(tr2.t_final, tr.t_final - t1)
    ts = np.union1d(tr2.times[tr2.times <= overlap], tr.times[(tr.times >= t1) & (tr.times <= t1 + overlap)] - t1)
    ts = ts[(ts >= 0) & (ts <= overlap)]
    diff = np.abs(tr2.at(ts) - tr.at(np.minimum(ts + t1, tr.t_final)))
    species = diff.max(axis=0)
    initial = float(np.max(np.abs(second.c0_opt - c_t1)))
    return ConsistencyReport(t1=t1, defect=float(max(species.max(), initial)), initial_defect=initial,
                             species_defect=species, overlap=float(overlap), first=first, second=second)


def check_solution(spec: ProblemSpec, res: SolveResult, tol: float = 1e-10) -> None:
    """Raise ``AssertionError`` unless ``res`` honors the fixed values and conservation."""
    for i, v in spec.fixed.items():
        if res.c0_opt[i] != v:
            raise AssertionError(f"fixed value of species {i} changed")
    if spec.mechanism.conservation:
        r = conservation_residual(spec.mechanism, res.c0_opt)
        if np.max(np.abs(r)) > tol:
            raise AssertionError(f"conservation residual {np.max(np.abs(r)):.3e}")
