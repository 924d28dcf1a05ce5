"""Stiff integration of kinetic models with an attached quadrature.

:func:`integrate` runs a three-stage Radau IIA method (order 5) on the state
augmented by one quadrature variable, so the objective integral is computed
under the same error control as the concentrations.  Integration ends at a
fixed horizon, when the velocity norm falls to a threshold, or when a
chosen species reaches a value.

Passing ``frozen_grid`` reuses the step sequence of an earlier (nominal)
run.  Perturbed trajectories evaluated this way are smooth functions of
their initial values, which keeps finite-difference gradients of the
shooting map consistent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _backend
from .criteria import CriterionKind
from .mechanism import Mechanism


class IntegrationError(RuntimeError):
    """The integrator stopped before the requested stop condition was met."""

    def __init__(self, message, status, trajectory=None):
        super().__init__(message)
        self.status = status
        self.trajectory = trajectory


class SingularIntegrandError(IntegrationError, ArithmeticError):
    pass


@dataclass(frozen=True)
class IntegratorOptions:
    rtol: float = 1e-8
    atol: float = 1e-10
    max_step: float = math.inf
    initial_step: float = 0.0  # 0 selects automatically
    max_steps: int = 100_000
    method: str = "radau"
    newton_tol: float = 0.0  # 0 selects the usual rtol-dependent default

    def __post_init__(self):
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("tolerances must be positive")
        if not self.max_steps > 0:
            raise ValueError("max_steps must be positive")
        if not self.max_step > 0:
            raise ValueError("max_step must be positive")
        if self.method.lower() not in ("radau", "implicitrk"):
            raise ValueError(f"unsupported method {self.method!r}; only the Radau IIA method is available")

    def tightened(self, factor: float = 10.0) -> "IntegratorOptions":
        return IntegratorOptions(self.rtol / factor, self.atol / factor, self.max_step, 0.0,
                                 self.max_steps, self.method, 0.0)

    @property
    def tight_newton_tol(self) -> float:
        """Newton tolerance at the round-off floor for the scaled norm."""
        return 10.0 * np.finfo(float).eps / self.rtol


@dataclass(frozen=True)
class StopCondition:
    """``horizon`` (``t_f``), ``velocity`` (``|f|_2 = epsilon``) or ``progress`` (``c[index] = value``).

    Event-type conditions may carry a ``max_time`` after which integration
    is abandoned with an error.
    """

    kind: str
    t_f: float | None = None
    epsilon: float | None = None
    index: int | None = None
    value: float | None = None
    max_time: float = math.inf

    def __post_init__(self):
        if self.kind == "horizon":
            if self.t_f is None or not self.t_f > 0:
                raise ValueError("fixed horizon requires t_f > 0")
        elif self.kind == "velocity":
            if self.epsilon is None or not self.epsilon > 0:
                raise ValueError("velocity-norm stop requires epsilon > 0")
        elif self.kind == "progress":
            if self.index is None or self.value is None:
                raise ValueError("progress stop requires an index and a value")
        else:
            raise ValueError(f"unknown stop condition {self.kind!r}")

    @classmethod
    def horizon(cls, t_f: float):
        return cls("horizon", t_f=float(t_f))

    @classmethod
    def velocity(cls, epsilon: float, max_time: float = math.inf):
        return cls("velocity", epsilon=float(epsilon), max_time=max_time)

    @classmethod
    def progress(cls, index: int, value: float, max_time: float = math.inf):
        return cls("progress", index=int(index), value=float(value), max_time=max_time)

    def kernel_args(self, kernels):
        if self.kind == "horizon":
            return self.t_f, kernels.STOP_HORIZON, 0, 0.0
        if self.kind == "velocity":
            return self.max_time, kernels.STOP_VELOCITY, 0, self.epsilon
        return self.max_time, kernels.STOP_PROGRESS, self.index, self.value

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        for k in ("t_f", "epsilon", "index", "value"):
            v = getattr(self, k)
            if v is not None:
                d[k] = v
        if math.isfinite(self.max_time):
            d["max_time"] = self.max_time
        return d


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Output of :func:`integrate`.

    ``states`` has one row per output time.  ``quadratures`` holds the
    running objective integral at the same times and ``quadrature`` its
    final value.  Between output times :meth:`at` evaluates the collocation
    polynomial of the step.
    """

    times: np.ndarray
    states: np.ndarray
    quadratures: np.ndarray
    termination: StopCondition
    reason: str
    steps: np.ndarray = field(repr=False, default=None)
    dense: np.ndarray = field(repr=False, default=None)
    grid: np.ndarray = field(repr=False, default=None)
    stats: dict = field(repr=False, default_factory=dict)

    @property
    def quadrature(self) -> float:
        return float(self.quadratures[-1])

    @property
    def t_final(self) -> float:
        return float(self.times[-1])

    @property
    def c_final(self) -> np.ndarray:
        return self.states[-1]

    def _eval(self, t):
        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        t = np.atleast_1d(t)
        if np.any(t < self.times[0] - 1e-14 * abs(self.times[-1])) or np.any(
                t > self.times[-1] * (1 + 1e-14) + 1e-300):
            raise ValueError("time outside the trajectory span")
        if len(self.times) == 1:
            out = np.repeat(np.hstack([self.states[0], self.quadratures[:1]])[None, :], t.size, axis=0)
        else:
            k = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2)
            x = (t - self.times[k]) / self.steps[k]
            basis = np.stack([x, x * x, x * x * x], axis=1)
            y0 = np.hstack([self.states[k], self.quadratures[k][:, None]])
            out = y0 + np.einsum("knj,kj->kn", self.dense[k], basis)
        return out[0] if scalar else out

    def at(self, t):
        """Concentrations at time(s) ``t`` from the dense output."""
        y = self._eval(t)
        return y[..., :-1]

    def quadrature_at(self, t):
        return self._eval(t)[..., -1]

    def arc_length(self) -> np.ndarray:
        """Cumulative Euclidean length of the state polyline at the output times."""
        seg = np.linalg.norm(np.diff(self.states, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(seg)])

    def to_dict(self) -> dict:
        return {
            "times": self.times.tolist(),
            "states": self.states.tolist(),
            "quadrature": self.quadrature,
            "termination": self.termination.to_dict(),
            "reason": self.reason,
        }


def _kernels_for(integrand, backend):
    if callable(integrand) and not isinstance(integrand, CriterionKind):
        return _backend.get("python")
    return _backend.get(backend)


def _model_for(m: Mechanism, kernels):
    if kernels is _backend.kernels:
        return m.model
    return m.kernel_model(kernels)


def integrate(m: Mechanism, c0, stop: StopCondition, integrand=None,
              opts: IntegratorOptions | None = None, frozen_grid=None,
              backend: str | None = None, raise_on_failure: bool = True) -> Trajectory:
    """Integrate ``dc/dt = f(c)`` from ``c0`` until ``stop`` triggers.

    ``integrand`` is ``None``, a :class:`CriterionKind`, or a Python
    callable ``phi(c)``; its integral along the trajectory is returned as
    ``Trajectory.quadrature``.
    """
    opts = opts or IntegratorOptions()
    c0 = np.asarray(c0, dtype=float)
    if c0.shape != (m.n_species,):
        raise ValueError(f"initial state must have length {m.n_species}")
    if not np.all(np.isfinite(c0)):
        raise ValueError("initial state must be finite")
    kernels = _kernels_for(integrand, backend)
    model = _model_for(m, kernels)
    n = m.n_species
    if integrand is None:
        phi, floor, metric, scheme, delta = kernels.PHI_NONE, 0.0, np.zeros((n, n)), kernels.CDD_COMPLEX, 1e-20
    elif isinstance(integrand, CriterionKind):
        phi, floor, metric, scheme, delta = integrand.kernel_args(kernels, n)
    else:
        phi, floor, metric, scheme, delta = integrand, 0.0, np.zeros((n, n)), kernels.CDD_COMPLEX, 1e-20
    t_end, stop_code, stop_index, stop_value = stop.kernel_args(kernels)
    frozen = None if frozen_grid is None else np.ascontiguousarray(frozen_grid, dtype=float)
    res = kernels.solve(model, np.ascontiguousarray(c0), float(t_end), stop_code, stop_index,
                        float(stop_value), phi, floor, metric, scheme, delta, opts.rtol, opts.atol,
                        opts.initial_step, opts.max_step, opts.max_steps, opts.newton_tol, frozen)
    y = res["y"]
    traj = Trajectory(times=res["t"], states=y[:, :n], quadratures=y[:, n], termination=stop,
                      reason=res["message"], steps=res["h"], dense=res["Q"], grid=res["grid"],
                      stats={"nfev": res["nfev"], "njev": res["njev"], "nlu": res["nlu"],
                             "status": res["status"], "backend": kernels.__name__.rsplit(".", 1)[-1]})
    status = res["status"]
    if raise_on_failure:
        if status == kernels.STATUS_SINGULAR:
            raise SingularIntegrandError(res["message"], status, traj)
        if status < 0:
            raise IntegrationError(res["message"], status, traj)
        if stop.kind != "horizon" and status != kernels.STATUS_EVENT:
            raise IntegrationError(f"stop event never triggered before t = {t_end}", status, traj)
    return traj
