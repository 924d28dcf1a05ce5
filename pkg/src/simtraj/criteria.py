"""Relaxation and curvature integrands evaluated along trajectories.

All criteria are built from the velocity ``f(c)`` and the acceleration
``J_f(c) f(c)``, the derivative of the vector field along itself.  The
acceleration is computed by a complex-step directional derivative by
default, which needs one complex right-hand-side evaluation instead of a
full Jacobian.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _backend
from .mechanism import Mechanism

log = logging.getLogger(__name__)

DEFAULT_FLOOR = 1e-12


class SingularPointError(ArithmeticError):
    """Raised when a criterion is evaluated at a fixed point of the flow."""


@dataclass(frozen=True)
class DerivativeScheme:
    """How ``J_f f`` is evaluated: ``complex``, ``central`` or ``analytic``."""

    kind: str = "complex"
    delta: float = 1e-20

    def __post_init__(self):
        if self.kind not in ("complex", "central", "analytic"):
            raise ValueError(f"unknown derivative scheme {self.kind!r}")
        if not self.delta > 0:
            raise ValueError("step must be positive")

    @classmethod
    def complex_step(cls, delta: float = 1e-20):
        return cls("complex", delta)

    @classmethod
    def central_difference(cls, delta: float = 1e-6):
        # the step actually used is delta * (1 + max|c|)
        return cls("central", delta)

    @classmethod
    def analytic(cls):
        return cls("analytic", 1.0)

    def code(self, kernels) -> int:
        return {"complex": kernels.CDD_COMPLEX, "central": kernels.CDD_CENTRAL,
                "analytic": kernels.CDD_ANALYTIC}[self.kind]


ComplexStep = DerivativeScheme.complex_step
CentralDifference = DerivativeScheme.central_difference
AnalyticJacobian = DerivativeScheme.analytic


@dataclass(frozen=True, eq=False)
class CriterionKind:
    """One of the objective integrands ``A``, ``B``, ``C`` or ``metric``.

    ``metric`` carries a symmetric positive definite ``weight`` matrix and
    measures the acceleration in the induced norm.
    """

    name: str
    weight: np.ndarray | None = None
    floor: float = DEFAULT_FLOOR
    scheme: DerivativeScheme = field(default_factory=DerivativeScheme)

    def __post_init__(self):
        if self.name not in ("A", "B", "C", "metric"):
            raise ValueError(f"unknown criterion {self.name!r}")
        if self.name == "metric":
            W = np.asarray(self.weight, dtype=float)
            if W.ndim != 2 or W.shape[0] != W.shape[1]:
                raise ValueError("metric weight must be a square matrix")
            if not np.allclose(W, W.T, rtol=1e-12, atol=0.0):
                raise ValueError("metric weight must be symmetric")
            if np.linalg.eigvalsh(W).min() <= 0:
                raise ValueError("metric weight must be positive definite")
            object.__setattr__(self, "weight", W)

    @classmethod
    def A(cls, scheme=None):
        return cls("A", scheme=scheme or DerivativeScheme())

    @classmethod
    def B(cls, floor=DEFAULT_FLOOR, scheme=None):
        return cls("B", floor=floor, scheme=scheme or DerivativeScheme())

    @classmethod
    def C(cls, scheme=None):
        return cls("C", scheme=scheme or DerivativeScheme())

    @classmethod
    def metric(cls, weight, scheme=None):
        return cls("metric", weight=np.asarray(weight, dtype=float), scheme=scheme or DerivativeScheme())

    @classmethod
    def parse(cls, token: str) -> "CriterionKind":
        """Parse ``A``, ``B``, ``C`` or ``metric:<file.json>``."""
        if token in ("A", "B", "C"):
            return cls(token)
        if token.startswith("metric:"):
            path = Path(token[len("metric:"):])
            doc = json.loads(path.read_text())
            if isinstance(doc, dict):
                doc = doc["matrix"]
            return cls.metric(np.asarray(doc, dtype=float))
        raise ValueError(f"criterion must be A, B, C or metric:<file>, got {token!r}")

    @property
    def token(self) -> str:
        return self.name

    def kernel_args(self, kernels, n: int):
        code = {"A": kernels.PHI_A, "B": kernels.PHI_B, "C": kernels.PHI_C,
                "metric": kernels.PHI_METRIC}[self.name]
        if self.name == "metric":
            if self.weight.shape != (n, n):
                raise ValueError(f"metric weight has shape {self.weight.shape}, expected ({n}, {n})")
            metric = self.weight
        else:
            metric = np.zeros((n, n))
        return code, float(self.floor), np.ascontiguousarray(metric), self.scheme.code(kernels), float(self.scheme.delta)

    def to_dict(self) -> dict:
        d = {"name": self.name}
        if self.name == "metric":
            d["weight"] = self.weight.tolist()
        if self.name == "B":
            d["floor"] = self.floor
        d["scheme"] = self.scheme.kind
        return d


def _vec(m: Mechanism, c) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    if c.shape != (m.n_species,):
        raise ValueError(f"expected a vector of length {m.n_species}")
    return c


def directional_second_derivative(m: Mechanism, c, scheme: DerivativeScheme | None = None) -> np.ndarray:
    """Acceleration ``J_f(c) f(c)`` of the trajectory through ``c``."""
    scheme = scheme or DerivativeScheme()
    c = _vec(m, c)
    k = _backend.kernels
    model = m.model
    f = model.rhs(c)
    if not np.all(np.isfinite(f)):
        raise ValueError("vector field is not finite at c")
    if scheme.kind == "complex":
        try:
            with np.errstate(all="raise"):
                a = np.asarray(k.second_derivative(model, c, f, k.CDD_COMPLEX, scheme.delta))
            if np.all(np.isfinite(a)):
                return a
        except (FloatingPointError, ValueError, TypeError):
            pass
        warnings.warn("complex-step evaluation failed; falling back to central differences",
                      RuntimeWarning, stacklevel=2)
        scheme = CentralDifference()
    return np.asarray(k.second_derivative(model, c, f, scheme.code(k), scheme.delta))


def _norm_f(m: Mechanism, c):
    f = m.rhs(c)
    nf = float(np.linalg.norm(f))
    if nf == 0.0:
        raise SingularPointError("criterion is undefined at a fixed point (f = 0)")
    return f, nf


def phi_A(m: Mechanism, c, scheme: DerivativeScheme | None = None) -> float:
    """``|J_f f|_2 / |f|_2``."""
    c = _vec(m, c)
    _, nf = _norm_f(m, c)
    a = directional_second_derivative(m, c, scheme)
    return float(np.linalg.norm(a) / nf)


def _weights(c, floor):
    if np.any(c <= 0):
        log.warning("W-norm weights floored at %.1e for nonpositive concentrations %s", floor,
                    np.flatnonzero(c <= 0).tolist())
    elif np.any(c < floor):
        log.debug("W-norm weight floor %.1e active", floor)
    return 1.0 / np.maximum(c, floor)


def phi_B(m: Mechanism, c, floor: float = DEFAULT_FLOOR, scheme: DerivativeScheme | None = None) -> float:
    """``|J_f f|_W / |f|_W`` with ``W = diag(1 / c)``."""
    c = _vec(m, c)
    f, _ = _norm_f(m, c)
    w = _weights(c, floor)
    a = directional_second_derivative(m, c, scheme)
    return float(np.sqrt(np.sum(w * a * a)) / np.sqrt(np.sum(w * f * f)))


def curvature(cdot: np.ndarray, cddot: np.ndarray) -> float:
    """Curvature of a curve from its first and second derivatives in any parametrization."""
    cdot = np.asarray(cdot, dtype=float)
    cddot = np.asarray(cddot, dtype=float)
    s2 = cdot @ cdot
    if s2 == 0.0:
        raise SingularPointError("curvature undefined for zero velocity")
    v = cddot / s2 - (cdot @ cddot) * cdot / (s2 * s2)
    return float(np.linalg.norm(v))


def local_curvature(m: Mechanism, c, scheme: DerivativeScheme | None = None) -> float:
    c = _vec(m, c)
    f, _ = _norm_f(m, c)
    return curvature(f, directional_second_derivative(m, c, scheme))


def objective_integrand(kind: CriterionKind, m: Mechanism, c) -> float:
    """The time-parametrized integrand whose integral is the objective.

    A: ``|c''|_2``; B: ``|c''|_W``; C: ``kappa |c'|_2``; metric: ``|c''|_A``.
    """
    c = _vec(m, c)
    a = directional_second_derivative(m, c, kind.scheme)
    if kind.name == "A":
        return float(np.linalg.norm(a))
    if kind.name == "B":
        return float(np.sqrt(np.sum(_weights(c, kind.floor) * a * a)))
    if kind.name == "metric":
        return float(np.sqrt(max(a @ kind.weight @ a, 0.0)))
    f, nf = _norm_f(m, c)
    return curvature(f, a) * nf
