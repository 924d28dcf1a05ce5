"""Intrinsic low-dimensional manifold (ILDM) points.

An ILDM point of dimension ``m`` is a composition at which the vector field
has no component in the fast invariant subspace of the Jacobian.  Both the
Jacobian and the vector field are expressed in coordinates of the null
space of the conservation relations, so conserved directions (zero
eigenvalues) never enter the splitting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import schur

from .mechanism import Mechanism
from .simopt import AffineSlice, default_bounds

__all__ = ["IldmError", "DegenerateSplitError", "IldmSpec", "IldmPoint", "fast_subspace",
           "ildm_residual", "ildm_point", "ildm_curve"]


class IldmError(RuntimeError):
    """Newton iteration for the ILDM equation failed."""


class DegenerateSplitError(IldmError):
    """The slow/fast split falls between eigenvalues with equal real parts."""


@dataclass(frozen=True, eq=False)
class IldmSpec:
    """ILDM problem: manifold dimension and the progress values that pin the point.

    ``tol`` bounds the fast-subspace residual ``|Z_f^T f|`` relative to
    ``max(|f|, 1)``.
    """

    mechanism: Mechanism
    dimension: int
    fixed: Mapping
    constants: Sequence[float] | None = None
    tol: float = 1e-9
    max_iter: int = 50
    split_tol: float = 1e-10

    def __post_init__(self):
        m = self.mechanism
        if self.constants is not None:
            m = m.with_constants(self.constants)
            object.__setattr__(self, "mechanism", m)
        fixed = {m.index(k): float(v) for k, v in dict(self.fixed).items()}
        object.__setattr__(self, "fixed", dict(sorted(fixed.items())))
        dof = m.null_basis.shape[1]
        if not 1 <= self.dimension < dof:
            raise ValueError(f"ILDM dimension must satisfy 1 <= m < {dof}")
        if len(fixed) != self.dimension:
            raise ValueError(f"a {self.dimension}-dimensional ILDM needs {self.dimension} progress values,"
                             f" got {len(fixed)}")
        if not self.tol > 0:
            raise ValueError("tol must be positive")

    def with_fixed(self, fixed: Mapping) -> "IldmSpec":
        return IldmSpec(self.mechanism, self.dimension, fixed, None, self.tol, self.max_iter,
                        self.split_tol)


@dataclass(eq=False)
class IldmPoint:
    composition: np.ndarray
    residual: float
    relative_residual: float
    eigenvalues: np.ndarray  # reduced spectrum, descending real part
    spectral_gap: float
    iterations: int
    fixed: dict = field(default_factory=dict)

    def to_dict(self, names=None) -> dict:
        names = names or [f"c_{i + 1}" for i in range(len(self.composition))]
        return {
            "composition": dict(zip(names, map(float, self.composition))),
            "residual": self.residual,
            "relative_residual": self.relative_residual,
            "eigenvalues_real": [float(v) for v in self.eigenvalues.real],
            "eigenvalues_imag": [float(v) for v in self.eigenvalues.imag],
            "spectral_gap": self.spectral_gap,
            "iterations": self.iterations,
        }


def _sorted_spectrum(J):
    ev = np.linalg.eigvals(J)
    return ev[np.lexsort((-ev.imag, -ev.real))]


def fast_subspace(m: Mechanism, c, dimension: int, split_tol: float = 1e-10):
    """Orthonormal basis of the fast left invariant subspace in reduced coordinates.

    Returns ``(Zf, eigenvalues)`` where ``Zf`` has ``r - dimension`` columns
    (``r`` = number of reduced coordinates) and ``Zf.T @ Jr = Tf @ Zf.T``.
    """
    V = m.null_basis
    Jr = V.T @ m.jacobian(np.asarray(c, dtype=float)) @ V
    ev = _sorted_spectrum(Jr)
    r = ev.size
    slow, fast = ev[dimension - 1], ev[dimension]
    gap = slow.real - fast.real
    if gap <= split_tol * max(abs(slow.real), abs(fast.real), 1e-300):
        raise DegenerateSplitError(
            f"eigenvalues {dimension} ({slow:.6g}) and {dimension + 1} ({fast:.6g}) have equal real "
            "parts; the slow/fast split is ambiguous")
    threshold = 0.5 * (slow.real + fast.real)
    T, Q, sdim = schur(Jr, output="real", sort=lambda re, im: re > threshold)
    if sdim != dimension:
        raise DegenerateSplitError(f"ordered Schur form selected {sdim} slow eigenvalues, expected {dimension}")
    # Q^T Jr = T Q^T and T is block upper triangular, so the trailing rows of
    # Q^T span the left invariant subspace of the fast block
    return Q[:, dimension:], ev if r else ev


def ildm_residual(m: Mechanism, c, dimension: int, split_tol: float = 1e-10) -> float:
    """``|Z_f^T f(c)|`` for an orthonormal fast basis ``Z_f``."""
    Zf, _ = fast_subspace(m, c, dimension, split_tol)
    return float(np.linalg.norm(Zf.T @ (m.null_basis.T @ m.rhs(np.asarray(c, dtype=float)))))


def _projected(m, V, c, dimension, split_tol):
    Zf, ev = fast_subspace(m, c, dimension, split_tol)
    f = m.rhs(c)
    # projector form is independent of the basis chosen inside the subspace
    return Zf @ (Zf.T @ (V.T @ f)), float(np.linalg.norm(f)), ev


def ildm_point(spec: IldmSpec, initial=None) -> IldmPoint:
    """Solve ``Z_f^T(c) f(c) = 0`` at the progress values of ``spec`` by damped Gauss-Newton.

    Parameters
    ----------
    spec : IldmSpec
    initial : array_like, optional
        Starting composition (for example a trajectory-optimization
        solution); projected onto the fixed values and conservation
        relations.  Defaults to an interior point of the feasible set.

    Raises
    ------
    DegenerateSplitError
        When the split eigenvalues share their real part.
    IldmError
        When the iteration stalls above the tolerance or leaves the
        nonnegative orthant.
    """
    m = spec.mechanism
    V = m.null_basis
    sl = AffineSlice(m, spec.fixed, default_bounds(m))
    if sl.dim != V.shape[1] - spec.dimension:
        raise ValueError("progress values must be independent of the conservation relations")
    z = np.zeros(sl.dim) if initial is None else sl.coordinates(initial)
    c = sl.compose(z)
    F, fn, ev = _projected(m, V, c, spec.dimension, spec.split_tol)
    res = float(np.linalg.norm(F))
    it = 0
    for it in range(1, spec.max_iter + 1):
        if res <= spec.tol * max(fn, 1.0):
            break
        # central-difference Jacobian of the projected residual
        Jz = np.empty((F.size, sl.dim))
        for k in range(sl.dim):
            h = 1e-6 * max(abs(z[k]), 1e-3 * sl.scale)
            e = np.zeros(sl.dim)
            e[k] = h
            Fp = _projected(m, V, sl.compose(z + e), spec.dimension, spec.split_tol)[0]
            Fm = _projected(m, V, sl.compose(z - e), spec.dimension, spec.split_tol)[0]
            Jz[:, k] = (Fp - Fm) / (2 * h)
        dz, *_ = np.linalg.lstsq(Jz, -F, rcond=None)
        alpha = 1.0
        while alpha > 1e-10:
            z_new = z + alpha * dz
            c_new = sl.compose(z_new)
            try:
                F_new, fn_new, ev_new = _projected(m, V, c_new, spec.dimension, spec.split_tol)
            except DegenerateSplitError:
                alpha *= 0.5
                continue
            r_new = float(np.linalg.norm(F_new))
            if r_new < res:
                break
            alpha *= 0.5
        else:
            raise IldmError(f"Newton iteration stalled at residual {res:.3e}")
        z, c, F, fn, ev, res = z_new, c_new, F_new, fn_new, ev_new, r_new
    else:
        if res > spec.tol * max(fn, 1.0):
            raise IldmError(f"no convergence in {spec.max_iter} iterations (residual {res:.3e})")
    if np.any(c < -1e-12 * max(1.0, sl.scale)):
        raise IldmError("ILDM point has negative concentrations")
    d = spec.dimension
    gap = abs(ev[d - 1].real / ev[d].real) if ev[d].real != 0 else math.inf
    return IldmPoint(composition=c, residual=res, relative_residual=res / max(fn, 1e-300),
                     eigenvalues=ev, spectral_gap=float(gap), iterations=it, fixed=dict(spec.fixed))


def ildm_curve(spec: IldmSpec, species, values, initial=None, initials=None) -> tuple:
    """ILDM points along one progress variable with warm starts.

    ``initials`` optionally gives one starting composition per value and
    takes precedence over warm starts.  Returns ``(points, errors)`` with
    ``None`` / message entries for failed nodes.
    """
    points, errors = [], []
    prev = initial
    idx = spec.mechanism.index(species)
    for k, v in enumerate(values):
        fixed = {i: val for i, val in spec.fixed.items()}
        fixed[idx] = float(v)
        guess = initials[k] if initials is not None else prev
        try:
            p = ildm_point(spec.with_fixed(fixed), guess)
        except (IldmError, ValueError) as exc:
            points.append(None)
            errors.append(f"{type(exc).__name__}: {exc}")
            continue
        points.append(p)
        errors.append(None)
        prev = p.composition
    return points, errors
