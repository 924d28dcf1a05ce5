"""Quasi-Newton minimization over a polytope ``{z : A z >= b}``.

An active-set method: the search direction is the BFGS direction restricted
to the null space of the working set, a ratio test keeps iterates feasible,
and constraints whose multipliers turn negative are released.  Gradients
are supplied by the caller (finite differences of the shooting map).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import minimize

log = logging.getLogger(__name__)

EPS = np.finfo(float).eps


@dataclass
class OptimizeResult:
    z: np.ndarray
    fun: float
    grad: np.ndarray
    iterations: int
    nfev: int
    converged: bool
    kkt_residual: float
    message: str
    hessian_min_eig: float = math.nan
    active: list = field(default_factory=list)
    history: list = field(default_factory=list)
    used_fallback: bool = False


class _Budget(Exception):
    pass


def _reduced_basis(A, working, k):
    if not working:
        return np.eye(k)
    return null_space(A[working])


def _multipliers(A, working, g):
    if not working:
        return np.zeros(0)
    lam, *_ = np.linalg.lstsq(A[working].T, g, rcond=None)
    return lam


def _ratio_test(A, b, z, d, working, tol):
    """Largest step along ``d`` keeping ``A z >= b``, and the blocking row."""
    alpha, block = math.inf, None
    Ad = A @ d
    slack = A @ z - b
    for i in range(A.shape[0]):
        if i in working or Ad[i] >= -tol * max(1.0, np.abs(A[i]).sum() * np.abs(d).max()):
            continue
        a = max(slack[i], 0.0) / -Ad[i]
        if a < alpha:
            alpha, block = a, i
    return alpha, block


def minimize_polytope(fun, grad, z0, A, b, *, scale=1.0, gtol=1e-6, xtol=1e-10, ftol=1e-6,
                      ftol_window=10, max_iter=200, max_fev=5000, fallback=True,
                      fd_step_hint=None) -> OptimizeResult:
    """Minimize ``fun`` subject to ``A z >= b`` starting from feasible ``z0``.

    Parameters
    ----------
    fun : callable
        ``fun(z) -> float``; may raise ``ArithmeticError`` or return ``inf``
        at points where the objective is undefined.
    grad : callable
        ``grad(z, f, h) -> ndarray`` where ``f = fun(z)`` and ``h`` caps the
        difference step (``None`` for the default).
    scale : float
        Typical size of ``z``; used to make the stopping tests dimensionless.
    gtol, xtol : float
        Stop when the scaled projected gradient ``|P g| * scale / max(|f|, tiny)``
        falls below ``gtol`` or the step is shorter than ``xtol * scale``.
    ftol, ftol_window : float, int
        Also stop when ``f`` decreased by less than ``ftol * |f|`` over the
        last ``ftol_window`` iterations: the quasi-Newton model cannot follow
        a kinked valley floor, so the fallback polishes the point (or, without
        fallback, the point is accepted).
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float)
    z = np.array(z0, dtype=float)
    k = z.size
    nfev = [0]

    def f_eval(x):
        if nfev[0] >= max_fev:
            raise _Budget()
        nfev[0] += 1
        try:
            v = float(fun(x))
        except ArithmeticError:
            return math.inf
        return v if math.isfinite(v) else math.inf

    history = []
    if k == 0:
        f = f_eval(z)
        return OptimizeResult(z, f, np.zeros(0), 0, nfev[0], True, 0.0, "no free variables")

    feas_tol = 1e-12 * max(1.0, scale)
    working = [i for i in range(A.shape[0]) if A[i] @ z - b[i] <= feas_tol * np.abs(A[i]).sum()]
    f = f_eval(z)
    if not math.isfinite(f):
        raise ValueError("objective is not finite at the starting point")
    g = grad(z, f, None)
    if not np.all(np.isfinite(g)):
        raise ValueError("gradient is not finite at the starting point")
    capped = False
    H = None  # Hessian approximation, initialized after the first step
    last_step = None
    converged = False
    message = "iteration limit reached"
    it = 0
    fscale = lambda v: max(abs(v), 1e-300)  # noqa: E731
    pg_norm = math.inf

    try:
        for it in range(1, max_iter + 1):
            # release constraints with negative multipliers
            while True:
                Z = _reduced_basis(A, working, k)
                pg = Z @ (Z.T @ g) if Z.size else np.zeros(k)
                pg_norm = float(np.linalg.norm(pg))
                lam = _multipliers(A, working, g)
                if lam.size and np.min(lam) < 0 and pg_norm * scale / fscale(f) <= max(gtol, 1e-3):
                    drop = working[int(np.argmin(lam))]
                    working.remove(drop)
                    continue
                break
            history.append((it, f, pg_norm))
            if pg_norm * scale / fscale(f) <= gtol and (not lam.size or np.min(lam) >= 0):
                if capped:
                    # a shortened difference step can underflow; confirm with the default one
                    g = grad(z, f, None)
                    capped = False
                    if not np.all(np.isfinite(g)):
                        message = "line search failed: gradient not finite"
                        break
                    continue
                converged, message = True, "projected gradient below tolerance"
                break
            if Z.size == 0:
                # vertex with nonnegative multipliers
                converged, message = True, "optimal vertex"
                break
            gr = Z.T @ g
            if H is None:
                Hr = np.eye(Z.shape[1]) * (np.linalg.norm(gr) / (0.1 * scale))
            else:
                Hr = Z.T @ H @ Z
            try:
                dr = -np.linalg.solve(Hr, gr)
            except np.linalg.LinAlgError:
                dr = -gr / np.linalg.norm(gr) * 0.1 * scale
            if gr @ dr >= 0:  # not a descent direction, restart from steepest descent
                H = None
                dr = -gr * (0.1 * scale / np.linalg.norm(gr))
            d = Z @ dr
            alpha_max, block = _ratio_test(A, b, z, d, working, 1e-14)
            alpha = min(1.0, alpha_max)
            slope = g @ d
            accepted = False
            while alpha * np.linalg.norm(d) > 0.1 * EPS * max(np.linalg.norm(z), scale):
                z_new = z + alpha * d
                f_new = f_eval(z_new)
                if f_new <= f + 1e-4 * alpha * slope:
                    accepted = True
                    break
                # safeguarded quadratic interpolation
                if math.isfinite(f_new):
                    denom = 2.0 * (f_new - f - alpha * slope)
                    a_q = -slope * alpha * alpha / denom if denom > 0 else 0.5 * alpha
                    alpha = min(max(a_q, 0.1 * alpha), 0.5 * alpha)
                else:
                    alpha *= 0.1
            if not accepted:
                if H is not None:
                    H = None  # retry once with steepest descent
                    continue
                if last_step is not None and last_step <= 1e-6 * scale:
                    converged, message = True, "no further decrease at the resolution limit"
                else:
                    message = "line search failed"
                break
            hit = alpha_max <= 1.0 and alpha >= alpha_max * (1 - 1e-12) and block is not None
            if hit:
                z_new = z + alpha_max * d
                # snap onto the blocking face
                row = A[block]
                z_new = z_new + row * (b[block] - row @ z_new) / (row @ row)
                f_new = f_eval(z_new)
                working.append(block)
            s = z_new - z
            last_step = float(np.linalg.norm(s))
            hint = None if fd_step_hint is None else fd_step_hint(last_step)
            g_new = grad(z_new, f_new, hint)
            capped = hint is not None
            if not np.all(np.isfinite(g_new)):
                z, f = z_new, f_new
                message = "line search failed: gradient not finite"
                break
            y = g_new - g
            # damped BFGS update (Powell) keeps H positive definite
            if H is None:
                sy = s @ y
                H = np.eye(k) * (max(sy, EPS * (y @ y)) / max(s @ s, 1e-300) if sy > 0 else
                                 np.linalg.norm(g_new) / (0.1 * scale))
            Hs = H @ s
            sHs = s @ Hs
            sy = s @ y
            if sHs > 0:
                theta = 1.0 if sy >= 0.2 * sHs else 0.8 * sHs / (sHs - sy)
                r = theta * y + (1 - theta) * Hs
                sr = s @ r
                if sr > 0:
                    H = H - np.outer(Hs, Hs) / sHs + np.outer(r, r) / sr
            small_step = last_step <= xtol * scale
            small_change = abs(f - f_new) <= 10 * EPS * fscale(f)
            z, f, g = z_new, f_new, g_new
            if small_step and small_change:
                converged, message = True, "step below tolerance"
                break
            if len(history) > ftol_window and history[-ftol_window][1] - f <= ftol * fscale(f):
                message = "stalled: relative decrease below ftol"
                converged = not fallback
                break
    except _Budget:
        message = "function evaluation budget exhausted"

    used_fallback = False
    if not converged and fallback and message.startswith(("line search", "stalled")):
        z_fb, f_fb, ok = _nelder_mead(f_eval, z, A, b, scale, xtol, 0.1 * ftol * fscale(f),
                                      max(200, 100 * k), nfev, max_fev)
        used_fallback = True
        if f_fb <= f:
            if f_fb < f:
                z, f = z_fb, f_fb
                g_fb = grad(z, f, None)
                g = g_fb if np.all(np.isfinite(g_fb)) else np.full(k, np.nan)
            converged = ok
            message = "Nelder-Mead fallback " + ("converged" if ok else "stopped")
    # final multiplier cleanup for the residual
    Z = _reduced_basis(A, [i for i in working if A[i] @ z - b[i] <= feas_tol * np.abs(A[i]).sum() * 10], k)
    pg = Z @ (Z.T @ g) if Z.size else np.zeros(k)
    kkt = float(np.linalg.norm(pg))
    hmin = math.nan
    if H is not None and Z.size:
        ev = np.linalg.eigvalsh(Z.T @ H @ Z)
        hmin = float(ev.min()) * scale * scale / fscale(f)
    return OptimizeResult(z, f, g, it, nfev[0], converged, kkt, message, hmin, list(working), history,
                          used_fallback)


def _nelder_mead(f_eval, z, A, b, scale, xtol, fatol, max_iter, nfev, max_fev):
    def penalized(x):
        if np.any(A @ x - b < -1e-13 * max(1.0, scale)):
            return math.inf
        try:
            return f_eval(x)
        except _Budget:
            return math.inf

    k = z.size
    simplex = [z]
    for i in range(k):
        step = np.zeros(k)
        step[i] = 1e-3 * scale
        cand = z + step
        if np.any(A @ cand - b < 0):
            cand = z - step
        simplex.append(cand)
    res = minimize(penalized, z, method="Nelder-Mead",
                   options={"initial_simplex": np.array(simplex), "xatol": xtol * scale,
                            "fatol": fatol, "maxiter": max_iter, "maxfev": max(1, max_fev - nfev[0])})
    return np.asarray(res.x), float(res.fun), bool(res.success)
