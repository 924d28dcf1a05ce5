"""Pure-Python reference kernels.

The compiled extension ``simtraj._ckernels`` implements the same functions
with the same signatures; :mod:`simtraj._backend` picks one at import time.
Everything in here works on plain numpy arrays and integer codes so that
both implementations can be swapped without touching the callers.
"""

import warnings

import numpy as np
from scipy.linalg import LinAlgWarning, lu_factor as _lu_factor, lu_solve

KIND_DAVIS_SKODJE = 0
KIND_MASS_ACTION = 1
KIND_LINEAR = 2

PHI_NONE = 0
PHI_A = 1
PHI_B = 2
PHI_C = 3
PHI_METRIC = 4

CDD_COMPLEX = 0
CDD_ANALYTIC = 1
CDD_CENTRAL = 2

STOP_HORIZON = 0
STOP_VELOCITY = 1
STOP_PROGRESS = 2

STATUS_HORIZON = 0
STATUS_EVENT = 1
STATUS_MAX_STEPS = -1
STATUS_STEP_TOO_SMALL = -2
STATUS_SINGULAR = -3
STATUS_NONFINITE = -4

EPS = np.finfo(float).eps


class SingularIntegrand(ArithmeticError):
    pass


class Model:
    """Right-hand side and Jacobian of one of the supported model kinds.

    Mass-action data layout: ``idx`` is an ``(R, order)`` integer array of
    reactant species per reaction, padded with ``n`` (a slot that always
    holds 1), ``k`` the rate coefficients, ``nu_net`` the ``(R, n)`` net
    stoichiometry, ``tb`` a 0/1 flag per reaction and ``eff`` the ``(R, n)``
    third-body efficiencies.
    """

    def __init__(self, kind, n, gamma=0.0, matrix=None, idx=None, k=None,
                 nu_net=None, tb=None, eff=None):
        self.kind = int(kind)
        self.n = int(n)
        self.gamma = float(gamma)
        self.matrix = None if matrix is None else np.ascontiguousarray(matrix, dtype=float)
        if self.kind == KIND_MASS_ACTION:
            self.idx = np.ascontiguousarray(idx, dtype=np.intp)
            self.k = np.ascontiguousarray(k, dtype=float)
            self.nu_net = np.ascontiguousarray(nu_net, dtype=float)
            self.tb = np.ascontiguousarray(tb, dtype=np.intp)
            self.eff = np.ascontiguousarray(eff, dtype=float)
            self._has_tb = bool(self.tb.any())

    def rhs(self, c):
        if self.kind == KIND_DAVIS_SKODJE:
            g = self.gamma
            y1, y2 = c[0], c[1]
            d = 1.0 + y1
            out = np.empty(2, dtype=np.result_type(c, float))
            out[0] = -y1
            out[1] = -g * y2 + ((g - 1.0) * y1 + g * y1 * y1) / (d * d)
            return out
        if self.kind == KIND_LINEAR:
            return self.matrix @ c
        ext = np.empty(self.n + 1, dtype=np.result_type(c, float))
        ext[:self.n] = c
        ext[self.n] = 1.0
        rates = self.k * ext[self.idx].prod(axis=1)
        if self._has_tb:
            m = self.eff @ c
            rates = np.where(self.tb != 0, rates * m, rates)
        return self.nu_net.T @ rates

    def jac(self, c):
        n = self.n
        if self.kind == KIND_DAVIS_SKODJE:
            g = self.gamma
            y1 = c[0]
            d = 1.0 + y1
            num = (g - 1.0) * y1 + g * y1 * y1
            return np.array([
                [-1.0, 0.0],
                [((g - 1.0) + 2.0 * g * y1) / (d * d) - 2.0 * num / (d * d * d), -g],
            ])
        if self.kind == KIND_LINEAR:
            return self.matrix.copy()
        ext = np.empty(n + 1)
        ext[:n] = c
        ext[n] = 1.0
        vals = ext[self.idx]
        nr, order = self.idx.shape
        if self._has_tb:
            m = np.where(self.tb != 0, self.eff @ c, 1.0)
        else:
            m = np.ones(nr)
        dr = np.zeros((nr, n + 1))
        rows = np.arange(nr)
        for s in range(order):
            others = np.prod(np.delete(vals, s, axis=1), axis=1)
            np.add.at(dr, (rows, self.idx[:, s]), self.k * others * m)
        if self._has_tb:
            full = self.k * vals.prod(axis=1)
            dr[:, :n] += np.where(self.tb != 0, full, 0.0)[:, None] * self.eff
        return self.nu_net.T @ dr[:, :n]


def second_derivative(model, c, f, scheme, delta):
    """Directional derivative of the vector field along itself, J_f(c) f."""
    if scheme == CDD_ANALYTIC:
        return model.jac(c) @ f
    nf = np.sqrt(f @ f)
    if nf == 0.0:
        return np.zeros_like(f)
    v = f / nf
    if scheme == CDD_COMPLEX:
        return model.rhs(c + 1j * delta * v).imag * (nf / delta)
    h = delta * (1.0 + np.max(np.abs(c)))
    return (model.rhs(c + h * v) - model.rhs(c - h * v)) * (nf / (2.0 * h))


def integrand(model, kind, c, f, floor, metric, scheme, delta):
    if kind == PHI_NONE:
        return 0.0
    a = second_derivative(model, c, f, scheme, delta)
    if kind == PHI_A:
        return float(np.sqrt(a @ a))
    if kind == PHI_B:
        w = 1.0 / np.maximum(c, floor)
        return float(np.sqrt(np.sum(w * a * a)))
    if kind == PHI_METRIC:
        return float(np.sqrt(max(a @ metric @ a, 0.0)))
    nf2 = f @ f
    if nf2 == 0.0:
        raise SingularIntegrand("curvature undefined at a fixed point")
    nf = np.sqrt(nf2)
    v = a / nf - (f @ a) * f / (nf2 * nf)
    return float(np.sqrt(v @ v))


# Radau IIA, order 5 (Hairer & Wanner, Solving ODEs II, sec. IV.8).
S6 = 6.0 ** 0.5
C = np.array([(4.0 - S6) / 10.0, (4.0 + S6) / 10.0, 1.0])
E = np.array([-13.0 - 7.0 * S6, -13.0 + 7.0 * S6, -1.0]) / 3.0
MU_REAL = 3.0 + 3.0 ** (2.0 / 3.0) - 3.0 ** (1.0 / 3.0)
MU_COMPLEX = (3.0 + 0.5 * (3.0 ** (1.0 / 3.0) - 3.0 ** (2.0 / 3.0))
              - 0.5j * (3.0 ** (5.0 / 6.0) + 3.0 ** (7.0 / 6.0)))
T = np.array([
    [0.09443876248897524, -0.14125529502095421, 0.03002919410514742],
    [0.25021312296533332, 0.20412935229379994, -0.38294211275726192],
    [1.0, 1.0, 0.0]])
TI = np.array([
    [4.17871859155190428, 0.32768282076106237, 0.52337644549944951],
    [-4.17871859155190428, -0.32768282076106237, 0.47662355450055044],
    [0.50287263494578682, -2.57192694985560522, 0.59603920482822492]])
TI_REAL = TI[0]
TI_COMPLEX = TI[1] + 1j * TI[2]
P = np.array([
    [13.0 / 3.0 + 7.0 * S6 / 3.0, -23.0 / 3.0 - 22.0 * S6 / 3.0, 10.0 / 3.0 + 5.0 * S6],
    [13.0 / 3.0 - 7.0 * S6 / 3.0, -23.0 / 3.0 + 22.0 * S6 / 3.0, 10.0 / 3.0 - 5.0 * S6],
    [1.0 / 3.0, -8.0 / 3.0, 10.0 / 3.0]])

MIN_FACTOR = 0.2
MAX_FACTOR = 10.0
BISECT_ITERS = 200


def lu_factor(a, **kw):
    # singular iteration matrices show up as non-finite Newton updates
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LinAlgWarning)
        return _lu_factor(a, **kw)


def _rms(x):
    return np.sqrt(np.mean(x * x))


class _System:
    """Augmented system: concentrations plus one quadrature slot."""

    def __init__(self, model, phi_kind, floor, metric, scheme, delta):
        self.model = model
        self.n = model.n
        self.phi_kind = phi_kind
        self.floor = floor
        self.metric = metric
        self.scheme = scheme
        self.delta = delta
        self.nfev = 0
        self.njev = 0

    def fun(self, y):
        self.nfev += 1
        c = y[:self.n]
        f = self.model.rhs(c)
        out = np.empty(self.n + 1)
        out[:self.n] = f
        if callable(self.phi_kind):
            out[self.n] = self.phi_kind(c)
        else:
            out[self.n] = integrand(self.model, self.phi_kind, c, f, self.floor,
                                    self.metric, self.scheme, self.delta)
        return out

    def jac(self, y):
        self.njev += 1
        N = self.n + 1
        J = np.zeros((N, N))
        J[:self.n, :self.n] = self.model.jac(y[:self.n])
        return J


def _event_value(stop_kind, stop_index, stop_value, y, f, n):
    if stop_kind == STOP_VELOCITY:
        return np.sqrt(f[:n] @ f[:n]) - stop_value
    return y[stop_index] - stop_value


def _dense(t_old, h, y_old, Q, t):
    x = (t - t_old) / h
    return y_old + Q @ np.array([x, x * x, x * x * x])


def _initial_step(system, y, f, rtol, atol, max_step):
    scale = atol + np.abs(y) * rtol
    d0 = _rms(y / scale)
    d1 = _rms(f / scale)
    if d0 < 1e-5 or d1 < 1e-5:
        h0 = 1e-6
    else:
        h0 = 0.01 * d0 / d1
    h0 = min(h0, max_step)
    y1 = y + h0 * f
    f1 = system.fun(y1)
    d2 = _rms((f1 - f) / scale) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.25
    return min(100.0 * h0, h1, max_step)


def _collocation(system, y, h, Z0, scale, tol, lu_real, lu_complex, maxiter):
    n = y.shape[0]
    m_real = MU_REAL / h
    m_complex = MU_COMPLEX / h
    W = TI @ Z0
    Z = Z0
    F = np.empty((3, n))
    dW = np.empty_like(W)
    dW_norm_old = None
    rate = None
    converged = False
    k = 0
    for k in range(maxiter):
        for i in range(3):
            F[i] = system.fun(y + Z[i])
        if not np.all(np.isfinite(F)):
            break
        f_real = F.T @ TI_REAL - m_real * W[0]
        f_complex = F.T @ TI_COMPLEX - m_complex * (W[1] + 1j * W[2])
        dW_real = lu_solve(lu_real, f_real, overwrite_b=True, check_finite=False)
        dW_complex = lu_solve(lu_complex, f_complex, overwrite_b=True, check_finite=False)
        dW[0] = dW_real
        dW[1] = dW_complex.real
        dW[2] = dW_complex.imag
        dW_norm = _rms(dW / scale)
        if dW_norm_old is not None:
            rate = dW_norm / dW_norm_old
        if rate is not None and (rate >= 1.0 or rate ** (maxiter - k) / (1.0 - rate) * dW_norm > tol):
            break
        W = W + dW
        Z = T @ W
        if dW_norm == 0.0 or (rate is not None and rate / (1.0 - rate) * dW_norm < tol):
            converged = True
            break
        dW_norm_old = dW_norm
    return converged, k + 1, Z, rate


def _predict_factor(h_abs, h_abs_old, error_norm, error_norm_old):
    if error_norm_old is None or h_abs_old is None or error_norm == 0.0:
        multiplier = 1.0
    else:
        multiplier = h_abs / h_abs_old * (error_norm_old / error_norm) ** 0.25
    with np.errstate(divide="ignore"):
        return min(1.0, multiplier) * error_norm ** -0.25


def solve(model, c0, t_end, stop_kind, stop_index, stop_value, phi_kind, floor,
          metric, scheme, delta, rtol, atol, first_step, max_step, max_steps,
          newton_tol, frozen):
    """Integrate the augmented system with Radau IIA(5).

    ``phi_kind`` is one of the ``PHI_*`` codes or a Python callable of the
    concentration vector.  ``frozen`` is either ``None`` (adaptive step
    control) or an increasing
    array of step end times to reuse verbatim; past its last entry the
    integration continues with the last frozen step length.

    Returns a dict with keys ``status``, ``t``, ``y``, ``h``, ``Q``,
    ``grid``, ``t_event``, ``nfev``, ``njev``, ``nlu``, ``message``.
    """
    system = _System(model, phi_kind, floor, metric, scheme, delta)
    n = model.n
    N = n + 1
    y = np.empty(N)
    y[:n] = c0
    y[n] = 0.0
    t = 0.0
    ts = [t]
    ys = [y.copy()]
    hs = []
    Qs = []
    grid = [t]
    nlu = 0
    status = None
    message = ""
    t_event = np.nan

    if newton_tol <= 0.0:
        newton_tol = max(10.0 * EPS / rtol, min(0.03, rtol ** 0.5))
    tight = newton_tol < 1e-5
    maxiter = 12 if tight else 6

    try:
        f = system.fun(y)
    except SingularIntegrand as exc:
        return _result(-3, str(exc), ts, ys, hs, Qs, grid, t_event, system, nlu)
    if not np.all(np.isfinite(f)):
        return _result(-4, "non-finite derivative at the initial state", ts, ys, hs, Qs,
                       grid, t_event, system, nlu)

    g_old = _event_value(stop_kind, stop_index, stop_value, y, f, n) if stop_kind != STOP_HORIZON else 0.0
    if stop_kind == STOP_VELOCITY and g_old <= 0.0:
        t_event = 0.0
        return _result(1, "velocity norm already below threshold", ts, ys, hs, Qs, grid,
                       t_event, system, nlu)

    horizon = t_end if np.isfinite(t_end) else np.inf
    frozen_times = None if frozen is None else np.asarray(frozen, dtype=float)
    if frozen_times is not None and frozen_times.size < 2:
        frozen_times = None
    frozen_pos = 1
    last_frozen_h = None
    if frozen_times is not None and frozen_times.size >= 2:
        last_frozen_h = frozen_times[-1] - frozen_times[-2]

    if frozen_times is None:
        h_abs = first_step if first_step > 0 else _initial_step(system, y, f, rtol, atol, max_step)
    else:
        h_abs = last_frozen_h if last_frozen_h is not None else max_step
    h_abs_old = None
    error_norm_old = None
    J = system.jac(y)
    current_jac = True
    lu_real = None
    lu_complex = None
    prev = None  # (t_old, h, y_old, Q) of last accepted step, for the Newton predictor
    nsteps = 0

    while status is None:
        if nsteps >= max_steps:
            status, message = -1, "maximum number of steps exceeded"
            break
        forced = False
        if frozen_times is not None:
            if frozen_pos < frozen_times.size:
                t_target = frozen_times[frozen_pos]
                forced = True
            elif last_frozen_h is not None:
                t_target = t + last_frozen_h
                forced = True
        min_step = 10.0 * abs(np.nextafter(t, np.inf) - t)
        step_accepted = False
        rejected = False
        while not step_accepted:
            if forced:
                h = t_target - t
                if t + h > horizon:
                    h = horizon - t
            else:
                if h_abs < min_step:
                    status, message = -2, "step size fell below the floating point resolution"
                    break
                h = min(h_abs, max_step)
                if t + h > horizon:
                    h = horizon - t
            t_new = t + h if t + h < horizon else horizon
            h = t_new - t
            if h <= 0.0:
                status, message = -2, "zero step"
                break
            if lu_real is None or forced:
                if forced and not current_jac:
                    J = system.jac(y)
                    current_jac = True
                lu_real = lu_factor(MU_REAL / h * np.eye(N) - J, overwrite_a=True, check_finite=False)
                lu_complex = lu_factor(MU_COMPLEX / h * np.eye(N) - J, overwrite_a=True,
                                       check_finite=False)
                nlu += 2
            if prev is None:
                Z0 = np.zeros((3, N))
            else:
                Z0 = np.array([_dense(prev[0], prev[1], prev[2], prev[3], t + h * c) for c in C]) - y
            scale = atol + np.abs(y) * rtol
            try:
                converged, n_iter, Z, rate = _collocation(system, y, h, Z0, scale, newton_tol,
                                                          lu_real, lu_complex, maxiter)
            except SingularIntegrand as exc:
                status, message = -3, str(exc)
                break
            if not converged:
                if forced:
                    if not current_jac:
                        J = system.jac(y)
                        current_jac = True
                        continue
                    # split the frozen step; keeps the grid a deterministic function of inputs
                    mid = t + 0.5 * h
                    if frozen_times is not None and frozen_pos < frozen_times.size:
                        frozen_times = np.insert(frozen_times, frozen_pos, mid)
                    else:
                        last_frozen_h = 0.5 * h
                    t_target = mid
                    lu_real = None
                    continue
                if current_jac:
                    h_abs *= 0.5
                    lu_real = None
                    lu_complex = None
                    continue
                J = system.jac(y)
                current_jac = True
                lu_real = None
                continue

            y_new = y + Z[-1]
            if forced:
                error_norm = 0.0
                step_accepted = True
                safety = 1.0
            else:
                ZE = Z.T @ E / h
                error = lu_solve(lu_real, f + ZE, check_finite=False)
                scale = atol + np.maximum(np.abs(y), np.abs(y_new)) * rtol
                error_norm = _rms(error / scale)
                safety = 0.9 * (2 * maxiter + 1) / (2 * maxiter + n_iter)
                if rejected and error_norm > 1.0:
                    try:
                        error = lu_solve(lu_real, system.fun(y + error) + ZE, check_finite=False)
                    except SingularIntegrand:
                        error = np.full(N, np.inf)
                    error_norm = _rms(error / scale)
                if not np.isfinite(error_norm):
                    error_norm = np.inf
                if error_norm > 1.0:
                    factor = _predict_factor(h_abs, h_abs_old, error_norm, error_norm_old)
                    h_abs = abs(h) * max(MIN_FACTOR, safety * factor)
                    lu_real = None
                    lu_complex = None
                    rejected = True
                else:
                    step_accepted = True
        if status is not None:
            break

        nsteps += 1
        if forced:
            if frozen_times is not None and frozen_pos < frozen_times.size:
                frozen_pos += 1
            recompute_jac = False
            lu_real = None
        else:
            recompute_jac = n_iter > 2 and rate is not None and rate > 1e-3
            factor = _predict_factor(abs(h), h_abs_old, error_norm, error_norm_old)
            factor = min(MAX_FACTOR, safety * factor)
            if not recompute_jac and factor < 1.2:
                factor = 1.0
            else:
                lu_real = None
                lu_complex = None
            h_abs_old = abs(h)
            error_norm_old = error_norm
            h_abs = abs(h) * factor

        try:
            f_new = system.fun(y_new)
        except SingularIntegrand as exc:
            status, message = -3, str(exc)
            break
        if not np.all(np.isfinite(f_new)) or not np.all(np.isfinite(y_new)):
            status, message = -4, "non-finite state"
            break
        Q = Z.T @ P
        prev = (t, h, y.copy(), Q)
        if recompute_jac:
            J = system.jac(y_new)
            current_jac = True
        else:
            current_jac = False

        t_old, y_old = t, y
        t, y, f = t_new, y_new, f_new
        ts.append(t)
        ys.append(y.copy())
        hs.append(h)
        Qs.append(Q)
        grid.append(t)

        if stop_kind != STOP_HORIZON:
            g_new = _event_value(stop_kind, stop_index, stop_value, y, f, n)
            crossed = (g_old > 0.0 >= g_new) if stop_kind == STOP_VELOCITY else (
                (g_old > 0.0 >= g_new) or (g_old < 0.0 <= g_new))
            if crossed:
                lo, hi = t_old, t
                g_lo = g_old
                for _ in range(BISECT_ITERS):
                    mid = 0.5 * (lo + hi)
                    if mid <= lo or mid >= hi:
                        break
                    y_mid = _dense(t_old, h, y_old, Q, mid)
                    f_mid = model.rhs(y_mid[:n])
                    g_mid = _event_value(stop_kind, stop_index, stop_value, y_mid, f_mid, n)
                    if g_mid == 0.0:
                        lo = hi = mid
                        break
                    if (g_mid > 0.0) == (g_lo > 0.0):
                        lo, g_lo = mid, g_mid
                    else:
                        hi = mid
                t_event = hi
                ts[-1] = t_event
                ys[-1] = _dense(t_old, h, y_old, Q, t_event)
                status, message = 1, "stop event triggered"
                break
            g_old = g_new
        if t >= horizon:
            status, message = 0, "reached the time horizon"
            break
        if frozen_times is None and t + min_step >= horizon:
            status, message = 0, "reached the time horizon"
            break

    return _result(status, message, ts, ys, hs, Qs, grid, t_event, system, nlu)


def _result(status, message, ts, ys, hs, Qs, grid, t_event, system, nlu):
    N = system.n + 1
    return {
        "status": int(status),
        "message": message,
        "t": np.asarray(ts, dtype=float),
        "y": np.asarray(ys, dtype=float).reshape(-1, N),
        "h": np.asarray(hs, dtype=float),
        "Q": np.asarray(Qs, dtype=float).reshape(-1, N, 3),
        "grid": np.asarray(grid, dtype=float),
        "t_event": float(t_event),
        "nfev": system.nfev,
        "njev": system.njev,
        "nlu": nlu,
    }
