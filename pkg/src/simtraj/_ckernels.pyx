# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False, cpow=True
"""Compiled kernels: model evaluation, criteria integrands and the Radau IIA(5) loop.

Mirrors :mod:`simtraj._pykernels` function for function.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, pow, isfinite, nextafter, INFINITY, NAN
from libc.stdlib cimport malloc, free
from libc.string cimport memcpy, memset

from ._pykernels import (KIND_DAVIS_SKODJE, KIND_MASS_ACTION, KIND_LINEAR,
                         PHI_NONE, PHI_A, PHI_B, PHI_C, PHI_METRIC,
                         CDD_COMPLEX, CDD_ANALYTIC, CDD_CENTRAL,
                         STOP_HORIZON, STOP_VELOCITY, STOP_PROGRESS,
                         STATUS_HORIZON, STATUS_EVENT, STATUS_MAX_STEPS,
                         STATUS_STEP_TOO_SMALL, STATUS_SINGULAR, STATUS_NONFINITE,
                         SingularIntegrand)

cnp.import_array()

ctypedef fused scalar_t:
    double
    double complex

cdef double EPS = np.finfo(float).eps

# Radau IIA(5) coefficients, identical to the pure-Python kernel
cdef double S6 = 6.0 ** 0.5
cdef double C_[3]
C_[0] = (4.0 - S6) / 10.0
C_[1] = (4.0 + S6) / 10.0
C_[2] = 1.0
cdef double E_[3]
E_[0] = (-13.0 - 7.0 * S6) / 3.0
E_[1] = (-13.0 + 7.0 * S6) / 3.0
E_[2] = -1.0 / 3.0
cdef double MU_REAL = 3.0 + 3.0 ** (2.0 / 3.0) - 3.0 ** (1.0 / 3.0)
cdef double complex MU_COMPLEX = (3.0 + 0.5 * (3.0 ** (1.0 / 3.0) - 3.0 ** (2.0 / 3.0))
                                  - 0.5j * (3.0 ** (5.0 / 6.0) + 3.0 ** (7.0 / 6.0)))
cdef double T_[3][3]
T_[0][:] = [0.09443876248897524, -0.14125529502095421, 0.03002919410514742]
T_[1][:] = [0.25021312296533332, 0.20412935229379994, -0.38294211275726192]
T_[2][:] = [1.0, 1.0, 0.0]
cdef double TI_[3][3]
TI_[0][:] = [4.17871859155190428, 0.32768282076106237, 0.52337644549944951]
TI_[1][:] = [-4.17871859155190428, -0.32768282076106237, 0.47662355450055044]
TI_[2][:] = [0.50287263494578682, -2.57192694985560522, 0.59603920482822492]
cdef double P_[3][3]
P_[0][:] = [13.0 / 3.0 + 7.0 * S6 / 3.0, -23.0 / 3.0 - 22.0 * S6 / 3.0, 10.0 / 3.0 + 5.0 * S6]
P_[1][:] = [13.0 / 3.0 - 7.0 * S6 / 3.0, -23.0 / 3.0 + 22.0 * S6 / 3.0, 10.0 / 3.0 - 5.0 * S6]
P_[2][:] = [1.0 / 3.0, -8.0 / 3.0, 10.0 / 3.0]

cdef double MIN_FACTOR = 0.2
cdef double MAX_FACTOR = 10.0
cdef int BISECT_ITERS = 200


cdef class Model:
    cdef public int kind
    cdef public int n
    cdef public double gamma
    cdef int nr, order, has_tb
    cdef double[:, ::1] matrix_
    cdef Py_ssize_t[:, ::1] idx
    cdef double[::1] k
    cdef double[:, ::1] nu_net
    cdef Py_ssize_t[::1] tb
    cdef double[:, ::1] eff
    # scratch
    cdef double* w1
    cdef double* w2
    cdef double* w3
    cdef double* wj
    cdef double complex* z1
    cdef double complex* z2

    def __cinit__(self, *args, **kwargs):
        self.w1 = NULL
        self.w2 = NULL
        self.w3 = NULL
        self.wj = NULL
        self.z1 = NULL
        self.z2 = NULL

    def __init__(self, kind, n, gamma=0.0, matrix=None, idx=None, k=None,
                 nu_net=None, tb=None, eff=None):
        self.kind = int(kind)
        self.n = int(n)
        self.gamma = float(gamma)
        self.nr = 0
        self.order = 0
        self.has_tb = 0
        if self.kind == KIND_LINEAR:
            self.matrix_ = np.ascontiguousarray(matrix, dtype=float)
        elif self.kind == KIND_MASS_ACTION:
            self.idx = np.ascontiguousarray(idx, dtype=np.intp)
            self.k = np.ascontiguousarray(k, dtype=float)
            self.nu_net = np.ascontiguousarray(nu_net, dtype=float)
            self.tb = np.ascontiguousarray(tb, dtype=np.intp)
            self.eff = np.ascontiguousarray(eff, dtype=float)
            self.nr = self.idx.shape[0]
            self.order = self.idx.shape[1]
            self.has_tb = 1 if np.any(np.asarray(tb)) else 0
        elif self.kind != KIND_DAVIS_SKODJE:
            raise ValueError(f"unknown model kind {kind}")
        cdef int m = self.n + 1
        self.w1 = <double*> malloc(m * sizeof(double))
        self.w2 = <double*> malloc(m * sizeof(double))
        self.w3 = <double*> malloc(m * sizeof(double))
        self.wj = <double*> malloc(m * m * sizeof(double))
        self.z1 = <double complex*> malloc(m * sizeof(double complex))
        self.z2 = <double complex*> malloc(m * sizeof(double complex))
        if not (self.w1 and self.w2 and self.w3 and self.wj and self.z1 and self.z2):
            raise MemoryError()

    def __dealloc__(self):
        free(self.w1)
        free(self.w2)
        free(self.w3)
        free(self.wj)
        free(self.z1)
        free(self.z2)

    @property
    def matrix(self):
        return None if self.kind != KIND_LINEAR else np.asarray(self.matrix_)

    def __reduce__(self):
        if self.kind == KIND_MASS_ACTION:
            return (Model, (self.kind, self.n, self.gamma, None, np.asarray(self.idx),
                            np.asarray(self.k), np.asarray(self.nu_net), np.asarray(self.tb),
                            np.asarray(self.eff)))
        return (Model, (self.kind, self.n, self.gamma, self.matrix))

    def rhs(self, c):
        c = np.asarray(c)
        if np.iscomplexobj(c):
            zc = np.ascontiguousarray(c, dtype=complex)
            zout = np.empty(self.n, dtype=complex)
            _rhs[cython.doublecomplex](self, <double complex*> cnp.PyArray_DATA(zc),
                                       <double complex*> cnp.PyArray_DATA(zout))
            return zout
        dc = np.ascontiguousarray(c, dtype=float)
        out = np.empty(self.n)
        _rhs[double](self, <double*> cnp.PyArray_DATA(dc), <double*> cnp.PyArray_DATA(out))
        return out

    def jac(self, c):
        dc = np.ascontiguousarray(c, dtype=float)
        out = np.empty((self.n, self.n))
        _jac(self, <double*> cnp.PyArray_DATA(dc), <double*> cnp.PyArray_DATA(out))
        return out


cimport cython


cdef void _rhs(Model m, scalar_t* c, scalar_t* out):
    cdef int n = m.n
    cdef int i, j, s
    cdef Py_ssize_t sp
    cdef scalar_t r, M, y1, d
    cdef double g, nu
    if m.kind == 0:
        g = m.gamma
        y1 = c[0]
        d = 1.0 + y1
        out[0] = -y1
        out[1] = -g * c[1] + ((g - 1.0) * y1 + g * y1 * y1) / (d * d)
        return
    if m.kind == 2:
        for i in range(n):
            r = 0.0
            for j in range(n):
                r = r + m.matrix_[i, j] * c[j]
            out[i] = r
        return
    for i in range(n):
        out[i] = 0.0
    for j in range(m.nr):
        r = m.k[j]
        for s in range(m.order):
            sp = m.idx[j, s]
            if sp < n:
                r = r * c[sp]
        if m.has_tb and m.tb[j]:
            M = 0.0
            for i in range(n):
                M = M + m.eff[j, i] * c[i]
            r = r * M
        for i in range(n):
            nu = m.nu_net[j, i]
            if nu != 0.0:
                out[i] = out[i] + nu * r


cdef void _jac(Model m, double* c, double* J):
    """Row-major n x n Jacobian."""
    cdef int n = m.n
    cdef int i, j, s, s2, l
    cdef Py_ssize_t sp
    cdef double g, y1, d, num, M, others, full, nu, v
    if m.kind == 0:
        g = m.gamma
        y1 = c[0]
        d = 1.0 + y1
        num = (g - 1.0) * y1 + g * y1 * y1
        J[0] = -1.0
        J[1] = 0.0
        J[2] = ((g - 1.0) + 2.0 * g * y1) / (d * d) - 2.0 * num / (d * d * d)
        J[3] = -g
        return
    if m.kind == 2:
        for i in range(n):
            for j in range(n):
                J[i * n + j] = m.matrix_[i, j]
        return
    memset(J, 0, n * n * sizeof(double))
    for j in range(m.nr):
        M = 1.0
        if m.has_tb and m.tb[j]:
            M = 0.0
            for i in range(n):
                M += m.eff[j, i] * c[i]
        for s in range(m.order):
            l = <int> m.idx[j, s]
            if l >= n:
                continue
            others = m.k[j] * M
            for s2 in range(m.order):
                if s2 != s:
                    sp = m.idx[j, s2]
                    if sp < n:
                        others *= c[sp]
            for i in range(n):
                nu = m.nu_net[j, i]
                if nu != 0.0:
                    J[i * n + l] += nu * others
        if m.has_tb and m.tb[j]:
            full = m.k[j]
            for s in range(m.order):
                sp = m.idx[j, s]
                if sp < n:
                    full *= c[sp]
            for i in range(n):
                nu = m.nu_net[j, i]
                if nu != 0.0:
                    for l in range(n):
                        v = m.eff[j, l]
                        if v != 0.0:
                            J[i * n + l] += nu * full * v


cdef void _second_derivative(Model m, double* c, double* f, int scheme, double delta, double* out):
    cdef int n = m.n
    cdef int i, j
    cdef double nf = 0.0, h, cmax, s
    if scheme == 1:
        _jac(m, c, m.wj)
        for i in range(n):
            s = 0.0
            for j in range(n):
                s += m.wj[i * n + j] * f[j]
            out[i] = s
        return
    for i in range(n):
        nf += f[i] * f[i]
    nf = sqrt(nf)
    if nf == 0.0:
        for i in range(n):
            out[i] = 0.0
        return
    if scheme == 0:
        for i in range(n):
            m.z1[i] = c[i] + 1j * (delta * (f[i] / nf))
        _rhs[cython.doublecomplex](m, m.z1, m.z2)
        for i in range(n):
            out[i] = m.z2[i].imag * (nf / delta)
        return
    cmax = 0.0
    for i in range(n):
        if fabs(c[i]) > cmax:
            cmax = fabs(c[i])
    h = delta * (1.0 + cmax)
    for i in range(n):
        m.w2[i] = c[i] + h * (f[i] / nf)
    _rhs[double](m, m.w2, m.w3)
    for i in range(n):
        m.w2[i] = c[i] - h * (f[i] / nf)
        out[i] = m.w3[i]
    _rhs[double](m, m.w2, m.w3)
    for i in range(n):
        out[i] = (out[i] - m.w3[i]) * (nf / (2.0 * h))


cdef struct Ctx:
    int n
    int phi
    int scheme
    double floor
    double delta
    double* metric
    long nfev
    long njev


cdef int _integrand(Model m, Ctx* ctx, double* c, double* f, double* result):
    """Return 0 on success, 1 at a singular point of criterion C."""
    cdef int n = m.n
    cdef int i, j
    cdef double s, w, nf2, nf, fa
    cdef double* a = m.w1
    if ctx.phi == 0:
        result[0] = 0.0
        return 0
    _second_derivative(m, c, f, ctx.scheme, ctx.delta, a)
    if ctx.phi == 1:
        s = 0.0
        for i in range(n):
            s += a[i] * a[i]
        result[0] = sqrt(s)
        return 0
    if ctx.phi == 2:
        s = 0.0
        for i in range(n):
            w = c[i] if c[i] > ctx.floor else ctx.floor
            s += a[i] * a[i] / w
        result[0] = sqrt(s)
        return 0
    if ctx.phi == 4:
        s = 0.0
        for i in range(n):
            for j in range(n):
                s += a[i] * ctx.metric[i * n + j] * a[j]
        result[0] = sqrt(s) if s > 0.0 else 0.0
        return 0
    nf2 = 0.0
    fa = 0.0
    for i in range(n):
        nf2 += f[i] * f[i]
        fa += f[i] * a[i]
    if nf2 == 0.0:
        return 1
    nf = sqrt(nf2)
    s = 0.0
    for i in range(n):
        w = a[i] / nf - fa * f[i] / (nf2 * nf)
        s += w * w
    result[0] = sqrt(s)
    return 0


cdef int _fun(Model m, Ctx* ctx, double* y, double* out):
    ctx.nfev += 1
    _rhs[double](m, y, out)
    return _integrand(m, ctx, y, out, &out[ctx.n])


def second_derivative(Model model, c, f, int scheme, double delta):
    dc = np.ascontiguousarray(c, dtype=float)
    df = np.ascontiguousarray(f, dtype=float)
    out = np.empty(model.n)
    _second_derivative(model, <double*> cnp.PyArray_DATA(dc), <double*> cnp.PyArray_DATA(df),
                       scheme, delta, <double*> cnp.PyArray_DATA(out))
    return out


def integrand(Model model, int kind, c, f, double floor, metric, int scheme, double delta):
    cdef Ctx ctx
    cdef double result = 0.0
    dc = np.ascontiguousarray(c, dtype=float)
    df = np.ascontiguousarray(f, dtype=float)
    dm = np.ascontiguousarray(metric if metric is not None else np.zeros((model.n, model.n)), dtype=float)
    ctx.n = model.n
    ctx.phi = kind
    ctx.scheme = scheme
    ctx.floor = floor
    ctx.delta = delta
    ctx.metric = <double*> cnp.PyArray_DATA(dm)
    if _integrand(model, &ctx, <double*> cnp.PyArray_DATA(dc), <double*> cnp.PyArray_DATA(df), &result):
        raise SingularIntegrand("curvature undefined at a fixed point")
    return result


# ------------------------------------------------------------------ small LU

cdef int _lu(scalar_t* a, int n, int* piv):
    """In-place LU with partial pivoting, row-major. Returns 1 if singular."""
    cdef int i, j, k, p
    cdef double best, v
    cdef scalar_t t
    cdef int singular = 0
    for k in range(n):
        p = k
        best = abs(a[k * n + k])
        for i in range(k + 1, n):
            v = abs(a[i * n + k])
            if v > best:
                best = v
                p = i
        piv[k] = p
        if p != k:
            for j in range(n):
                t = a[k * n + j]
                a[k * n + j] = a[p * n + j]
                a[p * n + j] = t
        if best == 0.0:
            singular = 1
            continue
        for i in range(k + 1, n):
            a[i * n + k] = a[i * n + k] / a[k * n + k]
            t = a[i * n + k]
            if t != 0.0:
                for j in range(k + 1, n):
                    a[i * n + j] = a[i * n + j] - t * a[k * n + j]
    return singular


cdef void _lu_solve(scalar_t* lu, int n, int* piv, scalar_t* b):
    cdef int i, j
    cdef scalar_t t
    for i in range(n):
        if piv[i] != i:
            t = b[i]
            b[i] = b[piv[i]]
            b[piv[i]] = t
    for i in range(n):
        t = b[i]
        for j in range(i):
            t = t - lu[i * n + j] * b[j]
        b[i] = t
    for i in range(n - 1, -1, -1):
        t = b[i]
        for j in range(i + 1, n):
            t = t - lu[i * n + j] * b[j]
        b[i] = t / lu[i * n + i]


# --------------------------------------------------------------- integrator

cdef class _Work:
    """Heap buffers for one integration."""
    cdef int N
    cdef double* y
    cdef double* y_new
    cdef double* f
    cdef double* f_new
    cdef double* J
    cdef double* Z
    cdef double* Z0
    cdef double* W
    cdef double* dW
    cdef double* F
    cdef double* scale
    cdef double* err
    cdef double* tmp
    cdef double* lu_r
    cdef double complex* lu_c
    cdef double complex* zb
    cdef int* piv_r
    cdef int* piv_c
    cdef double* prev_y
    cdef double* prev_Q
    cdef double* Q
    cdef double* ymid
    cdef double* fmid

    def __cinit__(self, int N):
        self.N = N
        self.y = <double*> malloc(N * sizeof(double))
        self.y_new = <double*> malloc(N * sizeof(double))
        self.f = <double*> malloc(N * sizeof(double))
        self.f_new = <double*> malloc(N * sizeof(double))
        self.J = <double*> malloc(N * N * sizeof(double))
        self.Z = <double*> malloc(3 * N * sizeof(double))
        self.Z0 = <double*> malloc(3 * N * sizeof(double))
        self.W = <double*> malloc(3 * N * sizeof(double))
        self.dW = <double*> malloc(3 * N * sizeof(double))
        self.F = <double*> malloc(3 * N * sizeof(double))
        self.scale = <double*> malloc(N * sizeof(double))
        self.err = <double*> malloc(N * sizeof(double))
        self.tmp = <double*> malloc(N * sizeof(double))
        self.lu_r = <double*> malloc(N * N * sizeof(double))
        self.lu_c = <double complex*> malloc(N * N * sizeof(double complex))
        self.zb = <double complex*> malloc(N * sizeof(double complex))
        self.piv_r = <int*> malloc(N * sizeof(int))
        self.piv_c = <int*> malloc(N * sizeof(int))
        self.prev_y = <double*> malloc(N * sizeof(double))
        self.prev_Q = <double*> malloc(3 * N * sizeof(double))
        self.Q = <double*> malloc(3 * N * sizeof(double))
        self.ymid = <double*> malloc(N * sizeof(double))
        self.fmid = <double*> malloc(N * sizeof(double))

    def __dealloc__(self):
        free(self.y); free(self.y_new); free(self.f); free(self.f_new); free(self.J)
        free(self.Z); free(self.Z0); free(self.W); free(self.dW); free(self.F)
        free(self.scale); free(self.err); free(self.tmp); free(self.lu_r); free(self.lu_c)
        free(self.zb); free(self.piv_r); free(self.piv_c); free(self.prev_y); free(self.prev_Q)
        free(self.Q); free(self.ymid); free(self.fmid)


cdef double _rms(double* x, double* scale, int N):
    cdef double s = 0.0, v
    cdef int i
    for i in range(N):
        v = x[i] / scale[i]
        s += v * v
    return sqrt(s / N)


cdef void _dense(double t_old, double h, double* y_old, double* Q, double t, int N, double* out):
    """Q is N x 3 row-major."""
    cdef double x = (t - t_old) / h
    cdef double x2 = x * x
    cdef double x3 = x2 * x
    cdef int i
    for i in range(N):
        out[i] = y_old[i] + Q[3 * i] * x + Q[3 * i + 1] * x2 + Q[3 * i + 2] * x3


cdef void _jac_aug(Model m, Ctx* ctx, double* y, double* J, int N):
    cdef int n = m.n
    cdef int i, j
    ctx.njev += 1
    _jac(m, y, m.wj)
    memset(J, 0, N * N * sizeof(double))
    for i in range(n):
        for j in range(n):
            J[i * N + j] = m.wj[i * n + j]


cdef void _factor(_Work w, double h, int N):
    cdef int i, j
    cdef double mr = MU_REAL / h
    cdef double complex mc = MU_COMPLEX / h
    for i in range(N):
        for j in range(N):
            w.lu_r[i * N + j] = -w.J[i * N + j]
            w.lu_c[i * N + j] = -w.J[i * N + j]
        w.lu_r[i * N + i] += mr
        w.lu_c[i * N + i] = w.lu_c[i * N + i] + mc
    _lu[double](w.lu_r, N, w.piv_r)
    _lu[cython.doublecomplex](w.lu_c, N, w.piv_c)


cdef int _collocation(Model m, Ctx* ctx, _Work w, double h, double tol, int maxiter,
                      int* n_iter, double* rate_out):
    """Simplified Newton for the collocation system; Z0 in w.Z0, result in w.Z.

    Returns 1 if converged, 0 if not, -1 on a singular integrand.
    """
    cdef int N = w.N
    cdef int i, a, b, k
    cdef double mr = MU_REAL / h
    cdef double complex mc = MU_COMPLEX / h
    cdef double dW_norm, dW_norm_old = -1.0, rate = -1.0, s
    cdef double complex zs
    cdef int converged = 0
    cdef double* ys = w.tmp
    for a in range(3):
        for i in range(N):
            s = 0.0
            for b in range(3):
                s += TI_[a][b] * w.Z0[b * N + i]
            w.W[a * N + i] = s
    memcpy(w.Z, w.Z0, 3 * N * sizeof(double))
    k = 0
    while k < maxiter:
        for a in range(3):
            for i in range(N):
                ys[i] = w.y[i] + w.Z[a * N + i]
            if _fun(m, ctx, ys, &w.F[a * N]):
                n_iter[0] = k + 1
                return -1
        for i in range(3 * N):
            if not isfinite(w.F[i]):
                n_iter[0] = k + 1
                rate_out[0] = rate
                return 0
        for i in range(N):
            s = TI_[0][0] * w.F[i] + TI_[0][1] * w.F[N + i] + TI_[0][2] * w.F[2 * N + i]
            w.err[i] = s - mr * w.W[i]
            zs = ((TI_[1][0] + 1j * TI_[2][0]) * w.F[i] + (TI_[1][1] + 1j * TI_[2][1]) * w.F[N + i]
                  + (TI_[1][2] + 1j * TI_[2][2]) * w.F[2 * N + i])
            w.zb[i] = zs - mc * (w.W[N + i] + 1j * w.W[2 * N + i])
        _lu_solve[double](w.lu_r, N, w.piv_r, w.err)
        _lu_solve[cython.doublecomplex](w.lu_c, N, w.piv_c, w.zb)
        dW_norm = 0.0
        for i in range(N):
            w.dW[i] = w.err[i]
            w.dW[N + i] = w.zb[i].real
            w.dW[2 * N + i] = w.zb[i].imag
            s = w.err[i] / w.scale[i]
            dW_norm += s * s
            s = w.zb[i].real / w.scale[i]
            dW_norm += s * s
            s = w.zb[i].imag / w.scale[i]
            dW_norm += s * s
        dW_norm = sqrt(dW_norm / (3 * N))
        if not isfinite(dW_norm):
            break
        if dW_norm_old >= 0.0:
            rate = dW_norm / dW_norm_old
        if rate >= 0.0 and (rate >= 1.0 or pow(rate, maxiter - k) / (1.0 - rate) * dW_norm > tol):
            break
        for i in range(3 * N):
            w.W[i] += w.dW[i]
        for a in range(3):
            for i in range(N):
                w.Z[a * N + i] = T_[a][0] * w.W[i] + T_[a][1] * w.W[N + i] + T_[a][2] * w.W[2 * N + i]
        if dW_norm == 0.0 or (rate >= 0.0 and rate / (1.0 - rate) * dW_norm < tol):
            converged = 1
            break
        dW_norm_old = dW_norm
        k += 1
    n_iter[0] = k + 1
    rate_out[0] = rate
    return converged


cdef double _predict_factor(double h_abs, double h_abs_old, double error_norm, double error_norm_old):
    cdef double multiplier
    if error_norm_old < 0.0 or h_abs_old < 0.0 or error_norm == 0.0:
        multiplier = 1.0
    else:
        multiplier = h_abs / h_abs_old * pow(error_norm_old / error_norm, 0.25)
    if error_norm == 0.0:
        return INFINITY
    return min(1.0, multiplier) * pow(error_norm, -0.25)


cdef double _event_value(Model m, int stop_kind, int stop_index, double stop_value, double* y, double* f):
    cdef double s = 0.0
    cdef int i
    if stop_kind == 1:
        for i in range(m.n):
            s += f[i] * f[i]
        return sqrt(s) - stop_value
    return y[stop_index] - stop_value


cdef class _Output:
    cdef int N
    cdef Py_ssize_t size, cap
    cdef object t, y, h, Q
    cdef double[::1] tv
    cdef double[:, ::1] yv
    cdef double[::1] hv
    cdef double[:, :, ::1] Qv

    def __cinit__(self, int N, Py_ssize_t cap):
        self.N = N
        self.size = 0
        self.cap = cap
        self.t = np.empty(cap)
        self.y = np.empty((cap, N))
        self.h = np.empty(cap)
        self.Q = np.empty((cap, N, 3))
        self._bind()

    cdef void _bind(self):
        self.tv = self.t
        self.yv = self.y
        self.hv = self.h
        self.Qv = self.Q

    cdef void push(self, double t, double* y, double h, double* Q):
        cdef int i
        if self.size == self.cap:
            self.cap *= 2
            self.t = np.resize(self.t, self.cap)
            self.y = np.resize(self.y, (self.cap, self.N))
            self.h = np.resize(self.h, self.cap)
            self.Q = np.resize(self.Q, (self.cap, self.N, 3))
            self._bind()
        self.tv[self.size] = t
        for i in range(self.N):
            self.yv[self.size, i] = y[i]
        self.hv[self.size] = h
        if Q != NULL:
            for i in range(self.N):
                self.Qv[self.size, i, 0] = Q[3 * i]
                self.Qv[self.size, i, 1] = Q[3 * i + 1]
                self.Qv[self.size, i, 2] = Q[3 * i + 2]
        self.size += 1


cdef double _initial_step(Model m, Ctx* ctx, _Work w, double rtol, double atol, double max_step):
    cdef int N = w.N
    cdef int i
    cdef double d0, d1, d2, h0, h1
    for i in range(N):
        w.scale[i] = atol + fabs(w.y[i]) * rtol
    d0 = _rms(w.y, w.scale, N)
    d1 = _rms(w.f, w.scale, N)
    if d0 < 1e-5 or d1 < 1e-5:
        h0 = 1e-6
    else:
        h0 = 0.01 * d0 / d1
    h0 = min(h0, max_step)
    for i in range(N):
        w.ymid[i] = w.y[i] + h0 * w.f[i]
    if _fun(m, ctx, w.ymid, w.fmid):
        return h0
    for i in range(N):
        w.err[i] = w.fmid[i] - w.f[i]
    d2 = _rms(w.err, w.scale, N) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = pow(0.01 / max(d1, d2), 0.25)
    return min(100.0 * h0, h1, max_step)


def solve(Model model, c0, double t_end, int stop_kind, int stop_index, double stop_value,
          phi_kind, double floor, metric, int scheme, double delta, double rtol, double atol,
          double first_step, double max_step, long max_steps, double newton_tol, frozen):
    """Compiled counterpart of :func:`simtraj._pykernels.solve`."""
    if callable(phi_kind):
        raise TypeError("callable integrands are only supported by the pure-Python kernel")
    cdef int n = model.n
    cdef int N = n + 1
    cdef int i, a, j
    cdef Ctx ctx
    cdef _Work w = _Work(N)
    cdef _Output out = _Output(N, 256)
    dm = np.ascontiguousarray(metric if metric is not None else np.zeros((n, n)), dtype=float)
    ctx.n = n
    ctx.phi = int(phi_kind)
    ctx.scheme = scheme
    ctx.floor = floor
    ctx.delta = delta
    ctx.metric = <double*> cnp.PyArray_DATA(dm)
    ctx.nfev = 0
    ctx.njev = 0

    c0a = np.ascontiguousarray(c0, dtype=float)
    cdef double[::1] c0v = c0a
    for i in range(n):
        w.y[i] = c0v[i]
    w.y[n] = 0.0

    cdef double t = 0.0
    cdef int status = -100
    message = ""
    cdef double t_event = NAN
    cdef long nlu = 0
    cdef int tight, maxiter
    grid = [0.0]

    out.push(t, w.y, 0.0, NULL)

    if newton_tol <= 0.0:
        newton_tol = max(10.0 * EPS / rtol, min(0.03, sqrt(rtol)))
    tight = newton_tol < 1e-5
    maxiter = 12 if tight else 6

    if _fun(model, &ctx, w.y, w.f):
        return _result(-3, "curvature undefined at a fixed point", out, grid, t_event, &ctx, nlu, N)
    for i in range(N):
        if not isfinite(w.f[i]):
            return _result(-4, "non-finite derivative at the initial state", out, grid, t_event, &ctx, nlu, N)

    cdef double g_old = 0.0, g_new, g_lo, g_mid, lo, hi, mid
    if stop_kind != 0:
        g_old = _event_value(model, stop_kind, stop_index, stop_value, w.y, w.f)
    if stop_kind == 1 and g_old <= 0.0:
        t_event = 0.0
        return _result(1, "velocity norm already below threshold", out, grid, t_event, &ctx, nlu, N)

    cdef double horizon = t_end if isfinite(t_end) else INFINITY
    cdef object frozen_arr = None
    cdef double[::1] fz
    cdef Py_ssize_t frozen_pos = 1, frozen_len = 0
    cdef double last_frozen_h = -1.0
    if frozen is not None:
        frozen_arr = np.ascontiguousarray(frozen, dtype=float)
        if frozen_arr.shape[0] >= 2:
            fz = frozen_arr
            frozen_len = fz.shape[0]
            last_frozen_h = fz[frozen_len - 1] - fz[frozen_len - 2]
        else:
            frozen_arr = None
    cdef bint use_frozen = frozen_arr is not None

    cdef double h_abs, h, t_new, h_abs_old = -1.0, error_norm_old = -1.0, error_norm = 0.0
    cdef double safety = 1.0, factor, min_step, t_target = 0.0, rate = -1.0, xs
    cdef int n_iter = 0, conv
    cdef bint forced, step_accepted, rejected, recompute_jac, current_jac, have_lu = False
    cdef bint has_prev = False
    cdef double prev_t = 0.0, prev_h = 1.0
    cdef long nsteps = 0

    if not use_frozen:
        h_abs = first_step if first_step > 0 else _initial_step(model, &ctx, w, rtol, atol, max_step)
    else:
        h_abs = last_frozen_h
    _jac_aug(model, &ctx, w.y, w.J, N)
    current_jac = True

    while status == -100:
        if nsteps >= max_steps:
            status = -1
            message = "maximum number of steps exceeded"
            break
        forced = False
        if use_frozen:
            if frozen_pos < frozen_len:
                t_target = fz[frozen_pos]
                forced = True
            else:
                t_target = t + last_frozen_h
                forced = True
        min_step = 10.0 * fabs(nextafter(t, INFINITY) - t)
        step_accepted = False
        rejected = False
        while not step_accepted:
            if forced:
                h = t_target - t
                if t + h > horizon:
                    h = horizon - t
            else:
                if h_abs < min_step:
                    status = -2
                    message = "step size fell below the floating point resolution"
                    break
                h = min(h_abs, max_step)
                if t + h > horizon:
                    h = horizon - t
            t_new = t + h if t + h < horizon else horizon
            h = t_new - t
            if h <= 0.0:
                status = -2
                message = "zero step"
                break
            if not have_lu or forced:
                if forced and not current_jac:
                    _jac_aug(model, &ctx, w.y, w.J, N)
                    current_jac = True
                _factor(w, h, N)
                nlu += 2
                have_lu = True
            if not has_prev:
                memset(w.Z0, 0, 3 * N * sizeof(double))
            else:
                for a in range(3):
                    _dense(prev_t, prev_h, w.prev_y, w.prev_Q, t + h * C_[a], N, &w.Z0[a * N])
                    for i in range(N):
                        w.Z0[a * N + i] -= w.y[i]
            for i in range(N):
                w.scale[i] = atol + fabs(w.y[i]) * rtol
            conv = _collocation(model, &ctx, w, h, newton_tol, maxiter, &n_iter, &rate)
            if conv < 0:
                status = -3
                message = "curvature undefined at a fixed point"
                break
            if conv == 0:
                if forced:
                    if not current_jac:
                        _jac_aug(model, &ctx, w.y, w.J, N)
                        current_jac = True
                        continue
                    mid = t + 0.5 * h
                    if frozen_pos < frozen_len:
                        frozen_arr = np.insert(np.asarray(fz), frozen_pos, mid)
                        fz = frozen_arr
                        frozen_len = fz.shape[0]
                    else:
                        last_frozen_h = 0.5 * h
                    t_target = mid
                    have_lu = False
                    continue
                if current_jac:
                    h_abs *= 0.5
                    have_lu = False
                    continue
                _jac_aug(model, &ctx, w.y, w.J, N)
                current_jac = True
                have_lu = False
                continue

            for i in range(N):
                w.y_new[i] = w.y[i] + w.Z[2 * N + i]
            if forced:
                error_norm = 0.0
                step_accepted = True
                safety = 1.0
            else:
                for i in range(N):
                    xs = (E_[0] * w.Z[i] + E_[1] * w.Z[N + i] + E_[2] * w.Z[2 * N + i]) / h
                    w.tmp[i] = xs
                    w.err[i] = w.f[i] + xs
                _lu_solve[double](w.lu_r, N, w.piv_r, w.err)
                for i in range(N):
                    w.scale[i] = atol + max(fabs(w.y[i]), fabs(w.y_new[i])) * rtol
                error_norm = _rms(w.err, w.scale, N)
                safety = 0.9 * (2 * maxiter + 1) / (2 * maxiter + n_iter)
                if rejected and error_norm > 1.0:
                    for i in range(N):
                        w.ymid[i] = w.y[i] + w.err[i]
                    if _fun(model, &ctx, w.ymid, w.fmid):
                        error_norm = INFINITY
                    else:
                        for i in range(N):
                            w.err[i] = w.fmid[i] + w.tmp[i]
                        _lu_solve[double](w.lu_r, N, w.piv_r, w.err)
                        error_norm = _rms(w.err, w.scale, N)
                if not isfinite(error_norm):
                    error_norm = INFINITY
                if error_norm > 1.0:
                    factor = _predict_factor(h_abs, h_abs_old, error_norm, error_norm_old)
                    h_abs = fabs(h) * max(MIN_FACTOR, safety * factor)
                    have_lu = False
                    rejected = True
                else:
                    step_accepted = True
        if status != -100:
            break

        nsteps += 1
        if forced:
            if frozen_pos < frozen_len:
                frozen_pos += 1
            recompute_jac = False
            have_lu = False
        else:
            recompute_jac = n_iter > 2 and rate > 1e-3
            factor = _predict_factor(fabs(h), h_abs_old, error_norm, error_norm_old)
            factor = min(MAX_FACTOR, safety * factor)
            if not recompute_jac and factor < 1.2:
                factor = 1.0
            else:
                have_lu = False
            h_abs_old = fabs(h)
            error_norm_old = error_norm
            h_abs = fabs(h) * factor

        if _fun(model, &ctx, w.y_new, w.f_new):
            status = -3
            message = "curvature undefined at a fixed point"
            break
        conv = 1
        for i in range(N):
            if not (isfinite(w.f_new[i]) and isfinite(w.y_new[i])):
                conv = 0
        if not conv:
            status = -4
            message = "non-finite state"
            break
        # dense output coefficients Q = Z^T P
        for i in range(N):
            for j in range(3):
                w.Q[3 * i + j] = (w.Z[i] * P_[0][j] + w.Z[N + i] * P_[1][j] + w.Z[2 * N + i] * P_[2][j])
        prev_t = t
        prev_h = h
        memcpy(w.prev_y, w.y, N * sizeof(double))
        memcpy(w.prev_Q, w.Q, 3 * N * sizeof(double))
        has_prev = True
        if recompute_jac:
            _jac_aug(model, &ctx, w.y_new, w.J, N)
            current_jac = True
        else:
            current_jac = False

        t = t_new
        memcpy(w.y, w.y_new, N * sizeof(double))
        memcpy(w.f, w.f_new, N * sizeof(double))
        out.push(t, w.y, h, w.Q)
        grid.append(t)

        if stop_kind != 0:
            g_new = _event_value(model, stop_kind, stop_index, stop_value, w.y, w.f)
            if stop_kind == 1:
                conv = g_old > 0.0 >= g_new
            else:
                conv = (g_old > 0.0 >= g_new) or (g_old < 0.0 <= g_new)
            if conv:
                lo = prev_t
                hi = t
                g_lo = g_old
                for j in range(BISECT_ITERS):
                    mid = 0.5 * (lo + hi)
                    if mid <= lo or mid >= hi:
                        break
                    _dense(prev_t, prev_h, w.prev_y, w.prev_Q, mid, N, w.ymid)
                    _rhs[double](model, w.ymid, w.fmid)
                    g_mid = _event_value(model, stop_kind, stop_index, stop_value, w.ymid, w.fmid)
                    if g_mid == 0.0:
                        lo = mid
                        hi = mid
                        break
                    if (g_mid > 0.0) == (g_lo > 0.0):
                        lo = mid
                        g_lo = g_mid
                    else:
                        hi = mid
                t_event = hi
                _dense(prev_t, prev_h, w.prev_y, w.prev_Q, t_event, N, w.ymid)
                out.size -= 1
                out.push(t_event, w.ymid, h, w.Q)
                status = 1
                message = "stop event triggered"
                break
            g_old = g_new
        if t >= horizon:
            status = 0
            message = "reached the time horizon"
            break
        if not use_frozen and t + min_step >= horizon:
            status = 0
            message = "reached the time horizon"
            break

    return _result(status, message, out, grid, t_event, &ctx, nlu, N)


cdef dict _result(int status, message, _Output out, list grid, double t_event, Ctx* ctx, long nlu, int N):
    cdef Py_ssize_t m = out.size
    return {
        "status": status,
        "message": message,
        "t": np.array(out.t[:m]),
        "y": np.array(out.y[:m]),
        "h": np.array(out.h[1:m]),
        "Q": np.array(out.Q[1:m]),
        "grid": np.asarray(grid, dtype=float),
        "t_event": t_event,
        "nfev": ctx.nfev,
        "njev": ctx.njev,
        "nlu": nlu,
    }
