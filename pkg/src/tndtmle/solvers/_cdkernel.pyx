# cython: language_level=3
"""Compiled coordinate-descent kernel for L1-penalized logistic regression paths.

Mirrors ``_cdkernel_py.lasso_path`` step for step; the two must stay in sync.
Each outer (IRLS) step forms the weighted Gram matrix once, after which the
coordinate sweeps on the quadratic approximation cost O(p^2).
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log1p, fabs, sqrt
from scipy.linalg.cython_blas cimport dsyrk

cnp.import_array()


cdef double _evaluate(const double[::1] y, const double[::1] w,
                      const double[::1] eta, const double[::1] pen, double lam,
                      const double[::1] beta, double[::1] prob) noexcept nogil:
    """Penalized objective at `eta`; fills `prob` with expit(eta) (one exp per row)."""
    cdef Py_ssize_t i, j
    cdef double t, e, total = 0.0
    for i in range(y.shape[0]):
        t = eta[i]
        e = exp(-fabs(t))
        if t >= 0:
            prob[i] = 1.0 / (1.0 + e)
            total += w[i] * (t + log1p(e) - y[i] * t)
        else:
            prob[i] = e / (1.0 + e)
            total += w[i] * (log1p(e) - y[i] * t)
    for j in range(beta.shape[0]):
        total += lam * pen[j] * fabs(beta[j])
    return total


cdef void _linear_predictor(const double[::1, :] X, const double[::1] offset,
                            const double[::1] beta, double[::1] eta) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef Py_ssize_t n = X.shape[0]
    for i in range(n):
        eta[i] = offset[i]
    for j in range(X.shape[1]):
        if beta[j] != 0.0:
            for i in range(n):
                eta[i] += X[i, j] * beta[j]


cdef double _kkt_violation(const double[::1, :] X, const double[::1] y,
                           const double[::1] w, const double[::1] prob,
                           const double[::1] pen, double lam,
                           const double[::1] beta, double[::1] resid) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef Py_ssize_t n = X.shape[0]
    cdef double g, viol, worst = 0.0
    for i in range(n):
        resid[i] = w[i] * (y[i] - prob[i])
    for j in range(X.shape[1]):
        g = 0.0
        for i in range(n):
            g += X[i, j] * resid[i]
        if pen[j] == 0.0:
            viol = fabs(g)
        elif beta[j] > 0.0:
            viol = fabs(g - lam * pen[j])
        elif beta[j] < 0.0:
            viol = fabs(g + lam * pen[j])
        else:
            viol = fabs(g) - lam * pen[j]
        if viol > worst:
            worst = viol
    return worst


def lasso_path(double[::1, :] X, double[::1] y, double[::1] offset,
               double[::1] weights, double[::1] penalty, double[::1] lambdas,
               double[::1] beta_init, double tol=1e-8, int max_outer=100,
               int max_inner=10000, double clip=1e-6):
    """Warm-started lasso path; see ``_cdkernel_py.lasso_path`` for the contract."""
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t p = X.shape[1]
    cdef Py_ssize_t L = lambdas.shape[0]
    cdef Py_ssize_t i, j, m, k
    cdef int outer, inner, halvings
    cdef double lam, prob, vi, g, thr, new, d, maxdelta, obj_old, obj_new, acc
    cdef double wsum = 0.0
    cdef double inner_tol = 1e-3 * tol * tol

    coefs_np = np.zeros((L, p), dtype=np.float64)
    iters_np = np.zeros(L, dtype=np.int64)
    conv_np = np.zeros(L, dtype=np.int8)
    cdef double[:, ::1] coefs = coefs_np
    cdef cnp.int64_t[::1] iters = iters_np
    cdef signed char[::1] conv = conv_np

    cdef double[::1] w = np.empty(n, dtype=np.float64)
    for i in range(n):
        wsum += weights[i]
    for i in range(n):
        w[i] = weights[i] / wsum

    cdef double[::1] beta = np.array(beta_init, dtype=np.float64, copy=True)
    cdef double[::1] beta_old = np.zeros(p, dtype=np.float64)
    cdef double[::1] eta = np.empty(n, dtype=np.float64)
    cdef double[::1] v = np.empty(n, dtype=np.float64)
    cdef double[::1] vr = np.empty(n, dtype=np.float64)
    cdef double[::1] scratch = np.empty(n, dtype=np.float64)
    cdef double[::1] pr = np.empty(n, dtype=np.float64)
    cdef double[::1, :] Xv = np.empty((n, p), dtype=np.float64, order="F")
    cdef double[::1, :] G = np.zeros((p, p), dtype=np.float64, order="F")
    cdef int n_int = <int>n, p_int = <int>p
    cdef double one = 1.0, zero = 0.0
    cdef char uplo = b'U', trans = b'T'
    cdef double[::1] b = np.empty(p, dtype=np.float64)
    cdef double[::1] gb = np.empty(p, dtype=np.float64)

    with nogil:
        for k in range(L):
            lam = lambdas[k]
            _linear_predictor(X, offset, beta, eta)
            obj_old = _evaluate(y, w, eta, penalty, lam, beta, pr)
            for outer in range(max_outer):
                for i in range(n):
                    prob = pr[i]
                    if prob < clip:
                        prob = clip
                    elif prob > 1.0 - clip:
                        prob = 1.0 - clip
                    vi = prob * (1.0 - prob)
                    v[i] = w[i] * vi
                    vr[i] = w[i] * (y[i] - prob)
                # G = X' V X and b = G beta + X' V r (r the working residual)
                for i in range(n):
                    v[i] = sqrt(v[i])
                for j in range(p):
                    for i in range(n):
                        Xv[i, j] = X[i, j] * v[i]
                dsyrk(&uplo, &trans, &p_int, &n_int, &one, &Xv[0, 0], &n_int,
                      &zero, &G[0, 0], &p_int)
                for j in range(p):
                    for m in range(j + 1, p):
                        G[m, j] = G[j, m]
                for j in range(p):
                    acc = 0.0
                    for i in range(n):
                        acc += X[i, j] * vr[i]
                    b[j] = acc
                for j in range(p):
                    beta_old[j] = beta[j]
                    acc = 0.0
                    for m in range(p):
                        acc += G[j, m] * beta[m]
                    gb[j] = acc
                for j in range(p):
                    b[j] += gb[j]

                for inner in range(max_inner):
                    maxdelta = 0.0
                    for j in range(p):
                        if G[j, j] <= 0.0:
                            continue
                        g = b[j] - gb[j] + G[j, j] * beta[j]
                        thr = lam * penalty[j]
                        if g > thr:
                            new = (g - thr) / G[j, j]
                        elif g < -thr:
                            new = (g + thr) / G[j, j]
                        else:
                            new = 0.0
                        d = new - beta[j]
                        if d != 0.0:
                            for m in range(p):
                                gb[m] += G[m, j] * d
                            beta[j] = new
                            if G[j, j] * d * d > maxdelta:
                                maxdelta = G[j, j] * d * d
                    if maxdelta < inner_tol:
                        break

                _linear_predictor(X, offset, beta, eta)
                obj_new = _evaluate(y, w, eta, penalty, lam, beta, pr)
                halvings = 0
                while obj_new > obj_old + 1e-13 * fabs(obj_old) and halvings < 30:
                    for j in range(p):
                        beta[j] = 0.5 * (beta[j] + beta_old[j])
                    _linear_predictor(X, offset, beta, eta)
                    obj_new = _evaluate(y, w, eta, penalty, lam, beta, pr)
                    halvings += 1
                obj_old = obj_new
                iters[k] += 1
                if _kkt_violation(X, y, w, pr, penalty, lam, beta, scratch) < tol:
                    conv[k] = 1
                    break
            for j in range(p):
                coefs[k, j] = beta[j]

    return coefs_np, iters_np, conv_np.astype(bool)
