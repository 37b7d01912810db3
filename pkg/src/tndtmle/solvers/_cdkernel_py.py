"""Pure numpy fallback for the coordinate-descent path kernel.

Same algorithm and stopping rules as the compiled ``_cdkernel`` module, so the
two backends agree to within the KKT tolerance.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit


def _objective(y, w, eta, pen, lam, beta):
    return float(np.sum(w * (np.logaddexp(0.0, eta) - y * eta)) + lam * np.sum(pen * np.abs(beta)))


def _kkt_violation(X, y, w, eta, pen, lam, beta):
    g = X.T @ (w * (y - expit(eta)))
    thr = lam * pen
    viol = np.where(
        pen == 0.0,
        np.abs(g),
        np.where(
            beta > 0.0,
            np.abs(g - thr),
            np.where(beta < 0.0, np.abs(g + thr), np.abs(g) - thr),
        ),
    )
    return float(viol.max()) if viol.size else 0.0


def lasso_path(X, y, offset, weights, penalty, lambdas, beta_init,
               tol=1e-8, max_outer=100, max_inner=10000, clip=1e-6):
    """Warm-started coordinate descent along a decreasing penalty grid.

    Minimizes ``sum(w_i * nll_i) / sum(w) + lam * sum(penalty_j * |beta_j|)``
    for each ``lam`` in `lambdas`, starting from `beta_init` and warm-starting
    each solve from the previous one. An outer IRLS step builds the weighted
    Gram matrix ``X'VX``; inner sweeps then update one coordinate at a time
    by soft-thresholding. A step that raises the objective is halved. A
    solve stops once the largest KKT residual is below `tol`.

    Returns
    -------
    coefs : ndarray, shape (len(lambdas), p)
    iters : ndarray of int
        Outer iterations per penalty value.
    converged : ndarray of bool
    """
    X = np.asarray(X, dtype=np.float64)
    n, p = X.shape
    L = len(lambdas)
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    beta = np.array(beta_init, dtype=np.float64, copy=True)
    coefs = np.zeros((L, p))
    iters = np.zeros(L, dtype=np.int64)
    conv = np.zeros(L, dtype=bool)
    inner_tol = 1e-3 * tol * tol

    for k, lam in enumerate(lambdas):
        eta = offset + X @ beta
        obj_old = _objective(y, w, eta, penalty, lam, beta)
        for _ in range(max_outer):
            prob = np.clip(expit(eta), clip, 1.0 - clip)
            v = w * prob * (1.0 - prob)
            G = (X * v[:, None]).T @ X
            gb = G @ beta
            b = X.T @ (w * (y - prob)) + gb
            diag = np.diag(G).copy()
            beta_old = beta.copy()

            for _inner in range(max_inner):
                maxdelta = 0.0
                for j in range(p):
                    if diag[j] <= 0.0:
                        continue
                    g = b[j] - gb[j] + diag[j] * beta[j]
                    thr = lam * penalty[j]
                    if g > thr:
                        new = (g - thr) / diag[j]
                    elif g < -thr:
                        new = (g + thr) / diag[j]
                    else:
                        new = 0.0
                    d = new - beta[j]
                    if d != 0.0:
                        gb += G[:, j] * d
                        beta[j] = new
                        maxdelta = max(maxdelta, diag[j] * d * d)
                if maxdelta < inner_tol:
                    break

            eta = offset + X @ beta
            obj_new = _objective(y, w, eta, penalty, lam, beta)
            halvings = 0
            while obj_new > obj_old + 1e-13 * abs(obj_old) and halvings < 30:
                beta = 0.5 * (beta + beta_old)
                eta = offset + X @ beta
                obj_new = _objective(y, w, eta, penalty, lam, beta)
                halvings += 1
            obj_old = obj_new
            iters[k] += 1
            if _kkt_violation(X, y, w, eta, penalty, lam, beta) < tol:
                conv[k] = True
                break
        coefs[k] = beta

    return coefs, iters, conv
