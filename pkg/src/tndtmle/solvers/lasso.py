"""L1-penalized logistic regression paths with K-fold cross-validated selection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from ..exceptions import EstimationError, SeparationError
from ._backend import get_kernel
from .logistic import SEPARATION_THRESHOLD, fit_logistic

N_LAMBDA = 50
LAMBDA_MIN_RATIO = 1e-3


@dataclass(frozen=True)
class LassoPath:
    """A fitted lasso path.

    Coefficients are on the scale of the caller's columns. The penalty is
    applied to coefficients of columns rescaled to unit weighted standard
    deviation, so `lambdas` are comparable across designs.
    """

    lambdas: np.ndarray
    coefs: np.ndarray
    cv_deviance: np.ndarray
    cv_se: np.ndarray
    selected_index: int
    penalized: np.ndarray
    scale: np.ndarray
    converged: np.ndarray
    folds: np.ndarray
    selection_rule: str = "min"

    @property
    def selected_lambda(self) -> float:
        return float(self.lambdas[self.selected_index])

    @property
    def coef(self) -> np.ndarray:
        return self.coefs[self.selected_index]

    def linear_predictor(self, X, offset=None) -> np.ndarray:
        eta = np.asarray(X, dtype=np.float64) @ self.coef
        return eta if offset is None else eta + offset


def _column_scale(X, penalized, w):
    scale = np.ones(X.shape[1])
    wn = w / w.sum()
    for j in np.flatnonzero(penalized):
        mean = wn @ X[:, j]
        sd = np.sqrt(wn @ (X[:, j] - mean) ** 2)
        if sd > 0:
            scale[j] = sd
    return scale


def _unpenalized_start(y, Xs, penalized, offset, w):
    beta = np.zeros(Xs.shape[1])
    free = ~penalized
    if free.any():
        fit = fit_logistic(y, Xs[:, free], offset=offset, weights=w)
        beta[free] = fit.coefficients
    return beta


def lambda_max(y, X, penalized, offset=None, weights=None) -> float:
    """Smallest penalty at which every penalized coefficient is zero.

    Columns are standardized as in :func:`fit_lasso_logistic`.
    """
    y, X, penalized, offset, w = _prepare(y, X, penalized, offset, weights)
    scale = _column_scale(X, penalized, w)
    Xs = X / scale
    return _lambda_max_scaled(y, Xs, penalized, offset, w)[0]


def _lambda_max_scaled(y, Xs, penalized, offset, w):
    beta0 = _unpenalized_start(y, Xs, penalized, offset, w)
    if not penalized.any():
        return 0.0, beta0
    p = expit(offset + Xs @ beta0)
    grad = Xs[:, penalized].T @ (w * (y - p)) / w.sum()
    # pad by the start fit's score tolerance so the first grid point is exactly sparse
    return float(np.max(np.abs(grad))) * (1.0 + 1e-6) + 1e-8, beta0


def _prepare(y, X, penalized, offset, weights):
    y = np.asarray(y, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n = len(y)
    if X.shape[0] != n:
        raise EstimationError(f"y has {n} rows but X has {X.shape[0]}")
    penalized = np.asarray(penalized, dtype=bool)
    if penalized.shape != (X.shape[1],):
        raise EstimationError("penalized_mask needs one flag per column")
    offset = np.zeros(n) if offset is None else np.asarray(offset, dtype=np.float64)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    return y, X, penalized, offset, w


def lambda_grid(lam_max: float, n_lambda: int = N_LAMBDA, ratio: float = LAMBDA_MIN_RATIO) -> np.ndarray:
    if lam_max <= 0:
        return np.zeros(n_lambda)
    return np.geomspace(lam_max, lam_max * ratio, n_lambda)


def _run_path(kernel, y, Xs, offset, w, pen, lambdas, beta0, tol):
    return kernel(
        np.asfortranarray(Xs), np.ascontiguousarray(y), np.ascontiguousarray(offset),
        np.ascontiguousarray(w), np.ascontiguousarray(pen), np.ascontiguousarray(lambdas),
        np.ascontiguousarray(beta0), tol,
    )


def _fold_ids(y, K, rng):
    """Fold labels stratified on the binary response."""
    folds = np.empty(len(y), dtype=np.int64)
    offset = 0
    for level in (0.0, 1.0):
        idx = np.flatnonzero(y == level)
        idx = idx[rng.permutation(len(idx))]
        folds[idx] = (np.arange(len(idx)) + offset) % K
        offset += len(idx)
    return folds


def _binomial_deviance(y, eta, w):
    return 2.0 * np.sum(w[:, None] * (np.logaddexp(0.0, eta) - y[:, None] * eta), axis=0)


def fit_lasso_path(y, X, penalized_mask, offset=None, weights=None, *, lambdas=None,
                   n_lambda: int = N_LAMBDA, lambda_min_ratio: float = LAMBDA_MIN_RATIO,
                   tol: float = 1e-8, backend: str | None = None):
    """Fit the whole path without cross-validation.

    Returns ``(lambdas, coefs, converged)`` with coefficients on the caller's
    column scale.
    """
    y, X, penalized, offset, w = _prepare(y, X, penalized_mask, offset, weights)
    scale = _column_scale(X, penalized, w)
    Xs = X / scale
    lam_max, beta0 = _lambda_max_scaled(y, Xs, penalized, offset, w)
    if lambdas is None:
        lambdas = lambda_grid(lam_max, n_lambda, lambda_min_ratio)
    kernel = get_kernel(backend)
    coefs, _, conv = _run_path(kernel, y, Xs, offset, w, penalized.astype(float), lambdas, beta0, tol)
    return np.asarray(lambdas, dtype=float), coefs / scale, conv


def fit_lasso_logistic(y, X, penalized_mask, folds: int = 10, offset=None, weights=None, *,
                       n_lambda: int = N_LAMBDA, lambda_min_ratio: float = LAMBDA_MIN_RATIO,
                       random_state=0, tol: float = 1e-8, backend: str | None = None) -> LassoPath:
    """Lasso-penalized logistic regression with a cross-validated penalty.

    The objective is the weight-averaged negative log-likelihood plus
    ``lambda * sum(|beta_j| * sd_j)`` over penalized columns, i.e. the usual
    lasso on standardized columns. Unpenalized columns (intercept, the
    exposure-effect block) are never shrunk. The grid holds `n_lambda`
    log-spaced values from ``lambda_max`` down to ``lambda_max * lambda_min_ratio``
    and the value minimizing mean held-out binomial deviance is selected.

    Parameters
    ----------
    penalized_mask : array_like of bool
        One flag per column of `X`.
    folds : int
        Number of cross-validation folds, at least 2.
    random_state : int or numpy.random.Generator
        Controls the fold assignment (stratified on `y`).
    """
    if folds < 2:
        raise EstimationError("need at least 2 cross-validation folds")
    y, X, penalized, offset, w = _prepare(y, X, penalized_mask, offset, weights)
    rng = np.random.default_rng(random_state)
    scale = _column_scale(X, penalized, w)
    Xs = X / scale
    pen = penalized.astype(float)
    kernel = get_kernel(backend)

    lam_max, beta0 = _lambda_max_scaled(y, Xs, penalized, offset, w)
    lambdas = lambda_grid(lam_max, n_lambda, lambda_min_ratio)
    coefs_s, _, conv = _run_path(kernel, y, Xs, offset, w, pen, lambdas, beta0, tol)

    fold_id = _fold_ids(y, folds, rng)
    fold_dev = []
    fold_w = []
    for k in range(folds):
        test = fold_id == k
        if not test.any():
            continue
        train = ~test
        cf, _, _ = _run_path(kernel, y[train], Xs[train], offset[train], w[train], pen,
                             lambdas, beta0, tol)
        eta = offset[test][:, None] + Xs[test] @ cf.T
        fold_w.append(w[test].sum())
        fold_dev.append(_binomial_deviance(y[test], eta, w[test]) / fold_w[-1])
    fold_dev = np.array(fold_dev)
    fold_w = np.array(fold_w)
    cv_dev = fold_w @ fold_dev / fold_w.sum()
    cv_se = fold_dev.std(axis=0, ddof=1) / np.sqrt(len(fold_w)) if len(fold_w) > 1 else np.zeros_like(cv_dev)
    if not np.all(np.isfinite(cv_dev)):
        raise EstimationError("cross-validated deviance is not finite")
    sel = int(np.argmin(cv_dev))

    coefs = coefs_s / scale
    free = ~penalized
    if free.any() and np.linalg.norm(coefs[sel, free]) > SEPARATION_THRESHOLD:
        raise SeparationError("unpenalized coefficients diverge; the data appear separated")
    return LassoPath(
        lambdas=lambdas,
        coefs=coefs,
        cv_deviance=cv_dev,
        cv_se=cv_se,
        selected_index=sel,
        penalized=penalized,
        scale=scale,
        converged=conv,
        folds=fold_id,
    )


def kkt_violations(y, X, coef, penalized_mask, lam, offset=None, weights=None) -> np.ndarray:
    """Per-column KKT residuals of a lasso solution on standardized columns.

    For unpenalized columns the residual is ``|score_j|``; for active
    penalized columns ``|score_j - lam * sign(beta_j)|``; for zeroed
    penalized columns ``max(0, |score_j| - lam)``.
    """
    y, X, penalized, offset, w = _prepare(y, X, penalized_mask, offset, weights)
    scale = _column_scale(X, penalized, w)
    Xs = X / scale
    bs = np.asarray(coef) * scale
    score = Xs.T @ (w * (y - expit(offset + Xs @ bs))) / w.sum()
    out = np.abs(score)
    act = penalized & (bs != 0)
    out[act] = np.abs(score[act] - lam * np.sign(bs[act]))
    zero = penalized & (bs == 0)
    out[zero] = np.maximum(0.0, np.abs(score[zero]) - lam)
    return out
