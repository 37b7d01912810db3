"""Unpenalized logistic regression by iteratively reweighted least squares."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from ..exceptions import ConvergenceError, EstimationError, SeparationError

PROB_CLIP = 1e-6
SEPARATION_THRESHOLD = 30.0


@dataclass(frozen=True)
class GlmFit:
    """Result of :func:`fit_logistic`.

    `info_matrix` is the observed information ``X' diag(w p (1-p)) X`` at the
    solution (not divided by n), so ``inv(info_matrix)`` is the model-based
    covariance of the coefficients. `deviance_trace` records the clipped
    loss per iteration (linear continuation beyond the probability clip),
    while `neg_log_likelihood` is the exact value at the solution.
    """

    coefficients: np.ndarray
    converged: bool
    iterations: int
    neg_log_likelihood: float
    info_matrix: np.ndarray
    max_score: float
    deviance_trace: tuple[float, ...]

    @property
    def cov(self) -> np.ndarray:
        return np.linalg.inv(self.info_matrix)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))


def neg_log_likelihood(y, eta, weights) -> float:
    return float(np.sum(weights * (np.logaddexp(0.0, eta) - y * eta)))


def clipped_loss(y, eta, weights, clip: float = PROB_CLIP) -> float:
    """Negative log-likelihood continued linearly beyond ``logit(clip)``.

    Its gradient is the score with probabilities clipped to
    ``[clip, 1 - clip]``, so Newton steps on the clipped score and
    step-halving on this loss are consistent. It equals the log-likelihood
    whenever no fitted probability leaves the clip range.
    """
    hi = math.log((1.0 - clip) / clip)
    e = np.clip(eta, -hi, hi)
    slope = expit(e) - y
    return float(np.sum(weights * (np.logaddexp(0.0, e) - y * e + slope * (eta - e))))


def fit_logistic(y, X, offset=None, weights=None, *, tol: float = 1e-8,
                 max_iter: int = 100, clip: float = PROB_CLIP,
                 separation_threshold: float = SEPARATION_THRESHOLD) -> GlmFit:
    """Weighted logistic regression with a fixed offset, fitted by Newton/IRLS.

    Parameters
    ----------
    y : array_like, shape (n,)
        Binary response.
    X : array_like, shape (n, k)
        Design matrix; include a column of ones for an intercept.
    offset : array_like, shape (n,), optional
        Fixed linear-predictor offset.
    weights : array_like, shape (n,), optional
        Nonnegative observation weights.
    tol : float
        Convergence when every coordinate of the weight-normalized score
        ``X'w(y - p) / sum(w)`` is at most `tol` in absolute value.

    Raises
    ------
    SeparationError
        If the coefficient vector's Euclidean norm exceeds
        `separation_threshold` (complete or quasi-complete separation).
    ConvergenceError
        If `max_iter` Newton steps do not reach `tol`.
    """
    y = np.asarray(y, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n, k = X.shape
    if k < 1:
        raise EstimationError("design matrix has no columns")
    if len(y) != n:
        raise EstimationError(f"y has {len(y)} rows but X has {n}")
    offset = np.zeros(n) if offset is None else np.asarray(offset, dtype=np.float64)
    weights = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if offset.shape != (n,) or weights.shape != (n,):
        raise EstimationError("offset and weights must have one entry per row")
    if np.any(weights < 0):
        raise EstimationError("weights must be nonnegative")
    wsum = weights.sum()
    if np.linalg.matrix_rank(X[weights > 0]) < k:
        raise EstimationError("design matrix is rank deficient; information matrix is singular")

    beta = np.zeros(k)
    eta = offset.copy()
    nll = clipped_loss(y, eta, weights, clip)
    trace = [2.0 * nll]
    converged = False
    max_score = np.inf
    it = 0
    for it in range(max_iter + 1):
        p = np.clip(expit(eta), clip, 1.0 - clip)
        grad = X.T @ (weights * (y - p))
        max_score = float(np.max(np.abs(grad))) / wsum
        if max_score <= tol:
            converged = True
            break
        if it == max_iter:
            break
        info = (X * (weights * p * (1.0 - p))[:, None]).T @ X
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            raise EstimationError("information matrix is singular; design is rank deficient") from None

        # step-halving keeps the deviance non-increasing
        for _ in range(30):
            cand = beta + step
            eta_c = offset + X @ cand
            nll_c = clipped_loss(y, eta_c, weights, clip)
            if nll_c <= nll + 1e-12 * abs(nll):
                break
            step *= 0.5
        beta, eta, nll = cand, eta_c, nll_c
        trace.append(2.0 * nll)
        if np.linalg.norm(beta) > separation_threshold:
            raise SeparationError(
                f"coefficient norm {np.linalg.norm(beta):.1f} exceeds {separation_threshold}; "
                "the data appear separated"
            )

    if not converged:
        raise ConvergenceError(f"IRLS did not converge in {max_iter} iterations (max score {max_score:.2e})")
    p = np.clip(expit(eta), clip, 1.0 - clip)
    info = (X * (weights * p * (1.0 - p))[:, None]).T @ X
    return GlmFit(
        coefficients=beta,
        converged=converged,
        iterations=it,
        neg_log_likelihood=neg_log_likelihood(y, eta, weights),
        info_matrix=0.5 * (info + info.T),
        max_score=max_score,
        deviance_trace=tuple(trace),
    )


def sandwich_cov(fit: GlmFit, y, X, offset=None, weights=None) -> np.ndarray:
    """Heteroskedasticity-robust covariance ``A^-1 B A^-1`` for a logistic fit."""
    y = np.asarray(y, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    n = len(y)
    offset = np.zeros(n) if offset is None else np.asarray(offset, dtype=np.float64)
    weights = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    p = expit(offset + X @ fit.coefficients)
    scores = X * (weights * (y - p))[:, None]
    bread = np.linalg.inv(fit.info_matrix)
    meat = scores.T @ scores
    return bread @ meat @ bread
