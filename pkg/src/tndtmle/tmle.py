"""Targeted maximum likelihood estimation of the TND conditional log odds ratio.

The exposure model is partially linear logistic,

    logit P(A=1 | Y=y, X=x, delta=1) = y * beta' f(x) + h(x),

so ``exp(beta' f(x))`` is the conditional odds ratio. An initial lasso fit
of ``beta`` and ``h`` is updated along the logistic fluctuation submodel
until the empirical mean of the efficient influence function is negligible.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit
from scipy.stats import norm

from .data import Dataset, validate
from .design import EffectDesign, NuisanceBasis
from .exceptions import DataError, SingularMatrixError
from .solvers import fit_lasso_logistic, fit_logistic
from .solvers.logistic import PROB_CLIP

log = logging.getLogger(__name__)

MAX_ITER = 50
COND_WARN = 1e10
# The fluctuation fit is solved well below the smallest targeting tolerance.
FLUCTUATION_TOL = 1e-12


def _clip(p):
    return np.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)


# -- initial fit --------------------------------------------------------------


@dataclass(frozen=True)
class NuisanceFit:
    """Initial estimate of the exposure model and of pi_tilde.

    `h_coeffs` and `pi_tilde_coeffs` are ``[intercept, basis...]`` coefficient
    vectors from the full-data fits. `h` and `pi_tilde` hold per-row values
    used for targeting; with cross-fitting they come from the fold that
    excludes the row.
    """

    beta_init: np.ndarray
    h_coeffs: np.ndarray
    pi_tilde_coeffs: np.ndarray
    h: np.ndarray
    pi_tilde: np.ndarray
    design: EffectDesign
    basis: NuisanceBasis
    fold_assignments: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def h_at(self, x) -> np.ndarray:
        B = self.basis.evaluate(x)
        return self.h_coeffs[0] + B @ self.h_coeffs[1:]

    def pi_tilde_at(self, x) -> np.ndarray:
        B = self.basis.evaluate(x)
        return _clip(expit(self.pi_tilde_coeffs[0] + B @ self.pi_tilde_coeffs[1:]))

    def mu_at(self, y, x) -> np.ndarray:
        F = self.design.evaluate(x)
        return _clip(expit(np.asarray(y) * (F @ self.beta_init) + self.h_at(x)))


def _fit_learner(resp, X, penalized, cv, random_state, backend):
    """Lasso fit with CV, or plain MLE when nothing is penalized."""
    if not penalized.any():
        fit = fit_logistic(resp, X)
        return fit.coefficients, 0.0
    path = fit_lasso_logistic(resp, X, penalized, folds=cv, random_state=random_state, backend=backend)
    return path.coef, path.selected_lambda


def _crossfit_folds(ds: Dataset, K: int, rng) -> np.ndarray:
    folds = np.empty(ds.n, dtype=np.int64)
    start = 0
    for d in (0, 1):
        for yv in (0, 1):
            idx = np.flatnonzero((ds.delta == d) & (ds.y == yv))
            idx = idx[rng.permutation(len(idx))]
            folds[idx] = (np.arange(len(idx)) + start) % K
            start += len(idx)
    return folds


def fit_initial(ds: Dataset, design: EffectDesign, basis: NuisanceBasis, cv: int = 10, *,
                cross_fit: bool = False, cross_fit_folds: int = 10, random_state=0,
                backend: str | None = None) -> NuisanceFit:
    """Lasso fits of the partially linear exposure model and of pi_tilde.

    Both are fitted on the rows with observed exposure. The exposure model
    regresses ``a`` on an unpenalized intercept and ``y * f(x)`` block and
    the penalized nuisance basis; pi_tilde regresses ``y`` on an intercept
    and the basis.
    """
    report = validate(ds)
    if not report.passed:
        raise DataError("; ".join(report.failures))
    obs = ds.observed
    F = design.evaluate(ds.x)
    B = basis.evaluate(ds.x)
    y = ds.y.astype(np.float64)
    a = ds.a_observed
    n, b = F.shape
    p = B.shape[1]
    ones = np.ones((n, 1))
    X_mu = np.hstack([ones, y[:, None] * F, B])
    pen_mu = np.r_[np.zeros(1 + b, dtype=bool), np.ones(p, dtype=bool)]
    X_pi = np.hstack([ones, B])
    pen_pi = np.r_[False, np.ones(p, dtype=bool)]

    coef_mu, lam_mu = _fit_learner(a[obs], X_mu[obs], pen_mu, cv, random_state, backend)
    coef_pi, lam_pi = _fit_learner(y[obs], X_pi[obs], pen_pi, cv, random_state, backend)
    beta = coef_mu[1:1 + b]
    h_coeffs = np.r_[coef_mu[0], coef_mu[1 + b:]]
    h = X_pi @ h_coeffs
    pi = _clip(expit(X_pi @ coef_pi))

    folds = None
    if cross_fit:
        rng = np.random.default_rng(random_state)
        folds = _crossfit_folds(ds, cross_fit_folds, rng)
        h = np.empty(n)
        pi = np.empty(n)
        for k in range(cross_fit_folds):
            held = folds == k
            train = obs & ~held
            cm, _ = _fit_learner(a[train], X_mu[train], pen_mu, cv, random_state, backend)
            cp, _ = _fit_learner(y[train], X_pi[train], pen_pi, cv, random_state, backend)
            h[held] = X_pi[held] @ np.r_[cm[0], cm[1 + b:]]
            pi[held] = _clip(expit(X_pi[held] @ cp))

    return NuisanceFit(
        beta_init=beta,
        h_coeffs=h_coeffs,
        pi_tilde_coeffs=coef_pi,
        h=h,
        pi_tilde=pi,
        design=design,
        basis=basis,
        fold_assignments=folds,
        meta={"mu_lambda": lam_mu, "pi_lambda": lam_pi, "cv_folds": cv, "cross_fit": cross_fit,
              "cv_selection": "min"},
    )


# -- influence function -------------------------------------------------------


def clever_covariate(y, mu1, mu0, pi_tilde):
    """``H(y, x) = y - pi s1 / (pi s1 + (1 - pi) s0)`` with ``s_k = mu(k,x)(1 - mu(k,x))``.

    The ratio of conditional expectations over Y given delta=1 and X=x is
    expanded over the two values of Y using pi_tilde(x).
    """
    s1 = mu1 * (1.0 - mu1)
    s0 = mu0 * (1.0 - mu0)
    return y - pi_tilde * s1 / (pi_tilde * s1 + (1.0 - pi_tilde) * s0)


@dataclass(frozen=True)
class EifResult:
    eif: np.ndarray
    lam: np.ndarray
    lam_inv: np.ndarray
    H: np.ndarray
    mu: np.ndarray
    score_mean: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        return self.eif.mean(axis=0)


def compute_eif(F, delta, a, y, mu1, mu0, pi_tilde) -> EifResult:
    """Per-row efficient influence function ``(Lambda f(x)) * delta H (delta a - mu(y, x))``.

    ``Lambda^{-1}`` is the empirical mean over all rows of
    ``f f' * delta pi(1-pi) s1 s0 / ((1-pi) s0 + pi s1)``.
    `a` must be 0 wherever `delta` is 0.
    """
    F = np.asarray(F, dtype=np.float64)
    n, b = F.shape
    delta = np.asarray(delta, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    s1 = mu1 * (1.0 - mu1)
    s0 = mu0 * (1.0 - mu0)
    c = delta * (1.0 - pi_tilde) * pi_tilde * s1 * s0 / ((1.0 - pi_tilde) * s0 + pi_tilde * s1)
    lam_inv = (F * c[:, None]).T @ F / n
    lam_inv = 0.5 * (lam_inv + lam_inv.T)
    rank = np.linalg.matrix_rank(lam_inv)
    if rank < b:
        raise SingularMatrixError(
            f"scaling matrix is rank deficient (rank {rank} < {b}); "
            "f(X) needs an invertible second moment among observed rows"
        )
    cond = np.linalg.cond(lam_inv)
    if cond > COND_WARN:
        warnings.warn(f"scaling matrix is ill-conditioned (condition number {cond:.2e})", stacklevel=2)
    lam = np.linalg.inv(lam_inv)
    lam = 0.5 * (lam + lam.T)
    H = clever_covariate(y, mu1, mu0, pi_tilde)
    mu = np.where(y == 1, mu1, mu0)
    resid = delta * H * (delta * a - mu)
    scores = F * resid[:, None]
    eif = scores @ lam
    return EifResult(eif=eif, lam=lam, lam_inv=lam_inv, H=H, mu=mu, score_mean=scores.mean(axis=0))


def eif_for(fit, ds: Dataset) -> EifResult:
    """EIF of a :class:`NuisanceFit` or :class:`TargetedEstimate` on `ds`."""
    if isinstance(fit, TargetedEstimate):
        q0, q1 = fit.logit_mu0, fit.logit_mu1
        pi = fit.pi_tilde
        F = fit.design.evaluate(ds.x)
    else:
        F = fit.design.evaluate(ds.x)
        q0 = fit.h
        q1 = fit.h + F @ fit.beta_init
        pi = fit.pi_tilde
    return compute_eif(F, ds.delta, ds.a_observed, ds.y, _clip(expit(q1)), _clip(expit(q0)), pi)


def estimate_variance(eif) -> np.ndarray:
    """Covariance of beta-hat: ``(1/n) sum D_i D_i' / n``."""
    D = eif.eif if isinstance(eif, (EifResult, TargetedEstimate)) else np.asarray(eif)
    n = D.shape[0]
    return D.T @ D / n / n


# -- targeting ----------------------------------------------------------------


@dataclass(frozen=True)
class TargetedEstimate:
    beta: np.ndarray
    cov: np.ndarray
    eif: np.ndarray
    mean_eif: np.ndarray
    epsilon_trace: tuple[np.ndarray, ...]
    iterations: int
    converged: bool
    tol: float
    beta_init: np.ndarray
    design: EffectDesign
    logit_mu0: np.ndarray
    logit_mu1: np.ndarray
    pi_tilde: np.ndarray
    lam: np.ndarray
    constraint_error: tuple[float, ...]
    meta: dict = field(default_factory=dict)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))

    @property
    def degenerate(self) -> np.ndarray:
        """Coordinates whose estimated variance is exactly zero."""
        return np.diag(self.cov) == 0.0

    def to_dict(self) -> dict:
        return {
            "terms": list(self.design.names),
            "beta": self.beta.tolist(),
            "se": self.se.tolist(),
            "cov": self.cov.tolist(),
            "beta_init": self.beta_init.tolist(),
            "mean_eif": self.mean_eif.tolist(),
            "iterations": self.iterations,
            "converged": self.converged,
            "tol": self.tol,
            "epsilon_trace": [e.tolist() for e in self.epsilon_trace],
            "max_constraint_error": max(self.constraint_error, default=0.0),
            **{k: v for k, v in self.meta.items()},
        }


def default_tol(se: np.ndarray, n: int) -> float:
    se_min = float(np.min(se)) if len(se) else 0.0
    return max(1e-8, se_min / (math.sqrt(n) * math.log(n))) if n > 1 else 1e-8


def tmle_update(nf: NuisanceFit, ds: Dataset, tol: float | None = None,
                max_iter: int = MAX_ITER) -> TargetedEstimate:
    """Iterate the logistic fluctuation until the mean EIF is below tolerance.

    Each step fits ``epsilon`` by offset logistic regression of ``a`` on
    ``f(X) H(Y, X)`` with offset ``logit mu(Y, X)`` over observed rows, then
    sets ``beta += epsilon`` and ``h += epsilon' f H(0, .)``; pi_tilde is held
    fixed. H and Lambda are recomputed from the updated fit. With `tol` None
    the tolerance is ``max(1e-8, se_min / (sqrt(n) log n))``, re-evaluated at
    every step from the current standard errors.
    """
    F = nf.design.evaluate(ds.x)
    n = ds.n
    obs = ds.observed
    a = ds.a_observed
    y = ds.y.astype(np.float64)
    pi = nf.pi_tilde
    beta = nf.beta_init.astype(np.float64).copy()
    q0 = nf.h.astype(np.float64).copy()
    q1 = q0 + F @ beta

    eps_trace = []
    constraint = []
    converged = False
    cur_tol = tol
    k = 0
    res = None
    for k in range(1, max_iter + 1):
        mu1, mu0 = _clip(expit(q1)), _clip(expit(q0))
        H1 = clever_covariate(1.0, mu1, mu0, pi)
        H0 = H1 - 1.0
        Hy = np.where(y == 1, H1, H0)
        qy = np.where(y == 1, q1, q0)
        Z = F * Hy[:, None]
        eps = fit_logistic(a[obs], Z[obs], offset=qy[obs], tol=FLUCTUATION_TOL).coefficients
        eps_trace.append(eps)
        step = F @ eps
        beta = beta + eps
        q0 = q0 + step * H0
        q1 = q1 + step * H1
        constraint.append(float(np.max(np.abs(q1 - q0 - F @ beta))) if n else 0.0)

        res = compute_eif(F, ds.delta, a, y, _clip(expit(q1)), _clip(expit(q0)), pi)
        cov = estimate_variance(res)
        cur_tol = tol if tol is not None else default_tol(np.sqrt(np.diag(cov)), n)
        if np.all(np.abs(res.mean) <= cur_tol):
            converged = True
            break

    if not converged:
        log.warning("targeting stopped after %d iterations; mean EIF %s", max_iter, res.mean)
    cov = estimate_variance(res)
    return TargetedEstimate(
        beta=beta,
        cov=cov,
        eif=res.eif,
        mean_eif=res.mean,
        epsilon_trace=tuple(eps_trace),
        iterations=k,
        converged=converged,
        tol=float(cur_tol),
        beta_init=nf.beta_init.copy(),
        design=nf.design,
        logit_mu0=q0,
        logit_mu1=q1,
        pi_tilde=pi,
        lam=res.lam,
        constraint_error=tuple(constraint),
        meta={**nf.meta, "max_iter": max_iter,
              "tol_rule": "fixed" if tol is not None else "max(1e-8, se_min/(sqrt(n) log n))",
              "lambda_recomputed_each_iteration": True},
    )


# -- inference ----------------------------------------------------------------


@dataclass(frozen=True)
class OrEstimate:
    log_or: float
    se: float
    ci_low: float
    ci_high: float
    level: float

    @property
    def odds_ratio(self) -> float:
        return math.exp(self.log_or)

    @property
    def or_ci(self) -> tuple[float, float]:
        return math.exp(self.ci_low), math.exp(self.ci_high)

    @property
    def ve_percent(self) -> float:
        return (1.0 - self.odds_ratio) * 100.0

    @property
    def ve_ci(self) -> tuple[float, float]:
        lo, hi = self.or_ci
        return (1.0 - hi) * 100.0, (1.0 - lo) * 100.0

    def to_dict(self) -> dict:
        return {
            "log_or": self.log_or,
            "se": self.se,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "level": self.level,
            "or": self.odds_ratio,
            "or_ci": list(self.or_ci),
            "ve_percent": self.ve_percent,
            "ve_ci": list(self.ve_ci),
        }


def wald(log_or: float, se: float, level: float = 0.95) -> OrEstimate:
    z = norm.ppf(0.5 + level / 2.0)
    return OrEstimate(float(log_or), float(se), float(log_or - z * se), float(log_or + z * se), level)


def or_at_x(te: TargetedEstimate, fx, level: float = 0.95) -> OrEstimate:
    """Log odds ratio ``beta' fx`` with delta-method standard error ``sqrt(fx' cov fx)``."""
    fx = np.asarray(fx, dtype=np.float64).ravel()
    if fx.shape != te.beta.shape:
        raise ValueError(f"fx has length {fx.size}, design has {te.beta.size} terms")
    return wald(float(te.beta @ fx), math.sqrt(max(float(fx @ te.cov @ fx), 0.0)), level)


def tmle(ds: Dataset, design: EffectDesign, basis: NuisanceBasis, cv: int = 10, *,
         cross_fit: bool = False, tol: float | None = None, max_iter: int = MAX_ITER,
         random_state=0, backend: str | None = None) -> TargetedEstimate:
    """Initial fit followed by targeting."""
    nf = fit_initial(ds, design, basis, cv, cross_fit=cross_fit, random_state=random_state,
                     backend=backend)
    return tmle_update(nf, ds, tol=tol, max_iter=max_iter)


def logit_clipped(p):
    return logit(_clip(p))
