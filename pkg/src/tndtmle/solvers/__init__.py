"""Numerical solvers: IRLS logistic regression and cross-validated lasso paths."""
from ._backend import BACKEND, HAVE_COMPILED, get_kernel
from .lasso import LassoPath, fit_lasso_logistic, fit_lasso_path, kkt_violations, lambda_grid, lambda_max
from .logistic import GlmFit, fit_logistic, sandwich_cov

__all__ = [
    "BACKEND",
    "HAVE_COMPILED",
    "GlmFit",
    "LassoPath",
    "fit_lasso_logistic",
    "fit_lasso_path",
    "fit_logistic",
    "get_kernel",
    "kkt_violations",
    "lambda_grid",
    "lambda_max",
    "sandwich_cov",
]
