"""Logistic-regression comparators for the exposure log odds ratio.

Ordinary maximum likelihood regresses Y on A and covariates among rows with
observed exposure. The pseudo-likelihood variant adds a per-row offset
correcting for case/noncase sampling fractions within phase-two strata.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Dataset
from .design import build_effect_design
from .exceptions import DataError
from .solvers import fit_logistic, sandwich_cov

METHODS = ("MLEx", "nMLE", "PLMx", "PLEx", "nPLM", "nPLE")
SANDWICH_METHODS = frozenset({"PLEx", "nPLE"})

# Covariate terms used by the simulation comparators.
MAIN_EFFECTS = ("x_f", "x_co", "x_t")
WITH_INTERACTION = MAIN_EFFECTS + ("x_f*x_co",)


@dataclass(frozen=True)
class ComparatorResult:
    method: str
    coef: float
    se_model: float
    se_empirical: float
    converged: bool

    @property
    def se(self) -> float:
        """Sandwich SE for PLEx and nPLE, model SE otherwise."""
        return self.se_empirical if self.method in SANDWICH_METHODS else self.se_model

    def to_dict(self) -> dict:
        return {"method": self.method, "coef": self.coef, "se": self.se,
                "se_model": self.se_model, "se_empirical": self.se_empirical,
                "converged": self.converged}


def _regressors(ds: Dataset, covariates: Sequence[str]) -> np.ndarray:
    cols = [np.ones(ds.n), ds.a_observed]
    if covariates:
        cols.append(build_effect_design(list(covariates), ds.schema).evaluate(ds.x))
    return np.column_stack(cols)


def _fit(ds: Dataset, covariates, offset, methods) -> tuple[ComparatorResult, ...]:
    obs = ds.observed
    X = _regressors(ds, covariates)[obs]
    y = ds.y[obs].astype(np.float64)
    off = None if offset is None else offset[obs]
    fit = fit_logistic(y, X, offset=off)
    se_m = math.sqrt(fit.cov[1, 1])
    se_e = math.sqrt(sandwich_cov(fit, y, X, off)[1, 1])
    coef = float(fit.coefficients[1])
    return tuple(ComparatorResult(m, coef, se_m, se_e, fit.converged) for m in methods)


def fit_ordinary_mle(ds: Dataset, covariates: Sequence[str] = (), method: str = "nMLE") -> ComparatorResult:
    """Logistic regression of Y on an intercept, A and `covariates` over observed rows.

    `covariates` are term strings as accepted by
    :func:`~tndtmle.design.build_effect_design`, e.g. ``["x_f", "x_f*x_co"]``.
    """
    return _fit(ds, covariates, None, (method,))[0]


def default_strata(ds: Dataset) -> np.ndarray:
    """Four sex by comorbidity strata (``2 * x_f + x_co``) used by the simulation designs."""
    return (2 * ds.column("x_f") + ds.column("x_co")).astype(np.int64)


def sampling_offset(ds: Dataset, strata) -> np.ndarray:
    """Per-row offset ``log(n2(1,s)/n1(1,s)) - log(n2(0,s)/n1(0,s))``.

    ``n1(y, s)`` counts all rows of the dataset in the cell and ``n2(y, s)``
    those with observed exposure. A cell with no phase-one rows contributes
    a sampling fraction of 1. A stratum containing observed rows but no
    observed row of one outcome, while phase one has some, has an undefined
    offset and raises :class:`DataError`.
    """
    strata = np.asarray(strata)
    if strata.shape != (ds.n,):
        raise DataError(f"strata has shape {strata.shape}, expected ({ds.n},)")
    obs = ds.observed
    off = np.zeros(ds.n)
    for s in np.unique(strata):
        in_s = strata == s
        if not obs[in_s].any():
            continue
        logfrac = []
        for yv in (0, 1):
            cell = in_s & (ds.y == yv)
            n1 = int(cell.sum())
            n2 = int((cell & obs).sum())
            if n1 == 0:
                logfrac.append(0.0)
            elif n2 == 0:
                raise DataError(f"stratum {s!r} has no phase-two rows with y={yv} "
                                f"but {n1} phase-one rows; offset undefined")
            else:
                logfrac.append(math.log(n2 / n1))
        off[in_s] = logfrac[1] - logfrac[0]
    return off


def fit_pseudo_likelihood(ds: Dataset, covariates: Sequence[str] = (), strata=None,
                          methods: tuple[str, str] = ("nPLM", "nPLE")) -> tuple[ComparatorResult, ComparatorResult]:
    """Offset logistic regression for stratified case/noncase phase-two sampling.

    Returns a model-SE and a sandwich-SE result sharing one point estimate.
    `strata` defaults to :func:`default_strata`.
    """
    if strata is None:
        strata = default_strata(ds)
    return _fit(ds, covariates, sampling_offset(ds, strata), methods)


def run_comparators(ds: Dataset, methods: Sequence[str] = METHODS, strata=None,
                    main_effects: Sequence[str] = MAIN_EFFECTS,
                    with_interaction: Sequence[str] = WITH_INTERACTION) -> dict[str, ComparatorResult]:
    """Fit the requested comparators; shared fits are computed once."""
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ValueError(f"unknown comparator(s) {sorted(unknown)}")
    out: dict[str, ComparatorResult] = {}
    if "MLEx" in methods:
        out["MLEx"] = fit_ordinary_mle(ds, with_interaction, "MLEx")
    if "nMLE" in methods:
        out["nMLE"] = fit_ordinary_mle(ds, main_effects, "nMLE")
    if {"PLMx", "PLEx"} & set(methods):
        for r in fit_pseudo_likelihood(ds, with_interaction, strata, ("PLMx", "PLEx")):
            out[r.method] = r
    if {"nPLM", "nPLE"} & set(methods):
        for r in fit_pseudo_likelihood(ds, main_effects, strata, ("nPLM", "nPLE")):
            out[r.method] = r
    return {m: out[m] for m in methods}


__all__ = [
    "ComparatorResult",
    "METHODS",
    "default_strata",
    "fit_ordinary_mle",
    "fit_pseudo_likelihood",
    "run_comparators",
    "sampling_offset",
]
