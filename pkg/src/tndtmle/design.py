"""Effect-modification design and flexible nuisance basis.

:class:`EffectDesign` is the known function mapping covariates to the
log odds ratio design vector. :class:`NuisanceBasis` spans the nuisance
functions (main effects, pairwise products and first-order hinge functions)
that a lasso fit selects from.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

import numpy as np

from .data import Dataset, Schema
from .exceptions import ConfigError

INTERCEPT_NAMES = ("intercept", "1", "(intercept)")


def _as_matrix(x_or_ds) -> np.ndarray:
    if isinstance(x_or_ds, Dataset):
        return x_or_ds.x
    x = np.asarray(x_or_ds, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


@dataclass(frozen=True)
class Term:
    """A product of covariates; the empty product is the intercept."""

    factors: tuple[int, ...]
    name: str


@dataclass(frozen=True)
class EffectDesign:
    terms: tuple[Term, ...]
    schema: Schema

    @property
    def b(self) -> int:
        return len(self.terms)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(t.name for t in self.terms)

    def evaluate(self, x) -> np.ndarray:
        """Design matrix with one row per covariate row, shape ``(n, b)``."""
        x = _as_matrix(x)
        out = np.ones((x.shape[0], self.b))
        for k, t in enumerate(self.terms):
            for j in t.factors:
                out[:, k] *= x[:, j]
        return out

    def to_spec(self) -> list[str]:
        return list(self.names)


def build_effect_design(spec: Sequence[str], schema) -> EffectDesign:
    """Parse term strings such as ``["intercept", "x_co", "x_f*x_co"]``.

    The intercept is not added implicitly: the terms are used exactly as
    given, in order.
    """
    schema = Schema.from_spec(schema)
    if not spec:
        raise ConfigError("effect design needs at least one term")
    terms = []
    for raw in spec:
        s = str(raw).strip()
        if s.lower() in INTERCEPT_NAMES:
            terms.append(Term((), "intercept"))
            continue
        parts = [p.strip() for p in s.replace(":", "*").split("*")]
        idx = []
        for p in parts:
            if p not in schema.names:
                raise ConfigError(f"effect term {s!r} references unknown covariate {p!r}")
            idx.append(schema.index(p))
        terms.append(Term(tuple(idx), "*".join(parts)))
    names = [t.name for t in terms]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate effect terms in {names}")
    return EffectDesign(tuple(terms), schema)


@dataclass(frozen=True)
class BasisConfig:
    n_knots: int = 10
    degree: int = 2
    standardize: bool = True

    def __post_init__(self):
        if self.n_knots < 0:
            raise ConfigError("n_knots must be >= 0")
        if self.degree not in (1, 2):
            raise ConfigError("degree must be 1 or 2")


@dataclass(frozen=True)
class NuisanceBasis:
    """Basis over raw covariates.

    Continuous covariates are standardized with the stored `center`/`scale`
    before products and hinges are formed; binary covariates are used as is.
    Hinge knots are stored on the standardized scale.
    """

    schema: Schema
    config: BasisConfig
    center: np.ndarray
    scale: np.ndarray
    knots: tuple[tuple[float, ...], ...]
    names: tuple[str, ...]

    @property
    def p(self) -> int:
        return len(self.names)

    def standardized(self, x) -> np.ndarray:
        return (_as_matrix(x) - self.center) / self.scale

    def evaluate(self, x) -> np.ndarray:
        z = self.standardized(x)
        r = z.shape[1]
        cols = [z[:, j] for j in range(r)]
        if self.config.degree == 2:
            cols += [z[:, i] * z[:, j] for i, j in combinations(range(r), 2)]
        for j in range(r):
            for k in self.knots[j]:
                cols.append(np.maximum(0.0, z[:, j] - k))
        if not cols:
            return np.empty((z.shape[0], 0))
        return np.column_stack(cols)

    def raw_knots(self, name: str) -> tuple[float, ...]:
        j = self.schema.index(name)
        return tuple(float(k * self.scale[j] + self.center[j]) for k in self.knots[j])


def build_nuisance_basis(ds: Dataset, config: BasisConfig | None = None, **kwargs) -> NuisanceBasis:
    """Place knots and standardization from `ds`.

    ``n_knots`` knots sit at the empirical quantiles ``k / (n_knots + 1)``,
    ``k = 1..n_knots``, of each continuous covariate; duplicate knots and
    knots at the column maximum (which would give an all-zero column) are
    dropped.
    """
    if config is None:
        config = BasisConfig(**kwargs)
    elif kwargs:
        raise TypeError("pass either a BasisConfig or keyword settings, not both")
    schema = ds.schema
    r = len(schema.columns)
    center = np.zeros(r)
    scale = np.ones(r)
    knots: list[tuple[float, ...]] = []
    names = list(schema.names)
    if config.degree == 2:
        names += [f"{schema.names[i]}*{schema.names[j]}" for i, j in combinations(range(r), 2)]
    hinge_names = []
    for j, col in enumerate(schema.columns):
        v = ds.x[:, j]
        if col.kind != "continuous":
            knots.append(())
            continue
        if config.standardize:
            sd = v.std()
            center[j] = v.mean()
            scale[j] = sd if sd > 0 else 1.0
        if config.n_knots == 0:
            knots.append(())
            continue
        if np.unique(v).size < 2:
            raise ConfigError(f"cannot place knots on {col.name!r}: fewer than 2 distinct values")
        z = (v - center[j]) / scale[j]
        probs = np.arange(1, config.n_knots + 1) / (config.n_knots + 1)
        ks = np.unique(np.quantile(z, probs))
        ks = ks[ks < z.max()]
        knots.append(tuple(float(k) for k in ks))
        hinge_names += [f"h({col.name}>{k * scale[j] + center[j]:.4g})" for k in ks]
    return NuisanceBasis(schema, config, center, scale, tuple(knots), tuple(names + hinge_names))
