"""Monte Carlo evaluation of the estimators under simulated test-negative designs.

A replicate draws a population from a fixed cascade X -> A -> Y -> W -> D,
samples symptomatic (D=1) individuals into phase one, chooses phase-two
rows with observed exposure under one of three designs, and runs each
requested estimator. Replicate streams come from ``SeedSequence(seed,
spawn_key=(rep,))`` so results do not depend on how replicates are spread
over workers.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from itertools import product

import numpy as np
from scipy.special import expit
from scipy.stats import norm, truncnorm

from . import __version__
from .comparators import METHODS as COMPARATOR_METHODS
from .comparators import run_comparators
from .data import Column, Dataset, Schema
from .design import BasisConfig, build_effect_design, build_nuisance_basis
from .exceptions import ConfigError, DesignInfeasibleError, TNDError
from .tmle import FLUCTUATION_TOL, MAX_ITER, tmle

log = logging.getLogger(__name__)

SETTINGS = ("main_effects", "interaction", "splines")
DESIGNS = ("biased_1_1", "biased_1_3", "all")
ESTIMATORS = ("TMLE",) + COMPARATOR_METHODS
GRID_N = (500, 1000, 2000, 3000)
GRID_BETA = (math.log(0.2), math.log(0.7), math.log(1.0))

SCHEMA = Schema((Column("x_f", "binary"), Column("x_co", "binary"), Column("x_t", "continuous")))

# Noncase quotas by (x_f, x_co) stratum.
NONCASE_QUOTAS = {(1, 0): 0.40, (0, 0): 0.10, (1, 1): 0.10, (0, 1): 0.40}
DESIGN_RATIO = {"biased_1_1": 1, "biased_1_3": 3}

# Calendar-date surrogate: Normal(90, 30) truncated to [0, 270] days.
XT_MEAN, XT_SD, XT_LOW, XT_HIGH = 90.0, 30.0, 0.0, 270.0
P_FEMALE, P_COMORBID = 0.48, 0.23


@dataclass(frozen=True)
class SimConfig:
    setting: str = "main_effects"
    beta_f: float = math.log(0.7)
    design: str = "all"
    n: int = 3000
    N: int = 50_000
    reps: int = 200
    seed: int = 20240101
    estimators: tuple[str, ...] = ESTIMATORS
    cv_folds: int = 10
    n_knots: int = 3
    degree: int = 2
    cross_fit: bool = False
    ci_level: float = 0.95

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ConfigError(f"setting must be one of {SETTINGS}, got {self.setting!r}")
        if self.design not in DESIGNS:
            raise ConfigError(f"design must be one of {DESIGNS}, got {self.design!r}")
        if self.reps < 1:
            raise ConfigError(f"reps must be >= 1, got {self.reps}")
        if self.n < 1 or self.N < self.n:
            raise ConfigError(f"need 1 <= n <= N, got n={self.n}, N={self.N}")
        if not math.isfinite(self.beta_f):
            raise ConfigError("beta_f must be finite")
        if not 0 < self.ci_level < 1:
            raise ConfigError("ci_level must be in (0, 1)")
        if self.cv_folds < 2:
            raise ConfigError("cv_folds must be >= 2")
        est = tuple(self.estimators)
        bad = [e for e in est if e not in ESTIMATORS]
        if bad or not est:
            raise ConfigError(f"estimators must be a nonempty subset of {ESTIMATORS}, got {list(est)}")
        object.__setattr__(self, "estimators", est)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["estimators"] = list(self.estimators)
        return d

    @property
    def key(self) -> tuple:
        return (self.setting, self.design, self.n, self.beta_f)


def replicate_rng(seed: int, rep: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(rep,)))


# -- population ---------------------------------------------------------------


@dataclass(frozen=True)
class Population:
    """Columns of a simulated population; each array has one entry per individual."""

    x_f: np.ndarray
    x_co: np.ndarray
    x_t: np.ndarray
    a: np.ndarray
    y: np.ndarray
    w: np.ndarray
    d: np.ndarray

    @property
    def N(self) -> int:
        return len(self.a)


def _hinge(t, k):
    return np.maximum(0.0, t - k)


def exposure_logit(setting, x_f, x_co, x_t):
    eta = math.log(0.33) + math.log(3) * x_f + math.log(0.25) * x_co + math.log(1.01) * x_t
    if setting in ("interaction", "splines"):
        eta = eta + math.log(4) * x_f * x_co
    if setting == "splines":
        eta = eta + math.log(1.00) * _hinge(x_t, 90) + math.log(0.97) * _hinge(x_t, 135)
    return eta


def infection_logit(setting, beta_f, a, x_f, x_co, x_t):
    eta = math.log(0.15) + beta_f * a + math.log(3) * x_f + math.log(4) * x_co + math.log(0.99) * x_t
    if setting in ("interaction", "splines"):
        eta = eta + math.log(0.25) * x_f * x_co
    if setting == "splines":
        eta = eta + math.log(1.00) * _hinge(x_t, 90) + math.log(1.03) * _hinge(x_t, 135)
    return eta


def other_pathogen_logit(x_f, x_co, x_t):
    return (math.log(0.10) + math.log(2) * x_co + math.log(2) * x_f + math.log(1.01) * x_t
            + math.log(0.99) * _hinge(x_t, 90) + math.log(0.98) * _hinge(x_t, 180))


def symptom_logit(x_f, x_co, y, w):
    return (math.log(0.10) + math.log(2) * x_co + math.log(13.5) * y + math.log(1.08) * y * x_f
            + math.log(0.53) * y * x_co + math.log(4) * w + math.log(6) * w * x_f
            + math.log(0.53) * w * x_co)


def _bernoulli(rng, p):
    return (rng.random(len(p)) < p).astype(np.int8)


def generate_population(cfg: SimConfig, rng: np.random.Generator) -> Population:
    N = cfg.N
    x_f = (rng.random(N) < P_FEMALE).astype(np.int8)
    x_co = (rng.random(N) < P_COMORBID).astype(np.int8)
    lo, hi = (XT_LOW - XT_MEAN) / XT_SD, (XT_HIGH - XT_MEAN) / XT_SD
    x_t = truncnorm.rvs(lo, hi, loc=XT_MEAN, scale=XT_SD, size=N, random_state=rng)
    a = _bernoulli(rng, expit(exposure_logit(cfg.setting, x_f, x_co, x_t)))
    y = _bernoulli(rng, expit(infection_logit(cfg.setting, cfg.beta_f, a, x_f, x_co, x_t)))
    w = _bernoulli(rng, expit(other_pathogen_logit(x_f, x_co, x_t)))
    d = _bernoulli(rng, expit(symptom_logit(x_f, x_co, y, w)))
    return Population(x_f, x_co, x_t, a, y, w, d)


def sample_phase_one(pop: Population, n: int, rng: np.random.Generator) -> Dataset:
    """Uniform sample of `n` symptomatic individuals, all with exposure observed."""
    sym = np.flatnonzero(pop.d == 1)
    if len(sym) < n:
        raise DesignInfeasibleError(f"population has {len(sym)} symptomatic rows, need {n}")
    idx = np.sort(rng.choice(sym, size=n, replace=False))
    x = np.column_stack([pop.x_f[idx], pop.x_co[idx], pop.x_t[idx]]).astype(np.float64)
    return Dataset.from_arrays(np.ones(n, dtype=np.int8), pop.a[idx].astype(np.float64),
                               pop.y[idx], x, SCHEMA)


# -- phase two ----------------------------------------------------------------


def _largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    """Integer split of `total` proportional to `weights`; ties go to the lower index."""
    weights = np.asarray(weights, dtype=np.float64)
    if total == 0 or weights.sum() <= 0:
        return np.zeros(len(weights), dtype=np.int64)
    exact = total * weights / weights.sum()
    out = np.floor(exact).astype(np.int64)
    rem = total - int(out.sum())
    order = np.lexsort((np.arange(len(weights)), -(exact - out)))
    out[order[:rem]] += 1
    return out


def allocate_noncases(required: int, quotas, available) -> np.ndarray:
    """Per-stratum noncase counts meeting `required` in total.

    Targets are `required` split by `quotas` (largest remainder). A stratum
    short of its target gives all it has, and the shortfall is spread over
    the strata with spare rows in proportion to their spare counts, repeating
    until met.
    """
    available = np.asarray(available, dtype=np.int64)
    if available.sum() < required:
        raise DesignInfeasibleError(
            f"need {required} noncases but only {int(available.sum())} are available")
    alloc = np.minimum(_largest_remainder(required, quotas), available)
    short = required - int(alloc.sum())
    while short > 0:
        spare = available - alloc
        extra = np.minimum(_largest_remainder(short, spare), spare)
        alloc += extra
        short = required - int(alloc.sum())
    return alloc


def apply_two_phase(ds: Dataset, design: str, rng: np.random.Generator) -> Dataset:
    """Assign observed-exposure indicators under `design`; exposure is masked elsewhere."""
    if design == "all":
        return ds.with_delta(np.ones(ds.n, dtype=np.int8))
    if design not in DESIGN_RATIO:
        raise ConfigError(f"unknown design {design!r}")
    cases = ds.y == 1
    n_cases = int(cases.sum())
    x_f = ds.column("x_f").astype(int)
    x_co = ds.column("x_co").astype(int)
    strata = list(NONCASE_QUOTAS)
    pools = [np.flatnonzero(~cases & (x_f == f) & (x_co == c)) for f, c in strata]
    alloc = allocate_noncases(DESIGN_RATIO[design] * n_cases,
                              [NONCASE_QUOTAS[s] for s in strata], [len(p) for p in pools])
    delta = cases.astype(np.int8)
    for pool, k in zip(pools, alloc):
        if k:
            delta[rng.choice(pool, size=int(k), replace=False)] = 1
    return ds.with_delta(delta)


def simulate_dataset(cfg: SimConfig, rep: int) -> tuple[Dataset, float]:
    """Phase-two dataset for replicate `rep` and its phase-one case fraction."""
    rng = replicate_rng(cfg.seed, rep)
    pop = generate_population(cfg, rng)
    ds = sample_phase_one(pop, cfg.n, rng)
    case_fraction = float(ds.y.mean())
    return apply_two_phase(ds, cfg.design, rng), case_fraction


# -- replicates ---------------------------------------------------------------


@dataclass(frozen=True)
class ReplicateRecord:
    rep: int
    estimator: str
    estimate: float
    se: float
    failed: bool
    case_fraction: float
    beta_init: float = float("nan")
    iterations: int = 0
    max_mean_eif: float = float("nan")
    tol: float = float("nan")
    reason: str = ""


def _failed(rep, est, cf, reason):
    return ReplicateRecord(rep, est, float("nan"), float("nan"), True, cf, reason=reason)


def run_replicate(cfg: SimConfig, rep: int) -> list[ReplicateRecord]:
    try:
        ds, cf = simulate_dataset(cfg, rep)
    except TNDError as exc:
        return [_failed(rep, e, float("nan"), str(exc)) for e in cfg.estimators]
    out = []
    for est in cfg.estimators:
        try:
            if est == "TMLE":
                design = build_effect_design(["intercept"], SCHEMA)
                basis = build_nuisance_basis(ds, BasisConfig(n_knots=cfg.n_knots, degree=cfg.degree))
                te = tmle(ds, design, basis, cfg.cv_folds, cross_fit=cfg.cross_fit, random_state=rep)
                if not te.converged:
                    out.append(_failed(rep, est, cf, "targeting did not converge"))
                    continue
                out.append(ReplicateRecord(rep, est, float(te.beta[0]), float(te.se[0]), False, cf,
                                           float(te.beta_init[0]), te.iterations,
                                           float(np.max(np.abs(te.mean_eif))), te.tol))
            else:
                r = run_comparators(ds, (est,))[est]
                if not r.converged:
                    out.append(_failed(rep, est, cf, "fit did not converge"))
                    continue
                out.append(ReplicateRecord(rep, est, r.coef, r.se, False, cf))
        except TNDError as exc:
            out.append(_failed(rep, est, cf, f"{type(exc).__name__}: {exc}"))
    return out


def _run_chunk(args):
    cfg, reps = args
    return [rec for r in reps for rec in run_replicate(cfg, r)]


# -- metrics ------------------------------------------------------------------


METRIC_FIELDS = ("estimator", "setting", "design", "n", "beta_f", "reps", "failed_reps",
                 "mean_estimate", "bias", "coverage", "type1_or_power", "mcsd", "mean_se")


@dataclass(frozen=True)
class MetricsRow:
    estimator: str
    setting: str
    design: str
    n: int
    beta_f: float
    reps: int
    failed_reps: int
    mean_estimate: float
    bias: float
    coverage: float
    type1_or_power: float
    mcsd: float
    mean_se: float

    @property
    def key(self) -> tuple:
        return (self.estimator, self.setting, self.design, self.n, self.beta_f)


def summarize_records(cfg: SimConfig, records) -> list[MetricsRow]:
    z = norm.ppf(0.5 + cfg.ci_level / 2.0)
    z05 = norm.ppf(0.975)
    rows = []
    for est in cfg.estimators:
        recs = [r for r in records if r.estimator == est]
        ok = [r for r in recs if not r.failed]
        b = np.array([r.estimate for r in ok])
        se = np.array([r.se for r in ok])
        nan = float("nan")
        if len(ok):
            cover = float(np.mean((b - z * se <= cfg.beta_f) & (cfg.beta_f <= b + z * se)))
            reject = float(np.mean(np.abs(b) > z05 * se))
            mcsd = float(np.std(b, ddof=1)) if len(ok) > 1 else nan
            mean_b, bias, mean_se = float(b.mean()), float(b.mean() - cfg.beta_f), float(se.mean())
        else:
            cover = reject = mcsd = mean_b = bias = mean_se = nan
        rows.append(MetricsRow(est, cfg.setting, cfg.design, cfg.n, cfg.beta_f, len(recs),
                               len(recs) - len(ok), mean_b, bias, cover, reject, mcsd, mean_se))
    return rows


@dataclass(frozen=True)
class MetricsTable:
    rows: tuple[MetricsRow, ...]
    configs: tuple[SimConfig, ...] = ()

    def get(self, estimator, setting=None, design=None, n=None, beta_f=None) -> MetricsRow:
        hits = [r for r in self.rows if r.estimator == estimator
                and (setting is None or r.setting == setting)
                and (design is None or r.design == design)
                and (n is None or r.n == n)
                and (beta_f is None or r.beta_f == beta_f)]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} rows match {estimator!r}")
        return hits[0]

    def to_csv(self, header: dict | None = None) -> str:
        buf = io.StringIO()
        if header:
            for line in json.dumps(header, sort_keys=True, indent=1).splitlines():
                buf.write(f"# {line}\n")
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(METRIC_FIELDS)
        for r in self.rows:
            wr.writerow([_fmt(getattr(r, f)) for f in METRIC_FIELDS])
        return buf.getvalue()

    def to_json(self) -> list[dict]:
        return [asdict(r) for r in self.rows]


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_metrics_csv(path) -> tuple[list[dict], list[str]]:
    """Rows of a metrics CSV as dicts plus its ``#`` comment lines."""
    comments, body = [], []
    with open(path, newline="") as fh:
        for line in fh:
            (comments if line.startswith("#") else body).append(line)
    rows = list(csv.DictReader(body))
    return rows, comments


@dataclass(frozen=True)
class MonteCarloResult:
    config: SimConfig
    metrics: MetricsTable
    records: tuple[ReplicateRecord, ...]

    def estimates(self, estimator: str, field_name: str = "estimate") -> np.ndarray:
        return np.array([getattr(r, field_name) for r in self.records
                         if r.estimator == estimator and not r.failed])


def run_monte_carlo(cfg: SimConfig, workers: int | None = 1) -> MonteCarloResult:
    """Run all replicates of one scenario, optionally across processes."""
    workers = default_workers() if workers is None else max(1, int(workers))
    reps = list(range(cfg.reps))
    if workers == 1 or cfg.reps == 1:
        records = _run_chunk((cfg, reps))
    else:
        chunks = [reps[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as ex:
            records = [rec for part in ex.map(_run_chunk, [(cfg, c) for c in chunks]) for rec in part]
        records.sort(key=lambda r: (r.rep, cfg.estimators.index(r.estimator)))
    rows = summarize_records(cfg, records)
    for r in rows:
        log.info("%s %s %s n=%d beta_f=%.4f: bias=%.4f coverage=%.3f failed=%d", r.estimator,
                 r.setting, r.design, r.n, r.beta_f, r.bias, r.coverage, r.failed_reps)
    return MonteCarloResult(cfg, MetricsTable(tuple(rows), (cfg,)), tuple(records))


def default_workers() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def expand_grid(base: SimConfig, settings=SETTINGS, betas=GRID_BETA, designs=DESIGNS,
                sizes=GRID_N) -> list[SimConfig]:
    """Scenario configs over the cross product, sharing every other field of `base`."""
    return [replace(base, setting=s, beta_f=b, design=d, n=n)
            for s, b, d, n in product(settings, betas, designs, sizes)]


def run_grid(configs, workers: int | None = 1) -> MetricsTable:
    results = [run_monte_carlo(c, workers) for c in configs]
    return MetricsTable(tuple(r for res in results for r in res.metrics.rows), tuple(configs))


def run_header(configs) -> dict:
    """Metadata embedded in output files."""
    return {
        "tndtmle_version": __version__,
        "x_t": "surrogate: Normal(90, 30) truncated to [0, 270]",
        "targeting": {"max_iter": MAX_ITER, "tol": "max(1e-8, min(se) / (sqrt(n) * log(n)))",
                      "fluctuation_tol": FLUCTUATION_TOL},
        "learner": "lasso over spline/indicator basis, lambda by minimum CV deviance",
        "scenarios": [c.to_dict() for c in configs],
    }
