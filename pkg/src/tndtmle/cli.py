"""Command-line interface: ``tndtmle {estimate,simulate,summarize}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 estimation failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .comparators import MAIN_EFFECTS, METHODS, WITH_INTERACTION, run_comparators
from .data import load_dataset
from .design import BasisConfig, build_effect_design, build_nuisance_basis
from .exceptions import ConfigError, DataError, EstimationError, TNDError
from .simulation import (DESIGNS, ESTIMATORS, SETTINGS, MetricsTable, SimConfig, default_workers,
                         expand_grid, read_metrics_csv, run_header, run_monte_carlo)
from .tmle import or_at_x, tmle, wald

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("tndtmle")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_ESTIMATION = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


_LOG_RE = re.compile(r"^log\(\s*([0-9.eE+-]+)\s*\)$")


def parse_beta(text) -> float:
    """A float, or ``log(x)`` for the log of a positive number."""
    if isinstance(text, (int, float)):
        return float(text)
    s = str(text).strip()
    m = _LOG_RE.match(s)
    try:
        if m:
            return math.log(float(m.group(1)))
        return float(s)
    except ValueError as exc:
        raise ConfigError(f"cannot parse effect size {text!r}") from exc


def _split(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {str(p)!r} not found")
    try:
        with p.open("rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tndtmle", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    est = sub.add_parser("estimate", help="estimate the conditional log odds ratio on a CSV")
    est.add_argument("--input", required=True)
    est.add_argument("--config")
    est.add_argument("--out", help="JSON report path (default: stdout)")
    est.add_argument("--estimators", help="comma-separated subset of " + ",".join(ESTIMATORS))
    est.add_argument("--cross-fit", action="store_true", default=None)
    est.add_argument("--ci-level", type=float)
    est.add_argument("--seed", type=int)

    sim = sub.add_parser("simulate", help="run Monte Carlo scenarios")
    sim.add_argument("--config")
    sim.add_argument("--seed", type=int)
    sim.add_argument("--out", required=True, help="metrics CSV path; JSON is written alongside")
    sim.add_argument("--reps", type=int)
    sim.add_argument("--design", help="comma-separated subset of " + ",".join(DESIGNS))
    sim.add_argument("--setting", help="comma-separated subset of " + ",".join(SETTINGS))
    sim.add_argument("--beta-f", help="comma-separated log odds ratios; log(x) accepted")
    sim.add_argument("--n", help="comma-separated phase-one sizes")
    sim.add_argument("--estimators")
    sim.add_argument("--cross-fit", action="store_true", default=None)
    sim.add_argument("--ci-level", type=float)
    sim.add_argument("--threads", type=int)
    sim.add_argument("--full-grid", action="store_true")

    summ = sub.add_parser("summarize", help="merge metrics CSVs")
    summ.add_argument("paths", nargs="+")
    summ.add_argument("--out", help="merged CSV path (default: stdout)")
    return parser


# -- estimate -----------------------------------------------------------------


def _strata_from(ds, columns):
    codes = np.zeros(ds.n, dtype=np.int64)
    for c in columns:
        v = ds.column(c)
        _, inv = np.unique(v, return_inverse=True)
        codes = codes * (int(inv.max()) + 1) + inv
    return codes


def cmd_estimate(args) -> int:
    cfg = load_config(args.config)
    ecfg = cfg.get("estimate", {})
    bcfg = cfg.get("basis", {})
    ccfg = cfg.get("comparators", {})
    if not Path(args.input).is_file():
        raise UsageError(f"input file {args.input!r} not found")
    ds = load_dataset(args.input, cfg.get("schema"))
    estimators = _split(args.estimators) if args.estimators else list(ecfg.get("estimators", ["TMLE"]))
    bad = [e for e in estimators if e not in ESTIMATORS]
    if bad:
        raise ConfigError(f"unknown estimator(s) {bad}")
    level = args.ci_level if args.ci_level is not None else float(ecfg.get("ci_level", 0.95))
    if not 0 < level < 1:
        raise ConfigError("ci-level must be in (0, 1)")
    cross_fit = bool(args.cross_fit if args.cross_fit is not None else ecfg.get("cross_fit", False))
    seed = args.seed if args.seed is not None else int(ecfg.get("seed", 0))
    cv = int(ecfg.get("cv_folds", 10))
    terms = list(ecfg.get("effect_terms", ["intercept"]))

    report = {
        "tndtmle_version": __version__,
        "input": str(args.input),
        "n": ds.n,
        "n_observed": int(ds.observed.sum()),
        "config": {"effect_terms": terms, "cv_folds": cv, "cross_fit": cross_fit, "seed": seed,
                   "ci_level": level, "basis": bcfg, "estimators": estimators},
    }
    status = EXIT_OK
    if "TMLE" in estimators:
        design = build_effect_design(terms, ds.schema)
        try:
            basis_cfg = BasisConfig(**bcfg)
        except TypeError as exc:
            raise ConfigError(f"[basis]: {exc}") from exc
        basis = build_nuisance_basis(ds, basis_cfg)
        te = tmle(ds, design, basis, cv, cross_fit=cross_fit, random_state=seed)
        at = ecfg.get("report_at")
        fxs = np.asarray(at, dtype=float).reshape(-1, design.b) if at is not None else np.eye(design.b)
        report["tmle"] = te.to_dict()
        report["tmle"]["basis_terms"] = list(basis.names)
        report["odds_ratios"] = [{"fx": fx.tolist(), **or_at_x(te, fx, level).to_dict()} for fx in fxs]
        if not te.converged:
            log.error("targeting did not converge in %d iterations; mean EIF %s",
                      te.iterations, te.mean_eif.tolist())
            status = EXIT_ESTIMATION
    comps = [e for e in estimators if e in METHODS]
    if comps:
        # Simulation covariates when present, otherwise every column as a main effect.
        sim_like = set(MAIN_EFFECTS) <= set(ds.schema.names)
        main = ccfg.get("main_effects", list(MAIN_EFFECTS) if sim_like else list(ds.schema.names))
        inter = ccfg.get("with_interaction", list(WITH_INTERACTION) if sim_like else list(main))
        strata_cols = ccfg.get("strata", ["x_f", "x_co"] if sim_like else [])
        res = run_comparators(ds, comps, strata=_strata_from(ds, strata_cols),
                              main_effects=main, with_interaction=inter)
        report["comparators"] = [{**r.to_dict(), **wald(r.coef, r.se, level).to_dict()}
                                 for r in res.values()]
    text = json.dumps(report, indent=2, sort_keys=False)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return status


# -- simulate -----------------------------------------------------------------


def _listify(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


def resolve_sim_configs(args, cfg: dict) -> list[SimConfig]:
    s = dict(cfg.get("simulate", {}))
    seed = args.seed if args.seed is not None else s.get("seed")
    if seed is None:
        raise ConfigError("simulate needs a seed (--seed or [simulate] seed)")
    if args.reps is not None:
        s["reps"] = args.reps
    if args.cross_fit is not None:
        s["cross_fit"] = args.cross_fit
    if args.ci_level is not None:
        s["ci_level"] = args.ci_level
    if args.estimators:
        s["estimators"] = _split(args.estimators)
    settings = _split(args.setting) if args.setting else _listify(s.pop("setting", "main_effects"))
    designs = _split(args.design) if args.design else _listify(s.pop("design", "all"))
    betas = _split(args.beta_f) if args.beta_f else _listify(s.pop("beta_f", "log(0.7)"))
    sizes = _split(args.n) if args.n else _listify(s.pop("n", 3000))
    for k in ("setting", "design", "beta_f", "n", "seed", "threads", "full_grid", "dump_raw"):
        s.pop(k, None)
    known = set(SimConfig.__dataclass_fields__)
    unknown = set(s) - known
    if unknown:
        raise ConfigError(f"unknown [simulate] keys {sorted(unknown)}")
    if "estimators" in s:
        s["estimators"] = tuple(s["estimators"])
    try:
        sizes = [int(n) for n in sizes]
    except ValueError as exc:
        raise ConfigError(f"bad phase-one size: {exc}") from exc
    base = SimConfig(seed=int(seed), **s)
    full = args.full_grid or cfg.get("simulate", {}).get("full_grid", False)
    if full:
        return expand_grid(base)
    return expand_grid(base, settings, [parse_beta(b) for b in betas], designs, sizes)


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    configs = resolve_sim_configs(args, cfg)
    threads = args.threads or cfg.get("simulate", {}).get("threads") or default_workers()
    rows, records = [], []
    for c in configs:
        res = run_monte_carlo(c, threads)
        rows.extend(res.metrics.rows)
        records.extend((c, r) for r in res.records)
        log.info("scenario %s %s n=%d beta_f=%.4f done", c.setting, c.design, c.n, c.beta_f)
    table = MetricsTable(tuple(rows), tuple(configs))
    header = run_header(configs)
    out = Path(args.out)
    out.write_text(table.to_csv(header))
    out.with_suffix(".json").write_text(json.dumps({"meta": header, "metrics": table.to_json()},
                                                    indent=1, sort_keys=True) + "\n")
    if cfg.get("simulate", {}).get("dump_raw", False):
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["setting", "design", "n", "beta_f", "rep", "estimator", "estimate", "se",
                     "failed", "case_fraction", "beta_init", "iterations", "reason"])
        for c, r in records:
            wr.writerow([c.setting, c.design, c.n, repr(c.beta_f), r.rep, r.estimator, repr(r.estimate),
                         repr(r.se), int(r.failed), repr(r.case_fraction), repr(r.beta_init),
                         r.iterations, r.reason])
        out.with_suffix(".records.csv").write_text(buf.getvalue())
    return EXIT_OK


# -- summarize ----------------------------------------------------------------


KEY_FIELDS = ("estimator", "setting", "design", "n", "beta_f")


def cmd_summarize(args) -> int:
    comments: list[str] = []
    fieldnames = None
    seen: dict[tuple, str] = {}
    collisions = []
    out_rows = []
    for path in args.paths:
        if not Path(path).is_file():
            raise UsageError(f"input file {path!r} not found")
        rows, com = read_metrics_csv(path)
        if not rows:
            raise DataError(f"{path}: no metric rows")
        names = list(rows[0].keys())
        if fieldnames is None:
            fieldnames = names
        elif names != fieldnames:
            raise DataError(f"{path}: columns {names} differ from {fieldnames}")
        missing = [k for k in KEY_FIELDS if k not in names]
        if missing:
            raise DataError(f"{path}: missing key columns {missing}")
        comments.extend(com)
        for r in rows:
            key = tuple(r[k] for k in KEY_FIELDS)
            if key in seen:
                collisions.append(f"{key} in {seen[key]} and {path}")
            seen[key] = path
            out_rows.append(r)
    if collisions:
        raise DataError("duplicate scenario keys:\n  " + "\n  ".join(collisions))
    buf = io.StringIO()
    buf.writelines(comments)
    wr = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    wr.writeheader()
    wr.writerows(out_rows)
    if args.out:
        Path(args.out).write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


COMMANDS = {"estimate": cmd_estimate, "simulate": cmd_simulate, "summarize": cmd_summarize}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code is None else int(exc.code)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"tndtmle: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"tndtmle: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (EstimationError, TNDError) as exc:
        print(f"tndtmle: estimation failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
