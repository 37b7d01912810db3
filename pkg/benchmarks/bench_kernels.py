"""Compare the compiled and pure-Python coordinate-descent lasso kernels.

Usage: python benchmarks/bench_kernels.py [--repeat 3] [--sizes 500x20,2000x40,5000x60]
"""
import argparse
import time

import numpy as np
from scipy.special import expit

from tndtmle.solvers import HAVE_COMPILED, fit_lasso_path


def make_problem(n, p, seed=0):
    rng = np.random.default_rng(seed)
    Z = rng.normal(size=(n, p))
    beta = np.zeros(p)
    beta[: max(1, p // 10)] = rng.normal(scale=0.8, size=max(1, p // 10))
    y = (rng.random(n) < expit(-0.5 + Z @ beta)).astype(float)
    X = np.column_stack([np.ones(n), Z])
    pen = np.r_[False, np.ones(p, dtype=bool)]
    return y, X, pen


def best_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--sizes", default="500x20,2000x40,5000x60")
    args = ap.parse_args(argv)
    if not HAVE_COMPILED:
        print("compiled kernel not built; only the Python kernel is timed")
    backends = ["python"] + (["compiled"] if HAVE_COMPILED else [])
    print(f"{'n':>6} {'p':>4} " + " ".join(f"{b + ' [s]':>14}" for b in backends) + f" {'speedup':>8} {'max |diff|':>11}")
    for size in args.sizes.split(","):
        n, p = (int(v) for v in size.lower().split("x"))
        y, X, pen = make_problem(n, p)
        results = {b: best_time(lambda b=b: fit_lasso_path(y, X, pen, backend=b), args.repeat) for b in backends}
        cells = " ".join(f"{results[b][0]:>14.4f}" for b in backends)
        if HAVE_COMPILED:
            speed = results["python"][0] / results["compiled"][0]
            diff = np.abs(results["python"][1][1] - results["compiled"][1][1]).max()
            print(f"{n:>6} {p:>4} {cells} {speed:>8.1f} {diff:>11.2e}")
        else:
            print(f"{n:>6} {p:>4} {cells}")


if __name__ == "__main__":
    main()
