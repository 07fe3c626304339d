"""Compare the numba and numpy kNN kernels behind the precision/recall/density/coverage metrics.

    python benchmarks/bench_knn.py --sizes 256,1024,2048 --features 32 --repeats 3

Prints one row per (size, kernel) with the best wall time of each backend and
checks that both backends agree exactly.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from geoadapt import _knn
from geoadapt._accel import HAVE_NUMBA


def _best(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", default="256,1024,2048")
    p.add_argument("--features", type=int, default=32)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--repeats", type=int, default=3)
    args = p.parse_args(argv)
    if not HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(0)
    backends = ("numba", "numpy")
    print(f"{'N':>6} {'kernel':>10} " + " ".join(f"{b:>10}" for b in backends) + f" {'speedup':>8}")
    for n in (int(s) for s in args.sizes.split(",")):
        a = rng.standard_normal((n, args.features))
        b = rng.standard_normal((n, args.features))
        # warm up the JIT so compilation is not timed
        _knn.pairwise_distances(a[:4], b[:4], "numba")
        _knn.kth_radii(_knn.pairwise_distances(a[:8], a[:8], "numba"), 2, "numba")
        _knn.ball_membership(np.zeros((2, 2)), np.ones(2), "numba")
        times, outs = {}, {}
        for be in backends:
            times[be, "pairwise"], d = _best(lambda: _knn.pairwise_distances(a, b, be), args.repeats)
            dd = _knn.pairwise_distances(a, a, be)
            times[be, "radii"], r = _best(lambda: _knn.kth_radii(dd, args.k, be), args.repeats)
            times[be, "ball"], m = _best(lambda: _knn.ball_membership(d, r, be), args.repeats)
            outs[be] = (d, r, m)
        for (x, y) in zip(outs["numba"], outs["numpy"]):
            for u, v in zip(x if isinstance(x, tuple) else (x,), y if isinstance(y, tuple) else (y,)):
                if not np.array_equal(u, v):
                    raise SystemExit(f"backends disagree at N={n}")
        for kern in ("pairwise", "radii", "ball"):
            t = [times[be, kern] for be in backends]
            print(f"{n:>6} {kern:>10} " + " ".join(f"{v * 1e3:>8.2f}ms" for v in t) + f" {t[1] / t[0]:>7.1f}x")


if __name__ == "__main__":
    main()
