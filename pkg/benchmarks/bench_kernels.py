"""Time the compiled field kernels against the numpy fallback.

    python benchmarks/bench_kernels.py --gaussians 2000 --points 200000

Both backends get identical packed primitives and cell lists; the script
also reports the largest disagreement between their outputs.
"""

import argparse
import logging
import time

import numpy as np

from gsvr import _core_py
from gsvr.gaussians import GSTRIDE, GaussianSet, default_cell_size, pack_primitives

log = logging.getLogger("bench")


def scene(n_gauss, n_points, seed):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(n_gauss, 4))
    g = GaussianSet(rng.uniform(-40, 40, (n_gauss, 3)), q / np.linalg.norm(q, axis=1, keepdims=True),
                    np.log(rng.uniform(1.0, 4.0, (n_gauss, 3))), rng.uniform(0.1, 1.0, n_gauss))
    pts = np.ascontiguousarray(rng.uniform(-45, 45, (n_points, 3)))
    return g, pts, rng.normal(size=n_points)


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def run(mod, g, pts, up, repeat):
    lo = np.full(3, -46.0)
    h = default_cell_size(g)
    dims = np.ceil(92.0 / h * np.ones(3)).astype(np.int64)
    radii = np.ascontiguousarray(g.support_radii())
    prim = pack_primitives(g)
    start, items = mod.build_cells(g.centers, radii, lo, h, dims)
    start, items = np.asarray(start), np.asarray(items)
    out = np.zeros(len(pts))
    acc = np.zeros((1, g.count, GSTRIDE))
    sp = np.zeros((len(pts), 3))
    t = {
        "build": best_of(lambda: mod.build_cells(g.centers, radii, lo, h, dims), repeat),
        "forward": best_of(lambda: mod.field_forward(prim, start, items, lo, h, dims, pts, out, 1),
                           repeat),
    }

    def backward():
        acc[:] = 0
        mod.field_backward(prim, start, items, lo, h, dims, pts, up, acc, sp, True)

    t["backward"] = best_of(backward, repeat)
    return t, out.copy(), acc.copy()


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--gaussians", type=int, nargs="+", default=[500, 2000])
    ap.add_argument("--points", type=int, default=100_000)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    try:
        from gsvr import _core
    except ImportError:
        log.error("compiled extension not built; run `pip install -e . --no-build-isolation`")
        return 1

    print(f"{'J':>6} {'kernel':>9} {'cython s':>10} {'numpy s':>10} {'speed-up':>9}")
    for J in args.gaussians:
        g, pts, up = scene(J, args.points, args.seed)
        tc, oc, ac = run(_core, g, pts, up, args.repeat)
        tp, op, ap_ = run(_core_py, g, pts, up, args.repeat)
        for k in ("build", "forward", "backward"):
            print(f"{J:>6} {k:>9} {tc[k]:>10.4f} {tp[k]:>10.4f} {tp[k] / tc[k]:>8.1f}x")
        diff = max(float(np.abs(oc - op).max()), float(np.abs(ac - ap_).max()))
        print(f"{J:>6} max |cython - numpy| = {diff:.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
