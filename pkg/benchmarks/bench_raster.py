"""Compiled kernel vs numpy fallback: forward and backward timings.

Usage: python3 benchmarks/bench_raster.py [--repeat N] [--views N] [--threads N]

Each timing is the minimum over ``--repeat`` runs, which is the number
that stays stable on a busy machine.
"""

import argparse
import time

import numpy as np

from beags import raster, scenegen


def min_time(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--views", type=int, default=3)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    spec = scenegen.default_spec()
    scene = scenegen.generate_scene(spec).scene
    cams = scenegen.orbit_cameras(spec)[: args.views]
    sup = [np.zeros(c.shape, dtype=np.int64) for c in cams]
    ups = [{"color": np.ones(c.shape + (3,)), "boundary": np.ones(c.shape)} for c in cams]
    print(f"{len(scene)} surfels, {len(cams)} views of {cams[0].width}x{cams[0].height}, "
          f"{args.threads} thread(s), min of {args.repeat}")

    rows = {}
    for name in raster.BACKENDS:
        kw = dict(backend=name, num_threads=args.threads)

        def fwd():
            return [raster.render(scene, c, s, **kw) for c, s in zip(cams, sup)]

        outs = fwd()

        def bwd():
            for c, s, u, o in zip(cams, sup, ups, outs):
                raster.backward(scene, c, s, u, o)

        rows[name] = (min_time(fwd, args.repeat) / len(cams), min_time(bwd, args.repeat) / len(cams))
        print(f"{name:>9}: forward {1e3 * rows[name][0]:8.1f} ms/view   "
              f"backward {1e3 * rows[name][1]:8.1f} ms/view")
    if "compiled" in rows:
        p, c = rows["python"], rows["compiled"]
        print(f"  speedup: forward {p[0] / c[0]:.1f}x   backward {p[1] / c[1]:.1f}x")
    else:
        print("compiled kernel not built; only the fallback was timed")


if __name__ == "__main__":
    main()
