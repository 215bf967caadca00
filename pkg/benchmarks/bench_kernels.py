"""Time the compiled and pure-Python kernels on representative sizes.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from latentvsr import kernels


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    prev = rng.random((3, 128, 128))
    nxt = rng.random((3, 128, 128))
    flow = rng.normal(0, 2, (2, 128, 128))
    a = rng.standard_normal((4, 4 * 32 * 32)).astype(np.float32)
    b = rng.standard_normal((4, 4 * 32 * 32)).astype(np.float32)
    alpha = np.linspace(1, 0, 4)

    backends = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])
    print(f"default backend: {kernels.BACKEND}")
    results = {}
    for be in backends:
        w = min(timeit.repeat(lambda: kernels.warp_abs_diff(prev, nxt, flow, backend=be), number=20, repeat=args.repeat)) / 20
        f = min(timeit.repeat(lambda: kernels.blend_rows(a, b, alpha, backend=be), number=200, repeat=args.repeat)) / 200
        results[be] = (w, f)
        print(f"{be:>7}: warp_abs_diff 3x128x128 {w * 1e3:8.3f} ms   blend_rows 4x4096 {f * 1e6:8.1f} us")
    if len(results) == 2:
        (pw, pf), (cw, cf) = results["python"], results["cython"]
        print(f"speedup: warp_abs_diff x{pw / cw:.1f}, blend_rows x{pf / cf:.1f}")
    # both backends agree
    if "cython" in results:
        assert np.allclose(kernels.warp_abs_diff(prev, nxt, flow, backend="python"),
                           kernels.warp_abs_diff(prev, nxt, flow, backend="cython"), rtol=1e-12)


if __name__ == "__main__":
    main()
