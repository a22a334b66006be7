"""Rasterizer backend benchmark: accelerated kernels vs. pure numpy.

Renders (and differentiates) a procedurally generated splat cloud at a
few sizes with both backends, reports wall-clock times and speedups,
and cross-checks that the two backends agree.

Run from the repository root:

    python3 benchmarks/bench_rasterizer.py [--size 256] [--splats 2000]
"""

import argparse
import time

import numpy as np

from bodysplat.deform import PosedSplatBatch
from bodysplat.raster import make_lookat_camera, render, render_backward
from bodysplat.raster.backend import available_backends


def random_batch(n, seed=0):
    """Splat cloud on a unit sphere shell, varied scales and colors."""
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    sh = np.zeros((n, 9, 3))
    sh[:, 0, :] = rng.uniform(-1.0, 1.0, size=(n, 3))
    sh[:, 1:, :] = 0.1 * rng.normal(size=(n, 8, 3))
    return PosedSplatBatch(
        center=d * rng.uniform(0.8, 1.0, size=(n, 1)),
        rot=q,
        scale=rng.uniform(0.02, 0.08, size=(n, 2)),
        opacity=rng.uniform(0.3, 0.95, size=n),
        sh=sh,
    )


def bench_one(batch, camera, backend, repeats):
    """Median forward and forward+backward seconds for one backend."""
    fwd, bwd = [], []
    out = render(batch, camera, backend=backend)   # warm-up / JIT compile
    g_color = np.ones_like(out.color)
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = render(batch, camera, backend=backend)
        t1 = time.perf_counter()
        render_backward(out, g_color=g_color)
        t2 = time.perf_counter()
        fwd.append(t1 - t0)
        bwd.append(t2 - t1)
    return float(np.median(fwd)), float(np.median(bwd)), out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=256, help="image size")
    ap.add_argument("--splats", type=int, default=2000,
                    help="largest splat count")
    ap.add_argument("--repeats", type=int, default=5,
                    help="timing repeats (median reported)")
    args = ap.parse_args()

    backends = available_backends()
    print(f"backends: {', '.join(backends)}")
    if "numba" not in backends:
        print("accelerated kernels unavailable; timing numpy only")

    s = args.size
    camera = make_lookat_camera(
        eye=(0.0, 0.0, -3.0), target=(0.0, 0.0, 0.0),
        fx=1.1 * s, fy=1.1 * s, cx=(s - 1) / 2.0, cy=(s - 1) / 2.0,
        width=s, height=s)

    counts = sorted({max(50, args.splats // 8), max(200, args.splats // 2),
                     args.splats})
    header = (f"{'splats':>8} {'backend':>8} {'forward':>12} "
              f"{'backward':>12} {'px/s (fwd)':>12}")
    print(f"\nimage {s}x{s}, median of {args.repeats} runs")
    print(header)
    print("-" * len(header))
    for n in counts:
        batch = random_batch(n, seed=n)
        rows = {}
        for backend in backends:
            tf, tb, out = bench_one(batch, camera, backend, args.repeats)
            rows[backend] = (tf, tb)
            print(f"{n:>8} {backend:>8} {tf * 1e3:>10.2f}ms "
                  f"{tb * 1e3:>10.2f}ms {s * s / tf:>12.3g}")
        if len(rows) == 2:
            a = render(batch, camera, backend="numba")
            b = render(batch, camera, backend="numpy")
            diff = max(np.abs(a.color - b.color).max(),
                       np.abs(a.alpha - b.alpha).max(),
                       np.abs(a.depth - b.depth).max())
            print(f"{'':>8} {'':>8} speedup fwd "
                  f"{rows['numpy'][0] / rows['numba'][0]:>5.1f}x, bwd "
                  f"{rows['numpy'][1] / rows['numba'][1]:>5.1f}x, "
                  f"max |diff| {diff:.2e}")
    print()


if __name__ == "__main__":
    main()
