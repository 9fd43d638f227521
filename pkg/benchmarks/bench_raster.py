"""Time the compiled and numpy kernels on the same random scenes.

    python3 benchmarks/bench_raster.py --sizes 64 96 --counts 200 2000

Each row reports the best of ``--repeat`` runs for one forward render, one
backward pass and one multi-view loss evaluation, per backend, plus the
largest absolute difference between the two colour buffers.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from trajsplat.geometry import look_at
from trajsplat.optim.multiview import loss_mv
from trajsplat.scene_io import CameraView
from trajsplat.splat.gaussians import GaussianSet
from trajsplat.splat.raster import KERNELS, backward, render


def make_scene(n, size, seed):
    rng = np.random.default_rng(seed)
    quats = rng.standard_normal((n, 4))
    gs = GaussianSet(
        rng.uniform(-1, 1, (n, 3)),
        quats / np.linalg.norm(quats, axis=1, keepdims=True),
        rng.uniform(-3.5, -1.5, (n, 3)),
        rng.normal(1.0, 1.0, n),
        rng.uniform(size=(n, 3)),
        (0, 0, 0),
        2.0,
    )
    f = 0.9 * size
    c = (size - 1) / 2
    views = []
    for i, x in enumerate((0.0, 0.3)):
        R, t = look_at((x, -4.0, 0.3), (0.0, 0.0, 0.0))
        views.append(CameraView(i, f, f, c, c, R, t, size, size))
    return gs, views


def best_of(fn, repeat):
    out, times = None, []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def bench(n, size, repeat, backends):
    gs, (view, other) = make_scene(n, size, seed=n + size)
    rng = np.random.default_rng(0)
    g_color = rng.standard_normal((size, size, 3))
    row = {}
    colors = {}
    for name in backends:
        t_fwd, (buf, state) = best_of(lambda: render(gs, view, backend=name), repeat)
        t_bwd, _ = best_of(lambda: backward(state, g_color), repeat)
        img = np.clip(buf.color, 0, 1)
        other_img = np.clip(render(gs, other, backend=name)[0].color, 0, 1)
        t_mv, _ = best_of(
            lambda: loss_mv(buf, view, img, [(other, other_img)], rng=np.random.default_rng(1),
                            min_opacity=0.1, backend=name),
            repeat,
        )
        row[name] = (t_fwd, t_bwd, t_mv)
        colors[name] = buf.color
    diff = max(float(np.abs(colors[a] - colors[backends[0]]).max()) for a in backends)
    return row, diff


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[48, 96])
    ap.add_argument("--counts", type=int, nargs="+", default=[100, 1000, 4000])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    backends = [b for b in ("python", "cython") if b in KERNELS]
    if len(backends) < 2:
        print("compiled kernels not built; timing the numpy backend only")
    head = f"{'size':>5} {'count':>6}"
    for b in backends:
        head += f" {b + ' fwd':>12} {b + ' bwd':>12} {b + ' mv':>11}"
    if len(backends) == 2:
        head += f" {'speedup':>8}"
    print(head + f" {'max |diff|':>11}")
    for size in args.sizes:
        for n in args.counts:
            row, diff = bench(n, size, args.repeat, backends)
            line = f"{size:>5} {n:>6}"
            for b in backends:
                line += "".join(f" {t * 1e3:>9.2f} ms" for t in row[b][:2]) + f" {row[b][2] * 1e3:>8.2f} ms"
            if len(backends) == 2:
                line += f" {sum(row['python']) / sum(row['cython']):>7.1f}x"
            print(line + f" {diff:>11.1e}")


if __name__ == "__main__":
    main()
