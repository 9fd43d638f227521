"""Acceptance suite: one group of tests per criterion.

Every test carries ``@pytest.mark.criterion(n, title)``; the terminal summary
prints one PASS/FAIL line per criterion, with the measured values attached.
The end-to-end pipeline test takes several minutes on one core.
"""
from __future__ import annotations

import csv
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trajsplat.cli import main as cli
from trajsplat.geometry import look_at
from trajsplat.graph import ConnectivityGraph, assign_points, bfs_segment, build_graph
from trajsplat.optim.densify import SPLIT_FACTOR, DensifyStats, densify_control, gamma
from trajsplat.optim.metrics import psnr, ssim
from trajsplat.optim.multiview import PixelPlane, homography, ncc, warp_pixel
from trajsplat.optim.train import TrainConfig, compute_gradients, holdout_split, train_global_coarse, train_region
from trajsplat.progressive import ProgressiveConfig, naive_merge_render, progressive_render, progressive_weights
from trajsplat.scene_io import CameraView
from trajsplat.splat.gaussians import GaussianSet, concat, load_gaussians, logit
from trajsplat.splat.raster import rasterize
from trajsplat.synth import SynthConfig, generate_synthetic_scene
from trajsplat.workspace import Workspace

from _helpers import brute_force_composite, central_fd, random_scene, random_view, rel_err

C1 = (1, "partition properties")
C2 = (2, "homography vs back-project/project oracle")
C3 = (3, "NCC identities and variance floor")
C4 = (4, "compositing equivalence")
C5 = (5, "analytic vs finite-difference gradients")
C6 = (6, "gamma and densification rules")
C7 = (7, "progressive identities")
C8 = (8, "end-to-end synthetic street pipeline")
C9 = (9, "ablation directionality")
C10 = (10, "deterministic evaluation report")


# ---------------------------------------------------------------------------
# 1. partition


def _random_connected_graph(rng):
    n = int(rng.integers(20, 201))
    edges = {}
    order = rng.permutation(n)
    for i in range(1, n):
        # random spanning tree keeps the graph connected
        a, b = int(order[i]), int(order[rng.integers(0, i)])
        edges[(min(a, b), max(a, b))] = int(rng.integers(1, 200))
    for _ in range(int(rng.integers(0, 2 * n))):
        a, b = (int(x) for x in rng.choice(n, 2, replace=False))
        edges[(min(a, b), max(a, b))] = int(rng.integers(1, 200))
    return ConnectivityGraph(range(n), [(a, b, w) for (a, b), w in edges.items()])


def _connected(graph, nodes):
    nodes = set(nodes)
    start = next(iter(nodes))
    seen, stack = {start}, [start]
    while stack:
        u = stack.pop()
        for v in graph.neighbors(u):
            if v in nodes and v not in seen:
                seen.add(v)
                stack.append(v)
    return seen == nodes


@pytest.mark.criterion(*C1)
def test_partition_properties_on_random_graphs(measured):
    rng = np.random.default_rng(2024)
    short_cores = 0
    t0 = time.perf_counter()
    for trial in range(50):
        g = _random_connected_graph(rng)
        k = (2, 3, 4, 8)[trial % 4]
        part = bfs_segment(g, k)
        assert sorted(part.camera_regions) == g.vertices
        assert all(0 <= r < k for r in part.camera_regions.values())
        quota = len(g) // k
        claimed = set()
        for core in part.bfs_core:
            assert core and _connected(g, core)
            claimed |= core
            if len(core) != quota:
                # allowed only when growth stalled: no neighbour was still unclaimed
                short_cores += 1
                assert len(core) < quota
                assert all(v in claimed for u in core for v in g.neighbors(u))
    elapsed = time.perf_counter() - t0
    measured(f"50 graphs in {elapsed:.2f} s, {short_cores} stalled cores")
    assert elapsed < 5.0


# ---------------------------------------------------------------------------
# 2. homography


def _random_pose(rng):
    eye = rng.uniform(-2, 2, 3)
    target = eye + np.array([0.0, 0.0, 5.0]) + rng.uniform(-1.5, 1.5, 3)
    return look_at(eye, target, up=(0.0, -1.0, 0.0) if rng.random() < 0.5 else (1.0, 0.0, 0.0))


def _oracle_warp(ref, src, normal, d, p):
    ray = ref.K_inv @ np.array([p[0], p[1], 1.0])
    s = -d / (normal @ ray)
    X_ref = s * ray
    X_world = ref.rotation.T @ (X_ref - ref.translation)
    X_src = src.rotation @ X_world + src.translation
    uvw = src.K @ X_src
    return uvw[:2] / uvw[2]


@pytest.mark.criterion(*C2)
def test_homography_matches_geometric_oracle(measured):
    rng = np.random.default_rng(11)
    worst, done = 0.0, 0
    while done < 100:
        views = []
        for i in range(2):
            R, t = _random_pose(rng)
            f = rng.uniform(50, 300)
            views.append(CameraView(i, f, f * rng.uniform(0.9, 1.1), rng.uniform(40, 60), rng.uniform(40, 60), R, t, 100, 100))
        ref, src = views
        normal = rng.normal(size=3)
        normal /= np.linalg.norm(normal)
        if normal[2] > 0:
            normal = -normal  # face the reference camera
        d = rng.uniform(2.0, 20.0)
        p = rng.uniform(0, 99, 2)
        ray = ref.K_inv @ np.array([p[0], p[1], 1.0])
        if normal @ ray > -0.05:
            continue  # grazing or behind: the oracle point is not in front
        X_src = src.rotation @ (ref.rotation.T @ ((-d / (normal @ ray)) * ray - ref.translation)) + src.translation
        if X_src[2] < 0.1:
            continue
        H = homography(ref, src, PixelPlane(normal, d, np.zeros(3)))
        got = warp_pixel(H, p)
        worst = max(worst, float(np.abs(got - _oracle_warp(ref, src, normal, d, p)).max()))
        done += 1
    measured(f"max error {worst:.2e} px over 100 configurations")
    assert worst < 1e-6


@pytest.mark.criterion(*C2)
def test_homography_worked_example(measured):
    ref = CameraView(0, 100.0, 100.0, 50.0, 50.0, np.eye(3), np.zeros(3), 101, 101)
    src = CameraView(1, 100.0, 100.0, 50.0, 50.0, np.eye(3), np.array([1.0, 0.0, 0.0]), 101, 101)
    H = homography(ref, src, PixelPlane(np.array([0.0, 0.0, -1.0]), 10.0, np.zeros(3)))
    got = warp_pixel(H, (50.0, 50.0))
    measured(f"(50, 50) -> ({got[0]:.12f}, {got[1]:.12f})")
    assert abs(got[0] - 60.0) < 1e-12 and abs(got[1] - 50.0) < 1e-12


# ---------------------------------------------------------------------------
# 3. NCC


@pytest.mark.criterion(*C3)
def test_ncc_identities():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a = rng.uniform(size=49)
        assert abs(ncc(a, a) - 1.0) < 1e-12
        assert abs(ncc(a, rng.uniform(0.1, 5.0) * a + rng.uniform(-2, 2)) - 1.0) < 1e-12
        assert abs(ncc(a, -a) + 1.0) < 1e-12


@pytest.mark.criterion(*C3)
def test_ncc_constant_patch_is_skipped():
    a = np.random.default_rng(4).uniform(size=49)
    assert ncc(np.full(49, 0.3), a) is None
    assert ncc(a, np.full(49, 0.7)) is None


# ---------------------------------------------------------------------------
# 4. compositing


@pytest.mark.criterion(*C4)
def test_rasterizer_matches_brute_force(measured):
    rng = np.random.default_rng(5)
    worst = 0.0
    for n in (1, 5, 12, 25, 50):
        for _ in range(2):
            gs, view = random_scene(n, 16, rng)
            bg = tuple(rng.uniform(size=3))
            out = rasterize(gs, view, bg)
            color, acc = brute_force_composite(gs, view, bg)
            worst = max(worst, float(np.abs(out.color - color).max()), float(np.abs(out.accum_opacity - acc).max()))
    measured(f"max |diff| {worst:.1e}")
    assert worst < 1e-12


@pytest.mark.criterion(*C4)
@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 50))
def test_accumulated_opacity_in_unit_interval(seed, n):
    gs, view = random_scene(n, 16, np.random.default_rng(seed))
    acc = rasterize(gs, view).accum_opacity
    assert acc.min() >= 0.0 and acc.max() <= 1.0


@pytest.mark.criterion(*C4)
def test_input_order_does_not_matter():
    rng = np.random.default_rng(6)
    for _ in range(5):
        gs, view = random_scene(30, 16, rng)
        a = rasterize(gs, view)
        b = rasterize(gs.subset(rng.permutation(len(gs))), view)
        assert np.abs(a.color - b.color).max() < 1e-12
        assert np.abs(a.accum_opacity - b.accum_opacity).max() < 1e-12


# ---------------------------------------------------------------------------
# 5. gradients


FD_GROUPS = {"colors": 1e-5, "opacity_logits": 1e-5, "means": 1e-3, "log_scales": 1e-3, "quats": 1e-3}


@pytest.mark.criterion(*C5)
def test_photometric_gradients_match_finite_differences(measured):
    rng = np.random.default_rng(7)
    cfg = TrainConfig(lam=0.2)
    worst = dict.fromkeys(FD_GROUPS, 0.0)
    for _ in range(20):
        gs, view = random_scene(int(rng.integers(1, 11)), 12, rng)
        target = rng.uniform(size=(12, 12, 3))
        ana = compute_gradients(gs, view, target, cfg).grads
        for name in FD_GROUPS:

            def loss(p, name=name):
                g = gs.copy()
                setattr(g, name, p)
                return compute_gradients(g, view, target, cfg).photometric

            num = central_fd(loss, getattr(gs, name).copy(), 1e-6)
            worst[name] = max(worst[name], rel_err(getattr(ana, name), num))
    measured(", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    for name, tol in FD_GROUPS.items():
        assert worst[name] < tol, name


# ---------------------------------------------------------------------------
# 6. gamma and densification

R6 = 2.0


def _set(positions, max_scales, opacity=0.5):
    n = len(positions)
    return GaussianSet(positions, [[1, 0, 0, 0]] * n, np.log(np.asarray(max_scales, float))[:, None] * np.ones((1, 3)),
                       np.full(n, logit(opacity)), np.full((n, 3), 0.5), (0, 0, 0), R6)


def _hot(n):
    s = DensifyStats.zeros(n)
    s.grad_sum[:] = 1.0
    s.count[:] = 1
    s.position_grad[:] = [1.0, 0.0, 0.0]
    return s


@pytest.mark.criterion(*C6)
def test_gamma_is_continuous_at_twice_the_radius():
    at = gamma(np.array([2 * R6, 0.0, 0.0]), np.zeros(3), R6)
    below = gamma(np.array([np.nextafter(2 * R6, 0.0), 0.0, 0.0]), np.zeros(3), R6)
    assert at == 1.0 and below == 1.0
    assert (2 * R6) / R6 - 1.0 == 1.0  # the linear branch evaluated at the seam


@pytest.mark.criterion(*C6)
def test_densification_unit_cases():
    cfg = TrainConfig()
    assert (cfg.g, cfg.b) == (0.01, 0.1)
    far = densify_control(_set([[3 * R6, 0, 0]], [0.25 * R6]), DensifyStats.zeros(1), cfg, 300)
    assert len(far.gaussians) == 0
    clone = densify_control(_set([[0.1, 0, 0]], [0.005 * R6]), _hot(1), cfg, 300)
    assert len(clone.gaussians) == 2 and clone.n_cloned == 1
    split = densify_control(_set([[0.1, 0, 0]], [0.05 * R6]), _hot(1), cfg, 300, rng=np.random.default_rng(0))
    assert split.n_split == 1 and len(split.gaussians) == 2
    np.testing.assert_allclose(np.exp(split.gaussians.log_scales), 0.05 * R6 / SPLIT_FACTOR)
    transparent = densify_control(_set([[0.1, 0, 0]], [0.01 * R6], opacity=0.001), DensifyStats.zeros(1), cfg, 300)
    assert len(transparent.gaussians) == 0


@pytest.mark.criterion(*C6)
@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.02, 0.5), st.floats(0.0, 0.5))
def test_raising_b_never_loses_survivors(seed, b, extra):
    rng = np.random.default_rng(seed)
    n = 40
    gs = GaussianSet(rng.normal(0, 3 * R6, (n, 3)), rng.normal(size=(n, 4)), np.log(rng.uniform(0.001, 1.0, (n, 3)) * R6),
                     rng.normal(0, 2, n), rng.uniform(size=(n, 3)), (0, 0, 0), R6)
    stats = DensifyStats.zeros(n)
    stats.grad_sum[:] = rng.uniform(0, 5e-4, n)
    stats.count[:] = 1
    lo = densify_control(gs, stats, TrainConfig(b=b), 300, rng=np.random.default_rng(1))
    hi = densify_control(gs, stats, TrainConfig(b=b + extra), 300, rng=np.random.default_rng(1))
    assert len(hi.gaussians) >= len(lo.gaussians)
    assert hi.n_pruned <= lo.n_pruned


# ---------------------------------------------------------------------------
# 7. progressive identities


@pytest.mark.criterion(*C7)
def test_single_region_progressive_is_the_standard_render(measured):
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(10):
        gs, view = random_scene(int(rng.integers(1, 40)), 24, rng)
        bg = tuple(rng.uniform(size=3))
        ref = rasterize(gs, view, bg)
        out = progressive_render([gs], view, ProgressiveConfig(background=bg))
        covered = ref.accum_opacity > 1e-4
        worst = max(worst, float(np.abs(out - ref.color)[covered].max(initial=0.0)))
    measured(f"max |diff| {worst:.1e}")
    assert worst < 1e-12


@pytest.mark.criterion(*C7)
def test_gating_cases():
    np.testing.assert_array_equal(progressive_weights(np.array([0.6, 0.5, 0.3]), 0.5), [0.6, 0.0, 0.0])
    np.testing.assert_array_equal(progressive_weights(np.array([0.3, 0.4, 0.2]), 0.5), [0.3, 0.4, 0.0])


# ---------------------------------------------------------------------------
# 8. end-to-end pipeline


def _run(*argv):
    return cli([str(a) for a in argv])


def _rows(ws, mode):
    with open(ws / "reports" / "eval.csv") as fh:
        return [r for r in csv.reader(fh) if r and r[0] == mode]


@pytest.mark.criterion(*C8)
def test_street_pipeline_psnr_and_runtime(tmp_path, measured):
    (tmp_path / "synth.cfg").write_text("num_gaussians = 300\ntrajectory_kind = street\nnum_views = 24\nimage_size = 96\n")
    ws = tmp_path / "ws"
    t0 = time.perf_counter()
    assert _run("synth", tmp_path / "synth.cfg", ws) == 0
    assert _run("partition", ws, "--k", 3) == 0
    assert _run("train", ws, "--all") == 0
    assert _run("render", ws, "--mode", "progressive") == 0
    assert _run("render", ws, "--mode", "naive") == 0
    assert _run("eval", ws) == 0
    elapsed = time.perf_counter() - t0

    rows = _rows(ws, "progressive")
    mean = float(next(r[2] for r in rows if r[1] == "mean"))
    naive = float(next(r[2] for r in _rows(ws, "naive") if r[1] == "mean"))
    # ground-truth bound: the generator's own Gaussians against the stored 8-bit images
    w = Workspace(ws)
    model = w.load_model()
    _, test_ids = holdout_split(model.view_ids, 8)
    images = w.load_images(model, test_ids)
    gt = load_gaussians(ws / "gt" / "gaussians.tggs")
    bound = np.mean([psnr(rasterize(gt, model.view(v)).color, images[v]) for v in test_ids])
    measured(f"held-out progressive PSNR {mean:.2f} dB (views {', '.join(r[1] for r in rows if r[1] != 'mean')}), "
             f"naive {naive:.2f} dB, ground-truth set {bound:.2f} dB, {elapsed:.0f} s")
    assert mean >= 25.0
    assert elapsed < 600.0


# ---------------------------------------------------------------------------
# 9. ablations


@pytest.mark.criterion(*C9)
def test_progressive_beats_naive_with_floaters(measured):
    gt, model, imgs = generate_synthetic_scene(SynthConfig(num_gaussians=300, num_views=12, image_size=48))
    x = gt.means[:, 0]
    left = gt.subset(np.flatnonzero(x < 1.0))
    right = gt.subset(np.flatnonzero(x > -1.0))  # the two regions share -1 < x < 1
    rng = np.random.default_rng(7)
    n = 30
    floaters = GaussianSet(
        np.column_stack([rng.uniform(-6, -1, n), rng.uniform(1.0, 2.5, n), rng.uniform(-1.5, 1.5, n)]),
        [[1, 0, 0, 0]] * n, np.full((n, 3), np.log(0.15)), np.full(n, logit(0.3)), rng.uniform(size=(n, 3)),
        right.center, right.radius,
    )
    right = concat([right, floaters], right.center, right.radius)
    coarse = train_global_coarse(model, TrainConfig(iterations=400, densify=False, use_mv=False),
                                 dict(zip(model.view_ids, imgs))).gaussians
    prog = np.mean([psnr(progressive_render([left, right], v, global_set=coarse), img) for v, img in zip(model.views, imgs)])
    naive = np.mean([psnr(naive_merge_render([left, right], v), img) for v, img in zip(model.views, imgs)])
    measured(f"PR {prog:.2f} vs naive {naive:.2f} dB")
    assert prog - naive > 0.5


def _single_region(model):
    return assign_points(bfs_segment(build_graph(model), 1), model)


@pytest.mark.criterion(*C9)
def test_multiview_term_improves_ssim_on_textured_plane(measured):
    scores = {False: [], True: []}
    for seed in range(4):
        _, model, imgs = generate_synthetic_scene(SynthConfig(
            trajectory_kind="grid", num_views=16, image_size=48, num_gaussians=400, slab_thickness=0.02, rng_seed=seed))
        images = dict(zip(model.view_ids, imgs))
        part = _single_region(model)
        _, test_ids = holdout_split(model.view_ids, 4)
        for mv in (False, True):
            cfg = TrainConfig(iterations=600, densify_from=100, densify_until=400, use_mv=mv, mv_from=150,
                              holdout_every=4, rng_seed=seed)
            gs = train_region(model, part, 0, cfg, images).gaussians
            scores[mv].append(np.mean([ssim(rasterize(gs, model.view(v)).color, images[v]) for v in test_ids]))
    off, on = np.mean(scores[False]), np.mean(scores[True])
    measured(f"SSIM MV off {off:.4f}, on {on:.4f} (4 seeds)")
    assert on > off


@pytest.mark.criterion(*C9)
def test_multiscale_control_improves_far_pixels(measured):
    gt, model, imgs = generate_synthetic_scene(SynthConfig(num_gaussians=300, num_views=12, image_size=48,
                                                           far_cluster_fraction=0.3))
    images = dict(zip(model.view_ids, imgs))
    far = gt.subset(np.flatnonzero(np.linalg.norm(gt.means - gt.center, axis=1) > 2 * gt.radius))
    part = _single_region(model)
    _, test_ids = holdout_split(model.view_ids, 4)
    result = {}
    for ms in (False, True):
        cfg = TrainConfig(iterations=600, densify_from=100, densify_until=400, use_ms=ms, mv_from=150, holdout_every=4)
        gs = train_region(model, part, 0, cfg, images).gaussians
        sq = []
        for v in test_ids:
            mask = rasterize(far, model.view(v)).accum_opacity > 0.5
            sq.append(((rasterize(gs, model.view(v)).color - images[v]) ** 2)[mask])
        result[ms] = 10.0 * np.log10(1.0 / np.concatenate(sq).mean())
    measured(f"far-pixel PSNR MS off {result[False]:.2f}, on {result[True]:.2f} dB")
    assert result[True] > result[False]


# ---------------------------------------------------------------------------
# 10. determinism


@pytest.mark.criterion(*C10)
def test_two_runs_give_identical_reports(tmp_path, measured):
    (tmp_path / "synth.cfg").write_text("num_gaussians = 120\nnum_views = 12\nimage_size = 40\n")
    (tmp_path / "train.cfg").write_text(
        "iterations = 240\ndensify_interval = 40\ndensify_from = 40\ndensify_until = 160\nmv_from = 80\nmv_pixel_samples = 128\n"
    )
    outputs = []
    for name in ("a", "b"):
        ws = tmp_path / name
        assert _run("synth", tmp_path / "synth.cfg", ws) == 0
        assert _run("partition", ws, "--k", 2) == 0
        assert _run("train", ws, "--all", "--config", tmp_path / "train.cfg") == 0
        assert _run("render", ws, "--mode", "progressive") == 0
        assert _run("render", ws, "--mode", "naive") == 0
        assert _run("eval", ws) == 0
        outputs.append([(ws / "reports" / f).read_bytes() for f in ("eval.txt", "eval.csv")])
    measured(f"{sum(len(b) for b in outputs[0])} report bytes compared")
    assert outputs[0] == outputs[1]
