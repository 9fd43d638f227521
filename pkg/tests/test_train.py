from __future__ import annotations

import numpy as np
import pytest

from trajsplat.config import config_hash, load_config, save_config
from trajsplat.errors import ParseError, ValidationError
from trajsplat.graph import assign_points, bfs_segment, build_graph
from trajsplat.optim.metrics import psnr
from trajsplat.optim.train import (
    TrainConfig,
    compute_gradients,
    downsample_image,
    holdout_split,
    init_from_points,
    scene_bounds,
    train,
    train_global_coarse,
    train_region,
    voxel_downsample,
)
from trajsplat.splat.raster import rasterize
from trajsplat.synth import SynthConfig, generate_synthetic_scene

from _helpers import random_scene

FAST = dict(iterations=120, densify=False, mv_from=60, mv_pixel_samples=64)


@pytest.fixture(scope="module")
def small_scene():
    gt, model, images = generate_synthetic_scene(SynthConfig(num_gaussians=80, num_views=8, image_size=32))
    return gt, model, dict(zip(model.view_ids, images))


def test_holdout_every_eighth():
    train_ids, test_ids = holdout_split(range(1, 25), 8)
    assert test_ids == [1, 9, 17]
    assert len(train_ids) == 21


def test_holdout_disabled():
    assert holdout_split([3, 1, 2], 0) == ([1, 2, 3], [])


def test_zero_loss_gives_zero_partials():
    gs, view = random_scene(6, 12, np.random.default_rng(0))
    cfg = TrainConfig()
    target = rasterize(gs, view).color
    bundle = compute_gradients(gs, view, target, cfg)
    assert bundle.photometric == pytest.approx(0.0, abs=1e-12)
    for name in ("means", "quats", "log_scales", "opacity_logits", "colors"):
        assert np.abs(getattr(bundle.grads, name)).max() < 1e-9


def test_init_scale_from_neighbours():
    pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [5, 5, 5]], float)
    gs = init_from_points(pts, np.full((5, 3), 0.5), np.zeros(3), 1.0)
    assert len(gs) == 5
    assert np.allclose(gs.quats[:, 0], 1.0)
    assert np.exp(gs.log_scales[4, 0]) > np.exp(gs.log_scales[0, 0])


def test_init_needs_points():
    with pytest.raises(ValidationError):
        init_from_points(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(3), 1.0)


def test_scene_bounds_radius(small_scene):
    _, model, _ = small_scene
    c, r = scene_bounds(model.views)
    dists = [np.linalg.norm(v.center - c) for v in model.views]
    assert r == pytest.approx(1.1 * max(dists))


def test_config_rejects_inverted_thresholds():
    with pytest.raises(ValidationError):
        TrainConfig(g=0.2, b=0.1)


def test_config_file_round_trip(tmp_path):
    cfg = TrainConfig(iterations=77, densify=False, use_mv=False, mv_from=9, background=(1.0, 0.5, 0.0))
    save_config(cfg, tmp_path / "t.cfg")
    back = load_config(TrainConfig, tmp_path / "t.cfg")
    assert back == cfg
    assert config_hash(back) == config_hash(cfg)


def test_config_unknown_key_names_line(tmp_path):
    (tmp_path / "t.cfg").write_text("iterations = 5\nlearning_rate = 3\n")
    with pytest.raises(ParseError) as err:
        load_config(TrainConfig, tmp_path / "t.cfg")
    assert "learning_rate" in str(err.value) and err.value.line == 2


def test_config_bad_bool(tmp_path):
    (tmp_path / "t.cfg").write_text("use_mv = maybe\n")
    with pytest.raises(ParseError):
        load_config(TrainConfig, tmp_path / "t.cfg")


def test_region_training_reduces_loss_and_is_deterministic(small_scene):
    _, model, images = small_scene
    part = assign_points(bfs_segment(build_graph(model), 2), model)
    cfg = TrainConfig(**FAST)
    a = train_region(model, part, 0, cfg, images)
    b = train_region(model, part, 0, cfg, images)
    first = np.mean([h[3] for h in a.history[:8]])
    last = np.mean([h[3] for h in a.history[-8:]])
    assert last < first
    for name in ("means", "quats", "log_scales", "opacity_logits", "colors"):
        np.testing.assert_array_equal(getattr(a.gaussians, name), getattr(b.gaussians, name))
    # multi-view term switched on at mv_from
    assert any(h[4] > 0 for h in a.history[60:])
    assert all(h[4] == 0 for h in a.history[:60])


def test_no_densify_keeps_count(small_scene):
    _, model, images = small_scene
    train_ids, _ = holdout_split(model.view_ids)
    c, r = scene_bounds(model.views)
    gs = init_from_points(model.positions(), model.colors(), c, r)
    cfg = TrainConfig(iterations=20, densify=False, use_mv=False)
    res = train(gs, [model.view(v) for v in train_ids], [images[v] for v in train_ids], cfg)
    assert len(res.gaussians) == len(gs)


def test_coarse_set_count_and_size(small_scene):
    _, model, images = small_scene
    res = train_global_coarse(model, TrainConfig(iterations=40, densify=False), images)
    assert len(res.gaussians) == res.initial_count
    assert res.initial_count <= len(model.points) // 4 + 1
    assert len(res.history) == 10


def test_coarse_trails_local_on_held_out_view():
    """Averaged over a few held-out views the coarse set is the weaker model."""
    _, model, imgs = generate_synthetic_scene(SynthConfig(num_gaussians=100, num_views=8, image_size=48))
    images = dict(zip(model.view_ids, imgs))
    part = assign_points(bfs_segment(build_graph(model), 1), model)
    cfg = TrainConfig(iterations=300, densify_from=100, densify_until=250, use_mv=False)
    local = train_region(model, part, 0, cfg, images).gaussians
    coarse = train_global_coarse(model, cfg, images).gaussians
    _, test_ids = holdout_split(model.view_ids, 4)
    lp = np.mean([psnr(rasterize(local, model.view(v)).color, images[v]) for v in test_ids])
    cp = np.mean([psnr(rasterize(coarse, model.view(v)).color, images[v]) for v in test_ids])
    assert cp < lp


def test_downsample_image_block_mean():
    img = np.arange(16, dtype=float).reshape(4, 4, 1)
    np.testing.assert_allclose(downsample_image(img, 2)[..., 0], [[2.5, 4.5], [10.5, 12.5]])


def test_voxel_downsample_hits_target():
    rng = np.random.default_rng(0)
    pos = rng.uniform(size=(400, 3))
    p, c = voxel_downsample(pos, rng.uniform(size=(400, 3)), 100)
    assert 0 < len(p) <= 100 and len(c) == len(p)
