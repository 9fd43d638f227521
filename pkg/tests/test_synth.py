from __future__ import annotations

import numpy as np
import pytest

from trajsplat.errors import ValidationError
from trajsplat.graph import build_graph
from trajsplat.synth import SynthConfig, generate_synthetic_scene


def test_orbit_views_aim_at_the_scene():
    gt, model, images = generate_synthetic_scene(SynthConfig(num_views=2, trajectory_kind="orbit", num_gaussians=40))
    assert len(model.views) == 2 and len(images) == 2
    centre = gt.means.mean(axis=0)
    radius = np.linalg.norm(gt.means - centre, axis=1).max()
    for v in model.views:
        axis = v.rotation.T @ np.array([0.0, 0.0, 1.0])
        to_c = centre - v.center
        # distance from the bounding-sphere centre to the optical axis
        miss = np.linalg.norm(to_c - (to_c @ axis) * axis)
        assert to_c @ axis > 0 and miss < radius


def test_same_seed_same_scene():
    cfg = SynthConfig(num_gaussians=60, num_views=6, image_size=24)
    a, ma, ia = generate_synthetic_scene(cfg)
    b, mb, ib = generate_synthetic_scene(cfg)
    np.testing.assert_array_equal(a.means, b.means)
    for x, y in zip(ia, ib):
        np.testing.assert_array_equal(x, y)
    assert ma.match_edges == mb.match_edges


def test_street_covisibility_decays_with_distance():
    _, model, _ = generate_synthetic_scene(SynthConfig(num_views=30, image_size=32))
    g = build_graph(model)
    near = np.mean([g.weight(i, i + 1) for i in range(1, 15)])
    far = np.mean([g.weight(i, i + 15) for i in range(1, 15)])
    assert near > far


def test_far_cluster_sits_beyond_twice_the_radius():
    gt, _, _ = generate_synthetic_scene(SynthConfig(num_gaussians=100, far_cluster_fraction=0.3, image_size=32))
    d = np.linalg.norm(gt.means - gt.center, axis=1)
    assert np.count_nonzero(d > 2 * gt.radius) == 30


@pytest.mark.parametrize("kind", ["orbit", "grid"])
def test_other_trajectories_have_points_and_edges(kind):
    _, model, _ = generate_synthetic_scene(SynthConfig(trajectory_kind=kind, num_views=9, num_gaussians=80, image_size=24))
    assert model.points and model.match_edges


def test_bad_kind():
    with pytest.raises(ValidationError):
        SynthConfig(trajectory_kind="spiral")
