import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bagrad import scene as S
from bagrad.synth import (InfeasibleConfig, SynthConfig, generate_scene, init_estimates, make_rng,
                          perturb_depths, perturb_pose)

seeds = st.integers(0, 2 ** 32 - 1)


def _scene(seed=0, **kw):
    return generate_scene(SynthConfig(n_frames=4, patches_per_frame=3, seed=seed, **kw))


@given(seeds, st.integers(0, 50))
def test_generation_is_deterministic(seed, sid):
    cfg = SynthConfig(n_frames=3, patches_per_frame=2, seed=seed)
    a, la = generate_scene(cfg, sid)
    b, lb = generate_scene(cfg, sid)
    assert a.structurally_equal(b)
    assert np.array_equal(la.noise, lb.noise)


def test_streams_are_independent():
    # changing the noise level must not move the trajectory or the patches
    a, _ = _scene(sigma_in=0.1)
    b, _ = _scene(sigma_in=2.0)
    assert np.array_equal(a.gt_poses, b.gt_poses)
    assert np.array_equal(a.centers, b.centers)
    assert np.array_equal(a.gt_targets, b.gt_targets)


def test_noiseless_targets_match_ground_truth():
    g, labels = _scene(sigma_in=0.0)
    assert np.array_equal(g.targets, g.gt_targets)
    assert not labels.outlier.any()
    p, z, *_ = S.reproject_edges(g, g.gt_poses, g.gt_depths)
    assert np.allclose(p, g.gt_targets, atol=1e-9) and np.all(z > 0)


def test_patch_outliers_cover_whole_patches():
    g, labels = generate_scene(SynthConfig(n_frames=5, patches_per_frame=6, outlier_frac=0.5,
                                           outlier_mode="patch"))
    per_patch = np.zeros(g.n_patches)
    np.add.at(per_patch, g.edge_patch, labels.outlier)
    counts = np.bincount(g.edge_patch, minlength=g.n_patches)
    assert set(np.unique(per_patch / counts)) <= {0.0, 1.0}


def test_bad_config():
    with pytest.raises(ValueError):
        SynthConfig(outlier_frac=1.5)
    with pytest.raises(InfeasibleConfig):
        generate_scene(SynthConfig(n_frames=3, step_scale=50.0, max_resample=3))


def test_edges_within_radius():
    g, _ = _scene(radius=1)
    assert np.all(np.abs(g.edge_frame - g.edge_source) == 1)


@given(seeds)
def test_serialization_roundtrip(seed):
    g, _ = _scene(seed)
    g = init_estimates(g, 2, seed)
    assert S.loads(S.dumps(g)).structurally_equal(g)


def test_window_reindexes_and_keeps_ids():
    g, _ = generate_scene(SynthConfig(n_frames=6, patches_per_frame=2, radius=2))
    w = S.window(g, 2, 3)
    assert w.n_frames == 3
    assert np.all((w.edge_frame >= 0) & (w.edge_frame < 3))
    assert set(w.patch_ids) == set(g.patch_ids[(g.patch_frame >= 2) & (g.patch_frame < 5)])
    with pytest.raises(S.EmptyWindow):
        S.window(g, 6, 2)


def test_select_patches():
    g, _ = _scene()
    keep = g.patch_frame == 0
    sub = S.select_patches(g, keep)
    assert sub.n_patches == keep.sum()
    assert np.all(sub.edge_source == 0)


def test_perturbations_are_seeded_and_local():
    g, _ = _scene()
    a = perturb_depths(g, 0.3, 1, frame=1)
    assert np.array_equal(a.depths, perturb_depths(g, 0.3, 1, frame=1).depths)
    moved = a.depths != g.depths
    assert np.all(g.patch_frame[moved] == 1) and moved.any()
    assert perturb_depths(g, 0.0, 1) .structurally_equal(g)
    b = perturb_pose(g, 2, 0.1, 0.01, 3)
    assert np.array_equal(b.poses[[0, 1, 3]], g.poses[[0, 1, 3]])
    assert not np.array_equal(b.poses[2], g.poses[2])


def test_init_estimates_fixes_gauge_frames():
    g, _ = _scene()
    h = init_estimates(g, 2, 5, scene_id=1)
    assert np.array_equal(h.poses[:2], g.gt_poses[:2])
    assert np.all((h.depths >= g.gt_depths.min()) & (h.depths <= g.gt_depths.max()))


def test_rng_keys_differ():
    a = make_rng(0, 1, 2).random(4)
    b = make_rng(0, 2, 1).random(4)
    assert not np.array_equal(a, b)


def test_graph_validation():
    g, _ = _scene()
    with pytest.raises(ValueError):
        g.replace(edge_frame=np.full(g.n_edges, 99))
    with pytest.raises(ValueError):
        dataclasses.replace(g, depths=g.depths[:-1])
