import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bagrad.analysis import fd_gradient
from bagrad.ba import retract
from bagrad.losses import (DegenerateBalance, balance_beta, flow_loss, heuristic_weights, pose_loss,
                           pose_loss_mask, total_loss_fixed, weighted_flow_loss)
from bagrad.synth import SynthConfig, generate_scene, perturb_depths, perturb_pose

seeds = st.integers(0, 500)


def _est(seed):
    g, _ = generate_scene(SynthConfig(n_frames=4, patches_per_frame=3, seed=seed))
    g = perturb_depths(g, 0.1, seed)
    for i in (1, 2, 3):
        g = perturb_pose(g, i, 0.05, 0.02, seed + i)
    return g


def _fd_check(loss_fn, g, tol=1e-5):
    """Loss gradient w.r.t. left twists of every frame and every depth vs central differences."""
    val, up = loss_fn(g)
    n = g.n_frames
    fd_pose = fd_gradient(lambda x: loss_fn(g.replace(poses=retract(g.poses, x.reshape(n, 6), 0)))[0],
                          np.zeros(6 * n)).reshape(n, 6)
    fd_depth = fd_gradient(lambda x: loss_fn(g.replace(depths=x))[0], g.depths)
    scale = 1 + np.abs(fd_pose).max()
    assert np.allclose(up.grad_pose, fd_pose, atol=tol * scale)
    assert np.allclose(up.grad_depth, fd_depth, atol=tol * (1 + np.abs(fd_depth).max()))


@given(seeds)
def test_flow_loss_gradient_fd(seed):
    g = _est(seed)
    _fd_check(lambda h: flow_loss(g, h), g)


@given(seeds)
def test_weighted_flow_loss_gradient_fd(seed):
    g = _est(seed)
    sigma = np.random.default_rng(seed).uniform(0, 1, (g.n_edges, 2))
    _fd_check(lambda h: weighted_flow_loss(g, h, sigma), g)


@given(seeds)
def test_pose_loss_gradient_fd(seed):
    g = _est(seed)
    _fd_check(lambda h: pose_loss(g.gt_poses, h), g)


def test_losses_vanish_at_ground_truth():
    g, _ = generate_scene(SynthConfig(n_frames=4, patches_per_frame=3, sigma_in=0.0))
    fv, fu = flow_loss(g, g)
    pv, pu = pose_loss(g.gt_poses, g)
    assert fv < 1e-9 and pv < 1e-9
    assert not pu.grad_pose.any()


def test_flow_loss_is_sum_of_norms():
    g = _est(0)
    from bagrad.scene import reproject_edges
    p, *_ = reproject_edges(g)
    assert flow_loss(g, g)[0] == pytest.approx(np.linalg.norm(g.gt_targets - p, axis=1).sum(), rel=1e-12)


def test_unit_weights_reduce_to_flow_loss():
    g = _est(1)
    a, ua = flow_loss(g, g)
    b, ub = weighted_flow_loss(g, g, np.ones((g.n_edges, 2)))
    assert a == b
    assert np.array_equal(ua.grad_pose, ub.grad_pose)


def test_weights_out_of_range():
    g = _est(2)
    with pytest.raises(ValueError):
        weighted_flow_loss(g, g, np.full((g.n_edges, 2), 1.5))


def test_pose_loss_needs_two_frames():
    g = _est(3)
    with pytest.raises(ValueError):
        pose_loss(g.gt_poses[:1], g.replace(poses=g.poses[:1], gt_poses=g.gt_poses[:1],
                                            edge_patch=[], edge_frame=[], targets=None, weights=None,
                                            gt_targets=None, patch_frame=[], centers=np.zeros((0, 2)),
                                            depths=[], gt_depths=[], patch_ids=[]))


def test_balance_beta():
    assert balance_beta(np.array([3.0, 4.0]), np.array([0.0, 1.0])) == 5.0
    with pytest.raises(DegenerateBalance):
        balance_beta(np.ones(2), np.zeros(2))
    assert total_loss_fixed(1.0, 1.0) == pytest.approx(10.1)


def test_pose_mask():
    assert [pose_loss_mask(t, 2) for t in range(4)] == [False, False, True, True]
    assert pose_loss_mask(0, 0)


@given(st.integers(1, 30), seeds)
def test_heuristic_weights(n, seed):
    rng = np.random.default_rng(seed)
    gt, est = rng.normal(size=(n, 2)), rng.normal(size=(n, 2))
    w = heuristic_weights(gt, est)
    assert w.shape == (n, 2) and np.all((w > 0) & (w <= 1))
    e = np.linalg.norm(gt - est, axis=1)
    # monotone: larger error never gets a larger weight
    order = np.argsort(e)
    assert np.all(np.diff(w[order, 0]) <= 1e-15)


def test_heuristic_weights_values():
    gt = np.zeros((3, 2))
    est = np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])
    assert np.allclose(heuristic_weights(gt, est)[:, 0], [1 / 3, 1 / 5, 1 / 7])
    assert np.array_equal(heuristic_weights(gt, gt), np.ones((3, 2)))
