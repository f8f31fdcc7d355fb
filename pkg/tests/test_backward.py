import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bagrad.analysis import ORACLE_BA, ift_gradcheck
from bagrad.ba import BAConfig, ba_solve
from bagrad.backward import (BackwardBeforeForward, InputGrads, UpstreamGrads, ba_backward,
                             clip_weight_grad, linearize_at)
from bagrad.synth import SynthConfig, generate_scene, init_estimates, make_rng
from oracles import tiny_problem


def _tiny(seed, sigma=1e-4):
    g, _ = generate_scene(SynthConfig(n_frames=4, patches_per_frame=3, radius=3, sigma_in=sigma, seed=seed))
    return g.replace(weights=make_rng(seed, 9).uniform(0.2, 1.0, (g.n_edges, 2)))


def test_oracle_problem_helper_matches():
    assert tiny_problem(0).structurally_equal(init_estimates(_tiny(0), 2, 0))


@pytest.mark.parametrize("seed", [0, 1])
def test_ift_matches_resolve_fd(seed):
    res = ift_gradcheck(init_estimates(_tiny(seed), 2, seed), seed)
    assert res.step_norm < 1e-10
    assert res.passed(1e-3), res


def test_zero_upstream_gives_zero():
    sol = ba_solve(_tiny(0), ORACLE_BA)
    ig = ba_backward(sol, UpstreamGrads.zeros(4, sol.graph.n_patches))
    assert not ig.grad_delta.any() and not ig.grad_sigma.any()


def test_zero_residual_gives_zero_weight_grad():
    g = _tiny(0, sigma=0.0)
    sol = ba_solve(g, ORACLE_BA)
    up = UpstreamGrads(np.ones((4, 6)), np.ones(g.n_patches))
    assert np.abs(ba_backward(sol, up).grad_sigma).max() < 1e-8


@given(st.floats(-3, 3), st.floats(-3, 3))
def test_backward_is_linear(a, b):
    sol = ba_solve(_tiny(2), ORACLE_BA)
    rng = np.random.default_rng(0)
    u1 = UpstreamGrads(rng.normal(size=(4, 6)), rng.normal(size=sol.graph.n_patches))
    u2 = UpstreamGrads(rng.normal(size=(4, 6)), rng.normal(size=sol.graph.n_patches))
    lhs = ba_backward(sol, a * u1 + b * u2).grad_delta
    rhs = a * ba_backward(sol, u1).grad_delta + b * ba_backward(sol, u2).grad_delta
    assert np.allclose(lhs, rhs, atol=1e-9 * (1 + np.abs(rhs).max()))


def test_block_mode_differs_but_has_same_shape():
    sol = ba_solve(_tiny(3, 0.5), BAConfig(n_iters=10, n_fixed_poses=2))
    up = UpstreamGrads(np.ones((4, 6)), np.ones(sol.graph.n_patches))
    a, b = ba_backward(sol, up, "joint"), ba_backward(sol, up, "block")
    assert a.grad_delta.shape == b.grad_delta.shape
    assert not np.allclose(a.grad_delta, b.grad_delta)
    with pytest.raises(ValueError):
        ba_backward(sol, up, "diagonal")


def test_fixed_frame_upstream_is_ignored():
    sol = ba_solve(_tiny(4), ORACLE_BA)
    gp = np.zeros((4, 6))
    gp[:2] = 1.0
    ig = ba_backward(sol, UpstreamGrads(gp, np.zeros(sol.graph.n_patches)))
    assert not ig.grad_delta.any()


@given(st.floats(-1, 0), st.floats(0, 1))
def test_clip_bounds(lo, hi):
    g = InputGrads(np.ones((5, 2)), np.linspace(-2, 2, 10).reshape(5, 2))
    c = clip_weight_grad(g, lo, hi)
    assert c.grad_sigma.min() >= lo and c.grad_sigma.max() <= hi
    assert c.grad_delta is g.grad_delta


def test_infinite_clip_is_identity():
    g = InputGrads(np.ones((3, 2)), np.array([[-1e9, 2.0], [0.0, 3e9], [1.0, -1.0]]))
    assert np.array_equal(clip_weight_grad(g, -np.inf, np.inf).grad_sigma, g.grad_sigma)
    with pytest.raises(ValueError):
        clip_weight_grad(g, 1.0, -1.0)


def test_planted_outlier_weight_grad_positive_then_clipped():
    # one corrupted edge: raising its weight pulls the solution off ground truth
    g = _tiny(5, sigma=0.0)
    t = np.array(g.targets)
    t[0] += 8.0
    g = g.replace(targets=t)
    sol = ba_solve(init_estimates(g, 2, 5), BAConfig(n_iters=40, n_fixed_poses=2, damping=0.0))
    # upstream of the squared depth/pose error w.r.t. ground truth
    gd = 2 * (sol.depths - g.gt_depths)
    ig = ba_backward(sol, UpstreamGrads(np.zeros((4, 6)), gd))
    raw = ig.grad_sigma[0].sum()
    assert raw > 0
    clipped = clip_weight_grad(ig).grad_sigma[0].sum()
    assert 0 < clipped <= raw


def test_backward_requires_forward():
    sol = ba_solve(_tiny(0), ORACLE_BA)
    import dataclasses
    with pytest.raises(BackwardBeforeForward):
        ba_backward(dataclasses.replace(sol, factor=None), UpstreamGrads.zeros(4, sol.graph.n_patches))


def test_linearize_at_keeps_state():
    sol = ba_solve(_tiny(6, 0.3), BAConfig(n_iters=10, n_fixed_poses=2))
    other = linearize_at(sol, sol.depths * 1.1)
    assert np.array_equal(other.depths, sol.depths)
    assert np.array_equal(other.lin.r, sol.lin.r)
    with pytest.raises(ValueError):
        linearize_at(sol, -sol.depths)
