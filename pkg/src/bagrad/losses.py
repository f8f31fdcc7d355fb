"""Training losses on BA outputs and their gradients w.r.t. poses and depths.

All gradients are returned as :class:`UpstreamGrads`, i.e. left-twist
cotangents per frame and scalars per depth, ready for :func:`ba_backward`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backward import UpstreamGrads
from .lie import Pose, adjoint, pose_compose, pose_inverse, se3_left_jacobian_inv, se3_log
from .projective import Z_MIN
from .scene import PatchGraph, reproject_edges

FLOW_COEF, POSE_COEF = 10.0, 0.1
_NORM_EPS = 1e-12


class DegenerateBalance(ZeroDivisionError):
    pass


@dataclass(frozen=True, eq=False)
class LossReport:
    flow: float
    pose: float
    total: float
    beta: float
    grads: UpstreamGrads


def _state(sol):
    """(graph, poses, depths) of a BASolution or a PatchGraph."""
    g = getattr(sol, "graph", sol)
    return g, g.poses, g.depths


def scatter_edge_grads(graph: PatchGraph, g_phat: np.ndarray, J_tgt, J_src, J_d) -> UpstreamGrads:
    """Chain dL/dp_hat (E,2) through the projection Jacobians.

    Depth gradients sum over each patch's edges, pose gradients over every
    edge touching the frame as source or target.
    """
    gp = np.zeros((graph.n_frames, 6))
    np.add.at(gp, graph.edge_frame, np.einsum("eai,ea->ei", J_tgt, g_phat))
    np.add.at(gp, graph.edge_source, np.einsum("eai,ea->ei", J_src, g_phat))
    gd = np.zeros(graph.n_patches)
    np.add.at(gd, graph.edge_patch, (J_d * g_phat).sum(1))
    return UpstreamGrads(gp, gd)


def _norm_loss(graph, sol, sigma, z_min):
    g, poses, depths = _state(sol)
    p_hat, z, Jt, Js, Jd = reproject_edges(g, poses, depths, jacobians=True)
    valid = z > z_min
    r = np.where(valid[:, None], graph.gt_targets - p_hat, 0.0)
    s = np.ones_like(r) if sigma is None else np.asarray(sigma, dtype=float)
    n = np.sqrt(np.sum(s * r * r, axis=1))
    safe = np.where(n > _NORM_EPS, n, 1.0)
    g_phat = np.where((n > _NORM_EPS)[:, None], -s * r / safe[:, None], 0.0)
    return float(n.sum()), scatter_edge_grads(g, g_phat, Jt, Js, Jd)


def flow_loss(graph: PatchGraph, sol, z_min: float = Z_MIN):
    """Sum over edges of ``||p* - p_hat||`` (not squared) and its gradient.

    ``graph`` supplies the ground-truth targets; ``sol`` (a BASolution or a
    graph with the same edges) supplies the estimates.
    """
    return _norm_loss(graph, sol, None, z_min)


def weighted_flow_loss(graph: PatchGraph, sol, sigma, z_min: float = Z_MIN):
    """Sum of ``sqrt(r^T diag(sigma) r)``; ``sigma`` is held constant."""
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma < 0) or np.any(sigma > 1):
        raise ValueError("sigma must lie in [0, 1]")
    return _norm_loss(graph, sol, sigma, z_min)


def pose_loss(gt_poses, sol):
    """Sum over unordered frame pairs of ``||Log[(G_i G_j^-1)^-1 (T_i T_j^-1)]||``."""
    g, poses, depths = _state(sol)
    gt = [Pose.from_array(p) for p in np.asarray(gt_poses)]
    est = [Pose.from_array(p) for p in poses]
    n = len(est)
    if n < 2:
        raise ValueError("pose loss needs at least two frames")
    grad = np.zeros((n, 6))
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            A = pose_compose(gt[j], pose_inverse(gt[i]))
            rel = pose_compose(est[i], pose_inverse(est[j]))
            err = pose_compose(A, rel)
            e = se3_log(err)
            ne = np.linalg.norm(e)
            total += ne
            if ne <= _NORM_EPS:
                continue
            # Log(A exp(xi) T_i T_j^-1) = Log(exp(Ad_A xi) err); T_j^-1 exp(-xi) likewise
            row = (e / ne) @ se3_left_jacobian_inv(e)
            grad[i] += row @ adjoint(A)
            grad[j] -= row @ adjoint(err)
    return float(total), UpstreamGrads(grad, np.zeros(len(depths)))


def total_loss_fixed(flow: float, pose: float) -> float:
    return FLOW_COEF * flow + POSE_COEF * pose


def balance_beta(grad_pose_params, grad_flow_params) -> float:
    """``||grad L_pose|| / ||grad L_flow||`` over predictor parameters."""
    nf = float(np.linalg.norm(grad_flow_params))
    if nf == 0.0:
        raise DegenerateBalance("flow-loss gradient is zero")
    return float(np.linalg.norm(grad_pose_params)) / nf


def pose_loss_mask(inner_iter: int, k_skip: int = 2) -> bool:
    return inner_iter >= k_skip


def heuristic_weights(gt_targets, estimates) -> np.ndarray:
    """``1 / (4 e / m + 1)`` with ``e`` the per-edge error norm and ``m`` its median."""
    e = np.linalg.norm(np.asarray(gt_targets, dtype=float) - np.asarray(estimates, dtype=float), axis=-1)
    if e.size == 0:
        raise ValueError("need at least one edge")
    m = float(np.median(e))
    if m == 0.0:
        w = np.ones_like(e)
    else:
        w = np.clip(1.0 / (4.0 * e / m + 1.0), 0.0, 1.0)
    return np.repeat(w[:, None], 2, axis=1)
