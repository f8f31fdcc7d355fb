"""Implicit-function-theorem backward pass through the BA layer.

At a fixed point of the weighted problem the normal-equation gradient
``J^T W (target - p_hat)`` vanishes. Differentiating that condition gives,
for an upstream gradient ``g`` on the free poses/depths,

    u = H^-1 g,        grad_target_e = W_e J_e u,        grad_W_e = diag(r_e) J_e u

with ``H`` the (damped) Gauss-Newton Hessian cached by the forward solve and
``J_e`` the projection Jacobian of edge ``e``. ``grad_target`` is the
gradient w.r.t. the revised targets, i.e. w.r.t. the flow revisions.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .ba import BASolution, relinearize


class BackwardBeforeForward(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class UpstreamGrads:
    """Loss gradient at the BA outputs.

    ``grad_pose`` has one left-twist cotangent row per frame; rows of fixed
    frames are ignored by :func:`ba_backward`.
    """

    grad_pose: np.ndarray
    grad_depth: np.ndarray

    @classmethod
    def zeros(cls, n_frames: int, n_patches: int) -> "UpstreamGrads":
        return cls(np.zeros((n_frames, 6)), np.zeros(n_patches))

    def __add__(self, other: "UpstreamGrads") -> "UpstreamGrads":
        return UpstreamGrads(self.grad_pose + other.grad_pose, self.grad_depth + other.grad_depth)

    def __mul__(self, c: float) -> "UpstreamGrads":
        return UpstreamGrads(c * self.grad_pose, c * self.grad_depth)

    __rmul__ = __mul__

    def flat(self) -> np.ndarray:
        return np.concatenate([self.grad_pose.ravel(), self.grad_depth])


@dataclass(frozen=True, eq=False)
class InputGrads:
    grad_delta: np.ndarray
    grad_sigma: np.ndarray


def _adjoint_projection(sol: BASolution, up: UpstreamGrads, mode: str) -> np.ndarray:
    """Per-edge J_e H^-1 g, shape (E, 2)."""
    factor = sol.factor
    if factor is None or sol.lin is None:
        raise BackwardBeforeForward("solution carries no cached linearization")
    nf = factor.n_fixed
    g_pose = np.asarray(up.grad_pose, dtype=float)[nf:]
    g_depth = np.asarray(up.grad_depth, dtype=float)
    if mode == "joint":
        u_pose, u_depth = factor.solve(g_pose, g_depth)
    elif mode == "block":
        u_pose, u_depth = factor.solve_block(g_pose, g_depth)
    else:
        raise ValueError(f"unknown backward mode {mode!r}")
    return factor.edge_apply(u_pose, u_depth)


def contract(sol: BASolution, up: UpstreamGrads, diag: np.ndarray, mode: str = "joint") -> np.ndarray:
    """``diag_e * (J_e H^-1 g)`` per edge; the shared core of both input gradients."""
    Ju = _adjoint_projection(sol, up, mode)
    return np.where(sol.lin.valid[:, None], diag * Ju, 0.0)


def ba_backward(sol: BASolution, up: UpstreamGrads, mode: str = "joint") -> InputGrads:
    """Gradients w.r.t. revised targets (flow revisions) and weights.

    ``mode="joint"`` uses the full damped Hessian through the Schur factor;
    ``mode="block"`` drops the pose/depth coupling and inverts the pose and
    depth blocks separately.
    """
    Ju = _adjoint_projection(sol, up, mode)
    valid = sol.lin.valid[:, None]
    return InputGrads(np.where(valid, sol.lin.w * Ju, 0.0), np.where(valid, sol.lin.r * Ju, 0.0))


def clip_weight_grad(g: InputGrads, gamma_min: float = -0.01, gamma_max: float = 0.01) -> InputGrads:
    if gamma_min > gamma_max:
        raise ValueError("gamma_min must not exceed gamma_max")
    return dataclasses.replace(g, grad_sigma=np.clip(g.grad_sigma, gamma_min, gamma_max))


def linearize_at(sol: BASolution, depth_override) -> BASolution:
    """Solution whose backward pass linearizes at ``depth_override``."""
    d = np.asarray(depth_override, dtype=float)
    if d.shape != sol.depths.shape or np.any(~(d > 0)):
        raise ValueError("depth override must be positive, one value per patch")
    return relinearize(sol, d)
