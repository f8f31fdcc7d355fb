"""Weighted bundle adjustment: damped Gauss-Newton with a depth Schur complement.

The objective is ``sum_e r_e^T diag(w_e) r_e`` with ``r_e = target_e - p_hat_e``.
The first ``n_fixed_poses`` frames are held constant; the remaining poses are
updated by left retraction ``T <- exp(xi) T`` and depths by the increment of
the linear solve (see :func:`update_depths`) followed by clamping.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .lie import Pose, quat_mul, se3_exp
from .projective import Z_MIN
from .scene import D_MAX, D_MIN, PatchGraph, reproject_edges


# Hessian diagonals (px^2 per unit^2) at or below this carry no information;
# exactly-zero parallax leaves ~1e-30 of round-off behind.
_ACTIVE_EPS = 1e-12


class IllPosedWindow(RuntimeError):
    """Reduced pose system is singular even after damping."""


@dataclass(frozen=True)
class BAConfig:
    n_iters: int = 2
    damping: float = 1e-4
    n_fixed_poses: int = 1
    z_min: float = Z_MIN
    d_min: float = D_MIN
    d_max: float = D_MAX
    step_tol: float = 0.0
    depth_update: str = "inverse"

    def __post_init__(self):
        if self.n_iters < 1:
            raise ValueError("n_iters must be >= 1")
        if self.damping < 0:
            raise ValueError("damping must be >= 0")
        if self.n_fixed_poses < 1:
            raise ValueError("n_fixed_poses must be >= 1")
        if self.depth_update not in ("inverse", "additive"):
            raise ValueError("depth_update must be 'inverse' or 'additive'")


@dataclass(frozen=True, eq=False)
class Linearization:
    """Residuals and Jacobians of every edge at one iterate.

    ``w`` is the effective weight: the graph weight with cheirality-violating
    edges zeroed.
    """

    p_hat: np.ndarray
    r: np.ndarray
    valid: np.ndarray
    w: np.ndarray
    J_tgt: np.ndarray
    J_src: np.ndarray
    J_d: np.ndarray


def linearize(graph: PatchGraph, poses, depths, z_min: float = Z_MIN) -> Linearization:
    p_hat, z, Jt, Js, Jd = reproject_edges(graph, poses, depths, jacobians=True)
    valid = z > z_min
    r = np.where(valid[:, None], graph.targets - p_hat, 0.0)
    w = np.where(valid[:, None], graph.weights, 0.0)
    return Linearization(p_hat, r, valid, w, Jt, Js, Jd)


class SchurFactor:
    """Damped normal equations ``(H + lambda diag(H)) x = b`` with depths eliminated.

    ``H = [[B, E], [E^T, C]]`` where ``B`` couples free poses and ``C`` is the
    diagonal depth block. Poses/depths with an all-zero Hessian block are
    treated as inactive and always receive a zero solution.
    """

    def __init__(self, graph: PatchGraph, lin: Linearization, cfg: BAConfig):
        nf = cfg.n_fixed_poses
        F = max(graph.n_frames - nf, 0)
        m = graph.n_patches
        self.n_free, self.n_fixed, self.n_patches = F, nf, m
        self.src_slot = graph.edge_source - nf
        self.tgt_slot = graph.edge_frame - nf
        self.edge_patch = graph.edge_patch
        self.lin = lin

        W, Jt, Js, Jd = lin.w, lin.J_tgt, lin.J_src, lin.J_d
        WJt = W[:, :, None] * Jt
        WJs = W[:, :, None] * Js
        WJd = W * Jd
        ts, ss = self.tgt_slot, self.src_slot
        mt, ms = ts >= 0, ss >= 0

        B = np.zeros((F, F, 6, 6))
        for sa, Ja, sb, WJb in ((ts, Jt, ts, WJt), (ss, Js, ss, WJs),
                                (ts, Jt, ss, WJs), (ss, Js, ts, WJt)):
            mask = (sa >= 0) & (sb >= 0)
            np.add.at(B, (sa[mask], sb[mask]), np.einsum("eai,eaj->eij", Ja[mask], WJb[mask]))
        Eb = np.zeros((F, m, 6))
        np.add.at(Eb, (ts[mt], self.edge_patch[mt]), np.einsum("eai,ea->ei", Jt[mt], WJd[mt]))
        np.add.at(Eb, (ss[ms], self.edge_patch[ms]), np.einsum("eai,ea->ei", Js[ms], WJd[ms]))
        C = np.zeros(m)
        np.add.at(C, self.edge_patch, (Jd * WJd).sum(1))

        B = B.transpose(0, 2, 1, 3).reshape(6 * F, 6 * F)
        E = Eb.transpose(0, 2, 1).reshape(6 * F, m)
        self.H_poses, self.H_cross, self.H_depths = B, E, C

        lam = cfg.damping
        diag_B = np.diag(B).copy()
        self.pose_active = diag_B.reshape(F, 6).sum(1) > _ACTIVE_EPS
        self.depth_active = C > _ACTIVE_EPS
        Bd = B + lam * np.diag(diag_B)
        Cd = np.where(self.depth_active, C * (1.0 + lam), 1.0)
        E = np.where(self.depth_active[None, :], E, 0.0)
        inactive = np.repeat(~self.pose_active, 6)
        if inactive.any():
            Bd[inactive, :] = 0.0
            Bd[:, inactive] = 0.0
            Bd[inactive, inactive] = 1.0
            E = E.copy()
            E[inactive, :] = 0.0
        self.B_damped, self.C_damped, self.E = Bd, Cd, E
        self.E_over_C = E / Cd[None, :]
        S = Bd - self.E_over_C @ E.T
        self.S = S
        self._cho = None
        if F:
            try:
                self._cho = cho_factor(S, lower=True, check_finite=True)
            except (LinAlgError, ValueError) as exc:
                raise IllPosedWindow(str(exc)) from exc

    def solve(self, g_pose: np.ndarray, g_depth: np.ndarray):
        """Solve the damped system for right-hand side (g_pose (F,6), g_depth (m,))."""
        g_pose = np.asarray(g_pose, dtype=float).reshape(-1)
        g_depth = np.where(self.depth_active, np.asarray(g_depth, dtype=float), 0.0)
        if self.n_free:
            g_pose = np.where(np.repeat(self.pose_active, 6), g_pose, 0.0)
            rhs = g_pose - self.E_over_C @ g_depth
            x_pose = cho_solve(self._cho, rhs)
        else:
            x_pose = np.zeros(0)
        x_depth = (g_depth - self.E.T @ x_pose) / self.C_damped
        return x_pose.reshape(-1, 6), x_depth

    def solve_block(self, g_pose: np.ndarray, g_depth: np.ndarray):
        """Block-diagonal solve that ignores pose/depth coupling."""
        g_pose = np.asarray(g_pose, dtype=float).reshape(-1)
        g_depth = np.where(self.depth_active, np.asarray(g_depth, dtype=float), 0.0)
        if self.n_free:
            g_pose = np.where(np.repeat(self.pose_active, 6), g_pose, 0.0)
            x_pose = np.linalg.solve(self.B_damped, g_pose)
        else:
            x_pose = np.zeros(0)
        return x_pose.reshape(-1, 6), g_depth / self.C_damped

    def gradient(self):
        """Right-hand side J^T W r of the normal equations, split (pose, depth)."""
        lin = self.lin
        Wr = lin.w * lin.r
        bT = np.zeros((self.n_free, 6))
        ts, ss = self.tgt_slot, self.src_slot
        mt, ms = ts >= 0, ss >= 0
        np.add.at(bT, ts[mt], np.einsum("eai,ea->ei", lin.J_tgt[mt], Wr[mt]))
        np.add.at(bT, ss[ms], np.einsum("eai,ea->ei", lin.J_src[ms], Wr[ms]))
        bd = np.zeros(self.n_patches)
        np.add.at(bd, self.edge_patch, (lin.J_d * Wr).sum(1))
        return bT, bd

    def edge_apply(self, x_pose: np.ndarray, x_depth: np.ndarray) -> np.ndarray:
        """Per-edge J_e x: the 2-vector change of p_hat_e along (x_pose, x_depth)."""
        lin = self.lin
        out = lin.J_d * x_depth[self.edge_patch][:, None]
        ts, ss = self.tgt_slot, self.src_slot
        mt, ms = ts >= 0, ss >= 0
        out[mt] += np.einsum("eai,ei->ea", lin.J_tgt[mt], x_pose[ts[mt]])
        out[ms] += np.einsum("eai,ei->ea", lin.J_src[ms], x_pose[ss[ms]])
        return out


@dataclass(frozen=True, eq=False)
class BASolution:
    graph: PatchGraph
    config: BAConfig
    lin: Linearization
    factor: SchurFactor
    iterations: int
    last_step_norm: float

    @property
    def poses(self) -> np.ndarray:
        return self.graph.poses

    @property
    def depths(self) -> np.ndarray:
        return self.graph.depths

    @property
    def residuals(self) -> np.ndarray:
        return self.lin.r

    def pose(self, i: int) -> Pose:
        return self.graph.pose(i)


def ba_objective(graph: PatchGraph, z_min: float = Z_MIN) -> float:
    p_hat, z, *_ = reproject_edges(graph)
    valid = z > z_min
    r = graph.targets - p_hat
    return float(np.sum(np.where(valid[:, None], graph.weights * r * r, 0.0)))


def retract(poses: np.ndarray, twists: np.ndarray, first: int) -> np.ndarray:
    """Left-multiply poses[first:] by exp(twists)."""
    out = np.array(poses, dtype=float)
    for a, xi in enumerate(twists):
        i = first + a
        d = se3_exp(xi)
        R_d = d.R
        q = quat_mul(d.q, out[i, :4])
        out[i, :4] = q / np.linalg.norm(q)
        out[i, 4:] = R_d @ out[i, 4:] + d.t
    return out


def _step(graph: PatchGraph, poses, depths, cfg: BAConfig):
    lin = linearize(graph, poses, depths, cfg.z_min)
    factor = SchurFactor(graph, lin, cfg)
    bT, bd = factor.gradient()
    dx_pose, dx_depth = factor.solve(bT, bd)
    return dx_pose, dx_depth


def gn_step(graph: PatchGraph, cfg: BAConfig = BAConfig()):
    """One damped Gauss-Newton increment at the graph's current estimates.

    Returns ``(twists (F,6) for the free frames, depth increments (m,))``.
    """
    return _step(graph, graph.poses, graph.depths, cfg)


def update_depths(depths, dx_depth, cfg: BAConfig) -> np.ndarray:
    """Apply a depth increment and clamp.

    The ``inverse`` rule applies the same first-order increment in inverse
    depth, ``d / (1 - dd / d)``; the damped normal equations are invariant to
    that diagonal reparameterization, so fixed points are unchanged while
    small-parallax steps no longer overshoot.
    """
    if cfg.depth_update == "additive":
        d = depths + dx_depth
    else:
        denom = 1.0 - dx_depth / depths
        d = np.where(denom > depths / cfg.d_max, depths / np.maximum(denom, 1e-300), cfg.d_max)
    return np.clip(d, cfg.d_min, cfg.d_max)


def apply_step(graph: PatchGraph, dx_pose, dx_depth, cfg: BAConfig = BAConfig()) -> PatchGraph:
    poses = retract(graph.poses, dx_pose, cfg.n_fixed_poses)
    return graph.replace(poses=poses, depths=update_depths(graph.depths, dx_depth, cfg))


def ba_solve(graph: PatchGraph, cfg: BAConfig = BAConfig()) -> BASolution:
    poses = np.array(graph.poses)
    depths = np.clip(graph.depths, cfg.d_min, cfg.d_max)
    step_norm = np.inf
    it = 0
    for it in range(1, cfg.n_iters + 1):
        dx_pose, dx_depth = _step(graph, poses, depths, cfg)
        poses = retract(poses, dx_pose, cfg.n_fixed_poses)
        depths = update_depths(depths, dx_depth, cfg)
        step_norm = float(np.sqrt(np.sum(dx_pose ** 2) + np.sum(dx_depth ** 2)))
        if step_norm < cfg.step_tol:
            break
    out = graph.replace(poses=poses, depths=depths)
    lin = linearize(out, poses, depths, cfg.z_min)
    return BASolution(out, cfg, lin, SchurFactor(out, lin, cfg), it, step_norm)


def relinearize(sol: BASolution, depths) -> BASolution:
    """Same solution with Jacobians and factorization recomputed at ``depths``.

    Poses, depths and residuals of the returned solution are unchanged.
    """
    g = sol.graph
    lin_new = linearize(g, g.poses, np.asarray(depths, dtype=float), sol.config.z_min)
    valid = lin_new.valid & sol.lin.valid
    lin = dataclasses.replace(lin_new, r=np.where(valid[:, None], sol.lin.r, 0.0), valid=valid,
                              w=np.where(valid[:, None], g.weights, 0.0), p_hat=sol.lin.p_hat)
    return dataclasses.replace(sol, lin=lin, factor=SchurFactor(g, lin, sol.config))
