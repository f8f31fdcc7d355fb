"""Pinhole projection, inverse projection and reprojection Jacobians.

Poses are world-to-camera. The relative transform of an edge from source
frame ``i`` to target frame ``j`` is ``T_ij = T_j * T_i^-1``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lie import Pose, pose_compose, pose_inverse, skew

Z_MIN = 1e-3


class InvalidDepth(ValueError):
    pass


class CheiralityError(ValueError):
    """Point lands at or behind the camera (z <= z_min)."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]))


@dataclass(frozen=True, eq=False)
class ProjJacobians:
    """Jacobians of one reprojected coordinate.

    ``j_pose`` is taken w.r.t. a left twist on the target pose ``T_j``,
    ``j_pose_src`` w.r.t. a left twist on the source pose ``T_i``.
    """

    j_pose: np.ndarray
    j_pose_src: np.ndarray
    j_depth: np.ndarray


def rays(p: np.ndarray, k: Intrinsics) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    out = np.ones(p.shape[:-1] + (3,))
    out[..., 0] = (p[..., 0] - k.cx) / k.fx
    out[..., 1] = (p[..., 1] - k.cy) / k.fy
    return out


def unproject(p: np.ndarray, d, k: Intrinsics) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    if np.any(~(d > 0)):
        raise InvalidDepth("depth must be positive")
    return rays(p, k) * d[..., None]


def pinhole(X: np.ndarray, k: Intrinsics) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    z = X[..., 2]
    return np.stack([k.fx * X[..., 0] / z + k.cx, k.fy * X[..., 1] / z + k.cy], axis=-1)


def project(t: Pose, x: np.ndarray, k: Intrinsics, z_min: float = Z_MIN) -> np.ndarray:
    Xc = t.act(x)
    if np.any(Xc[..., 2] <= z_min):
        raise CheiralityError("point behind camera")
    return pinhole(Xc, k)


def relative(T_i: Pose, T_j: Pose) -> Pose:
    return pose_compose(T_j, pose_inverse(T_i))


def reproject(p_k: np.ndarray, d_k: float, T_i: Pose, T_j: Pose, k: Intrinsics,
              z_min: float = Z_MIN) -> np.ndarray:
    return project(relative(T_i, T_j), unproject(p_k, d_k, k), k, z_min)


def proj_jacobians(p_k: np.ndarray, d_k: float, T_i: Pose, T_j: Pose, k: Intrinsics,
                   z_min: float = Z_MIN) -> ProjJacobians:
    _, z, Jt, Js, Jd = edge_geometry(T_i.R[None], T_i.t[None], T_j.R[None], T_j.t[None],
                                     np.asarray(p_k, dtype=float)[None],
                                     np.atleast_1d(float(d_k)), k)
    if z[0] <= z_min:
        raise CheiralityError("point behind camera")
    return ProjJacobians(Jt[0], Js[0], Jd[0][:, None])


def edge_geometry(R_i, t_i, R_j, t_j, p_k, d_k, k: Intrinsics, jacobians: bool = True):
    """Vectorized reprojection over E edges.

    Inputs are per-edge: rotations (E,3,3), translations (E,3), source pixels
    (E,2) and depths (E,). Returns ``(p_hat, z, J_tgt, J_src, J_depth)`` with
    shapes (E,2), (E,), (E,2,6), (E,2,6), (E,2). Jacobians are None when
    ``jacobians`` is false. Callers are responsible for masking edges whose
    ``z`` falls below their cheirality threshold.
    """
    ray = rays(p_k, k)
    R_ij = R_j @ np.swapaxes(R_i, -1, -2)
    t_ij = t_j - np.einsum("eab,eb->ea", R_ij, t_i)
    X_i = ray * d_k[:, None]
    X_j = np.einsum("eab,eb->ea", R_ij, X_i) + t_ij
    z = X_j[:, 2]
    z_safe = np.where(np.abs(z) < 1e-12, 1e-12, z)
    p_hat = np.stack([k.fx * X_j[:, 0] / z_safe + k.cx,
                      k.fy * X_j[:, 1] / z_safe + k.cy], axis=-1)
    if not jacobians:
        return p_hat, z, None, None, None

    E = len(z)
    inv_z = 1.0 / z_safe
    dpi = np.zeros((E, 2, 3))
    dpi[:, 0, 0] = k.fx * inv_z
    dpi[:, 0, 2] = -k.fx * X_j[:, 0] * inv_z ** 2
    dpi[:, 1, 1] = k.fy * inv_z
    dpi[:, 1, 2] = -k.fy * X_j[:, 1] * inv_z ** 2

    # left twist on T_j: X_j -> X_j + v + w x X_j
    dX_tgt = np.zeros((E, 3, 6))
    dX_tgt[:, :, :3] = np.eye(3)
    dX_tgt[:, :, 3:] = -skew(X_j)
    # left twist on T_i: X_j -> R_ij (X_i - v - w x X_i) + t_ij
    dX_src = np.zeros((E, 3, 6))
    dX_src[:, :, :3] = -R_ij
    dX_src[:, :, 3:] = R_ij @ skew(X_i)
    dX_d = np.einsum("eab,eb->ea", R_ij, ray)

    J_tgt = dpi @ dX_tgt
    J_src = dpi @ dX_src
    J_d = np.einsum("eab,eb->ea", dpi, dX_d)
    return p_hat, z, J_tgt, J_src, J_d
