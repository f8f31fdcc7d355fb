"""SO(3) / SE(3) / Sim(3) primitives.

Poses store a unit quaternion ``(w, x, y, z)`` and a translation. Twists are
6-vectors ordered ``(v, omega)``: translational part first, rotational part
last. All pose Jacobians in this package use the left perturbation
``T <- exp(xi) * T``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

_SMALL_ANGLE = 1e-8
_LOG_PI_MARGIN = 1e-6


class LogDomainError(ValueError):
    """Rotation angle too close to pi for an unambiguous logarithm."""


class AlignmentDegenerate(ValueError):
    """Point sets are collinear or coincident; similarity alignment undefined."""


def skew(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Rotation matrix for (batched) unit quaternions (w, x, y, z)."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=float), -1, 0)
    R = np.empty(np.shape(w) + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rot_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns the quaternion with w >= 0."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s,
                      (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s,
                      0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    q = q / np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def so3_exp_quat(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    if theta < _SMALL_ANGLE:
        # sin(theta/2)/theta ~ 1/2 - theta^2/48
        k = 0.5 - theta * theta / 48.0
        q = np.array([1.0 - theta * theta / 8.0, *(k * omega)])
    else:
        q = np.array([np.cos(0.5 * theta), *(np.sin(0.5 * theta) / theta * omega)])
    return q / np.linalg.norm(q)


def so3_log_quat(q: np.ndarray, check: bool = True) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q[0] < 0:
        q = -q
    w, v = q[0], q[1:]
    s = np.linalg.norm(v)
    theta = 2.0 * np.arctan2(s, w)
    if check and theta > np.pi - _LOG_PI_MARGIN:
        raise LogDomainError(f"rotation angle {theta:.9f} too close to pi")
    if s < _SMALL_ANGLE:
        return (2.0 / w) * (1.0 - s * s / (3.0 * w * w)) * v
    return theta / s * v


def _so3_coeffs(theta: float) -> tuple[float, float, float]:
    """A = sin t / t, B = (1 - cos t)/t^2, C = (t - sin t)/t^3 with series near 0."""
    if theta < 0.05:
        t2 = theta * theta
        return (1.0 - t2 / 6.0 * (1.0 - t2 / 20.0 * (1.0 - t2 / 42.0)),
                0.5 - t2 / 24.0 * (1.0 - t2 / 30.0 * (1.0 - t2 / 56.0)),
                1.0 / 6.0 - t2 / 120.0 * (1.0 - t2 / 42.0 * (1.0 - t2 / 72.0)))
    return (np.sin(theta) / theta, (1.0 - np.cos(theta)) / theta ** 2,
            (theta - np.sin(theta)) / theta ** 3)


def so3_left_jacobian(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    _, B, C = _so3_coeffs(np.linalg.norm(omega))
    W = skew(omega)
    return np.eye(3) + B * W + C * (W @ W)


def so3_left_jacobian_inv(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    W = skew(omega)
    if theta < 0.05:
        t2 = theta * theta
        c = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0 + t2 ** 3 / 1209600.0
    else:
        c = (1.0 - theta * np.sin(theta) / (2.0 * (1.0 - np.cos(theta)))) / theta ** 2
    return np.eye(3) - 0.5 * W + c * (W @ W)


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform x -> R x + t with R stored as a unit quaternion."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(4)
        q = q / np.linalg.norm(q)
        if q[0] < 0:
            q = -q
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3).copy())

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_array(cls, a: Sequence[float]) -> "Pose":
        a = np.asarray(a, dtype=float)
        return cls(a[:4], a[4:7])

    @classmethod
    def from_matrix(cls, M: np.ndarray) -> "Pose":
        M = np.asarray(M, dtype=float)
        return cls(rot_to_quat(M[:3, :3]), M[:3, 3])

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.q, self.t])

    def to_list(self) -> list[float]:
        return [float(v) for v in self.to_array()]

    @property
    def R(self) -> np.ndarray:
        return quat_to_rot(self.q)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def act(self, x: np.ndarray) -> np.ndarray:
        """Apply to points of shape (..., 3)."""
        return np.asarray(x, dtype=float) @ self.R.T + self.t

    def __matmul__(self, other: "Pose") -> "Pose":
        return pose_compose(self, other)

    def __repr__(self) -> str:
        return f"Pose(q={np.array2string(self.q, precision=6)}, t={np.array2string(self.t, precision=6)})"


def pose_compose(a: Pose, b: Pose) -> Pose:
    """a * b, i.e. apply b first."""
    return Pose(quat_mul(a.q, b.q), a.R @ b.t + a.t)


def pose_inverse(a: Pose) -> Pose:
    q_inv = a.q * np.array([1.0, -1.0, -1.0, -1.0])
    return Pose(q_inv, -(a.R.T @ a.t))


def se3_exp(xi: np.ndarray) -> Pose:
    xi = np.asarray(xi, dtype=float).reshape(6)
    v, omega = xi[:3], xi[3:]
    return Pose(so3_exp_quat(omega), so3_left_jacobian(omega) @ v)


def se3_log(p: Pose, check: bool = True) -> np.ndarray:
    omega = so3_log_quat(p.q, check=check)
    return np.concatenate([so3_left_jacobian_inv(omega) @ p.t, omega])


def adjoint(p: Pose) -> np.ndarray:
    """6x6 adjoint so that p * exp(xi) * p^-1 = exp(adjoint(p) @ xi)."""
    R = p.R
    A = np.zeros((6, 6))
    A[:3, :3] = R
    A[:3, 3:] = skew(p.t) @ R
    A[3:, 3:] = R
    return A


def _se3_q_block(rho: np.ndarray, phi: np.ndarray) -> np.ndarray:
    th = np.linalg.norm(phi)
    P, Rh = skew(phi), skew(rho)
    if th < 0.05:
        t2 = th * th
        c1 = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
        c2 = 1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0
        c3 = 1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0
    else:
        s, c = np.sin(th), np.cos(th)
        c1 = (th - s) / th ** 3
        c2 = (0.5 * th * th + c - 1.0) / th ** 4
        c3 = -0.5 * ((1.0 - 0.5 * th * th - c) / th ** 4
                     - 3.0 * (th - s - th ** 3 / 6.0) / th ** 5)
    PR = P @ Rh
    RP = Rh @ P
    PRP = PR @ P
    return (0.5 * Rh + c1 * (PR + RP + PRP)
            + c2 * (P @ PR + RP @ P - 3.0 * PRP)
            + c3 * (PRP @ P + P @ PRP))


def se3_left_jacobian(xi: np.ndarray) -> np.ndarray:
    """J such that exp(xi + h) ~= exp(J h) exp(xi)."""
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[:3], xi[3:]
    Jr = so3_left_jacobian(phi)
    J = np.zeros((6, 6))
    J[:3, :3] = Jr
    J[3:, 3:] = Jr
    J[:3, 3:] = _se3_q_block(rho, phi)
    return J


def se3_left_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    """d Log(exp(h) T) / dh at h = 0, where xi = Log(T)."""
    xi = np.asarray(xi, dtype=float)
    Ji = so3_left_jacobian_inv(xi[3:])
    Q = _se3_q_block(xi[:3], xi[3:])
    out = np.zeros((6, 6))
    out[:3, :3] = Ji
    out[3:, 3:] = Ji
    out[:3, 3:] = -Ji @ Q @ Ji
    return out


def geodesic_distance(a: Pose, b: Pose) -> float:
    return float(np.linalg.norm(se3_log(pose_compose(pose_inverse(b), a), check=False)))


@dataclass(frozen=True, eq=False)
class Sim3:
    scale: float
    pose: Pose

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("Sim3 scale must be positive")

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.scale * (np.asarray(x, dtype=float) @ self.pose.R.T) + self.pose.t

    def inverse(self) -> "Sim3":
        s = 1.0 / self.scale
        R_inv = self.pose.R.T
        return Sim3(s, Pose.from_matrix(_rt(R_inv, -s * (R_inv @ self.pose.t))))


def _rt(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    M = np.eye(4)
    M[:3, :3] = R
    M[:3, 3] = t
    return M


def umeyama_sim3(est: np.ndarray, gt: np.ndarray, rel_tol: float = 1e-10) -> Sim3:
    """Closed-form similarity (s, R, t) minimizing sum ||gt_i - (s R est_i + t)||^2."""
    X = np.asarray(est, dtype=float).reshape(-1, 3)
    Y = np.asarray(gt, dtype=float).reshape(-1, 3)
    if X.shape != Y.shape or len(X) < 3:
        raise AlignmentDegenerate("need at least 3 matching point pairs")
    mx, my = X.mean(0), Y.mean(0)
    Xc, Yc = X - mx, Y - my
    sv = np.linalg.svd(Xc, compute_uv=False)
    sv_y = np.linalg.svd(Yc, compute_uv=False)
    if sv[0] <= rel_tol or sv[1] <= rel_tol * sv[0] or sv_y[1] <= rel_tol * max(sv_y[0], rel_tol):
        raise AlignmentDegenerate("point set is collinear or coincident")
    n = len(X)
    cov = Yc.T @ Xc / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_x = (Xc ** 2).sum() / n
    s = float(np.trace(np.diag(D) @ S) / var_x)
    t = my - s * (R @ mx)
    return Sim3(s, Pose.from_matrix(_rt(R, t)))


def poses_to_array(poses: Sequence[Pose]) -> np.ndarray:
    return np.stack([p.to_array() for p in poses]) if len(poses) else np.zeros((0, 7))


def array_to_poses(a: np.ndarray) -> list[Pose]:
    return [Pose.from_array(row) for row in np.asarray(a, dtype=float).reshape(-1, 7)]
