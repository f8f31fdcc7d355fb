"""Synthetic scenes, planted outliers and noise injection.

Randomness comes from numpy's counter-based Philox generator. Every scene owns
independent streams keyed by ``(seed, scene_id, stream)`` through
``SeedSequence(seed, spawn_key=(scene_id, stream))``; streams are TRAJECTORY,
PATCHES and NOISE. Within the noise stream, edges consume draws in edge order,
so edge ``e`` always sees the same numbers for a given scene.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .lie import Pose, pose_compose, pose_inverse, se3_exp
from .projective import Intrinsics
from .scene import PatchGraph, build_edges, gt_targets, reproject_edges

TRAJECTORY, PATCHES, NOISE, INIT, PERTURB = range(5)


class InfeasibleConfig(RuntimeError):
    pass


def make_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


@dataclass(frozen=True)
class SynthConfig:
    n_frames: int = 8
    patches_per_frame: int = 8
    width: int = 160
    height: int = 120
    fx: float = 120.0
    fy: float = 120.0
    cx: float = 80.0
    cy: float = 60.0
    radius: int = 2
    step_scale: float = 0.15
    rot_scale: float = 0.02
    depth_min: float = 2.0
    depth_max: float = 8.0
    sigma_in: float = 0.5
    outlier_frac: float = 0.0
    sigma_out: float = 20.0
    outlier_mode: str = "edge"
    seed: int = 0
    margin: float = 4.0
    max_resample: int = 200

    def __post_init__(self):
        if not 0.0 <= self.outlier_frac <= 1.0:
            raise ValueError("outlier_frac must be in [0, 1]")
        if self.sigma_in < 0 or self.sigma_out < 0:
            raise ValueError("noise levels must be non-negative")
        if not 0 < self.depth_min < self.depth_max:
            raise ValueError("depth range must be positive and non-empty")
        if self.outlier_mode not in ("edge", "patch"):
            raise ValueError("outlier_mode must be 'edge' or 'patch'")
        if self.n_frames < 2 or self.patches_per_frame < 1:
            raise ValueError("need at least 2 frames and 1 patch per frame")

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.fx, self.fy, self.cx, self.cy)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown SynthConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True, eq=False)
class CorruptionLabels:
    outlier: np.ndarray
    noise: np.ndarray


def _trajectory(cfg: SynthConfig, rng) -> list[Pose]:
    """World-to-camera ground-truth poses of a smooth random camera path."""
    heading = np.array([1.0, 0.0, 0.4]) + 0.3 * rng.standard_normal(3)
    heading /= np.linalg.norm(heading)
    c2w = [Pose.identity()]
    for _ in range(cfg.n_frames - 1):
        v = cfg.step_scale * (heading + 0.2 * rng.standard_normal(3))
        w = cfg.rot_scale * rng.standard_normal(3)
        c2w.append(pose_compose(c2w[-1], se3_exp(np.concatenate([v, w]))))
    return [pose_inverse(p) for p in c2w]


def generate_scene(cfg: SynthConfig, scene_id: int = 0) -> tuple[PatchGraph, CorruptionLabels]:
    """Random scene with estimates at ground truth and noisy observed targets."""
    k = cfg.intrinsics
    poses = _trajectory(cfg, make_rng(cfg.seed, scene_id, TRAJECTORY))
    pose_arr = np.stack([p.to_array() for p in poses])
    n, per = cfg.n_frames, cfg.patches_per_frame
    rng = make_rng(cfg.seed, scene_id, PATCHES)
    lo = np.array([cfg.margin, cfg.margin])
    hi = np.array([cfg.width - cfg.margin, cfg.height - cfg.margin])

    patch_frame = np.repeat(np.arange(n), per)
    m = len(patch_frame)
    centers = np.zeros((m, 2))
    depths = np.zeros(m)
    todo = np.arange(m)
    for _ in range(cfg.max_resample):
        centers[todo] = lo + (hi - lo) * rng.random((len(todo), 2))
        depths[todo] = np.exp(rng.uniform(np.log(cfg.depth_min), np.log(cfg.depth_max), len(todo)))
        g = PatchGraph(k, (cfg.width, cfg.height), pose_arr, pose_arr, patch_frame, centers,
                       depths, depths)
        g = build_edges(g, cfg.radius)
        p, z, *_ = reproject_edges(g)
        bad_edge = (z <= 0.1 * cfg.depth_min) | np.any((p < lo) | (p > hi), axis=1)
        bad = np.zeros(m, bool)
        np.logical_or.at(bad, g.edge_patch, bad_edge)
        todo = np.flatnonzero(bad)
        if not len(todo):
            break
    else:
        raise InfeasibleConfig(f"{len(todo)} patches still invisible after resampling")

    g = gt_targets(g)
    rng = make_rng(cfg.seed, scene_id, NOISE)
    E = g.n_edges
    if cfg.outlier_mode == "edge":
        outlier = rng.random(E) < cfg.outlier_frac
    else:
        outlier = (rng.random(m) < cfg.outlier_frac)[g.edge_patch]
    z = rng.standard_normal((E, 2))
    noise = z * np.where(outlier, cfg.sigma_out, cfg.sigma_in)[:, None]
    g = g.replace(targets=g.gt_targets + noise, weights=np.ones((E, 2)))
    return g, CorruptionLabels(outlier, noise)


def perturb_depths(graph: PatchGraph, sigma: float, seed: int, frame: int | None = None,
                   patches=None) -> PatchGraph:
    """Multiply the selected depths by exp(N(0, sigma^2)) and clamp to bounds.

    With neither ``frame`` nor ``patches`` every depth is perturbed.
    """
    sel = np.ones(graph.n_patches, bool)
    if frame is not None:
        sel &= graph.patch_frame == frame
    if patches is not None:
        mask = np.zeros(graph.n_patches, bool)
        mask[np.asarray(patches, int)] = True
        sel &= mask
    z = make_rng(seed, PERTURB).standard_normal(graph.n_patches)
    factor = np.where(sel, np.exp(sigma * z), 1.0)
    d = np.clip(graph.depths * factor, *graph.depth_bounds) if sigma > 0 else graph.depths
    return graph.replace(depths=d)


def perturb_pose(graph: PatchGraph, frame: int, sigma_t: float, sigma_r: float,
                 seed: int) -> PatchGraph:
    """Left-multiply one frame's pose by exp(xi), xi ~ N(0, diag(sigma_t^2 I, sigma_r^2 I))."""
    if sigma_t == 0 and sigma_r == 0:
        return graph
    z = make_rng(seed, PERTURB, frame).standard_normal(6)
    xi = np.concatenate([sigma_t * z[:3], sigma_r * z[3:]])
    poses = np.array(graph.poses)
    poses[frame] = pose_compose(se3_exp(xi), graph.pose(frame)).to_array()
    return graph.replace(poses=poses)


def init_estimates(graph: PatchGraph, n_fixed: int, seed: int,
                   depth_range: tuple[float, float] | None = None, scene_id: int = 0) -> PatchGraph:
    """Standard starting point for the solver.

    The first ``n_fixed`` poses are set to ground truth (they anchor the
    gauge), the others to identity, and depths are drawn log-uniformly from
    ``depth_range`` (defaults to the spread of ground-truth depths).
    """
    rng = make_rng(seed, scene_id, INIT)
    if depth_range is None:
        depth_range = (float(graph.gt_depths.min()), float(graph.gt_depths.max()))
    d = np.exp(rng.uniform(np.log(depth_range[0]), np.log(depth_range[1]), graph.n_patches))
    poses = np.tile(Pose.identity().to_array(), (graph.n_frames, 1))
    poses[:n_fixed] = graph.gt_poses[:n_fixed]
    return graph.replace(poses=poses, depths=d)
