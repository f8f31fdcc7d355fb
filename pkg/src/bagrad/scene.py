"""Patch-frame graph: frames, patches and the bipartite edges between them.

The graph is stored column-wise (numpy arrays) so the solver can work on all
edges at once; :class:`Frame`, :class:`Patch` and :class:`Edge` give a
record view for inspection and serialization.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .lie import Pose, quat_to_rot
from .projective import Z_MIN, Intrinsics, edge_geometry

SCENE_VERSION = "ba-grad/1"
D_MIN, D_MAX = 0.1, 1000.0


class EmptyWindow(ValueError):
    pass


@dataclass(frozen=True)
class Frame:
    index: int
    pose: Pose
    gt_pose: Pose


@dataclass(frozen=True)
class Patch:
    k: int
    i: int
    center: tuple[float, float]
    depth: float
    gt_depth: float


@dataclass(frozen=True)
class Edge:
    k: int
    j: int
    target: tuple[float, float]
    weight: tuple[float, float]
    gt_target: tuple[float, float]


def _arr(x, shape_tail, dtype=float):
    return np.array(x, dtype=dtype).reshape((-1,) + shape_tail)


@dataclass(frozen=True, eq=False)
class PatchGraph:
    intrinsics: Intrinsics
    image_size: tuple[int, int]
    poses: np.ndarray
    gt_poses: np.ndarray
    patch_frame: np.ndarray
    centers: np.ndarray
    depths: np.ndarray
    gt_depths: np.ndarray
    patch_ids: np.ndarray = None
    edge_patch: np.ndarray = None
    edge_frame: np.ndarray = None
    targets: np.ndarray = None
    weights: np.ndarray = None
    gt_targets: np.ndarray = None
    depth_bounds: tuple[float, float] = (D_MIN, D_MAX)

    def __post_init__(self):
        set_ = lambda name, val: object.__setattr__(self, name, val)
        set_("poses", _arr(self.poses, (7,)))
        set_("gt_poses", _arr(self.gt_poses, (7,)))
        set_("patch_frame", _arr(self.patch_frame, (), int))
        set_("centers", _arr(self.centers, (2,)))
        set_("depths", _arr(self.depths, ()))
        set_("gt_depths", _arr(self.gt_depths, ()))
        m = len(self.patch_frame)
        set_("patch_ids", np.arange(m) if self.patch_ids is None else _arr(self.patch_ids, (), int))
        for name in ("edge_patch", "edge_frame"):
            v = getattr(self, name)
            set_(name, np.zeros(0, int) if v is None else _arr(v, (), int))
        n_e = len(self.edge_patch)
        for name, fill in (("targets", 0.0), ("weights", 1.0), ("gt_targets", 0.0)):
            v = getattr(self, name)
            set_(name, np.full((n_e, 2), fill) if v is None else _arr(v, (2,)))
        set_("image_size", (int(self.image_size[0]), int(self.image_size[1])))
        set_("depth_bounds", (float(self.depth_bounds[0]), float(self.depth_bounds[1])))
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, np.ndarray):
                v.flags.writeable = False
        self._check()

    def _check(self):
        n, m, e = self.n_frames, self.n_patches, self.n_edges
        if self.gt_poses.shape != (n, 7):
            raise ValueError("gt_poses must match poses")
        if not (self.centers.shape == (m, 2) and self.depths.shape == (m,)
                and self.gt_depths.shape == (m,) and self.patch_ids.shape == (m,)):
            raise ValueError("patch arrays have inconsistent lengths")
        if not (self.edge_frame.shape == (e,) and self.targets.shape == (e, 2)
                and self.weights.shape == (e, 2) and self.gt_targets.shape == (e, 2)):
            raise ValueError("edge arrays have inconsistent lengths")
        if m and (self.patch_frame.min() < 0 or self.patch_frame.max() >= n):
            raise ValueError("patch references a missing frame")
        if e:
            if self.edge_patch.min() < 0 or self.edge_patch.max() >= m:
                raise ValueError("edge references a missing patch")
            if self.edge_frame.min() < 0 or self.edge_frame.max() >= n:
                raise ValueError("edge references a missing frame")

    # sizes -----------------------------------------------------------------
    @property
    def n_frames(self) -> int:
        return len(self.poses)

    @property
    def n_patches(self) -> int:
        return len(self.patch_frame)

    @property
    def n_edges(self) -> int:
        return len(self.edge_patch)

    @property
    def edge_source(self) -> np.ndarray:
        return self.patch_frame[self.edge_patch]

    def replace(self, **changes) -> "PatchGraph":
        return dataclasses.replace(self, **changes)

    # record views ----------------------------------------------------------
    @property
    def frames(self) -> list[Frame]:
        return [Frame(i, Pose.from_array(self.poses[i]), Pose.from_array(self.gt_poses[i]))
                for i in range(self.n_frames)]

    @property
    def patches(self) -> list[Patch]:
        return [Patch(int(self.patch_ids[a]), int(self.patch_frame[a]),
                      tuple(map(float, self.centers[a])), float(self.depths[a]),
                      float(self.gt_depths[a])) for a in range(self.n_patches)]

    @property
    def edges(self) -> list[Edge]:
        return [Edge(int(self.patch_ids[self.edge_patch[e]]), int(self.edge_frame[e]),
                     tuple(map(float, self.targets[e])), tuple(map(float, self.weights[e])),
                     tuple(map(float, self.gt_targets[e]))) for e in range(self.n_edges)]

    def pose(self, i: int) -> Pose:
        return Pose.from_array(self.poses[i])

    def gt_pose(self, i: int) -> Pose:
        return Pose.from_array(self.gt_poses[i])

    def structurally_equal(self, other: "PatchGraph") -> bool:
        for f in dataclasses.fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if isinstance(a, np.ndarray):
                if a.shape != b.shape or a.tobytes() != np.asarray(b, a.dtype).tobytes():
                    return False
            elif a != b:
                return False
        return True


def reproject_edges(graph: PatchGraph, poses=None, depths=None, jacobians=False):
    """Reproject every edge; thin wrapper over :func:`edge_geometry`."""
    poses = graph.poses if poses is None else np.asarray(poses, dtype=float)
    depths = graph.depths if depths is None else np.asarray(depths, dtype=float)
    R = quat_to_rot(poses[:, :4])
    t = poses[:, 4:]
    src = graph.edge_source
    return edge_geometry(R[src], t[src], R[graph.edge_frame], t[graph.edge_frame],
                         graph.centers[graph.edge_patch], depths[graph.edge_patch],
                         graph.intrinsics, jacobians=jacobians)


def build_edges(graph: PatchGraph, r: int) -> PatchGraph:
    """Connect every patch to each frame j with 0 < |j - i| <= r."""
    ep, ef = [], []
    n = graph.n_frames
    for a, i in enumerate(graph.patch_frame):
        for j in range(max(0, i - r), min(n, i + r + 1)):
            if j != i:
                ep.append(a)
                ef.append(j)
    return graph.replace(edge_patch=np.array(ep, int), edge_frame=np.array(ef, int),
                         targets=None, weights=None, gt_targets=None)


def gt_targets(graph: PatchGraph, z_min: float = Z_MIN) -> PatchGraph:
    """Fill p*_jk from ground truth; edges failing cheirality are removed."""
    p_star, z, *_ = reproject_edges(graph, graph.gt_poses, graph.gt_depths)
    keep = z > z_min
    return graph.replace(edge_patch=graph.edge_patch[keep], edge_frame=graph.edge_frame[keep],
                         targets=graph.targets[keep], weights=graph.weights[keep],
                         gt_targets=p_star[keep])


def window(graph: PatchGraph, first: int, count: int) -> PatchGraph:
    """Frames [first, first+count), their patches, and edges inside the window.

    Frames are re-indexed from 0; patch ids are preserved.
    """
    last = min(first + count, graph.n_frames)
    if count <= 0 or first < 0 or first >= last:
        raise EmptyWindow(f"empty window first={first} count={count}")
    pmask = (graph.patch_frame >= first) & (graph.patch_frame < last)
    new_index = np.cumsum(pmask) - 1
    emask = pmask[graph.edge_patch] & (graph.edge_frame >= first) & (graph.edge_frame < last)
    return graph.replace(
        poses=graph.poses[first:last], gt_poses=graph.gt_poses[first:last],
        patch_frame=graph.patch_frame[pmask] - first, centers=graph.centers[pmask],
        depths=graph.depths[pmask], gt_depths=graph.gt_depths[pmask],
        patch_ids=graph.patch_ids[pmask],
        edge_patch=new_index[graph.edge_patch[emask]], edge_frame=graph.edge_frame[emask] - first,
        targets=graph.targets[emask], weights=graph.weights[emask],
        gt_targets=graph.gt_targets[emask])


def select_patches(graph: PatchGraph, keep) -> PatchGraph:
    """Subgraph with only the patches where ``keep`` is true (and their edges)."""
    keep = np.asarray(keep, bool)
    new_index = np.cumsum(keep) - 1
    emask = keep[graph.edge_patch]
    return graph.replace(
        patch_frame=graph.patch_frame[keep], centers=graph.centers[keep],
        depths=graph.depths[keep], gt_depths=graph.gt_depths[keep], patch_ids=graph.patch_ids[keep],
        edge_patch=new_index[graph.edge_patch[emask]], edge_frame=graph.edge_frame[emask],
        targets=graph.targets[emask], weights=graph.weights[emask],
        gt_targets=graph.gt_targets[emask])


def streaming_windows(graph: PatchGraph, init: int = 8):
    """Growing windows [0, init), [0, init+1), ... covering the whole graph."""
    for count in range(min(init, graph.n_frames), graph.n_frames + 1):
        yield window(graph, 0, count)


# serialization -------------------------------------------------------------
def to_dict(graph: PatchGraph) -> dict:
    ids = graph.patch_ids
    return {
        "version": SCENE_VERSION,
        "intrinsics": graph.intrinsics.to_dict(),
        "image_size": list(graph.image_size),
        "depth_bounds": list(graph.depth_bounds),
        "frames": [{"index": i, "pose": graph.poses[i].tolist(), "gt_pose": graph.gt_poses[i].tolist()}
                   for i in range(graph.n_frames)],
        "patches": [{"k": int(ids[a]), "i": int(graph.patch_frame[a]),
                     "center": graph.centers[a].tolist(), "depth": float(graph.depths[a]),
                     "gt_depth": float(graph.gt_depths[a])} for a in range(graph.n_patches)],
        "edges": [{"k": int(ids[graph.edge_patch[e]]), "j": int(graph.edge_frame[e]),
                   "target": graph.targets[e].tolist(), "weight": graph.weights[e].tolist(),
                   "gt_target": graph.gt_targets[e].tolist()} for e in range(graph.n_edges)],
    }


def from_dict(d: dict) -> PatchGraph:
    if d.get("version") != SCENE_VERSION:
        raise ValueError(f"unsupported scene version {d.get('version')!r}")
    frames = sorted(d["frames"], key=lambda f: f["index"])
    if [f["index"] for f in frames] != list(range(len(frames))):
        raise ValueError("frame indices must be contiguous from 0")
    patches = d["patches"]
    pos = {p["k"]: a for a, p in enumerate(patches)}
    edges = d["edges"]
    return PatchGraph(
        intrinsics=Intrinsics.from_dict(d["intrinsics"]),
        image_size=tuple(d["image_size"]),
        depth_bounds=tuple(d.get("depth_bounds", (D_MIN, D_MAX))),
        poses=np.array([f["pose"] for f in frames], float).reshape(-1, 7),
        gt_poses=np.array([f["gt_pose"] for f in frames], float).reshape(-1, 7),
        patch_frame=[p["i"] for p in patches],
        centers=np.array([p["center"] for p in patches], float).reshape(-1, 2),
        depths=[p["depth"] for p in patches],
        gt_depths=[p["gt_depth"] for p in patches],
        patch_ids=[p["k"] for p in patches],
        edge_patch=[pos[e["k"]] for e in edges],
        edge_frame=[e["j"] for e in edges],
        targets=np.array([e["target"] for e in edges], float).reshape(-1, 2),
        weights=np.array([e["weight"] for e in edges], float).reshape(-1, 2),
        gt_targets=np.array([e["gt_target"] for e in edges], float).reshape(-1, 2),
    )


def dumps(graph: PatchGraph) -> str:
    return json.dumps(to_dict(graph), indent=1)


def loads(text: str) -> PatchGraph:
    return from_dict(json.loads(text))


def save(graph: PatchGraph, path) -> None:
    Path(path).write_text(dumps(graph), encoding="utf-8")


def load(path) -> PatchGraph:
    return loads(Path(path).read_text(encoding="utf-8"))
