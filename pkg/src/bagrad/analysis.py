"""Gradient-variance experiments, SNR metrics and the scalar WLS toy model.

Every experiment maps a config (with its seed list) to rows of
``(experiment, sigma_or_iter, loss_tag, seed, value, sentinel_flag)``;
:func:`write_csv` serializes them so repeated runs give identical bytes.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .backward import UpstreamGrads, ba_backward, linearize_at
from .ba import BAConfig, ba_solve
from .lie import pose_inverse, se3_log
from .losses import flow_loss, pose_loss
from .synth import SynthConfig, generate_scene, init_estimates, make_rng, perturb_depths, perturb_pose
from .scene import PatchGraph
from .trainer import TrainConfig, backward, inner_loop, iterate_losses

CSV_HEADER = ("experiment", "sigma_or_iter", "loss_tag", "seed", "value", "sentinel_flag")
EXPERIMENTS = ("linearization", "interference-depth", "interference-pose", "weighted-snr", "toy-bias")
INF_SNR = math.inf


class OracleDomainError(ValueError):
    pass


@dataclass(frozen=True)
class SnrPoint:
    level: float
    value: float
    tag: str
    seed: int

    @property
    def sentinel(self) -> bool:
        return not math.isfinite(self.value)


@dataclass(frozen=True)
class GradErrorPoint:
    level: float
    value: float
    tag: str
    seed: int
    sentinel: bool = False


# metrics -------------------------------------------------------------------
def fd_gradient(f, x, h: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function, one coordinate at a time."""
    x = np.array(x, dtype=float)
    out = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        fp, fm = f(x + e), f(x - e)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleDomainError(f"non-finite value at coordinate {i}")
        out.flat[i] = (fp - fm) / (2 * h)
    return out


def rel_error(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    nb = np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / nb) if nb > 0 else float(np.linalg.norm(a))


ORACLE_BA = BAConfig(n_iters=60, damping=0.0, n_fixed_poses=2, step_tol=1e-12)


@dataclass(frozen=True)
class GradCheck:
    err_delta: float
    err_sigma: float
    step_norm: float

    def passed(self, tol: float = 1e-3) -> bool:
        return self.err_delta < tol and self.err_sigma < tol


def ift_gradcheck(graph: PatchGraph, seed: int = 0, ba: BAConfig = ORACLE_BA,
                  h_target: float = 1e-4, h_weight: float = 1e-5) -> GradCheck:
    """Analytic BA input gradients against central differences of re-solves.

    The test loss is a random linear functional of the free poses (as left
    twists about the nominal solution) and depths. Exactness needs a
    converged, undamped, near-zero-residual solve.
    """
    nom = ba_solve(graph, ba)
    rng = make_rng(seed, 7)
    gT = rng.standard_normal((graph.n_frames, 6))
    gT[:ba.n_fixed_poses] = 0.0
    gd = rng.standard_normal(graph.n_patches)

    def objective(sol):
        val = gd @ sol.depths
        for i in range(ba.n_fixed_poses, graph.n_frames):
            val += gT[i] @ se3_log(sol.pose(i) @ pose_inverse(nom.pose(i)))
        return float(val)

    def fd(name, h):
        x0 = np.array(getattr(nom.graph, name))
        return fd_gradient(lambda x: objective(ba_solve(nom.graph.replace(**{name: x.reshape(x0.shape)}), ba)),
                           x0.ravel(), h).reshape(x0.shape)

    ig = ba_backward(nom, UpstreamGrads(gT, gd))
    return GradCheck(rel_error(ig.grad_delta, fd("targets", h_target)),
                     rel_error(ig.grad_sigma, fd("weights", h_weight)), nom.last_step_norm)


def snr_db(clean_grad, noisy_grad) -> float:
    """``10 log10(|clean| / |noisy - clean|)``; +inf when the two agree."""
    clean = np.ravel(np.asarray(clean_grad, dtype=float))
    noise = np.linalg.norm(np.ravel(np.asarray(noisy_grad, dtype=float)) - clean)
    if noise == 0:
        return INF_SNR
    return 10.0 * math.log10(np.linalg.norm(clean) / noise)


def batch_snr(grads) -> float:
    """``|mean| / mean_i |g_i - mean|`` over a batch; +inf with zero spread."""
    G = np.array([np.ravel(g) for g in grads], dtype=float)
    if len(G) < 2:
        raise ValueError("batch SNR needs at least two gradients")
    mean = G.mean(0)
    noise = np.mean(np.linalg.norm(G - mean, axis=1))
    if noise == 0:
        return INF_SNR
    return float(np.linalg.norm(mean) / noise)


# configuration -------------------------------------------------------------
@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "linearization"
    sigmas: tuple = (0.0, 0.05, 0.1, 0.2, 0.3, 0.5, 0.8)
    seeds: tuple = tuple(range(10))
    scene: SynthConfig = field(default_factory=lambda: SynthConfig(n_frames=5, patches_per_frame=8))
    ba: BAConfig = field(default_factory=lambda: BAConfig(n_iters=20, step_tol=1e-10))
    noise_frame: int = 0
    rot_ratio: float = 0.1
    # weighted-snr
    batch_size: int = 8
    n_inner: int = 3
    theta_seed: int = 0
    init_scale: float = 0.1
    oracle_weights: bool = True
    outlier_weight: float = 0.01
    # toy-bias
    n_points: int = 20
    n_outliers: int = 4
    outlier_offset: float = 5.0
    toy_sigma: float = 0.5
    toy_steps: int = 500
    toy_lr: float = 1.0
    weight_init: float = 0.9
    clip_min: float = -0.01
    clip_max: float = 0.01
    record_every: int = 50

    def __post_init__(self):
        if self.name not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.name!r}")
        object.__setattr__(self, "sigmas", tuple(float(s) for s in self.sigmas))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if any(s < 0 for s in self.sigmas):
            raise ValueError("noise levels must be non-negative")
        if not self.seeds:
            raise ValueError("need at least one seed")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown experiment fields: {sorted(unknown)}")
        if isinstance(d.get("scene"), dict):
            d["scene"] = SynthConfig.from_dict(d["scene"])
        if isinstance(d.get("ba"), dict):
            d["ba"] = BAConfig(**d["ba"])
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _solved_scene(cfg: ExperimentConfig, seed: int):
    g, labels = generate_scene(dataclasses.replace(cfg.scene, seed=seed))
    return g, ba_solve(g, cfg.ba)


# linearization noise -------------------------------------------------------
def _linearization_cell(cfg: ExperimentConfig, seed: int) -> list[SnrPoint]:
    g, sol = _solved_scene(cfg, seed)
    ups = {"flow": flow_loss(g, sol)[1], "pose": pose_loss(g.gt_poses, sol)[1]}
    clean = {k: ba_backward(sol, up).grad_delta for k, up in ups.items()}
    out = []
    for s in cfg.sigmas:
        noisy = perturb_depths(sol.graph, s, seed).depths
        lin = linearize_at(sol, noisy)
        for tag, up in ups.items():
            out.append(SnrPoint(s, snr_db(clean[tag], ba_backward(lin, up).grad_delta), tag, seed))
    return out


def exp_linearization(cfg: ExperimentConfig, jobs: int = 1) -> list[SnrPoint]:
    """SNR of d(loss)/d(delta) when the backward pass linearizes at noisy depths."""
    return _by_sigma(_map(_linearization_cell, cfg, jobs))


# flow-loss interference ----------------------------------------------------
def _interference_cell(cfg: ExperimentConfig, seed: int, target: str) -> list[GradErrorPoint]:
    g, sol = _solved_scene(cfg, seed)
    base = sol.graph
    clean = flow_loss(g, base)[1]
    n, m = base.n_frames, base.n_patches
    out = []
    for s in cfg.sigmas:
        if target == "depth":
            sel = base.patch_frame == cfg.noise_frame
            noisy = perturb_depths(base, s, seed, frame=cfg.noise_frame)
            pose_mask, depth_mask = np.ones(n, bool), ~sel
        else:
            noisy = perturb_pose(base, cfg.noise_frame, s, s * cfg.rot_ratio, seed)
            pose_mask = np.arange(n) != cfg.noise_frame
            depth_mask = np.ones(m, bool)
        gr = flow_loss(g, noisy)[1]
        dp = np.linalg.norm(gr.grad_pose - clean.grad_pose, axis=1)[pose_mask]
        dd = np.abs(gr.grad_depth - clean.grad_depth)[depth_mask]
        out.append(GradErrorPoint(s, float(dp.mean()) if dp.size else 0.0, "pose", seed))
        out.append(GradErrorPoint(s, float(dd.mean()) if dd.size else 0.0, "depth", seed))
    return out


def _interference_depth(cfg, seed):
    return _interference_cell(cfg, seed, "depth")


def _interference_pose(cfg, seed):
    return _interference_cell(cfg, seed, "pose")


def exp_flow_interference(cfg: ExperimentConfig, target: str = "depth", jobs: int = 1):
    """Mean deviation of flow-loss gradients on clean variables after planting noise.

    ``target="depth"`` perturbs the depths of ``noise_frame``'s patches;
    ``target="pose"`` perturbs that frame's pose. Tags name the clean group.
    """
    if target not in ("depth", "pose"):
        raise ValueError("target must be 'depth' or 'pose'")
    fn = _interference_depth if target == "depth" else _interference_pose
    return _by_sigma(_map(fn, cfg, jobs))


# weighted vs unweighted SNR ----------------------------------------------------
def _snr_train_configs(cfg: ExperimentConfig):
    base = TrainConfig(n_inner=cfg.n_inner, k_skip=0, init_scale=cfg.init_scale, scene=cfg.scene,
                       ba=dataclasses.replace(cfg.ba, n_fixed_poses=2))
    return (dataclasses.replace(base, strategy="unweighted"),
            dataclasses.replace(base, strategy="weighted"))


def _weighted_snr_cell(cfg: ExperimentConfig, seed: int) -> list[SnrPoint]:
    cu, cw = _snr_train_configs(cfg)
    net = cu.net
    theta = net.init(cfg.theta_seed, cfg.init_scale)
    head = net.delta_head()
    grads = {"flow": [], "weighted-flow": []}
    for k in range(cfg.batch_size):
        g, labels = generate_scene(dataclasses.replace(cfg.scene, seed=seed), k)
        g = init_estimates(g, cu.ba.n_fixed_poses, seed, scene_id=k)
        override = None
        if cfg.oracle_weights:
            w = np.where(labels.outlier, cfg.outlier_weight, 1.0)
            override = np.repeat(w[:, None], 2, axis=1)
        trace = inner_loop(g, theta, cu, sigma_override=override)
        for tag, c in (("flow", cu), ("weighted-flow", cw)):
            L = iterate_losses(g, trace, c)
            grads[tag].append(backward(g, theta, trace, L, c, 1.0, 0.0)[head])
    return [SnrPoint(float(seed), batch_snr(grads[t]), t, seed) for t in ("flow", "weighted-flow")]


def exp_weighted_snr(cfg: ExperimentConfig, jobs: int = 1) -> list[SnrPoint]:
    """Batch SNR of revision-head gradients under the flow and weighted-flow losses.

    One batch of ``batch_size`` scenes per seed; the level column carries
    the batch seed.
    """
    if cfg.batch_size < 2:
        raise ValueError("batch SNR needs batch_size >= 2")
    return [p for cell in _map(_weighted_snr_cell, cfg, jobs) for p in cell]


# scalar weighted least squares -------------------------------------------------
def toy_wls_solve(fhat, sigma) -> float:
    fhat, sigma = np.asarray(fhat, dtype=float), np.asarray(sigma, dtype=float)
    s = sigma.sum()
    if not s > 0:
        raise ValueError("weights sum to zero")
    return float((sigma * fhat).sum() / s)


def toy_weight_grad(fhat, sigma, f_gt: float) -> np.ndarray:
    """Gradient of ``|f_gt - f*|`` w.r.t. each weight."""
    fhat, sigma = np.asarray(fhat, dtype=float), np.asarray(sigma, dtype=float)
    f = toy_wls_solve(fhat, sigma)
    if f == f_gt:
        return np.zeros_like(fhat)
    return -np.sign(f - f_gt) * (f - fhat) / sigma.sum()


def _toy_run(cfg: ExperimentConfig, seed: int, lo: float, hi: float, n_out: int):
    rng = make_rng(seed, 0)
    n = cfg.n_points
    logit = np.full(n, math.log(cfg.weight_init / (1 - cfg.weight_init)))
    sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    trace = []
    for step in range(cfg.toy_steps + 1):
        sigma = 1.0 / (1.0 + np.exp(-logit))
        if step % cfg.record_every == 0:
            trace.append((step, float(sigma.mean())))
        if step == cfg.toy_steps:
            break
        fhat = cfg.toy_sigma * rng.standard_normal(n)
        fhat[:n_out] += sign[:n_out] * cfg.outlier_offset
        g = np.clip(toy_weight_grad(fhat, sigma, 0.0), lo, hi)
        logit -= cfg.toy_lr * g * sigma * (1 - sigma)
    return trace


def _toy_cell(cfg: ExperimentConfig, seed: int) -> list[SnrPoint]:
    out = []
    arms = (("unclipped", -np.inf, np.inf, cfg.n_outliers),
            ("clipped", cfg.clip_min, cfg.clip_max, cfg.n_outliers),
            ("no-outliers", -np.inf, np.inf, 0))
    for tag, lo, hi, n_out in arms:
        for step, v in _toy_run(cfg, seed, lo, hi, n_out):
            out.append(SnrPoint(float(step), v, tag, seed))
    return out


def toy_bias_experiment(cfg: ExperimentConfig, jobs: int = 1) -> list[SnrPoint]:
    """Mean-weight trajectories of gradient descent on sigmoid weights.

    Each seed runs three arms on identical data: unclipped, clipped to
    ``[clip_min, clip_max]`` and an outlier-free control.
    """
    return [p for cell in _map(_toy_cell, cfg, jobs) for p in cell]


def final_mean_weights(points, tag: str) -> np.ndarray:
    last = max(p.level for p in points if p.tag == tag)
    return np.array([p.value for p in points if p.tag == tag and p.level == last])


# plumbing ------------------------------------------------------------------
def _cell(args):
    fn, cfg, seed = args
    return fn(cfg, seed)


def _map(fn, cfg: ExperimentConfig, jobs: int):
    tasks = [(fn, cfg, s) for s in cfg.seeds]
    if jobs <= 1:
        return [_cell(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(_cell, tasks))


def _by_sigma(cells):
    pts = [p for cell in cells for p in cell]
    return sorted(pts, key=lambda p: (p.level, p.seed, p.tag))


def run_experiment(cfg: ExperimentConfig, jobs: int = 1):
    name = cfg.name
    if name == "linearization":
        return exp_linearization(cfg, jobs)
    if name == "interference-depth":
        return exp_flow_interference(cfg, "depth", jobs)
    if name == "interference-pose":
        return exp_flow_interference(cfg, "pose", jobs)
    if name == "weighted-snr":
        return exp_weighted_snr(cfg, jobs)
    return toy_bias_experiment(cfg, jobs)


def medians(points, tag: str):
    """(levels, median value per level) for one tag, sentinels excluded."""
    levels = sorted({p.level for p in points if p.tag == tag})
    meds = []
    for s in levels:
        vals = [p.value for p in points if p.tag == tag and p.level == s and math.isfinite(p.value)]
        meds.append(float(np.median(vals)) if vals else math.nan)
    return np.array(levels), np.array(meds)


def isotonic_violations(values, increasing: bool = True) -> int:
    """Count of adjacent pairs that break strict monotonicity."""
    v = np.asarray(values, dtype=float)
    d = np.diff(v)
    return int(np.sum(d <= 0) if increasing else np.sum(d >= 0))


def to_rows(name: str, points):
    return [(name, p.level, p.tag, p.seed, p.value, int(bool(p.sentinel))) for p in points]


def csv_text(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for name, level, tag, seed, value, flag in rows:
        w.writerow([name, repr(float(level)), tag, int(seed), repr(float(value)), int(flag)])
    return buf.getvalue()


def write_csv(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(csv_text(rows))
