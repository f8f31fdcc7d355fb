"""Minimal flow/weight predictor trained through the BA layer.

The predictor is a one-hidden-layer MLP applied independently to every edge.
Its inputs are the current reprojection error ``p_bar - p_hat``, the previous
revision, the previous weight and a constant. It outputs an additive revision
``delta`` of the target and a weight ``Sigma`` in (0, 1). The inner loop
alternates prediction with a short BA solve. The backward pass runs through
the whole unrolled loop: BA outputs feed the next iterate's features, and BA
is differentiated implicitly with :func:`ba_backward`.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .backward import UpstreamGrads, ba_backward, clip_weight_grad
from .ba import BAConfig, BASolution, IllPosedWindow, ba_solve
from .lie import AlignmentDegenerate, LogDomainError, quat_to_rot, umeyama_sim3
from .losses import (DegenerateBalance, balance_beta, flow_loss, heuristic_weights, pose_loss,
                     pose_loss_mask, scatter_edge_grads, total_loss_fixed, weighted_flow_loss)
from .scene import PatchGraph, reproject_edges, window
from .synth import SynthConfig, generate_scene, init_estimates, make_rng

log = logging.getLogger(__name__)

STRATEGIES = ("unweighted", "weighted", "gt-interp", "grad-correct", "heuristic")
N_FEATURES = 7
SIGMA_INIT = 0.5
_THETA = 13
_SOLVER_ERRORS = (IllPosedWindow, LogDomainError, FloatingPointError, np.linalg.LinAlgError)


class TrainingDiverged(RuntimeError):
    pass


class BatchFailure(RuntimeError):
    pass


# predictor -----------------------------------------------------------------
@dataclass(frozen=True)
class Predictor:
    hidden: int = 16
    n_features: int = N_FEATURES

    @property
    def shapes(self):
        h, f = self.hidden, self.n_features
        return [(h, f), (h,), (2, h), (2,), (2, h), (2,)]

    @property
    def n_params(self) -> int:
        return sum(math.prod(s) for s in self.shapes)

    def unpack(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        out, a = [], 0
        for s in self.shapes:
            n = math.prod(s)
            out.append(theta[a:a + n].reshape(s))
            a += n
        return out

    def delta_head(self) -> slice:
        """Parameter slice of the revision (flow) head."""
        h, f = self.hidden, self.n_features
        start = h * f + h
        return slice(start, start + 2 * h + 2)

    def init(self, seed: int, scale: float = 0.1, head_scale: float | None = None) -> np.ndarray:
        """Normal init; the two output heads use ``head_scale`` (default ``scale``)."""
        theta = scale * make_rng(seed, _THETA).standard_normal(self.n_params)
        if head_scale is not None:
            h, f = self.hidden, self.n_features
            theta[h * f + h:] *= head_scale / scale if scale else 0.0
        return theta


def _forward(net: Predictor, theta, X):
    W1, b1, Wd, bd, Ws, bs = net.unpack(theta)
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != net.n_features:
        raise ValueError(f"features must have shape (E, {net.n_features})")
    h = np.tanh(X @ W1.T + b1)
    delta = h @ Wd.T + bd
    sigma = 1.0 / (1.0 + np.exp(-(h @ Ws.T + bs)))
    return delta, sigma, h


def predictor_forward(theta, features, net: Predictor = Predictor()):
    delta, sigma, _ = _forward(net, theta, features)
    return delta, sigma


def predictor_backward(theta, features, g_delta, g_sigma, net: Predictor = Predictor(),
                       input_grad: bool = False):
    """Gradient of ``sum(g_delta * delta) + sum(g_sigma * sigma)`` w.r.t. theta.

    With ``input_grad`` the gradient w.r.t. the features is returned as well.
    """
    W1, b1, Wd, bd, Ws, bs = net.unpack(theta)
    X = np.asarray(features, dtype=float)
    _, sigma, h = _forward(net, theta, X)
    g_delta = np.asarray(g_delta, dtype=float)
    gz = np.asarray(g_sigma, dtype=float) * sigma * (1.0 - sigma)
    gh = g_delta @ Wd + gz @ Ws
    ga = gh * (1.0 - h * h)
    g = np.concatenate([(ga.T @ X).ravel(), ga.sum(0), (g_delta.T @ h).ravel(), g_delta.sum(0),
                        (gz.T @ h).ravel(), gz.sum(0)])
    if input_grad:
        return g, ga @ W1
    return g


# configuration -------------------------------------------------------------
@dataclass(frozen=True)
class TrainConfig:
    strategy: str = "weighted"
    n_inner: int = 8
    k_skip: int = 2
    beta_period: int = 50
    loss_mode: str = "balanced"
    flow_all_iterates: bool = True
    lr: float = 0.01
    lr_schedule: str = "linear"
    momentum: float = 0.9
    optimizer: str = "sgd"
    grad_clip_norm: float = 1.0
    clip_min: float = -0.01
    clip_max: float = 0.01
    batch_size: int = 4
    n_outer: int = 200
    val_every: int = 10
    n_val: int = 16
    val_metric: str = "median"
    seed: int = 0
    val_seed: int = 1000
    hidden: int = 16
    init_scale: float = 1.0
    head_scale: float = 0.0
    feature_scale: float = 4.0
    streaming: bool = False
    stream_init: int = 8
    stream_iters: int = 2
    scene: SynthConfig = field(default_factory=SynthConfig)
    ba: BAConfig = field(default_factory=lambda: BAConfig(n_fixed_poses=2, damping=1e-2))

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.loss_mode not in ("balanced", "fixed"):
            raise ValueError("loss_mode must be 'balanced' or 'fixed'")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        if self.lr_schedule not in ("constant", "linear"):
            raise ValueError("lr_schedule must be 'constant' or 'linear'")
        if self.val_metric not in ("median", "mean"):
            raise ValueError("val_metric must be 'median' or 'mean'")
        if min(self.n_inner, self.beta_period, self.val_every, self.batch_size, self.n_val) < 1:
            raise ValueError("periods and sizes must be >= 1")
        if self.n_outer < 0 or self.k_skip < 0:
            raise ValueError("n_outer and k_skip must be >= 0")
        if self.clip_min > self.clip_max:
            raise ValueError("clip_min must not exceed clip_max")

    @property
    def net(self) -> Predictor:
        return Predictor(self.hidden)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        if isinstance(d.get("scene"), dict):
            d["scene"] = SynthConfig.from_dict(d["scene"])
        if isinstance(d.get("ba"), dict):
            d["ba"] = BAConfig(**d["ba"])
        return cls(**d)

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


# inner loop ----------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class Iterate:
    features: np.ndarray
    delta: np.ndarray
    sigma: np.ndarray
    sol: BASolution
    feat_valid: np.ndarray
    alpha: float
    sigma_fixed: bool = False


def make_scene(cfg: TrainConfig, scene_id: int, seed: int) -> PatchGraph:
    """Noisy scene with the solver's standard starting point."""
    g, _ = generate_scene(dataclasses.replace(cfg.scene, seed=seed), scene_id)
    return init_estimates(g, cfg.ba.n_fixed_poses, seed, scene_id=scene_id)


def _features(pbar, phat, valid, delta_prev, sigma_prev, s):
    r = np.where(valid[:, None], pbar - phat, 0.0)
    return np.hstack([r / s, delta_prev / s, sigma_prev, np.ones((len(r), 1))])


def inner_loop(scene: PatchGraph, theta, cfg: TrainConfig, alpha: float = 0.0,
               n_iters: int | None = None, state=None, sigma_override=None) -> list[Iterate]:
    """Run predict -> BA ``n_iters`` times starting from ``scene``'s estimates.

    ``scene.targets`` are the observed targets. ``alpha`` blends the
    reprojections seen by the predictor toward ground truth (strategy
    gt-interp). ``state`` optionally carries ``(p_bar, delta, sigma)`` per
    edge from a previous window. ``sigma_override`` replaces the predicted
    weights at every iterate (oracle weights); no gradient reaches the
    weight head then.
    """
    net = cfg.net
    s = cfg.feature_scale
    E = scene.n_edges
    if state is None:
        pbar, d_prev, s_prev = np.array(scene.targets), np.zeros((E, 2)), np.full((E, 2), SIGMA_INIT)
    else:
        pbar, d_prev, s_prev = (np.array(a) for a in state)
    phat, z, *_ = reproject_edges(scene)
    valid = z > cfg.ba.z_min
    graph = scene
    out = []
    for _ in range(cfg.n_inner if n_iters is None else n_iters):
        phat_f = (1.0 - alpha) * phat + alpha * scene.gt_targets
        X = _features(pbar, phat_f, valid, d_prev, s_prev, s)
        delta, sigma = predictor_forward(theta, X, net)
        if sigma_override is not None:
            sigma = np.asarray(sigma_override, dtype=float)
        pbar = pbar + delta
        graph = graph.replace(targets=pbar, weights=sigma)
        sol = ba_solve(graph, cfg.ba)
        if not (np.all(np.isfinite(sol.poses)) and np.all(np.isfinite(sol.depths))):
            raise FloatingPointError("non-finite BA solution")
        out.append(Iterate(X, delta, sigma, sol, valid, alpha, sigma_override is not None))
        graph = sol.graph
        phat, valid = sol.lin.p_hat, sol.lin.valid
        d_prev, s_prev = delta, sigma
    return out


# losses and backward ---------------------------------------------------------
@dataclass(frozen=True, eq=False)
class SceneLoss:
    flow: float
    pose: float
    flow_up: list
    pose_up: list


def _loss_weight(scene: PatchGraph, it: Iterate, cfg: TrainConfig):
    if cfg.strategy == "heuristic":
        return heuristic_weights(scene.gt_targets, it.sol.lin.p_hat)
    return it.sigma


def loss_weights(scene: PatchGraph, trace: list[Iterate], cfg: TrainConfig):
    """Per-iterate weights inside the flow loss (None for the plain flow loss)."""
    if cfg.strategy not in ("weighted", "heuristic"):
        return None
    return [_loss_weight(scene, it, cfg) for it in trace]


def iterate_losses(scene: PatchGraph, trace: list[Iterate], cfg: TrainConfig,
                   loss_sigma=None) -> SceneLoss:
    """Per-iterate flow and pose losses with their upstream gradients.

    ``loss_sigma`` replaces the weights used inside the weighted and
    heuristic flow losses; finite-difference oracles pass the nominal
    weights to mimic the stop-gradient. :func:`loss_weights` gives them.
    """
    n = len(trace)
    flow, pose, fu, pu = 0.0, 0.0, [], []
    for t, it in enumerate(trace):
        sol = it.sol
        zero = UpstreamGrads.zeros(scene.n_frames, scene.n_patches)
        if cfg.flow_all_iterates or t == n - 1:
            if cfg.strategy in ("weighted", "heuristic"):
                sig = _loss_weight(scene, it, cfg) if loss_sigma is None else loss_sigma[t]
                f, g = weighted_flow_loss(scene, sol, sig, cfg.ba.z_min)
            else:
                f, g = flow_loss(scene, sol, cfg.ba.z_min)
        else:
            f, g = 0.0, zero
        if pose_loss_mask(t, cfg.k_skip):
            p, gp = pose_loss(scene.gt_poses, sol)
        else:
            p, gp = 0.0, zero
        flow += f
        pose += p
        fu.append(g)
        pu.append(gp)
    return SceneLoss(flow, pose, fu, pu)


def _grad_correct(g_delta, pbar, p_star):
    """Zero components that disagree in sign with d||p_bar - p*|| / d p_bar."""
    ref = pbar - p_star
    n = np.linalg.norm(ref, axis=1, keepdims=True)
    ref = np.where(n > 0, ref / np.where(n > 0, n, 1.0), 0.0)
    return np.where(g_delta * ref < 0, 0.0, g_delta)


def backward(scene: PatchGraph, theta, trace: list[Iterate], losses: SceneLoss, cfg: TrainConfig,
             c_flow: float, c_pose: float) -> np.ndarray:
    """Gradient of ``c_flow * L_flow + c_pose * L_pose`` w.r.t. theta through the unrolled loop."""
    net, s = cfg.net, cfg.feature_scale
    E = scene.n_edges
    g_theta = np.zeros(net.n_params)
    carry_pbar = np.zeros((E, 2))
    carry_dprev = np.zeros((E, 2))
    carry_sprev = np.zeros((E, 2))
    carry_up = None
    for t in range(len(trace) - 1, -1, -1):
        it = trace[t]
        up = c_flow * losses.flow_up[t] + c_pose * losses.pose_up[t]
        if carry_up is not None:
            up = up + carry_up
        ig = clip_weight_grad(ba_backward(it.sol, up), cfg.clip_min, cfg.clip_max)
        g_tgt = ig.grad_delta
        if cfg.strategy == "grad-correct":
            g_tgt = _grad_correct(g_tgt, it.sol.graph.targets, scene.gt_targets)
        g_pbar_next = carry_pbar + g_tgt
        g_sig = 0.0 * carry_sprev if it.sigma_fixed else ig.grad_sigma + carry_sprev
        gt, gX = predictor_backward(theta, it.features, g_pbar_next + carry_dprev, g_sig, net,
                                    input_grad=True)
        g_theta += gt
        g_r = np.where(it.feat_valid[:, None], gX[:, 0:2] / s, 0.0)
        carry_pbar = g_pbar_next + g_r
        carry_dprev = gX[:, 2:4] / s
        carry_sprev = gX[:, 4:6]
        if t > 0:
            lin = trace[t - 1].sol.lin
            g_phat = -(1.0 - it.alpha) * np.where(lin.valid[:, None], g_r, 0.0)
            carry_up = scatter_edge_grads(scene, g_phat, lin.J_tgt, lin.J_src, lin.J_d)
    return g_theta


@dataclass(frozen=True, eq=False)
class Episode:
    """Forward pass of one scene: (graph, trace, losses) per window."""

    parts: list

    @property
    def flow(self) -> float:
        return sum(L.flow for _, _, L in self.parts)

    @property
    def pose(self) -> float:
        return sum(L.pose for _, _, L in self.parts)

    def grad(self, theta, cfg: TrainConfig, c_flow: float, c_pose: float) -> np.ndarray:
        return sum(backward(g, theta, tr, L, cfg, c_flow, c_pose) for g, tr, L in self.parts)


def run_episode(scene: PatchGraph, theta, cfg: TrainConfig, alpha: float = 0.0) -> Episode:
    if cfg.streaming:
        parts = [(w, tr, iterate_losses(w, tr, cfg)) for w, tr in streaming_loop(scene, theta, cfg)]
    else:
        trace = inner_loop(scene, theta, cfg, alpha)
        parts = [(scene, trace, iterate_losses(scene, trace, cfg))]
    return Episode(parts)


def forward_batch(scenes: list[PatchGraph], theta, cfg: TrainConfig, alpha: float = 0.0) -> list[Episode]:
    """Episodes of the scenes whose inner loop succeeds.

    Fewer than half surviving is a batch failure.
    """
    out = []
    for sc in scenes:
        try:
            ep = run_episode(sc, theta, cfg, alpha)
        except _SOLVER_ERRORS as exc:
            log.warning("scene dropped: %s", exc)
            continue
        if np.isfinite(ep.flow) and np.isfinite(ep.pose):
            out.append(ep)
    if not out or 2 * len(out) < len(scenes):
        raise BatchFailure(f"only {len(out)} of {len(scenes)} scenes survived")
    return out


def batch_grad(episodes: list[Episode], theta, cfg: TrainConfig, c_flow: float, c_pose: float):
    """(batch-mean gradient, per-scene gradients) of ``c_flow L_flow + c_pose L_pose``."""
    per = [ep.grad(theta, cfg, c_flow, c_pose) for ep in episodes]
    return np.mean(per, axis=0), per


def loss_coefficients(cfg: TrainConfig, beta: float):
    """(c_flow, c_pose) of the configured combination rule."""
    if cfg.loss_mode == "fixed":
        return total_loss_fixed(1.0, 0.0), total_loss_fixed(0.0, 1.0)
    return beta, 1.0


@dataclass(frozen=True, eq=False)
class StepResult:
    grad: np.ndarray
    per_scene: list
    flow: float
    pose: float
    total: float
    beta: float
    n_ok: int


def outer_step(scenes: list[PatchGraph], theta, cfg: TrainConfig, alpha: float = 0.0,
               beta: float = 1.0, refresh: bool = False) -> StepResult:
    """Batch-mean gradient of the total loss w.r.t. theta.

    With ``refresh`` the flow coefficient is first re-balanced from the
    separate flow and pose gradients. Weight gradients are clipped once, on
    the combined upstream gradient.
    """
    eps = forward_batch(scenes, theta, cfg, alpha)
    if refresh and cfg.loss_mode == "balanced":
        gf, _ = batch_grad(eps, theta, cfg, 1.0, 0.0)
        gp, _ = batch_grad(eps, theta, cfg, 0.0, 1.0)
        try:
            if np.linalg.norm(gp) > 0:
                beta = balance_beta(gp, gf)
        except DegenerateBalance:
            log.warning("degenerate balance; keeping beta=%g", beta)
    c_flow, c_pose = loss_coefficients(cfg, beta)
    g, per = batch_grad(eps, theta, cfg, c_flow, c_pose)
    flow = float(np.mean([e.flow for e in eps]))
    pose = float(np.mean([e.pose for e in eps]))
    return StepResult(g, per, flow, pose, c_flow * flow + c_pose * pose, beta, len(eps))


def apply_strategy(strategy: str, it: int, n_outer: int) -> float:
    """Ground-truth blend factor for an outer iteration (1 -> 0 for gt-interp)."""
    if strategy != "gt-interp" or n_outer <= 1:
        return 0.0
    return max(0.0, 1.0 - it / (n_outer - 1))


# evaluation ----------------------------------------------------------------
def camera_centers(poses) -> np.ndarray:
    poses = np.asarray(poses, dtype=float)
    R = quat_to_rot(poses[:, :4])
    return -np.einsum("nba,nb->na", R, poses[:, 4:])


def ate(traj_est, traj_gt) -> float:
    """RMSE of camera centres after Sim(3) alignment (world-to-camera poses)."""
    est, gt = camera_centers(traj_est), camera_centers(traj_gt)
    if len(est) < 3 or len(est) != len(gt):
        raise ValueError("need two trajectories of equal length >= 3")
    if np.array_equal(est, gt):
        return 0.0
    S = umeyama_sim3(est, gt)
    return float(np.sqrt(np.mean(np.sum((S.apply(est) - gt) ** 2, axis=1))))


def flow_errors(sol: BASolution) -> np.ndarray:
    g = sol.graph
    return np.linalg.norm(g.gt_targets - sol.lin.p_hat, axis=1)[sol.lin.valid]


def validate(theta, cfg: TrainConfig, scenes: list[PatchGraph]):
    """(mean per-scene flow error, median ATE) of the final inner iterate."""
    errs, ates = [], []
    for sc in scenes:
        try:
            sol = run_inference(sc, theta, cfg)
        except _SOLVER_ERRORS:
            errs.append(np.inf)
            ates.append(np.inf)
            continue
        e = flow_errors(sol)
        errs.append(float(np.median(e) if cfg.val_metric == "median" else np.mean(e)))
        try:
            ates.append(ate(sol.poses, sc.gt_poses))
        except (AlignmentDegenerate, ValueError):
            ates.append(np.nan)
    return float(np.mean(errs)), float(np.nanmedian(ates)) if np.any(np.isfinite(ates)) else np.nan


def run_inference(scene: PatchGraph, theta, cfg: TrainConfig) -> BASolution:
    if not cfg.streaming:
        return inner_loop(scene, theta, cfg)[-1].sol
    sol = None
    for w, trace in streaming_loop(scene, theta, cfg):
        sol = trace[-1].sol
    return sol


def streaming_loop(scene: PatchGraph, theta, cfg: TrainConfig):
    """Growing windows: ``stream_init`` frames for ``n_inner`` iterations, then
    one frame at a time for ``stream_iters`` iterations each.

    Yields ``(window graph, trace)``. Estimates and per-edge predictor state
    carry across windows; gradients do not.
    """
    prev_sol, prev_state, prev_keys = None, None, None
    first = min(cfg.stream_init, scene.n_frames)
    for count in range(first, scene.n_frames + 1):
        w = window(scene, 0, count)
        keys = list(zip(w.patch_ids[w.edge_patch].tolist(), w.edge_frame.tolist()))
        state = None
        if prev_sol is not None:
            n_old = prev_sol.graph.n_frames
            poses = np.array(w.poses)
            poses[:n_old] = prev_sol.poses
            poses[n_old:] = prev_sol.poses[n_old - 1]
            pos = {k: a for a, k in enumerate(prev_sol.graph.patch_ids.tolist())}
            depths = np.array(w.depths)
            for a, k in enumerate(w.patch_ids.tolist()):
                if k in pos:
                    depths[a] = prev_sol.depths[pos[k]]
            w = w.replace(poses=poses, depths=depths)
            idx = {k: a for a, k in enumerate(prev_keys)}
            pbar, dp, sp = np.array(w.targets), np.zeros((w.n_edges, 2)), np.full((w.n_edges, 2), SIGMA_INIT)
            for a, k in enumerate(keys):
                if k in idx:
                    b = idx[k]
                    pbar[a], dp[a], sp[a] = prev_state[0][b], prev_state[1][b], prev_state[2][b]
            state = (pbar, dp, sp)
        n_it = cfg.n_inner if prev_sol is None else cfg.stream_iters
        trace = inner_loop(w, theta, cfg, n_iters=n_it, state=state)
        last = trace[-1]
        prev_sol, prev_keys = last.sol, keys
        prev_state = (last.sol.graph.targets, last.delta, last.sigma)
        yield w, trace


# training ------------------------------------------------------------------
@dataclass
class TrainCurve:
    records: list = field(default_factory=list)
    theta: np.ndarray = None
    diverged: bool = False

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=float)

    def validation(self):
        """(iterations, validation flow errors) where validation ran."""
        recs = [r for r in self.records if np.isfinite(r["val_flow"])]
        return np.array([r["iter"] for r in recs]), np.array([r["val_flow"] for r in recs])


CURVE_FIELDS = ("iter", "flow", "pose", "total", "beta", "val_flow", "val_ate", "batch_snr")


def _batch_snr(per_scene: list, sl: slice) -> float:
    from .analysis import batch_snr
    if len(per_scene) < 2:
        return np.nan
    return batch_snr([g[sl] for g in per_scene])


def train(cfg: TrainConfig, theta0=None) -> TrainCurve:
    """Momentum SGD (or Adam) on batches of fresh synthetic scenes."""
    net = cfg.net
    theta = net.init(cfg.seed, cfg.init_scale, cfg.head_scale) if theta0 is None else np.array(theta0, dtype=float)
    val_scenes = [make_scene(cfg, k, cfg.val_seed) for k in range(cfg.n_val)]
    curve = TrainCurve()
    nan = float("nan")
    vf, va = validate(theta, cfg, val_scenes)
    curve.records.append(dict(iter=0, flow=nan, pose=nan, total=nan, beta=nan, val_flow=vf,
                              val_ate=va, batch_snr=nan))
    v = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    beta = 1.0
    for it in range(cfg.n_outer):
        alpha = apply_strategy(cfg.strategy, it, cfg.n_outer)
        scenes = [make_scene(cfg, it * cfg.batch_size + b, cfg.seed) for b in range(cfg.batch_size)]
        refresh = cfg.loss_mode == "balanced" and it % cfg.beta_period == 0
        step = outer_step(scenes, theta, cfg, alpha, beta, refresh)
        beta, total, g = step.beta, step.total, step.grad
        if not np.isfinite(total) or total > 1e6:
            log.error("training diverged at iteration %d (loss %g)", it, total)
            curve.diverged = True
            break
        if cfg.grad_clip_norm > 0:
            n = np.linalg.norm(g)
            if n > cfg.grad_clip_norm:
                g = g * (cfg.grad_clip_norm / n)
        lr = cfg.lr * (1.0 - it / cfg.n_outer if cfg.lr_schedule == "linear" else 1.0)
        if cfg.optimizer == "sgd":
            v = cfg.momentum * v + g
            theta = theta - lr * v
        else:
            v = cfg.momentum * v + (1 - cfg.momentum) * g
            m2 = 0.999 * m2 + 0.001 * g * g
            vh = v / (1 - cfg.momentum ** (it + 1))
            mh = m2 / (1 - 0.999 ** (it + 1))
            theta = theta - lr * vh / (np.sqrt(mh) + 1e-8)
        vf = va = nan
        if (it + 1) % cfg.val_every == 0 or it + 1 == cfg.n_outer:
            vf, va = validate(theta, cfg, val_scenes)
        curve.records.append(dict(iter=it + 1, flow=step.flow, pose=step.pose, total=total, beta=beta,
                                  val_flow=vf, val_ate=va,
                                  batch_snr=_batch_snr(step.per_scene, net.delta_head())))
    curve.theta = theta
    return curve


def iterations_to_reach(curve: TrainCurve, tau: float) -> float:
    """First validated iteration with flow error <= tau (inf if never)."""
    its, vals = curve.validation()
    hit = np.flatnonzero(vals <= tau)
    return float(its[hit[0]]) if len(hit) else float("inf")


def write_curve(curve: TrainCurve, path) -> None:
    import csv
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CURVE_FIELDS)
        for r in curve.records:
            w.writerow([r["iter"]] + [repr(float(r[k])) for k in CURVE_FIELDS[1:]])
