"""Command-line entry point: ``bagrad {gen,solve,gradcheck,experiment,train,ate}``.

Exit codes: 0 success, 2 config error, 3 runtime failure, 4 gradcheck failure.
Every command writes a ``manifest.json`` next to its outputs.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import scene as scene_io
from .analysis import EXPERIMENTS, ExperimentConfig, csv_text, ift_gradcheck, run_experiment, to_rows
from .ba import BAConfig, ba_objective, ba_solve
from .synth import SynthConfig, generate_scene, init_estimates
from .trainer import TrainConfig, ate, train, write_curve

log = logging.getLogger("bagrad")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_GRADCHECK = 0, 2, 3, 4
SEED_ENV = "BA_GRAD_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seeds: list
    version: str = __version__
    outputs: list = field(default_factory=list)
    wall_clock: float = 0.0

    def write(self, path) -> None:
        atomic_write(path, json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True) + "\n")


def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def config_hash(d: dict) -> str:
    text = json.dumps(d, sort_keys=True, separators=(",", ":"), default=list)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def read_json(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return d


def build(kind, d: dict, path):
    """Config object from a dict; bad fields or values become ConfigError."""
    try:
        return kind.from_dict(d) if hasattr(kind, "from_dict") else kind(**d)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def env_seed():
    v = os.environ.get(SEED_ENV)
    if v is None:
        return None
    try:
        return int(v)
    except ValueError as exc:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {v!r}") from exc


# gen -----------------------------------------------------------------------
@dataclass(frozen=True)
class GenConfig:
    scene: SynthConfig = SynthConfig()
    n_scenes: int = 1
    n_fixed_poses: int = 2
    init: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown gen fields: {sorted(unknown)}")
        if isinstance(d.get("scene"), dict):
            d["scene"] = SynthConfig.from_dict(d["scene"])
        cfg = cls(**d)
        if cfg.n_scenes < 1:
            raise ValueError("n_scenes must be >= 1")
        return cfg


def cmd_gen(args) -> list:
    cfg = build(GenConfig, read_json(args.config), args.config)
    seed = env_seed()
    if seed is not None:
        cfg = dataclasses.replace(cfg, scene=dataclasses.replace(cfg.scene, seed=seed))
    out = Path(args.out)
    paths = []
    for k in range(cfg.n_scenes):
        g, _ = generate_scene(cfg.scene, k)
        if cfg.init:
            g = init_estimates(g, cfg.n_fixed_poses, cfg.scene.seed, scene_id=k)
        p = out / f"scene_{k:04d}.json"
        atomic_write(p, scene_io.dumps(g))
        paths.append(p)
    return paths, dataclasses.asdict(cfg), [cfg.scene.seed]


# solve ---------------------------------------------------------------------
def _ba_from_args(args) -> BAConfig:
    try:
        return BAConfig(n_iters=args.n_iters, damping=args.damping, n_fixed_poses=args.n_fixed_poses,
                        step_tol=args.step_tol, depth_update=args.depth_update)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _load_scene(path):
    try:
        return scene_io.load(path)
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: not a valid scene ({exc})") from exc


def cmd_solve(args):
    g = _load_scene(args.scene)
    ba = _ba_from_args(args)
    sol = ba_solve(g, ba)
    d = scene_io.to_dict(sol.graph)
    d["solver"] = {"iterations": int(sol.iterations), "last_step_norm": float(sol.last_step_norm),
                   "objective": float(ba_objective(sol.graph))}
    atomic_write(args.out, json.dumps(d, indent=1) + "\n")
    return [Path(args.out)], dataclasses.asdict(ba), []


# gradcheck -----------------------------------------------------------------
def cmd_gradcheck(args):
    g = _load_scene(args.scene)
    res = ift_gradcheck(g, args.seed)
    ok = res.passed(args.tol)
    print(f"target gradient rel. error {res.err_delta:.3e}  "
          f"weight gradient rel. error {res.err_sigma:.3e}  "
          f"final step {res.step_norm:.1e}  -> {'PASS' if ok else 'FAIL'}")
    return [], {"tol": args.tol, "seed": args.seed}, [args.seed], ok


# experiment ----------------------------------------------------------------
def cmd_experiment(args):
    d = read_json(args.config)
    d.setdefault("name", args.name)
    if d["name"] != args.name:
        raise ConfigError(f"{args.config}: config is for {d['name']!r}, not {args.name!r}")
    cfg = build(ExperimentConfig, d, args.config)
    seed = env_seed()
    if seed is not None:
        cfg = dataclasses.replace(cfg, seeds=(seed,))
    pts = run_experiment(cfg, jobs=args.jobs)
    atomic_write(args.out, csv_text(to_rows(cfg.name, pts)))
    return [Path(args.out)], cfg.to_dict(), list(cfg.seeds)


# train ---------------------------------------------------------------------
def cmd_train(args):
    cfg = build(TrainConfig, read_json(args.config), args.config)
    seed = env_seed()
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    curve = train(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_curve(curve, out / "curve.csv")
    ckpt = out / "checkpoint.npz"
    np.savez(ckpt, theta=curve.theta, config=json.dumps(cfg.to_dict(), sort_keys=True))
    if curve.diverged:
        raise RuntimeError("training diverged; partial curve written")
    return [out / "curve.csv", ckpt], cfg.to_dict(), [cfg.seed, cfg.val_seed]


# ate -----------------------------------------------------------------------
def load_trajectory(path) -> np.ndarray:
    """Poses (n, 7) from a scene/solution JSON or a whitespace table of qw qx qy qz tx ty tz."""
    path = Path(path)
    try:
        if path.suffix == ".json":
            return scene_io.load(path).poses
        poses = np.loadtxt(path, ndmin=2)
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: cannot read trajectory ({exc})") from exc
    if poses.shape[1] != 7:
        raise ConfigError(f"{path}: expected 7 columns, got {poses.shape[1]}")
    return poses


def cmd_ate(args):
    est, gt = load_trajectory(args.est), load_trajectory(args.gt)
    if est.shape != gt.shape:
        raise ConfigError(f"trajectories differ in length: {len(est)} vs {len(gt)}")
    print(repr(ate(est, gt)))
    return [], {"est": str(args.est), "gt": str(args.gt)}, []


# wiring --------------------------------------------------------------------
def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bagrad", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                   help="logging verbosity")
    p.add_argument("--manifest", default=None,
                   help="manifest path (default: manifest.json beside the outputs)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen", help="generate synthetic scenes")
    s.add_argument("config", help="JSON with 'scene' (SynthConfig fields), 'n_scenes', 'n_fixed_poses', 'init'")
    s.add_argument("out", help="output directory for scene_XXXX.json")

    s = sub.add_parser("solve", help="run the BA solver on a scene")
    s.add_argument("scene", help="scene JSON")
    s.add_argument("--out", required=True, help="solution JSON")
    s.add_argument("--n-iters", type=int, default=2, help="Gauss-Newton iterations")
    s.add_argument("--damping", type=float, default=1e-4, help="multiplicative Levenberg damping")
    s.add_argument("--n-fixed-poses", type=int, default=1, help="leading poses held fixed")
    s.add_argument("--step-tol", type=float, default=0.0, help="stop when the step norm falls below this")
    s.add_argument("--depth-update", default="inverse", choices=["inverse", "additive"],
                   help="depth retraction")

    s = sub.add_parser("gradcheck", help="check BA backward gradients against finite differences")
    s.add_argument("scene", help="scene JSON")
    s.add_argument("--tol", type=float, default=1e-3, help="relative error bound")
    s.add_argument("--seed", type=int, default=0, help="seed of the random test functional")

    s = sub.add_parser("experiment", help="run a gradient-variance experiment sweep to CSV")
    s.add_argument("name", choices=EXPERIMENTS, help="experiment name")
    s.add_argument("config", help="experiment config JSON")
    s.add_argument("--out", required=True, help="output CSV")
    s.add_argument("--jobs", type=int, default=1, help="worker processes (output order is fixed)")

    s = sub.add_parser("train", help="train the predictor; writes curve.csv and checkpoint.npz")
    s.add_argument("config", help="TrainConfig JSON")
    s.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("ate", help="Sim(3)-aligned absolute trajectory error")
    s.add_argument("est", help="estimated trajectory (.json scene or 7-column table)")
    s.add_argument("gt", help="reference trajectory (.json scene or 7-column table)")
    return p


COMMANDS = {"gen": cmd_gen, "solve": cmd_solve, "gradcheck": cmd_gradcheck,
            "experiment": cmd_experiment, "train": cmd_train, "ate": cmd_ate}


def _manifest_path(args, outputs) -> Path | None:
    if args.manifest:
        return Path(args.manifest)
    if not outputs:
        return None
    first = Path(outputs[0])
    return first.parent / "manifest.json"


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    ok = True
    try:
        res = COMMANDS[args.command](args)
        outputs, cfg, seeds = res[:3]
        if len(res) > 3:
            ok = res[3]
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any solver/numeric failure maps to one code
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    mpath = _manifest_path(args, outputs)
    if mpath is not None:
        RunManifest(args.command, config_hash(cfg), seeds, outputs=[str(p) for p in outputs],
                    wall_clock=time.perf_counter() - t0).write(mpath)
    return EXIT_OK if ok else EXIT_GRADCHECK


if __name__ == "__main__":
    sys.exit(main())
