"""Command-line experiment runner.

Every subcommand reads an optional JSON config (``--config``), lets flags
override individual keys, rejects unknown keys, and writes machine-readable
outputs (CSV and JSON) carrying a metadata block with the config hash, the
seed and the package version. Exit codes: 0 on success, 1 on usage errors,
2 on runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .geometry import (
    GeometryError, SupportPlaneSet, load_off, max_distance, project_least_distance, smooth_distance,
)
from .learning import TrainingConfig, on_mpc_training, params_from_json, params_to_json, write_curves
from .mpc import MpcConfig, receding_horizon_rollout
from .scenes import Env, get_scene, random_contact_configuration, sample_target
from .stepper import (
    assemble_Q_b, build_dual_cone, dsdf_project, q_inv_sqrt, qp_oracle_solve, relaxed_kkt_solve,
)

OUTPUT_ENV = "CONTACTSDF_OUTPUT_DIR"
log = logging.getLogger("contactsdf")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration


DEFAULTS = {
    "sdf-grid": {
        "planes": None, "scene": "three-ball-cube", "bbox": [-0.08, 0.08, -0.08, 0.08],
        "resolution": 41, "sigma": 1000.0, "z": 0.0, "seed": 0, "out": None,
    },
    "step-compare": {
        "scene": "three-ball-cube", "n_samples": 100, "sigma_list": [10.0, 100.0, 1000.0, 10000.0],
        "eps": 1e-4, "seed": 0, "out": None,
    },
    "mpc": {
        "scene": "three-ball-cube", "horizon_steps": None, "model": "contactsdf", "sigma": None, "eps": 1e-4,
        "params": None, "target": None, "seed": 0, "out": None,
    },
    "learn": {
        "scene": "three-ball-cube", "n_rollouts": 8, "rollout_length": 100, "rollouts_per_update": 4,
        "epochs": 50, "learning_rate": 0.05, "init": "planted", "params": None, "seed": 0, "out": None,
    },
    "bench": {
        "scene": "three-ball-cube", "trials": 7, "models": ["contactsdf", "qpmodel"], "horizon_steps": None,
        "sigma": None, "eps": 1e-4, "params": None, "target_kind": None, "workers": 1, "seed": 0, "out": None,
    },
}


def resolve_config(command, file_values=None, flag_values=None):
    """defaults <- config file <- explicit flags; unknown keys are rejected."""
    allowed = DEFAULTS[command]
    cfg = dict(allowed)
    for source, values in (("config file", file_values or {}), ("flags", flag_values or {})):
        unknown = sorted(set(values) - set(allowed))
        if unknown:
            raise UsageError(f"unknown {command} option(s) in {source}: {', '.join(unknown)}")
        cfg.update({k: v for k, v in values.items() if v is not None})
    if cfg["out"] is None:
        cfg["out"] = os.environ.get(OUTPUT_ENV, "runs")
    return cfg


def config_hash(cfg):
    payload = {k: v for k, v in cfg.items() if k != "out"}
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()[:16]


def metadata(command, cfg):
    return {"command": command, "config_hash": config_hash(cfg), "seed": cfg["seed"], "version": __version__,
            "config": cfg}


def _out_dir(cfg, command):
    path = Path(cfg["out"]) / command
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, default=_json_default))


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not serializable: {type(o)}")


# ---------------------------------------------------------------------------
# sdf-grid


def _load_planes(cfg):
    """(normals, offsets, bounded plane set or None) from a file or a scene."""
    if cfg["planes"] is None:
        planes = get_scene(cfg["scene"]).planes
        return planes.normals, planes.offsets, planes
    path = Path(cfg["planes"])
    if path.suffix.lower() == ".off":
        planes = load_off(path)
        return planes.normals, planes.offsets, planes
    data = json.loads(path.read_text())
    A = np.atleast_2d(np.asarray(data["normals"], dtype=float))
    c = np.atleast_1d(np.asarray(data["offsets"], dtype=float))
    if A.shape[1] != 3 or A.shape[0] != c.shape[0]:
        raise UsageError("planes file needs (I, 3) normals and I offsets")
    try:
        return A, c, SupportPlaneSet(A, c)
    except GeometryError:
        # unbounded sets (e.g. a single plane) are still valid grid inputs
        return A, c, None


def sdf_grid(cfg):
    """Rows (x, y[, z], exact, max_approx, csdf) over a regular grid."""
    res = int(cfg["resolution"])
    bbox = [float(b) for b in cfg["bbox"]]
    if res < 1:
        raise UsageError("resolution must be >= 1")
    if len(bbox) not in (4, 6):
        raise UsageError("bbox needs 4 (2-D slice) or 6 (3-D) numbers")
    sigma = float(cfg["sigma"])
    if sigma <= 0:
        raise UsageError("sigma must be positive")
    A, c, planes = _load_planes(cfg)
    axes = [np.linspace(bbox[2 * i], bbox[2 * i + 1], res) for i in range(len(bbox) // 2)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    pts3 = pts if pts.shape[1] == 3 else np.c_[pts, np.full(len(pts), float(cfg["z"]))]
    smooth = smooth_distance(A, c, pts3, sigma).value
    approx = np.array([max_distance(A, c, x) for x in pts3])
    exact = np.zeros(len(pts3))
    for i, x in enumerate(pts3):
        if np.max(A @ x + c) > 0:
            exact[i] = np.linalg.norm(x - project_least_distance(A, c, x).point)
    cols = ["x", "y", "z"][: pts.shape[1]]
    rows = [list(p) + [e, a, s] for p, e, a, s in zip(pts, exact, approx, smooth)]
    return cols + ["exact", "max_approx", "csdf"], rows, planes


def cmd_sdf_grid(cfg):
    header, rows, _ = sdf_grid(cfg)
    out = _out_dir(cfg, "sdf-grid")
    meta = metadata("sdf-grid", cfg)
    with open(out / "grid.csv", "w", newline="") as fh:
        fh.write(f"# sigma={float(cfg['sigma'])} config_hash={meta['config_hash']} seed={cfg['seed']}"
                 f" version={__version__}\n")
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows([[repr(float(v)) for v in r] for r in rows])
    _write_json(out / "grid_meta.json", {"metadata": meta, "rows": len(rows)})
    print(f"wrote {len(rows)} rows to {out / 'grid.csv'}")
    return 0


# ---------------------------------------------------------------------------
# step-compare


def _timed(fn, *args, repeats=3, **kwargs):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn(*args, **kwargs)
        best = min(best, time.perf_counter() - t0)
    return out, best


def step_compare(cfg):
    """Per-sigma smoothed-step error against the exact projection, plus timings."""
    scene = get_scene(cfg["scene"])
    n = int(cfg["n_samples"])
    sigmas = sorted(float(s) for s in cfg["sigma_list"])
    if n < 1 or not sigmas or min(sigmas) <= 0:
        raise UsageError("need n_samples >= 1 and positive sigmas")
    rng = np.random.default_rng(cfg["seed"])
    params = scene.true_params
    errors = {s: [] for s in sigmas}
    t_dsdf, t_qp, t_kkt, n_rows = [], [], [], []
    for _ in range(n):
        state, u = random_contact_configuration(scene, rng)
        contacts = scene.detect(state, method="csdf")
        qih = q_inv_sqrt(params)
        cone = build_dual_cone(contacts, qih, params.mu)
        _, b = assemble_Q_b(params, u)
        z_q = qih @ b
        (z_exact, *_), tq = _timed(qp_oracle_solve, params, u, contacts)
        _, tk = _timed(relaxed_kkt_solve, cone, z_q, float(cfg["eps"]))
        scale = max(float(np.max(np.abs(z_q))), 1e-12)
        for s in sigmas:
            z_s, ts = _timed(dsdf_project, cone, z_q, s)
            errors[s].append(float(np.max(np.abs(z_s - z_exact))) / scale)
            if s == sigmas[-1]:
                t_dsdf.append(ts)
        t_qp.append(tq)
        t_kkt.append(tk)
        n_rows.append(len(cone))
    return {
        "errors": [
            {"sigma": s, "mean": float(np.mean(errors[s])), "max": float(np.max(errors[s])),
             "median": float(np.median(errors[s]))}
            for s in sigmas
        ],
        "timing_ms": {
            "dsdf_step": 1e3 * float(np.median(t_dsdf)),
            "qp_solve": 1e3 * float(np.median(t_qp)),
            "relaxed_kkt_solve": 1e3 * float(np.median(t_kkt)),
        },
        "mean_cone_rows": float(np.mean(n_rows)),
        "error_metric": "max |z_smoothed - z_exact| / max |z_query| per sample",
    }


def cmd_step_compare(cfg):
    report = step_compare(cfg)
    report["metadata"] = metadata("step-compare", cfg)
    out = _out_dir(cfg, "step-compare")
    _write_json(out / "report.json", report)
    for row in report["errors"]:
        print(f"sigma={row['sigma']:g}: mean={row['mean']:.3e} max={row['max']:.3e}")
    print("timing [ms]: " + ", ".join(f"{k}={v:.3f}" for k, v in report["timing_ms"].items()))
    return 0


# ---------------------------------------------------------------------------
# mpc / bench


RECORD_FIELDS = [
    "step", "solve_ms", "objective", "initial_objective", "iterations", "cost_to_goal", "position_error",
    "orientation_error", "control_norm", "n_contacts",
]


def _model_params(scene, cfg):
    params = params_from_json(cfg["params"]) if cfg.get("params") else scene.true_params
    if cfg.get("sigma") is not None:
        params = params.replace(sigma=float(cfg["sigma"]))
    return params


def _pick_target(scene, cfg, rng):
    if cfg.get("target") is not None:
        i, j = cfg["target"]
        return np.asarray(scene.target_positions[i], float), np.asarray(scene.target_rotations[j], float)
    return sample_target(scene, rng, cfg.get("target_kind"))


def run_trial(args):
    """One closed-loop trial; a pure function of its arguments (pool-safe)."""
    scene_name, params_dict, model, eps, H, tp, tq, seed = args
    from .stepper import ModelParams

    scene = get_scene(scene_name)
    env = Env(scene, seed=seed)
    cfg = MpcConfig.for_scene(scene, tp, tq)
    res = receding_horizon_rollout(env, ModelParams.from_dict(params_dict), cfg, H, model, eps)
    return res.records, res.metrics


def cmd_mpc(cfg):
    scene = get_scene(cfg["scene"])
    H = scene.rollout_length if cfg["horizon_steps"] is None else int(cfg["horizon_steps"])
    if H < 0:
        raise UsageError("horizon_steps must be >= 0")
    if cfg["model"] not in ("contactsdf", "qpmodel"):
        raise UsageError(f"unknown model {cfg['model']!r}")
    rng = np.random.default_rng(cfg["seed"])
    tp, tq = _pick_target(scene, cfg, rng)
    params = _model_params(scene, cfg)
    records, metrics = run_trial((scene.name, params.to_dict(), cfg["model"], float(cfg["eps"]), H, tp, tq,
                                  cfg["seed"]))
    out = _out_dir(cfg, "mpc")
    with open(out / "rollout.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RECORD_FIELDS)
        w.writeheader()
        w.writerows(records)
    _write_json(out / "summary.json", {
        "metadata": metadata("mpc", cfg), "target_position": tp, "target_quaternion": tq, "metrics": metrics,
    })
    print(json.dumps(metrics, default=_json_default))
    return 0


def _mean_std(values):
    arr = np.asarray(values, dtype=float)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "text": f"{arr.mean():.4g} ± {arr.std():.2g}"}


def bench(cfg):
    scene = get_scene(cfg["scene"])
    trials = int(cfg["trials"])
    if trials < 1:
        raise UsageError("trials must be >= 1")
    H = scene.rollout_length if cfg["horizon_steps"] is None else int(cfg["horizon_steps"])
    rng = np.random.default_rng(cfg["seed"])
    targets = [sample_target(scene, rng, cfg["target_kind"]) for _ in range(trials)]
    params = _model_params(scene, cfg).to_dict()
    summary, per_trial = {}, {}
    for model in cfg["models"]:
        jobs = [(scene.name, params, model, float(cfg["eps"]), H, tp, tq, cfg["seed"] + k)
                for k, (tp, tq) in enumerate(targets)]
        if int(cfg["workers"]) > 1:
            with ProcessPoolExecutor(int(cfg["workers"])) as pool:
                results = list(pool.map(run_trial, jobs))
        else:
            results = [run_trial(j) for j in jobs]
        metrics = [m for _, m in results]
        per_trial[model] = metrics
        summary[model] = {
            "terminal_position_error_mm": _mean_std([1e3 * m["terminal_position_error"] for m in metrics]),
            "terminal_orientation_error_rad": _mean_std([m["terminal_orientation_error"] for m in metrics]),
            "mpc_solving_cost_ms": _mean_std([m["mean_solve_ms"] for m in metrics]),
            "trials": len(metrics),
        }
    return {"summary": summary, "trials": per_trial, "targets": targets}


def cmd_bench(cfg):
    report = bench(cfg)
    report["metadata"] = metadata("bench", cfg)
    out = _out_dir(cfg, "bench")
    _write_json(out / "summary.json", report)
    for model, row in report["summary"].items():
        print(f"{model}: pos {row['terminal_position_error_mm']['text']} mm, "
              f"rot {row['terminal_orientation_error_rad']['text']} rad, "
              f"solve {row['mpc_solving_cost_ms']['text']} ms")
    return 0


# ---------------------------------------------------------------------------
# learn


def cmd_learn(cfg):
    from .learning import planted_initial_params

    scene = get_scene(cfg["scene"])
    if cfg["params"]:
        init = params_from_json(cfg["params"])
    elif cfg["init"] == "planted":
        init = planted_initial_params(scene.true_params)
    elif cfg["init"] == "true":
        init = scene.true_params
    else:
        raise UsageError(f"unknown init {cfg['init']!r} (planted, true)")
    tcfg = TrainingConfig(
        n_rollouts=int(cfg["n_rollouts"]), rollout_length=int(cfg["rollout_length"]),
        rollouts_per_update=int(cfg["rollouts_per_update"]), epochs=int(cfg["epochs"]),
        learning_rate=float(cfg["learning_rate"]), seed=int(cfg["seed"]),
    )
    env = Env(scene, seed=cfg["seed"])

    def progress(kind, row):
        log.info("%s %s", kind, row)

    result = on_mpc_training(env, init, tcfg, progress)
    out = _out_dir(cfg, "learn")
    write_curves(result, out)
    meta = metadata("learn", cfg)
    params_to_json(result.params, out / "theta.json", {"metadata": meta, "env_steps": result.env_steps})
    _write_json(out / "curves.json", {"metadata": meta, "loss": result.loss_curve, "cost": result.cost_curve})
    print(f"{len(result.loss_curve)} updates over {result.env_steps} env steps; theta -> {out / 'theta.json'}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _floats(text):
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text):
    return [int(t) for t in text.split(",") if t.strip()]


def build_parser():
    parser = argparse.ArgumentParser(prog="contactsdf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file with option values")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or ./runs)")
        p.add_argument("--scene")
        return p

    p = common(sub.add_parser("sdf-grid", help="exact / max-approx / smoothed distance on a grid"))
    p.add_argument("--planes", help="JSON (normals, offsets) or OFF mesh; default: the scene's object")
    p.add_argument("--bbox", type=_floats, help="xmin,xmax,ymin,ymax[,zmin,zmax]")
    p.add_argument("--resolution", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--z", type=float, help="height of a 2-D slice")

    p = common(sub.add_parser("step-compare", help="smoothed step vs exact projection"))
    p.add_argument("--n-samples", dest="n_samples", type=int)
    p.add_argument("--sigma-list", dest="sigma_list", type=_floats)
    p.add_argument("--eps", type=float)

    p = common(sub.add_parser("mpc", help="one closed-loop rollout"))
    p.add_argument("--H", dest="horizon_steps", type=int, help="rollout length")
    p.add_argument("--model", choices=["contactsdf", "qpmodel"])
    p.add_argument("--sigma", type=float)
    p.add_argument("--eps", type=float)
    p.add_argument("--params", help="parameter checkpoint JSON")
    p.add_argument("--target", type=_ints, help="position_index,rotation_index")

    p = common(sub.add_parser("learn", help="on-MPC parameter learning"))
    p.add_argument("--n-rollouts", dest="n_rollouts", type=int)
    p.add_argument("--rollout-length", dest="rollout_length", type=int)
    p.add_argument("--rollouts-per-update", dest="rollouts_per_update", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--init", help="planted or true")
    p.add_argument("--params", help="initial parameter JSON")

    p = common(sub.add_parser("bench", help="multi-trial summary per model"))
    p.add_argument("--trials", type=int)
    p.add_argument("--models", type=lambda s: [m for m in s.split(",") if m])
    p.add_argument("--H", dest="horizon_steps", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--eps", type=float)
    p.add_argument("--params")
    p.add_argument("--target-kind", dest="target_kind", choices=["turn", "flip"])
    p.add_argument("--workers", type=int)
    return parser


COMMANDS = {
    "sdf-grid": cmd_sdf_grid, "step-compare": cmd_step_compare, "mpc": cmd_mpc, "learn": cmd_learn,
    "bench": cmd_bench,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    try:
        file_values = json.loads(Path(args.config).read_text()) if args.config else {}
        if not isinstance(file_values, dict):
            raise UsageError("config file must hold a JSON object")
        cfg = resolve_config(args.command, file_values, flags)
        if args.command in ("mpc", "bench") and cfg["scene"] is not None:
            get_scene(cfg["scene"])
        return COMMANDS[args.command](cfg)
    except (UsageError, KeyError, json.JSONDecodeError, FileNotFoundError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 -- reported as a runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
