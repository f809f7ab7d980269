"""Command-line driver: world generation, EM SLAM runs, and metric reports.

    emslam simulate --config run.json --out outdir [--seed N] [--dim {16,128}]
    emslam slam --bundles outdir/bundles.jsonl --config run.json --out outdir
                [--threads N] [--assoc {factorized,exact}]
    emslam eval --trajectory outdir/trajectory.txt
                --groundtruth outdir/groundtruth.jsonl
                --landmarks outdir/landmarks.jsonl --out outdir

The config file is one JSON document with optional sections "world", "noise",
"em" and "out_dir"; missing fields fall back to the package defaults.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .evaluation import (
    TrajectoryPair,
    ate,
    match_landmarks,
    rpe,
    umeyama_alignment,
    viewpoint_metrics,
)
from .geometry import euler_to_rotation
from .observation_model import NoiseConfig, mle_label
from .simulator import generate_observations, generate_world
from .slam_backend import run_em

_CONFIG_SECTIONS = ("world", "noise", "em", "out_dir")


class CliError(Exception):
    pass


def _load_config(path: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(
            f"config parse error in {path} at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from None
    if not isinstance(doc, dict):
        raise CliError(f"config {path} must contain a JSON object")
    for key in doc:
        if key not in _CONFIG_SECTIONS:
            raise CliError(f"unknown key '{key}' in config {path}")
    return doc


def _noise_from_config(doc: dict) -> NoiseConfig:
    section = doc.get("noise", {})
    known = {"sigma_position", "sigma_angle", "epsilon_objectness"}
    for key in section:
        if key not in known:
            raise CliError(f"unknown key '{key}' in noise config")
    try:
        return NoiseConfig(**section)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid noise config: {exc}") from None


def _resolve_out_dir(args, doc: dict) -> Path:
    out = args.out or doc.get("out_dir")
    if not out:
        raise CliError("no output directory: pass --out or set out_dir in the config")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_simulate(args) -> int:
    doc = _load_config(args.config)
    out_dir = _resolve_out_dir(args, doc)
    world_doc = dict(doc.get("world", {}))
    if args.seed is not None:
        world_doc["seed"] = args.seed
    if args.dim is not None:
        world_doc["latent_dim"] = args.dim
    try:
        spec = fileio.world_spec_from_dict(world_doc)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid world config: {exc}") from None
    noise = _noise_from_config(doc)

    gt, table = generate_world(spec)
    bundles = generate_observations(gt, table, noise, spec)

    fileio.write_world(out_dir / "world.json", spec, table, noise)
    fileio.write_bundles(out_dir / "bundles.jsonl", bundles)
    fileio.write_groundtruth(out_dir / "groundtruth.jsonl", gt, table)
    print(
        f"simulate: wrote {len(bundles)} keyframes, "
        f"{sum(len(b.observations) for b in bundles)} observations to {out_dir}"
    )
    return 0


def cmd_slam(args) -> int:
    doc = _load_config(args.config)
    out_dir = _resolve_out_dir(args, doc)
    try:
        bundles = fileio.read_bundles(args.bundles)
    except OSError as exc:
        raise CliError(f"cannot read bundles {args.bundles}: {exc}") from None
    if not bundles:
        raise CliError(f"no keyframes found in {args.bundles}")

    noise = _noise_from_config(doc)
    em_doc = dict(doc.get("em", {}))
    if args.threads is not None:
        em_doc["threads"] = args.threads
    if args.assoc is not None:
        em_doc["association"] = args.assoc
    try:
        cfg = fileio.em_config_from_dict(em_doc, noise)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid em config: {exc}") from None

    state = run_em(bundles, cfg)

    fileio.write_trajectory(out_dir / "trajectory.txt", state.trajectory)
    fileio.write_landmarks(out_dir / "landmarks.jsonl", state.landmarks)
    fileio.write_em_log(out_dir / "em_log.csv", state.em_log)
    if state.solver_flags:
        with open(out_dir / "em_log.csv", "a") as handle:
            for flag in state.solver_flags:
                handle.write(f"# flag: {flag}\n")
    print(
        f"slam: {state.em_iterations} EM iterations, objective {state.objective:.6g}, "
        f"{len(state.landmarks)} landmarks, converged={state.converged}"
    )
    if state.solver_flags:
        print(f"slam: solver flags: {', '.join(state.solver_flags)}", file=sys.stderr)
        return 2
    return 0


def cmd_eval(args) -> int:
    for path in (args.trajectory, args.groundtruth, args.landmarks):
        if not Path(path).exists():
            raise CliError(f"input file not found: {path}")
    estimated = fileio.read_trajectory(args.trajectory)
    gt, table = fileio.read_groundtruth(args.groundtruth)
    est_landmarks = fileio.read_landmarks(args.landmarks)
    if len(estimated) != len(gt.trajectory):
        raise CliError(
            f"trajectory length mismatch: estimate has {len(estimated)} poses, "
            f"ground truth has {len(gt.trajectory)}"
        )

    pair = TrajectoryPair(tuple(estimated), gt.trajectory)
    ate_m = ate(pair)
    rpe_m = rpe(pair, delta=1)

    est_positions, ref_positions = pair.positions()
    _, R_align, t_align = umeyama_alignment(est_positions, ref_positions)

    class_acc = 0.0
    acc_pi6 = None
    mederr_deg = None
    if est_landmarks and gt.landmarks:
        aligned = np.stack([R_align @ lm.position + t_align for lm in est_landmarks])
        true_positions = np.stack([lm.position for lm in gt.landmarks])
        matches = match_landmarks(aligned, true_positions, max_distance=2.0)
        if matches:
            predictions = [
                mle_label(est_landmarks[i].latent_mean, table) for i, _ in matches
            ]
            truth = [gt.landmarks[j].class_id for _, j in matches]
            class_acc = float(np.mean([p == t for p, t in zip(predictions, truth)]))
            rotation_pairs = [
                (
                    euler_to_rotation(est_landmarks[i].orientation) @ R_align.T,
                    euler_to_rotation(gt.landmarks[j].orientation),
                )
                for i, j in matches
            ]
            acc_pi6, mederr_deg = viewpoint_metrics(rotation_pairs)

    out_dir = Path(args.out) if args.out else Path(args.trajectory).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics = {
        "ate_m": ate_m,
        "rpe_m": rpe_m,
        "class_acc": class_acc,
        "acc_pi6": acc_pi6,
        "mederr_deg": mederr_deg,
    }
    fileio.write_metrics(out_dir / "metrics.json", metrics)
    fileio.write_trajectory_csv(out_dir / "trajectories.csv", estimated, gt.trajectory)
    print(
        "eval: "
        + ", ".join(
            f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
            for k, v in metrics.items()
        )
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emslam", description="EM SLAM on synthetic multi-object worlds"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="generate a world and its detection stream")
    p_sim.add_argument("--config", required=True, help="run config JSON")
    p_sim.add_argument("--out", help="output directory (overrides config out_dir)")
    p_sim.add_argument("--seed", type=int, help="override the config seed")
    p_sim.add_argument(
        "--dim", type=int, choices=(16, 128), help="latent dimension override"
    )
    p_sim.set_defaults(func=cmd_simulate)

    p_slam = sub.add_parser("slam", help="run the EM SLAM loop on a bundle stream")
    p_slam.add_argument("--bundles", required=True, help="bundles.jsonl from simulate")
    p_slam.add_argument("--config", required=True, help="run config JSON")
    p_slam.add_argument("--out", help="output directory (overrides config out_dir)")
    p_slam.add_argument("--threads", type=int, help="expectation-step worker count")
    p_slam.add_argument(
        "--assoc", choices=("factorized", "exact"), help="association weight mode"
    )
    p_slam.set_defaults(func=cmd_slam)

    p_eval = sub.add_parser("eval", help="score a run against ground truth")
    p_eval.add_argument("--trajectory", required=True)
    p_eval.add_argument("--groundtruth", required=True)
    p_eval.add_argument("--landmarks", required=True)
    p_eval.add_argument("--out", help="output directory (defaults beside the trajectory)")
    p_eval.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
