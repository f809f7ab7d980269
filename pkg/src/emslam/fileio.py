"""On-disk formats: JSON configs, JSON-lines record streams, trajectory text.

Formats are deliberately plain so runs can be diffed and replotted:
bundles and ground truth are JSON lines, trajectories are
``t tx ty tz qx qy qz qw`` rows with 9-significant-digit decimals (the
quaternion is the body-to-world rotation of the pose), tabular logs are CSV
with a header row.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .distributions import AngleEncoding, ClassPriorTable, LatentGaussian
from .geometry import EulerAngles, Pose, rotation_to_euler
from .observation_model import Landmark, NoiseConfig, Observation
from .simulator import GroundTruth, TrueLandmark, WorldSpec
from .slam_backend import EmConfig, KeyframeBundle, OdometryDelta


# ---------------------------------------------------------------------------
# Observations and keyframe bundles (JSON lines)
# ---------------------------------------------------------------------------


def observation_to_dict(obs: Observation) -> dict:
    return {
        "position": obs.position.tolist(),
        "latent_mean": obs.shape_latent.mean.tolist(),
        "latent_std": obs.shape_latent.stddev.tolist(),
        "angles_encoding": [
            [e.mu_sin, e.mu_cos, e.sigma_sin, e.sigma_cos] for e in obs.angle_encodings
        ],
        "objectness": obs.objectness,
    }


def observation_from_dict(doc: dict) -> Observation:
    encodings = tuple(AngleEncoding(*values) for values in doc["angles_encoding"])
    return Observation(
        position=np.asarray(doc["position"], dtype=float),
        shape_latent=LatentGaussian(
            np.asarray(doc["latent_mean"], dtype=float),
            np.asarray(doc["latent_std"], dtype=float),
        ),
        angle_encodings=encodings,
        objectness=float(doc["objectness"]),
    )


def _odometry_to_dict(odo: OdometryDelta | None) -> dict | None:
    if odo is None:
        return None
    return {
        "position": odo.delta.position.tolist(),
        "orientation": odo.delta.orientation.as_array().tolist(),
        "sigma_pos": odo.sigma_pos,
        "sigma_rot": odo.sigma_rot,
    }


def _odometry_from_dict(doc: dict | None) -> OdometryDelta | None:
    if doc is None:
        return None
    return OdometryDelta(
        delta=Pose(
            np.asarray(doc["position"], dtype=float),
            EulerAngles.from_array(doc["orientation"]),
        ),
        sigma_pos=float(doc["sigma_pos"]),
        sigma_rot=float(doc["sigma_rot"]),
    )


def write_bundles(path, bundles) -> None:
    with open(path, "w") as handle:
        for bundle in bundles:
            header = {
                "keyframe": {
                    "t": bundle.index,
                    "odometry": _odometry_to_dict(bundle.odometry_to_previous),
                }
            }
            handle.write(json.dumps(header) + "\n")
            for obs in bundle.observations:
                handle.write(json.dumps(observation_to_dict(obs)) + "\n")


def read_bundles(path) -> list[KeyframeBundle]:
    bundles: list[KeyframeBundle] = []
    current: dict | None = None
    observations: list[Observation] = []

    def flush():
        if current is not None:
            bundles.append(
                KeyframeBundle(
                    index=int(current["t"]),
                    observations=tuple(observations),
                    odometry_to_previous=_odometry_from_dict(current["odometry"]),
                )
            )

    with open(path) as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{line_no}: invalid JSON: {exc.msg}") from None
            if "keyframe" in doc:
                flush()
                current = doc["keyframe"]
                observations = []
            else:
                if current is None:
                    raise ValueError(f"{path}:{line_no}: observation before any keyframe")
                observations.append(observation_from_dict(doc))
    flush()
    return bundles


# ---------------------------------------------------------------------------
# World specs and ground truth
# ---------------------------------------------------------------------------


def world_spec_to_dict(spec: WorldSpec) -> dict:
    doc = dataclasses.asdict(spec)
    doc["landmark_height_range"] = list(spec.landmark_height_range)
    doc["detections_range"] = list(spec.detections_range)
    return doc


def world_spec_from_dict(doc: dict) -> WorldSpec:
    known = {f.name for f in dataclasses.fields(WorldSpec)}
    for key in doc:
        if key not in known:
            raise ValueError(f"unknown key '{key}' in world spec")
    kwargs = dict(doc)
    for name in ("landmark_height_range", "detections_range"):
        if name in kwargs:
            kwargs[name] = tuple(kwargs[name])
    return WorldSpec(**kwargs)


def write_world(path, spec: WorldSpec, table: ClassPriorTable, noise: NoiseConfig) -> None:
    doc = {
        "world_spec": world_spec_to_dict(spec),
        "class_priors": table.to_json_dict(),
        "noise": dataclasses.asdict(noise),
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def read_world(path) -> tuple[WorldSpec, ClassPriorTable, NoiseConfig]:
    doc = json.loads(Path(path).read_text())
    spec = world_spec_from_dict(doc["world_spec"])
    table = ClassPriorTable.from_json_dict(doc["class_priors"])
    noise = NoiseConfig(**doc["noise"])
    return spec, table, noise


def write_groundtruth(path, gt: GroundTruth, table: ClassPriorTable) -> None:
    with open(path, "w") as handle:
        handle.write(json.dumps({"type": "class_priors", **table.to_json_dict()}) + "\n")
        for t, pose in enumerate(gt.trajectory):
            handle.write(
                json.dumps(
                    {
                        "type": "pose",
                        "t": t,
                        "position": pose.position.tolist(),
                        "orientation": pose.orientation.as_array().tolist(),
                    }
                )
                + "\n"
            )
        for lm in gt.landmarks:
            handle.write(
                json.dumps(
                    {
                        "type": "landmark",
                        "id": lm.id,
                        "class_id": lm.class_id,
                        "position": lm.position.tolist(),
                        "orientation": lm.orientation.as_array().tolist(),
                    }
                )
                + "\n"
            )
        for t, labels in enumerate(gt.associations):
            handle.write(json.dumps({"type": "associations", "t": t, "labels": labels}) + "\n")


def read_groundtruth(path) -> tuple[GroundTruth, ClassPriorTable]:
    poses: dict[int, Pose] = {}
    landmarks: list[TrueLandmark] = []
    associations: dict[int, list[int]] = {}
    table = None
    with open(path) as handle:
        for line in handle:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            kind = doc.get("type")
            if kind == "class_priors":
                table = ClassPriorTable.from_json_dict(doc)
            elif kind == "pose":
                poses[int(doc["t"])] = Pose(
                    np.asarray(doc["position"], dtype=float),
                    EulerAngles.from_array(doc["orientation"]),
                )
            elif kind == "landmark":
                landmarks.append(
                    TrueLandmark(
                        id=int(doc["id"]),
                        class_id=int(doc["class_id"]),
                        position=np.asarray(doc["position"], dtype=float),
                        orientation=EulerAngles.from_array(doc["orientation"]),
                    )
                )
            elif kind == "associations":
                associations[int(doc["t"])] = [int(v) for v in doc["labels"]]
            else:
                raise ValueError(f"unknown ground-truth record type {kind!r}")
    if table is None:
        raise ValueError("ground-truth file is missing the class_priors record")
    trajectory = tuple(poses[t] for t in sorted(poses))
    gt = GroundTruth(
        trajectory, tuple(sorted(landmarks, key=lambda lm: lm.id)),
        [associations[t] for t in sorted(associations)],
    )
    return gt, table


# ---------------------------------------------------------------------------
# Trajectories, landmarks, logs, metrics
# ---------------------------------------------------------------------------


def pose_to_quaternion(pose: Pose) -> np.ndarray:
    """Body-to-world unit quaternion (qx, qy, qz, qw) of a pose."""
    return Rotation.from_matrix(pose.rotation().T).as_quat()


def pose_from_position_quaternion(position, quaternion) -> Pose:
    R_body_to_world = Rotation.from_quat(np.asarray(quaternion, dtype=float)).as_matrix()
    return Pose(np.asarray(position, dtype=float), rotation_to_euler(R_body_to_world.T)[0])


def write_trajectory(path, poses) -> None:
    lines = []
    for t, pose in enumerate(poses):
        q = pose_to_quaternion(pose)
        fields = [f"{v:.9g}" for v in (*pose.position, *q)]
        lines.append(" ".join([str(t), *fields]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory(path) -> list[Pose]:
    poses: list[tuple[int, Pose]] = []
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ValueError(f"{path}:{line_no}: expected 8 fields, got {len(parts)}")
        t = int(parts[0])
        values = [float(v) for v in parts[1:]]
        poses.append((t, pose_from_position_quaternion(values[:3], values[3:])))
    poses.sort(key=lambda item: item[0])
    return [pose for _, pose in poses]


def write_landmarks(path, landmarks) -> None:
    with open(path, "w") as handle:
        for lm in landmarks:
            handle.write(
                json.dumps(
                    {
                        "id": lm.id,
                        "latent_mean": lm.latent_mean.tolist(),
                        "position": lm.position.tolist(),
                        "orientation": lm.orientation.as_array().tolist(),
                        "weight_mass": lm.weight_mass,
                    }
                )
                + "\n"
            )


def read_landmarks(path) -> list[Landmark]:
    landmarks = []
    with open(path) as handle:
        for line in handle:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            landmarks.append(
                Landmark(
                    id=int(doc["id"]),
                    latent_mean=np.asarray(doc["latent_mean"], dtype=float),
                    position=np.asarray(doc["position"], dtype=float),
                    orientation=EulerAngles.from_array(doc["orientation"]),
                    weight_mass=float(doc["weight_mass"]),
                )
            )
    return landmarks


def write_em_log(path, em_log) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["iter", "objective", "num_landmarks", "wall_ms"])
        for row in em_log:
            writer.writerow(
                [
                    row["iter"],
                    f"{row['objective']:.9g}",
                    row["num_landmarks"],
                    f"{row['wall_ms']:.3f}",
                ]
            )


def write_metrics(path, metrics: dict) -> None:
    Path(path).write_text(json.dumps(metrics, indent=2) + "\n")


def write_trajectory_csv(path, estimated, reference) -> None:
    """Plot-ready CSV with both trajectories side by side."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["t", "est_x", "est_y", "est_z", "ref_x", "ref_y", "ref_z"])
        for t, (est, ref) in enumerate(zip(estimated, reference)):
            writer.writerow(
                [t]
                + [f"{v:.9g}" for v in est.position]
                + [f"{v:.9g}" for v in ref.position]
            )


def em_config_to_dict(cfg: EmConfig) -> dict:
    doc = dataclasses.asdict(cfg)
    doc["noise"] = dataclasses.asdict(cfg.noise)
    return doc


def em_config_from_dict(doc: dict, noise: NoiseConfig) -> EmConfig:
    known = {f.name for f in dataclasses.fields(EmConfig)} - {"noise"}
    for key in doc:
        if key not in known:
            raise ValueError(f"unknown key '{key}' in em config")
    return EmConfig(noise=noise, **doc)
