"""Synthetic worlds and observation streams.

Stands in for a detector/encoder front-end: landmarks get class latents drawn
around their class center, angles arrive as trigonometric encodings at the
configured noise scale, genuine objects carry objectness 1 - epsilon, and
clutter detections carry positions, latents and objectness unrelated to the
map.  A seed fixes every draw, so identical specs produce identical streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .distributions import ClassPriorTable, LatentGaussian, encode_angle
from .geometry import (
    EulerAngles,
    Pose,
    local_orientation,
    rotation_to_euler,
    transform_to_observer_frame,
    wrap_angle,
)
from .observation_model import NoiseConfig, Observation
from .slam_backend import KeyframeBundle, OdometryDelta

TRAJECTORY_KINDS = ("loop", "figure-eight", "random-walk")

# Association label for detections that correspond to no landmark.
CLUTTER_LABEL = -1


@dataclass(frozen=True)
class WorldSpec:
    """Everything that defines a synthetic world and its detection stream."""

    num_landmarks: int = 20
    num_classes: int = 10
    class_separation: float = 4.0
    latent_dim: int = 16
    arena_half_extent: float = 20.0
    landmark_height_range: tuple[float, float] = (0.0, 3.0)
    trajectory: str = "loop"
    num_keyframes: int = 100
    detections_range: tuple[int, int] = (0, 8)
    clutter_rate: float = 0.5
    seed: int = 0
    range_gate: float = 30.0
    fov_deg: float = 360.0
    orientation_elevation_max: float = 0.5
    orientation_inplane_max: float = 0.5
    sigma_odo_pos: float = 0.05
    sigma_odo_rot: float = 0.01
    latent_sampling_std: float = 1.0
    latent_reported_std: float = 1.0

    def __post_init__(self):
        if self.num_landmarks < 0:
            raise ValueError("num_landmarks must be nonnegative")
        if self.num_classes < 1:
            raise ValueError("need at least one class")
        if self.class_separation <= 0 or self.latent_dim < 1:
            raise ValueError("class_separation and latent_dim must be positive")
        if self.trajectory not in TRAJECTORY_KINDS:
            raise ValueError(f"trajectory must be one of {TRAJECTORY_KINDS}")
        if self.num_keyframes < 1:
            raise ValueError("need at least one keyframe")
        lo, hi = self.detections_range
        if lo < 0 or hi < lo:
            raise ValueError("detections_range must satisfy 0 <= lo <= hi")
        if self.clutter_rate < 0:
            raise ValueError("clutter_rate must be nonnegative")
        if self.arena_half_extent <= 0 or self.range_gate <= 0:
            raise ValueError("arena_half_extent and range_gate must be positive")
        if not 0.0 < self.fov_deg <= 360.0:
            raise ValueError("fov_deg must be in (0, 360]")
        if self.sigma_odo_pos <= 0 or self.sigma_odo_rot <= 0:
            raise ValueError("odometry sigmas must be positive")
        if self.latent_sampling_std < 0 or self.latent_reported_std <= 0:
            raise ValueError("latent stddevs must be valid")


@dataclass(frozen=True, eq=False)
class TrueLandmark:
    id: int
    class_id: int
    position: np.ndarray
    orientation: EulerAngles

    def __post_init__(self):
        p = np.array(self.position, dtype=float).reshape(3)
        p.flags.writeable = False
        object.__setattr__(self, "position", p)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """True trajectory and landmarks; per-observation labels are filled by
    ``generate_observations`` (landmark id or CLUTTER_LABEL, one list per
    keyframe, aligned with the emitted observation order)."""

    trajectory: tuple[Pose, ...]
    landmarks: tuple[TrueLandmark, ...]
    associations: list[list[int]] = field(default_factory=list)


def _loop_positions(spec: WorldSpec) -> tuple[np.ndarray, np.ndarray]:
    radius = 0.6 * spec.arena_half_extent
    theta = 2.0 * np.pi * np.arange(spec.num_keyframes) / spec.num_keyframes
    positions = np.stack(
        [radius * np.cos(theta), radius * np.sin(theta), np.zeros_like(theta)], axis=1
    )
    yaw = wrap_angle(theta + np.pi / 2)
    return positions, yaw


def _figure_eight_positions(spec: WorldSpec) -> tuple[np.ndarray, np.ndarray]:
    radius = 0.8 * spec.arena_half_extent
    theta = 2.0 * np.pi * np.arange(spec.num_keyframes) / spec.num_keyframes
    x = radius * np.sin(theta)
    y = radius * np.sin(theta) * np.cos(theta)
    positions = np.stack([x, y, np.zeros_like(theta)], axis=1)
    yaw = np.arctan2(radius * np.cos(2 * theta), radius * np.cos(theta))
    return positions, yaw


def _random_walk_positions(spec: WorldSpec, rng: np.random.Generator):
    speed = 0.02 * spec.arena_half_extent
    turns = rng.normal(0.0, 0.15, spec.num_keyframes)
    yaw = wrap_angle(np.cumsum(turns))
    steps = speed * np.stack([np.cos(yaw), np.sin(yaw), np.zeros_like(yaw)], axis=1)
    positions = np.cumsum(steps, axis=0) - steps
    return positions, yaw


def generate_world(spec: WorldSpec) -> tuple[GroundTruth, ClassPriorTable]:
    """Sample class centers, landmarks and the true trajectory."""
    rng = np.random.default_rng(spec.seed)
    centers = rng.normal(0.0, spec.class_separation, (spec.num_classes, spec.latent_dim))
    table = ClassPriorTable({i: centers[i] for i in range(spec.num_classes)})

    h = spec.arena_half_extent
    z_lo, z_hi = spec.landmark_height_range
    landmarks = []
    for i in range(spec.num_landmarks):
        class_id = int(rng.integers(0, spec.num_classes))
        position = np.array(
            [rng.uniform(-h, h), rng.uniform(-h, h), rng.uniform(z_lo, z_hi)]
        )
        orientation = EulerAngles(
            rng.uniform(-np.pi, np.pi),
            rng.uniform(-spec.orientation_elevation_max, spec.orientation_elevation_max),
            rng.uniform(-spec.orientation_inplane_max, spec.orientation_inplane_max),
        )
        landmarks.append(TrueLandmark(i, class_id, position, orientation))

    if spec.trajectory == "loop":
        positions, yaw = _loop_positions(spec)
    elif spec.trajectory == "figure-eight":
        positions, yaw = _figure_eight_positions(spec)
    else:
        positions, yaw = _random_walk_positions(spec, rng)
    trajectory = tuple(
        Pose(positions[t], EulerAngles(float(yaw[t]), 0.0, 0.0))
        for t in range(spec.num_keyframes)
    )
    return GroundTruth(trajectory, tuple(landmarks)), table


def _visible_landmarks(gt: GroundTruth, pose: Pose, spec: WorldSpec) -> list[int]:
    half_fov = math.radians(spec.fov_deg) / 2.0
    visible = []
    for lm in gt.landmarks:
        local = transform_to_observer_frame(lm.position, pose)
        distance = float(np.linalg.norm(local))
        if distance > spec.range_gate or distance == 0.0:
            continue
        bearing = math.atan2(local[1], local[0])
        if abs(bearing) <= half_fov:
            visible.append(lm.id)
    return visible


def generate_observations(
    gt: GroundTruth, table: ClassPriorTable, noise: NoiseConfig, spec: WorldSpec
) -> list[KeyframeBundle]:
    """Emit a keyframe bundle per true pose and fill ``gt.associations``.

    Object detections: true relative position plus isotropic noise, latent
    mean drawn around the class center with the reported stddev fixed, angle
    encodings of the true local orientation, objectness 1 - epsilon.  Clutter
    detections: uniform positions in the sensing cone, latents far from the
    class structure, objectness drawn near zero.  Any previous association
    labels on ``gt`` are overwritten.
    """
    rng = np.random.default_rng([spec.seed, 1])
    D = table.dim
    reported = np.full(D, spec.latent_reported_std)
    lo, hi = spec.detections_range
    eps = noise.epsilon_objectness
    bundles: list[KeyframeBundle] = []
    gt.associations.clear()

    for t, pose in enumerate(gt.trajectory):
        observations: list[Observation] = []
        labels: list[int] = []

        visible = _visible_landmarks(gt, pose, spec)
        target = int(rng.integers(lo, hi + 1))
        if len(visible) > target:
            chosen_idx = rng.choice(len(visible), size=target, replace=False)
            visible = sorted(visible[i] for i in chosen_idx)
        for lm_id in visible:
            lm = gt.landmarks[lm_id]
            local = transform_to_observer_frame(lm.position, pose)
            position = local + rng.normal(0.0, noise.sigma_position, 3)
            latent = table.center(lm.class_id) + spec.latent_sampling_std * rng.standard_normal(D)
            angles = local_orientation(lm.orientation, pose.orientation)
            encodings = tuple(
                encode_angle(a, noise.sigma_angle) for a in angles.as_array()
            )
            observations.append(
                Observation(
                    position=position,
                    shape_latent=LatentGaussian(latent, reported),
                    angle_encodings=encodings,
                    objectness=1.0 - eps,
                )
            )
            labels.append(lm.id)

        for _ in range(int(rng.poisson(spec.clutter_rate))):
            half_fov = math.radians(spec.fov_deg) / 2.0
            bearing = rng.uniform(-half_fov, half_fov)
            pitch = rng.uniform(-0.3, 0.3)
            distance = rng.uniform(1.0, spec.range_gate)
            position = distance * np.array(
                [
                    math.cos(pitch) * math.cos(bearing),
                    math.cos(pitch) * math.sin(bearing),
                    math.sin(pitch),
                ]
            )
            latent = rng.normal(0.0, spec.class_separation + 3.0, D)
            angles = (
                rng.uniform(-np.pi, np.pi),
                rng.uniform(-spec.orientation_elevation_max, spec.orientation_elevation_max),
                rng.uniform(-spec.orientation_inplane_max, spec.orientation_inplane_max),
            )
            encodings = tuple(encode_angle(a, noise.sigma_angle) for a in angles)
            observations.append(
                Observation(
                    position=position,
                    shape_latent=LatentGaussian(latent, reported),
                    angle_encodings=encodings,
                    objectness=float(np.clip(rng.beta(1.0, 20.0), 0.0, 1.0)),
                )
            )
            labels.append(CLUTTER_LABEL)

        odometry = None
        if t > 0:
            prev = gt.trajectory[t - 1]
            R_prev = prev.rotation()
            dpos_true = R_prev @ (pose.position - prev.position)
            dang_true = rotation_to_euler(pose.rotation() @ R_prev.T)[0].as_array()
            dpos = dpos_true + rng.normal(0.0, spec.sigma_odo_pos, 3)
            dang = wrap_angle(dang_true + rng.normal(0.0, spec.sigma_odo_rot, 3))
            odometry = OdometryDelta(
                delta=Pose(dpos, EulerAngles.from_array(dang)),
                sigma_pos=spec.sigma_odo_pos,
                sigma_rot=spec.sigma_odo_rot,
            )

        bundles.append(KeyframeBundle(t, tuple(observations), odometry))
        gt.associations.append(labels)
    return bundles
