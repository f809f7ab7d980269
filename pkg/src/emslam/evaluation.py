"""Trajectory and viewpoint metrics.

ATE is the position RMSE after least-squares rigid alignment of the estimate
to the reference (scale fixed by default); RPE is the translational RMSE of
relative transforms at a fixed index step.  Viewpoint quality uses the
geodesic rotation distance, reported as the fraction under pi/6 and the
median error in degrees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import Pose


@dataclass(frozen=True, eq=False)
class TrajectoryPair:
    """Estimated and reference trajectories aligned by keyframe index."""

    estimated: tuple[Pose, ...]
    reference: tuple[Pose, ...]

    def __post_init__(self):
        object.__setattr__(self, "estimated", tuple(self.estimated))
        object.__setattr__(self, "reference", tuple(self.reference))
        if len(self.estimated) != len(self.reference):
            raise ValueError("trajectories must have equal length")
        if len(self.estimated) < 2:
            raise ValueError("need at least two poses")

    def positions(self) -> tuple[np.ndarray, np.ndarray]:
        est = np.stack([p.position for p in self.estimated])
        ref = np.stack([p.position for p in self.reference])
        return est, ref


def umeyama_alignment(source: np.ndarray, target: np.ndarray, with_scale: bool = False):
    """Least-squares similarity transform: target ~ scale * R @ source + t.

    Returns (scale, R, t); scale is 1.0 unless ``with_scale``.  Raises on a
    degenerate (zero-spread) source cloud.
    """
    src = np.asarray(source, dtype=float)
    tgt = np.asarray(target, dtype=float)
    if src.shape != tgt.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("point clouds must both have shape (N, 3)")
    mu_src = src.mean(axis=0)
    mu_tgt = tgt.mean(axis=0)
    src_c = src - mu_src
    tgt_c = tgt - mu_tgt
    var_src = float(np.mean(np.sum(src_c**2, axis=1)))
    if var_src < 1e-24:
        raise ValueError("degenerate alignment: source points are coincident")
    cov = tgt_c.T @ src_c / src.shape[0]
    U, S, Vt = np.linalg.svd(cov)
    sign = np.eye(3)
    sign[2, 2] = np.sign(np.linalg.det(U @ Vt))
    R = U @ sign @ Vt
    scale = float(np.trace(np.diag(S) @ sign) / var_src) if with_scale else 1.0
    t = mu_tgt - scale * R @ mu_src
    return scale, R, t


def ate(pair: TrajectoryPair, with_scale: bool = False) -> float:
    """Absolute trajectory error: post-alignment position RMSE in meters."""
    est, ref = pair.positions()
    scale, R, t = umeyama_alignment(est, ref, with_scale=with_scale)
    aligned = scale * est @ R.T + t
    return float(np.sqrt(np.mean(np.sum((aligned - ref) ** 2, axis=1))))


def rpe(pair: TrajectoryPair, delta: int = 1) -> float:
    """Relative pose error: RMSE of relative-translation mismatch at ``delta``."""
    if delta < 1 or delta >= len(pair.estimated):
        raise ValueError("delta must be in [1, len(trajectory) - 1]")
    errors = []
    for i in range(len(pair.estimated) - delta):
        e0, e1 = pair.estimated[i], pair.estimated[i + delta]
        r0, r1 = pair.reference[i], pair.reference[i + delta]
        rel_est = e0.rotation() @ (e1.position - e0.position)
        rel_ref = r0.rotation() @ (r1.position - r0.position)
        errors.append(np.sum((rel_est - rel_ref) ** 2))
    return float(np.sqrt(np.mean(errors)))


def geodesic_rotation_distance(R1: np.ndarray, R2: np.ndarray) -> float:
    """Rotation angle of R1^T @ R2, in radians (range [0, pi])."""
    R1 = np.asarray(R1, dtype=float)
    R2 = np.asarray(R2, dtype=float)
    cos_angle = 0.5 * (np.trace(R1.T @ R2) - 1.0)
    return float(np.arccos(np.clip(cos_angle, -1.0, 1.0)))


def viewpoint_metrics(pairs) -> tuple[float, float]:
    """(fraction of geodesic errors under pi/6, median error in degrees)."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("viewpoint evaluation set must be nonempty")
    errors = np.array([geodesic_rotation_distance(est, gt) for est, gt in pairs])
    acc = float(np.mean(errors < math.pi / 6.0))
    med_err = float(np.degrees(np.median(errors)))
    return acc, med_err


def classification_accuracy(predictions, truth) -> float:
    """Fraction of matching labels."""
    predictions = list(predictions)
    truth = list(truth)
    if len(predictions) != len(truth):
        raise ValueError("prediction and truth lists must have equal length")
    if not predictions:
        raise ValueError("need at least one prediction")
    return float(np.mean([p == t for p, t in zip(predictions, truth)]))


def match_landmarks(
    estimated_positions: np.ndarray, true_positions: np.ndarray, max_distance: float = 2.0
) -> list[tuple[int, int]]:
    """One-to-one nearest matching of estimated to true landmarks.

    Assignment minimizes total distance; pairs farther apart than
    ``max_distance`` are dropped.
    """
    est = np.asarray(estimated_positions, dtype=float).reshape(-1, 3)
    true = np.asarray(true_positions, dtype=float).reshape(-1, 3)
    if est.shape[0] == 0 or true.shape[0] == 0:
        return []
    distances = np.linalg.norm(est[:, None, :] - true[None, :, :], axis=2)
    rows, cols = linear_sum_assignment(distances)
    return [
        (int(r), int(c)) for r, c in zip(rows, cols) if distances[r, c] <= max_distance
    ]
