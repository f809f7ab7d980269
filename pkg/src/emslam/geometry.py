"""SE(3) poses with Euler-angle orientations and frame transforms.

Convention, fixed across the whole package: an orientation is the intrinsic
Z(azimuth) - Y(elevation) - X(in-plane) Euler triple, and
``euler_to_rotation`` returns the world-to-body coordinate transform

    R(az, el, ip) = Rx(ip) @ Ry(el) @ Rz(az)

built from passive single-axis rotations, so ``R @ (x_world - x_observer)``
expresses a world point in the observer frame with +X along the observer's
heading.  Angles are radians normalized to (-pi, pi]; positions are meters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TAU = 2.0 * math.pi

# |elevation| closer than this to pi/2 counts as gimbal lock.
GIMBAL_LOCK_TOL = 1e-6


def wrap_angle(angle):
    """Map an angle (scalar or ndarray) to the interval (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(angle, dtype=float), TAU)


@dataclass(frozen=True)
class EulerAngles:
    """Intrinsic Z-Y-X Euler triple; each angle stored in (-pi, pi]."""

    azimuth: float
    elevation: float
    in_plane: float

    def __post_init__(self):
        for name in ("azimuth", "elevation", "in_plane"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value!r}")
            object.__setattr__(self, name, float(wrap_angle(value)))

    def as_array(self) -> np.ndarray:
        return np.array([self.azimuth, self.elevation, self.in_plane])

    @classmethod
    def from_array(cls, angles) -> "EulerAngles":
        a = np.asarray(angles, dtype=float).reshape(3)
        return cls(float(a[0]), float(a[1]), float(a[2]))

    @classmethod
    def identity(cls) -> "EulerAngles":
        return cls(0.0, 0.0, 0.0)


@dataclass(frozen=True, eq=False)
class Pose:
    """Position (meters) plus orientation of an observer or landmark."""

    position: np.ndarray
    orientation: EulerAngles

    def __post_init__(self):
        p = np.array(self.position, dtype=float).reshape(3)
        if not np.all(np.isfinite(p)):
            raise ValueError("pose position must be finite")
        p.flags.writeable = False
        object.__setattr__(self, "position", p)

    def rotation(self) -> np.ndarray:
        return euler_to_rotation(self.orientation)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.zeros(3), EulerAngles.identity())


def _rz(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])


def _ry(e: float) -> np.ndarray:
    c, s = math.cos(e), math.sin(e)
    return np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])


def _rx(i: float) -> np.ndarray:
    c, s = math.cos(i), math.sin(i)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, s], [0.0, -s, c]])


def euler_to_rotation(v: EulerAngles) -> np.ndarray:
    """World-to-body rotation matrix Rx(in_plane) @ Ry(elevation) @ Rz(azimuth)."""
    return _rx(v.in_plane) @ _ry(v.elevation) @ _rz(v.azimuth)


def rotation_to_euler(R: np.ndarray) -> tuple[EulerAngles, bool]:
    """Invert ``euler_to_rotation``.

    Returns the Euler triple and a gimbal-lock flag.  At |elevation| within
    ``GIMBAL_LOCK_TOL`` of pi/2 the in-plane angle is set to 0 by convention
    (azimuth absorbs the free combination) and the flag is True; the returned
    triple still reproduces ``R`` exactly.
    """
    R = np.asarray(R, dtype=float)
    elevation = math.atan2(-R[0, 2], math.hypot(R[0, 0], R[0, 1]))
    if abs(elevation) > math.pi / 2 - GIMBAL_LOCK_TOL:
        azimuth = math.atan2(-R[1, 0], R[1, 1])
        return EulerAngles(azimuth, elevation, 0.0), True
    azimuth = math.atan2(R[0, 1], R[0, 0])
    in_plane = math.atan2(R[1, 2], R[2, 2])
    return EulerAngles(azimuth, elevation, in_plane), False


def is_rotation_matrix(R: np.ndarray, tol: float = 1e-9) -> bool:
    """True when R is orthonormal with determinant +1 within tol."""
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    ortho = np.linalg.norm(R.T @ R - np.eye(3))
    return ortho < tol and abs(np.linalg.det(R) - 1.0) < tol


def local_orientation(v_global: EulerAngles, v_observer: EulerAngles) -> EulerAngles:
    """Orientation relative to an observer: R_local = R_global @ R_observer^T."""
    R_local = euler_to_rotation(v_global) @ euler_to_rotation(v_observer).T
    return rotation_to_euler(R_local)[0]


def global_orientation(v_local: EulerAngles, v_observer: EulerAngles) -> EulerAngles:
    """Invert ``local_orientation``: R_global = R_local @ R_observer."""
    R_global = euler_to_rotation(v_local) @ euler_to_rotation(v_observer)
    return rotation_to_euler(R_global)[0]


def transform_to_observer_frame(x_world, observer: Pose) -> np.ndarray:
    """Express world point(s) in the observer's body frame (noise-free mean)."""
    x = np.asarray(x_world, dtype=float)
    R = observer.rotation()
    return (x - observer.position) @ R.T


def transform_from_observer_frame(x_local, observer: Pose) -> np.ndarray:
    """Back-project body-frame point(s) into world coordinates."""
    x = np.asarray(x_local, dtype=float)
    R = observer.rotation()
    return x @ R + observer.position


# ---------------------------------------------------------------------------
# Batch helpers used by the optimizer.  Angle arrays have shape (N, 3) in
# (azimuth, elevation, in_plane) order; matrix stacks have shape (N, 3, 3).
# ---------------------------------------------------------------------------


def euler_to_rotation_batch(angles: np.ndarray) -> np.ndarray:
    """Rotation matrices for a stack of Euler triples."""
    a = np.asarray(angles, dtype=float).reshape(-1, 3)
    ca, sa = np.cos(a[:, 0]), np.sin(a[:, 0])
    ce, se = np.cos(a[:, 1]), np.sin(a[:, 1])
    ci, si = np.cos(a[:, 2]), np.sin(a[:, 2])
    R = np.empty((a.shape[0], 3, 3))
    R[:, 0, 0] = ce * ca
    R[:, 0, 1] = ce * sa
    R[:, 0, 2] = -se
    R[:, 1, 0] = -ci * sa + si * se * ca
    R[:, 1, 1] = ci * ca + si * se * sa
    R[:, 1, 2] = si * ce
    R[:, 2, 0] = si * sa + ci * se * ca
    R[:, 2, 1] = -si * ca + ci * se * sa
    R[:, 2, 2] = ci * ce
    return R


def rotation_to_euler_batch(R: np.ndarray) -> np.ndarray:
    """Euler triples for a stack of rotation matrices (no gimbal-lock branch)."""
    R = np.asarray(R, dtype=float)
    az = np.arctan2(R[..., 0, 1], R[..., 0, 0])
    el = np.arctan2(-R[..., 0, 2], np.hypot(R[..., 0, 0], R[..., 0, 1]))
    ip = np.arctan2(R[..., 1, 2], R[..., 2, 2])
    return np.stack([az, el, ip], axis=-1)


def euler_rotation_derivatives_batch(angles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation matrices and their partials w.r.t. each Euler angle.

    Returns (R, dR) with R of shape (N, 3, 3) and dR of shape (N, 3, 3, 3),
    indexed dR[n, p] = dR_n / d angle_p for p in (azimuth, elevation, in_plane).
    """
    a = np.asarray(angles, dtype=float).reshape(-1, 3)
    n = a.shape[0]
    ca, sa = np.cos(a[:, 0]), np.sin(a[:, 0])
    ce, se = np.cos(a[:, 1]), np.sin(a[:, 1])
    ci, si = np.cos(a[:, 2]), np.sin(a[:, 2])
    Z = np.zeros((n, 3, 3))
    Y = np.zeros((n, 3, 3))
    X = np.zeros((n, 3, 3))
    dZ = np.zeros((n, 3, 3))
    dY = np.zeros((n, 3, 3))
    dX = np.zeros((n, 3, 3))
    Z[:, 0, 0], Z[:, 0, 1], Z[:, 1, 0], Z[:, 1, 1], Z[:, 2, 2] = ca, sa, -sa, ca, 1.0
    dZ[:, 0, 0], dZ[:, 0, 1], dZ[:, 1, 0], dZ[:, 1, 1] = -sa, ca, -ca, -sa
    Y[:, 0, 0], Y[:, 0, 2], Y[:, 1, 1], Y[:, 2, 0], Y[:, 2, 2] = ce, -se, 1.0, se, ce
    dY[:, 0, 0], dY[:, 0, 2], dY[:, 2, 0], dY[:, 2, 2] = -se, -ce, ce, -se
    X[:, 0, 0], X[:, 1, 1], X[:, 1, 2], X[:, 2, 1], X[:, 2, 2] = 1.0, ci, si, -si, ci
    dX[:, 1, 1], dX[:, 1, 2], dX[:, 2, 1], dX[:, 2, 2] = -si, ci, -ci, -si
    XY = X @ Y
    R = XY @ Z
    dR = np.stack([XY @ dZ, (X @ dY) @ Z, (dX @ Y) @ Z], axis=1)
    return R, dR


def euler_jacobian_batch(R: np.ndarray) -> np.ndarray:
    """Partials of the extracted Euler triple w.r.t. the matrix entries.

    Returns J of shape (N, 3, 3, 3) with J[n, p, i, j] = d angle_p / d R[i, j].
    Only valid away from gimbal lock.
    """
    R = np.asarray(R, dtype=float).reshape(-1, 3, 3)
    n = R.shape[0]
    J = np.zeros((n, 3, 3, 3))
    r00, r01, r02 = R[:, 0, 0], R[:, 0, 1], R[:, 0, 2]
    r12, r22 = R[:, 1, 2], R[:, 2, 2]
    den_a = r00**2 + r01**2
    J[:, 0, 0, 0] = -r01 / den_a
    J[:, 0, 0, 1] = r00 / den_a
    h = np.sqrt(den_a)
    den_e = den_a + r02**2
    J[:, 1, 0, 2] = -h / den_e
    J[:, 1, 0, 0] = r02 * r00 / (h * den_e)
    J[:, 1, 0, 1] = r02 * r01 / (h * den_e)
    den_i = r12**2 + r22**2
    J[:, 2, 1, 2] = r22 / den_i
    J[:, 2, 2, 2] = -r12 / den_i
    return J
