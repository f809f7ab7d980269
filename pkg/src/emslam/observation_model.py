"""Per-observation likelihood factors and maximum-likelihood read-outs.

An observation carries the observer-frame position of a detection, a diagonal
Gaussian over the shape latent, trigonometric encodings of the three relative
orientation angles, and an objectness probability.  Its likelihood against a
landmark factorizes into a position density, an objectness factor, a latent
class density evaluated at the encoded mean, and an orientation density
evaluated on the decoded angles against the landmark's local orientation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .distributions import (
    DEFAULT_ANGLE_SIGMA,
    AngleEncoding,
    ClassPriorTable,
    LatentGaussian,
    ObjectnessPrior,
    class_logpdf,
    decode_angle,
    encode_angle,
    kl_bernoulli,
    kl_gaussian_diagonal,
    kl_gaussian_isotropic,
    angle_gaussian_logpdf,
)
from .geometry import EulerAngles, Pose, local_orientation, transform_to_observer_frame

LOG_TWO_PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class Observation:
    """One detection: relative position, shape latent, angle encodings, objectness."""

    position: np.ndarray
    shape_latent: LatentGaussian
    angle_encodings: tuple[AngleEncoding, AngleEncoding, AngleEncoding]
    objectness: float

    def __post_init__(self):
        p = np.array(self.position, dtype=float).reshape(3)
        if not np.all(np.isfinite(p)):
            raise ValueError("observation position must be finite")
        p.flags.writeable = False
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "angle_encodings", tuple(self.angle_encodings))
        if len(self.angle_encodings) != 3:
            raise ValueError("exactly three angle encodings required")
        if not 0.0 <= self.objectness <= 1.0:
            raise ValueError(f"objectness must be in [0, 1], got {self.objectness}")

    def decoded_angles(self) -> EulerAngles:
        return EulerAngles(*(decode_angle(e) for e in self.angle_encodings))


@dataclass(frozen=True, eq=False)
class Landmark:
    """Map entry: latent class mean, global position and orientation."""

    id: int
    latent_mean: np.ndarray
    position: np.ndarray
    orientation: EulerAngles
    weight_mass: float = 0.0

    def __post_init__(self):
        m = np.array(self.latent_mean, dtype=float).reshape(-1)
        p = np.array(self.position, dtype=float).reshape(3)
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(p))):
            raise ValueError("landmark parameters must be finite")
        if self.weight_mass < 0:
            raise ValueError("weight_mass must be nonnegative")
        m.flags.writeable = False
        p.flags.writeable = False
        object.__setattr__(self, "latent_mean", m)
        object.__setattr__(self, "position", p)


@dataclass(frozen=True)
class NoiseConfig:
    """Measurement-noise scales shared by the simulator and the likelihood."""

    sigma_position: float = 0.2
    sigma_angle: float = DEFAULT_ANGLE_SIGMA
    epsilon_objectness: float = 0.01

    def __post_init__(self):
        if self.sigma_position <= 0 or self.sigma_angle <= 0:
            raise ValueError("noise sigmas must be positive")
        if not 0.0 < self.epsilon_objectness < 0.5:
            raise ValueError("epsilon_objectness must be in (0, 0.5)")

    def objectness_prior(self) -> ObjectnessPrior:
        return ObjectnessPrior(self.epsilon_objectness)


def kappa_objectness(objectness: float, prior: ObjectnessPrior) -> float:
    """exp(-KL(Bernoulli(objectness) || p(o=true | object label))).

    Close to 1 for confident detections, close to 0 for background-like ones;
    monotone increasing in objectness.
    """
    return math.exp(-kl_bernoulli(objectness, prior, label_is_object=True))


def observation_log_likelihood(
    obs: Observation, lm: Landmark, observer: Pose, noise: NoiseConfig
) -> float:
    """Log of the factorized observation likelihood against one landmark."""
    predicted = transform_to_observer_frame(lm.position, observer)
    r2 = float(np.sum((obs.position - predicted) ** 2))
    log_position = -1.5 * math.log(2.0 * math.pi * noise.sigma_position**2) - 0.5 * r2 / (
        noise.sigma_position**2
    )

    z = obs.shape_latent.mean
    if z.shape != lm.latent_mean.shape:
        raise ValueError("latent dimension mismatch between observation and landmark")
    log_latent = -0.5 * z.shape[0] * LOG_TWO_PI - 0.5 * float(
        np.sum((z - lm.latent_mean) ** 2)
    )

    local = local_orientation(lm.orientation, observer.orientation)
    log_angles = angle_gaussian_logpdf(obs.decoded_angles(), local, noise.sigma_angle)

    log_kappa = -kl_bernoulli(obs.objectness, noise.objectness_prior(), True)
    return log_kappa + log_position + log_latent + log_angles


def elbo_kl_components(
    obs: Observation,
    true_label: int,
    true_local_orientation: EulerAngles,
    table: ClassPriorTable,
    prior: ObjectnessPrior,
    sigma_angle: float = DEFAULT_ANGLE_SIGMA,
) -> tuple[float, float, float]:
    """The three closed-form KL terms of the per-observation lower bound.

    Returns (kl_objectness, kl_shape, kl_orientation); each is nonnegative and
    their negated sum is the computable part of the bound for this observation.
    """
    center = table.center(true_label)
    kl_obj = kl_bernoulli(obs.objectness, prior, label_is_object=True)
    kl_shape = kl_gaussian_isotropic(obs.shape_latent, center)

    true_angles = true_local_orientation.as_array()
    kl_orient = 0.0
    for encoding, angle in zip(obs.angle_encodings, true_angles):
        target = encode_angle(float(angle), sigma_angle)
        kl_orient += kl_gaussian_diagonal(
            [encoding.mu_sin, encoding.mu_cos],
            [encoding.sigma_sin, encoding.sigma_cos],
            [target.mu_sin, target.mu_cos],
            [target.sigma_sin, target.sigma_cos],
        )
    return kl_obj, kl_shape, kl_orient


def mle_label(z, table: ClassPriorTable) -> int:
    """Most likely class for a latent vector: the nearest center.

    Ties break toward the smallest class id.
    """
    z = np.asarray(z, dtype=float).reshape(-1)
    centers = table.center_matrix()
    if z.shape[0] != centers.shape[1]:
        raise ValueError(f"latent dimension mismatch: {z.shape[0]} vs {centers.shape[1]}")
    d2 = np.sum((centers - z) ** 2, axis=1)
    return table.ids[int(np.argmin(d2))]


def mle_pose(encodings) -> EulerAngles:
    """Most likely orientation: the decoded angle of each encoding."""
    encodings = tuple(encodings)
    if len(encodings) != 3:
        raise ValueError("exactly three angle encodings required")
    return EulerAngles(*(decode_angle(e) for e in encodings))
