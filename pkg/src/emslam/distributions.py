"""Closed-form probability objects for the latent observation model.

Diagonal Gaussians over the shape latent space, the trigonometric encoding
of noisy angles, the two-sided objectness prior, and the table of unit
Gaussian class centers that plays the role of a mixture prior over latents.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import rel_entr

from .geometry import EulerAngles, wrap_angle

# Latent dimension of the shape code; 128 kept available for comparison runs.
DEFAULT_LATENT_DIM = 16

# Angle-noise scale below which the trigonometric encoding degenerates.
DEFAULT_ANGLE_SIGMA = 0.05

LOG_TWO_PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class LatentGaussian:
    """Diagonal Gaussian over the latent space: mean and per-axis stddev."""

    mean: np.ndarray
    stddev: np.ndarray

    def __post_init__(self):
        m = np.array(self.mean, dtype=float).reshape(-1)
        s = np.array(self.stddev, dtype=float).reshape(-1)
        if m.shape != s.shape:
            raise ValueError(f"mean/stddev shape mismatch: {m.shape} vs {s.shape}")
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(s))):
            raise ValueError("latent Gaussian parameters must be finite")
        if np.any(s <= 0):
            raise ValueError("latent stddev components must be strictly positive")
        m.flags.writeable = False
        s.flags.writeable = False
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "stddev", s)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def entropy(self) -> float:
        """Differential entropy 0.5 * sum(log(2*pi*e*sigma^2))."""
        return float(0.5 * np.sum(np.log(2.0 * math.pi * math.e * self.stddev**2)))


@dataclass(frozen=True)
class AngleEncoding:
    """First and second moments of (sin z, cos z) for z ~ N(v, sigma^2).

    ``sigma_sin`` and ``sigma_cos`` hold the variances Var[sin z], Var[cos z]
    produced by the closed-form moment expressions in ``encode_angle``.
    """

    mu_sin: float
    mu_cos: float
    sigma_sin: float
    sigma_cos: float

    def __post_init__(self):
        values = [self.mu_sin, self.mu_cos, self.sigma_sin, self.sigma_cos]
        if not all(math.isfinite(v) for v in values):
            raise ValueError("angle encoding values must be finite")
        if self.sigma_sin < 0 or self.sigma_cos < 0:
            raise ValueError("angle encoding variances must be nonnegative")
        if self.mu_sin**2 + self.mu_cos**2 > 1.0 + 1e-9:
            raise ValueError("encoded direction magnitude exceeds 1")


@dataclass(frozen=True)
class ObjectnessPrior:
    """Two-sided objectness prior: p(true | object) = 1 - epsilon."""

    epsilon: float = 0.01

    def __post_init__(self):
        if not 0.0 < self.epsilon < 0.5:
            raise ValueError(f"epsilon must be in (0, 0.5), got {self.epsilon}")

    def p_true(self, label_is_object: bool) -> float:
        return 1.0 - self.epsilon if label_is_object else self.epsilon


@dataclass(frozen=True, eq=False)
class ClassPriorTable:
    """Unit-variance Gaussian center per class id over the latent space."""

    centers: dict[int, np.ndarray]
    _ids: tuple[int, ...] = field(init=False, repr=False)
    _matrix: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.centers:
            raise ValueError("class prior table must contain at least one center")
        clean: dict[int, np.ndarray] = {}
        dim = None
        for label, center in self.centers.items():
            c = np.array(center, dtype=float).reshape(-1)
            if dim is None:
                dim = c.shape[0]
            elif c.shape[0] != dim:
                raise ValueError("all class centers must share one dimension")
            if not np.all(np.isfinite(c)):
                raise ValueError(f"center for class {label} must be finite")
            c.flags.writeable = False
            clean[int(label)] = c
        if len(clean) != len(self.centers):
            raise ValueError("class ids must be unique")
        ids = tuple(sorted(clean))
        matrix = np.stack([clean[i] for i in ids])
        matrix.flags.writeable = False
        object.__setattr__(self, "centers", clean)
        object.__setattr__(self, "_ids", ids)
        object.__setattr__(self, "_matrix", matrix)

    @property
    def dim(self) -> int:
        return self._matrix.shape[1]

    @property
    def ids(self) -> tuple[int, ...]:
        return self._ids

    def center(self, label: int) -> np.ndarray:
        try:
            return self.centers[int(label)]
        except KeyError:
            raise KeyError(f"unknown class id {label}") from None

    def center_matrix(self) -> np.ndarray:
        """Centers stacked in ascending-id order, shape (num_classes, dim)."""
        return self._matrix

    def to_json_dict(self) -> dict:
        return {
            "dim": self.dim,
            "centers": {str(i): self.centers[i].tolist() for i in self._ids},
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ClassPriorTable":
        centers = {int(k): np.asarray(v, dtype=float) for k, v in doc["centers"].items()}
        table = cls(centers)
        if "dim" in doc and int(doc["dim"]) != table.dim:
            raise ValueError(
                f"declared dim {doc['dim']} does not match centers of dim {table.dim}"
            )
        return table


def kl_gaussian_isotropic(q: LatentGaussian, p_mean) -> float:
    """KL(q || N(p_mean, I)) for a diagonal Gaussian q, in closed form.

    0.5 * sum_d [(mu_d - p_d)^2 + sigma_d^2 - 1 - 2 log sigma_d]
    """
    p = np.asarray(p_mean, dtype=float).reshape(-1)
    if p.shape != q.mean.shape:
        raise ValueError(f"dimension mismatch: {q.mean.shape} vs {p.shape}")
    s2 = q.stddev**2
    return float(0.5 * np.sum((q.mean - p) ** 2 + s2 - 1.0 - np.log(s2)))


def kl_gaussian_diagonal(mean_q, var_q, mean_p, var_p) -> float:
    """KL between two diagonal Gaussians given means and variances."""
    mq = np.asarray(mean_q, dtype=float)
    mp = np.asarray(mean_p, dtype=float)
    vq = np.asarray(var_q, dtype=float)
    vp = np.asarray(var_p, dtype=float)
    if np.any(vq <= 0) or np.any(vp <= 0):
        raise ValueError("variances must be strictly positive")
    return float(0.5 * np.sum(vq / vp + (mq - mp) ** 2 / vp - 1.0 + np.log(vp / vq)))


def kl_bernoulli(q_true: float, prior: ObjectnessPrior, label_is_object: bool = True) -> float:
    """KL(Bernoulli(q_true) || p(o | label)), with the 0*log(0) = 0 convention."""
    if not 0.0 <= q_true <= 1.0:
        raise ValueError(f"q_true must be a probability, got {q_true}")
    p = prior.p_true(label_is_object)
    return float(rel_entr(q_true, p) + rel_entr(1.0 - q_true, 1.0 - p))


def encode_angle(v: float, sigma: float = DEFAULT_ANGLE_SIGMA) -> AngleEncoding:
    """Trigonometric moments of z ~ N(v, sigma^2).

    mu_sin   = exp(-sigma^2/2) sin v
    mu_cos   = exp(-sigma^2/2) cos v
    Var[sin] = 1/2 - 1/2 exp(-2 sigma^2) cos 2v - exp(-sigma^2) sin^2 v
    Var[cos] = 1/2 + 1/2 exp(-2 sigma^2) cos 2v - exp(-sigma^2) cos^2 v
    """
    if sigma < 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    shrink = math.exp(-sigma**2 / 2.0)
    damp2 = math.exp(-2.0 * sigma**2)
    sin_v, cos_v = math.sin(v), math.cos(v)
    cos_2v = math.cos(2.0 * v)
    var_sin = 0.5 - 0.5 * damp2 * cos_2v - shrink**2 * sin_v**2
    var_cos = 0.5 + 0.5 * damp2 * cos_2v - shrink**2 * cos_v**2
    return AngleEncoding(
        mu_sin=shrink * sin_v,
        mu_cos=shrink * cos_v,
        sigma_sin=max(0.0, var_sin),
        sigma_cos=max(0.0, var_cos),
    )


def decode_angle(e: AngleEncoding) -> float:
    """Recover the angle from its trigonometric encoding, in (-pi, pi].

    The common shrinkage factor cancels in the ratio, so the decoded angle is
    exact for any sigma.
    """
    if math.hypot(e.mu_sin, e.mu_cos) == 0.0:
        raise ValueError("cannot decode a zero-magnitude angle encoding")
    return float(wrap_angle(math.atan2(e.mu_sin, e.mu_cos)))


def angle_gaussian_logpdf(
    observed: EulerAngles, prior_mean: EulerAngles, sigma: float
) -> float:
    """Sum of per-angle Gaussian log-densities on wrapped residuals."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    residual = wrap_angle(observed.as_array() - prior_mean.as_array())
    return float(
        -1.5 * math.log(2.0 * math.pi * sigma**2) - 0.5 * np.sum(residual**2) / sigma**2
    )


def class_logpdf(table: ClassPriorTable, label: int, z) -> float:
    """log N(z; center(label), I)."""
    center = table.center(label)
    z = np.asarray(z, dtype=float).reshape(-1)
    if z.shape != center.shape:
        raise ValueError(f"latent dimension mismatch: {z.shape} vs {center.shape}")
    return float(-0.5 * center.shape[0] * LOG_TWO_PI - 0.5 * np.sum((z - center) ** 2))
