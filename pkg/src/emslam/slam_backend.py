"""EM mapping loop: soft association, joint pose/landmark optimization,
closed-form latent updates, and landmark lifecycle.

The expectation step scores every detection against every landmark with the
factorized observation likelihood plus a constant new-landmark column.  The
maximization step runs damped Gauss-Newton over all observer poses (the first
is gauge-fixed) and landmark positions/orientations, with odometry factors
chaining consecutive keyframes.  Landmark latent means have a closed-form
update: the weight-normalized mean of the associated observation latents.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.special import rel_entr
from scipy.stats import chi2

from .data_association import (
    LOG_FLOOR,
    AssociationWeights,
    weights_exact,
    weights_with_null,
)
from .distributions import DEFAULT_LATENT_DIM
from .geometry import (
    EulerAngles,
    Pose,
    euler_rotation_derivatives_batch,
    euler_to_rotation_batch,
    euler_jacobian_batch,
    global_orientation,
    rotation_to_euler,
    rotation_to_euler_batch,
    transform_from_observer_frame,
    wrap_angle,
)
from .observation_model import Landmark, NoiseConfig, Observation

LOG_TWO_PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class OdometryDelta:
    """Measured relative motion from the previous keyframe.

    ``delta.position`` is the displacement expressed in the previous body
    frame; ``delta.orientation`` is the Euler triple of R_t @ R_{t-1}^T.
    """

    delta: Pose
    sigma_pos: float
    sigma_rot: float

    def __post_init__(self):
        if self.sigma_pos <= 0 or self.sigma_rot <= 0:
            raise ValueError("odometry sigmas must be positive")


@dataclass(frozen=True, eq=False)
class KeyframeBundle:
    """Detections of one keyframe plus the odometry link to its predecessor."""

    index: int
    observations: tuple[Observation, ...]
    odometry_to_previous: OdometryDelta | None = None

    def __post_init__(self):
        object.__setattr__(self, "observations", tuple(self.observations))


def default_new_landmark_level(noise: NoiseConfig, latent_dim: int) -> float:
    """New-landmark log-likelihood level scaled to the observation model.

    Sits a few nats below the expected log-likelihood of a correct match
    (density peaks minus the expected quadratic residuals), so confident
    re-observations keep their landmark weight while unexplained detections
    tip over to the null column.  The latent normalization term makes this
    strongly dimension-dependent, hence the default is computed, not fixed.
    """
    peaks = (
        -1.5 * math.log(2.0 * math.pi * noise.sigma_position**2)
        - 0.5 * latent_dim * LOG_TWO_PI
        - 1.5 * math.log(2.0 * math.pi * noise.sigma_angle**2)
    )
    expected_residuals = 1.5 + 0.5 * latent_dim
    return peaks - expected_residuals - 3.0


@dataclass(frozen=True)
class EmConfig:
    """Knobs of the EM loop; defaults match the synthetic benchmark worlds.

    ``new_landmark_log_likelihood = None`` resolves at run time via
    ``default_new_landmark_level`` using the observed latent dimension.
    """

    max_em_iterations: int = 50
    max_gn_iterations: int = 20
    convergence_tol: float = 1e-6
    damping_init: float = 1e-4
    damping_min: float = 1e-10
    damping_max: float = 1e8
    new_landmark_log_likelihood: float | None = None
    spawn_null_weight: float = 0.5
    spawn_min_objectness: float = 0.5
    spawn_position_gate: float = 2.0
    spawn_range_gate_factor: float = 0.2
    spawn_frame_window: int = 3
    prune_min_weight: float = 0.5
    prune_grace_iterations: int = 2
    weight_floor: float = 1e-8
    latent_update_min_weight: float = 1e-6
    association: str = "factorized"
    threads: int = 1
    noise: NoiseConfig = field(default_factory=NoiseConfig)

    def __post_init__(self):
        if self.max_em_iterations < 1 or self.max_gn_iterations < 1:
            raise ValueError("iteration counts must be positive")
        if self.convergence_tol <= 0:
            raise ValueError("convergence_tol must be positive")
        if self.association not in ("factorized", "exact"):
            raise ValueError("association must be 'factorized' or 'exact'")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")


@dataclass
class MapState:
    """Trajectory, landmarks and bookkeeping mutated only inside the EM loop."""

    trajectory: list[Pose]
    landmarks: list[Landmark] = field(default_factory=list)
    em_iterations: int = 0
    objective: float = 0.0
    em_log: list[dict] = field(default_factory=list)
    gn_step_log: list[list[float]] = field(default_factory=list)
    landmark_ages: dict[int, int] = field(default_factory=dict)
    next_landmark_id: int = 0
    solver_flags: list[str] = field(default_factory=list)
    converged: bool = False


def _resolve_null_level(cfg: EmConfig, state: MapState, bundles) -> float:
    if cfg.new_landmark_log_likelihood is not None:
        return cfg.new_landmark_log_likelihood
    if state.landmarks:
        dim = state.landmarks[0].latent_mean.shape[0]
    else:
        dim = DEFAULT_LATENT_DIM
        for bundle in bundles:
            if bundle.observations:
                dim = bundle.observations[0].shape_latent.dim
                break
    return default_new_landmark_level(cfg.noise, dim)


def _sorted_bundles(bundles) -> list[KeyframeBundle]:
    bundles = sorted(bundles, key=lambda b: b.index)
    if not bundles:
        raise ValueError("at least one keyframe bundle is required")
    for t, bundle in enumerate(bundles):
        if bundle.index != t:
            raise ValueError("keyframe indices must be consecutive from 0")
        if t > 0 and bundle.odometry_to_previous is None:
            raise ValueError(f"keyframe {t} is missing its odometry link")
    return bundles


def odometry_chain(bundles) -> list[Pose]:
    """Dead-reckoned trajectory: first pose at the origin, deltas chained."""
    bundles = _sorted_bundles(bundles)
    poses = [Pose.identity()]
    for bundle in bundles[1:]:
        odo = bundle.odometry_to_previous
        prev = poses[-1]
        R_prev = prev.rotation()
        position = prev.position + R_prev.T @ odo.delta.position
        R_curr = odo.delta.rotation() @ R_prev
        poses.append(Pose(position, rotation_to_euler(R_curr)[0]))
    return poses


# ---------------------------------------------------------------------------
# Expectation step
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _BundleArrays:
    positions: np.ndarray  # (K, 3)
    latents: np.ndarray  # (K, D)
    angles: np.ndarray  # (K, 3) decoded
    objectness: np.ndarray  # (K,)


def _bundle_arrays(bundle: KeyframeBundle) -> _BundleArrays:
    K = len(bundle.observations)
    if K == 0:
        return _BundleArrays(
            np.zeros((0, 3)), np.zeros((0, 0)), np.zeros((0, 3)), np.zeros(0)
        )
    positions = np.stack([o.position for o in bundle.observations])
    latents = np.stack([o.shape_latent.mean for o in bundle.observations])
    angles = np.stack([o.decoded_angles().as_array() for o in bundle.observations])
    objectness = np.array([o.objectness for o in bundle.observations])
    return _BundleArrays(positions, latents, angles, objectness)


def _log_likelihood_matrix(
    arrays: _BundleArrays,
    lm_positions: np.ndarray,
    lm_latents: np.ndarray,
    lm_eulers: np.ndarray,
    pose: Pose,
    noise: NoiseConfig,
) -> np.ndarray:
    """Vectorized observation_log_likelihood over one keyframe, floored."""
    K = arrays.positions.shape[0]
    M = lm_positions.shape[0]
    if K == 0 or M == 0:
        return np.zeros((K, M))
    R = pose.rotation()
    local_pos = (lm_positions - pose.position) @ R.T
    d2_pos = np.sum((arrays.positions[:, None, :] - local_pos[None, :, :]) ** 2, axis=2)
    log_pos = -1.5 * np.log(2.0 * np.pi * noise.sigma_position**2) - 0.5 * d2_pos / (
        noise.sigma_position**2
    )

    D = lm_latents.shape[1]
    d2_lat = np.sum((arrays.latents[:, None, :] - lm_latents[None, :, :]) ** 2, axis=2)
    log_lat = -0.5 * D * LOG_TWO_PI - 0.5 * d2_lat

    local_eul = rotation_to_euler_batch(
        np.einsum("mij,kj->mik", euler_to_rotation_batch(lm_eulers), R)
    )
    residual = wrap_angle(arrays.angles[:, None, :] - local_eul[None, :, :])
    log_ang = -1.5 * np.log(2.0 * np.pi * noise.sigma_angle**2) - 0.5 * np.sum(
        residual**2, axis=2
    ) / (noise.sigma_angle**2)

    eps = noise.epsilon_objectness
    q = arrays.objectness
    log_kappa = -(rel_entr(q, 1.0 - eps) + rel_entr(1.0 - q, eps))

    return np.maximum(log_kappa[:, None] + log_pos + log_lat + log_ang, LOG_FLOOR)


def expectation_step(state: MapState, bundles, cfg: EmConfig) -> list[AssociationWeights]:
    """Association weights per keyframe, each K x (M + 1) with a null column."""
    bundles = _sorted_bundles(bundles)
    if len(state.trajectory) < len(bundles):
        raise ValueError("state trajectory does not cover all bundles")
    M = len(state.landmarks)
    if M:
        lm_positions = np.stack([lm.position for lm in state.landmarks])
        lm_latents = np.stack([lm.latent_mean for lm in state.landmarks])
        lm_eulers = np.stack([lm.orientation.as_array() for lm in state.landmarks])
    else:
        lm_positions = np.zeros((0, 3))
        lm_latents = np.zeros((0, 0))
        lm_eulers = np.zeros((0, 3))

    null_level = _resolve_null_level(cfg, state, bundles)

    def one_keyframe(t: int) -> AssociationWeights:
        arrays = _bundle_arrays(bundles[t])
        L = _log_likelihood_matrix(
            arrays, lm_positions, lm_latents, lm_eulers, state.trajectory[t], cfg.noise
        )
        if cfg.association == "exact" and L.shape[0] > 0:
            # Brute-force evaluation of the same unconstrained association
            # space; only viable on small scenes (guarded inside weights_exact).
            null_col = np.full((L.shape[0], 1), max(null_level, LOG_FLOOR))
            return weights_exact(np.hstack([L, null_col]), "unconstrained")
        return weights_with_null(L, null_level)

    indices = range(len(bundles))
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            return list(pool.map(one_keyframe, indices))
    return [one_keyframe(t) for t in indices]


# ---------------------------------------------------------------------------
# Maximization step: damped Gauss-Newton over poses and landmark placements
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _PackedProblem:
    """Fixed data of one maximization: weighted blocks plus odometry factors."""

    n_poses: int
    n_landmarks: int
    obs_t: np.ndarray  # (B,) keyframe index per block
    obs_lm: np.ndarray  # (B,) landmark index per block
    sqrt_w: np.ndarray  # (B,)
    obs_xs: np.ndarray  # (B, 3) measured positions
    obs_angles: np.ndarray  # (B, 3) decoded measured angles
    sigma_pos: float
    sigma_angle: float
    odo_prev: np.ndarray  # (O,) index t-1
    odo_dpos: np.ndarray  # (O, 3)
    odo_dang: np.ndarray  # (O, 3)
    odo_sigma_pos: np.ndarray  # (O,)
    odo_sigma_rot: np.ndarray  # (O,)

    @property
    def n_obs_blocks(self) -> int:
        return self.obs_t.shape[0]

    @property
    def n_odo_blocks(self) -> int:
        return self.odo_prev.shape[0]

    @property
    def n_residuals(self) -> int:
        return 6 * self.n_obs_blocks + 6 * self.n_odo_blocks

    @property
    def n_params(self) -> int:
        return 6 * (self.n_poses - 1) + 6 * self.n_landmarks


def _pack_problem(state: MapState, weights, bundles, cfg: EmConfig) -> _PackedProblem:
    bundles = _sorted_bundles(bundles)
    M = len(state.landmarks)
    obs_t: list[int] = []
    obs_lm: list[int] = []
    ws: list[float] = []
    xs: list[np.ndarray] = []
    angles: list[np.ndarray] = []
    for t, (bundle, W) in enumerate(zip(bundles, weights)):
        if not bundle.observations:
            continue
        arrays = _bundle_arrays(bundle)
        w_lm = W.w[:, :M] if M else np.zeros((len(bundle.observations), 0))
        ks, js = np.nonzero(w_lm > cfg.weight_floor)
        for k, j in zip(ks, js):
            obs_t.append(t)
            obs_lm.append(int(j))
            ws.append(float(w_lm[k, j]))
            xs.append(arrays.positions[k])
            angles.append(arrays.angles[k])
    odo_prev = []
    odo_dpos = []
    odo_dang = []
    odo_sp = []
    odo_sr = []
    for bundle in bundles[1:]:
        odo = bundle.odometry_to_previous
        odo_prev.append(bundle.index - 1)
        odo_dpos.append(odo.delta.position)
        odo_dang.append(odo.delta.orientation.as_array())
        odo_sp.append(odo.sigma_pos)
        odo_sr.append(odo.sigma_rot)
    B = len(obs_t)
    O = len(odo_prev)
    return _PackedProblem(
        n_poses=len(bundles),
        n_landmarks=M,
        obs_t=np.array(obs_t, dtype=int),
        obs_lm=np.array(obs_lm, dtype=int),
        sqrt_w=np.sqrt(np.array(ws)) if B else np.zeros(0),
        obs_xs=np.stack(xs) if B else np.zeros((0, 3)),
        obs_angles=np.stack(angles) if B else np.zeros((0, 3)),
        sigma_pos=cfg.noise.sigma_position,
        sigma_angle=cfg.noise.sigma_angle,
        odo_prev=np.array(odo_prev, dtype=int),
        odo_dpos=np.stack(odo_dpos) if O else np.zeros((0, 3)),
        odo_dang=np.stack(odo_dang) if O else np.zeros((0, 3)),
        odo_sigma_pos=np.array(odo_sp),
        odo_sigma_rot=np.array(odo_sr),
    )


def _pack_params(pose_pos, pose_eul, lm_pos, lm_eul) -> np.ndarray:
    """Stack free parameters: poses 1..T-1 then landmarks, 6 each."""
    parts = []
    if pose_pos.shape[0] > 1:
        parts.append(np.hstack([pose_pos[1:], pose_eul[1:]]).ravel())
    if lm_pos.shape[0] > 0:
        parts.append(np.hstack([lm_pos, lm_eul]).ravel())
    return np.concatenate(parts) if parts else np.zeros(0)


def _unpack_params(x, n_poses, n_landmarks, pose0_pos, pose0_eul):
    n_free = n_poses - 1
    pose_block = x[: 6 * n_free].reshape(n_free, 6)
    lm_block = x[6 * n_free :].reshape(n_landmarks, 6)
    pose_pos = np.vstack([pose0_pos[None, :], pose_block[:, :3]]) if n_free else pose0_pos[None, :]
    pose_eul = np.vstack([pose0_eul[None, :], pose_block[:, 3:]]) if n_free else pose0_eul[None, :]
    return pose_pos, pose_eul, lm_block[:, :3].copy(), lm_block[:, 3:].copy()


def _residuals(problem: _PackedProblem, pose_pos, pose_eul, lm_pos, lm_eul) -> np.ndarray:
    """Scaled residual vector; the objective is 0.5 * ||r||^2."""
    R_pose = euler_to_rotation_batch(pose_eul)
    parts = []
    if problem.n_obs_blocks:
        Rt = R_pose[problem.obs_t]
        d = lm_pos[problem.obs_lm] - pose_pos[problem.obs_t]
        predicted = np.einsum("bij,bj->bi", Rt, d)
        r_pos = (
            problem.sqrt_w[:, None] * (predicted - problem.obs_xs) / problem.sigma_pos
        )
        R_lm = euler_to_rotation_batch(lm_eul)[problem.obs_lm]
        M_rel = np.einsum("bij,bkj->bik", R_lm, Rt)
        local = rotation_to_euler_batch(M_rel)
        r_ang = (
            problem.sqrt_w[:, None]
            * wrap_angle(problem.obs_angles - local)
            / problem.sigma_angle
        )
        parts.extend([r_pos.ravel(), r_ang.ravel()])
    if problem.n_odo_blocks:
        prev = problem.odo_prev
        curr = prev + 1
        Rp = R_pose[prev]
        dp = pose_pos[curr] - pose_pos[prev]
        r_opos = (
            np.einsum("bij,bj->bi", Rp, dp) - problem.odo_dpos
        ) / problem.odo_sigma_pos[:, None]
        M_rel = np.einsum("bij,bkj->bik", R_pose[curr], Rp)
        r_orot = wrap_angle(rotation_to_euler_batch(M_rel) - problem.odo_dang) / (
            problem.odo_sigma_rot[:, None]
        )
        parts.extend([r_opos.ravel(), r_orot.ravel()])
    return np.concatenate(parts) if parts else np.zeros(0)


def _jacobian(problem: _PackedProblem, pose_pos, pose_eul, lm_pos, lm_eul) -> sp.csr_matrix:
    """Analytic Jacobian of ``_residuals`` w.r.t. the free parameter vector."""
    T, M = problem.n_poses, problem.n_landmarks
    R_pose, dR_pose = euler_rotation_derivatives_batch(pose_eul)
    data: list[np.ndarray] = []
    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []

    def scatter(block, row_base, col_base, keep=None):
        # block: (B, 3, C) residual-row by parameter-column entries.
        b, _, c = block.shape
        r = row_base[:, None, None] + np.arange(3)[None, :, None]
        r = np.broadcast_to(r, block.shape)
        kcol = col_base[:, None, None] + np.arange(c)[None, None, :]
        kcol = np.broadcast_to(kcol, block.shape)
        if keep is not None:
            block, r, kcol = block[keep], r[keep], kcol[keep]
        data.append(np.ascontiguousarray(block).ravel())
        rows.append(np.ascontiguousarray(r).ravel())
        cols.append(np.ascontiguousarray(kcol).ravel())

    pose_col = 6 * (problem.obs_t - 1)  # valid only where obs_t > 0
    lm_col = 6 * (T - 1) + 6 * problem.obs_lm

    B = problem.n_obs_blocks
    if B:
        Rt = R_pose[problem.obs_t]
        dRt = dR_pose[problem.obs_t]
        R_lm_all, dR_lm_all = euler_rotation_derivatives_batch(lm_eul)
        R_lm = R_lm_all[problem.obs_lm]
        dR_lm = dR_lm_all[problem.obs_lm]
        d = lm_pos[problem.obs_lm] - pose_pos[problem.obs_t]
        sw = problem.sqrt_w[:, None, None]
        movable = problem.obs_t > 0
        row_pos = 3 * np.arange(B)
        row_ang = 3 * B + 3 * np.arange(B)

        scale_pos = sw / problem.sigma_pos
        scatter(scale_pos * Rt, row_pos, lm_col)
        scatter(-scale_pos * Rt, row_pos, pose_col, keep=movable)
        d_pred_dvt = np.einsum("bpij,bj->bip", dRt, d)
        scatter(scale_pos * d_pred_dvt, row_pos, pose_col + 3, keep=movable)

        M_rel = np.einsum("bij,bkj->bik", R_lm, Rt)
        G = euler_jacobian_batch(M_rel)
        dM_dlm = np.einsum("bpij,bkj->bpik", dR_lm, Rt)
        dM_dvt = np.einsum("bij,bpkj->bpik", R_lm, dRt)
        dE_dlm = np.einsum("bqij,bpij->bqp", G, dM_dlm)
        dE_dvt = np.einsum("bqij,bpij->bqp", G, dM_dvt)
        scale_ang = sw / problem.sigma_angle
        scatter(-scale_ang * dE_dlm, row_ang, lm_col + 3)
        scatter(-scale_ang * dE_dvt, row_ang, pose_col + 3, keep=movable)

    O = problem.n_odo_blocks
    if O:
        prev = problem.odo_prev
        curr = prev + 1
        Rp = R_pose[prev]
        dRp = dR_pose[prev]
        Rc = R_pose[curr]
        dRc = dR_pose[curr]
        dp = pose_pos[curr] - pose_pos[prev]
        prev_col = 6 * (prev - 1)
        curr_col = 6 * (curr - 1)
        prev_movable = prev > 0
        row_op = 6 * B + 3 * np.arange(O)
        row_or = 6 * B + 3 * O + 3 * np.arange(O)
        sp_scale = 1.0 / problem.odo_sigma_pos[:, None, None]
        sr_scale = 1.0 / problem.odo_sigma_rot[:, None, None]

        scatter(sp_scale * Rp, row_op, curr_col)
        scatter(-sp_scale * Rp, row_op, prev_col, keep=prev_movable)
        d_pred_dvp = np.einsum("bpij,bj->bip", dRp, dp)
        scatter(sp_scale * d_pred_dvp, row_op, prev_col + 3, keep=prev_movable)

        M_rel = np.einsum("bij,bkj->bik", Rc, Rp)
        G = euler_jacobian_batch(M_rel)
        dM_dvc = np.einsum("bpij,bkj->bpik", dRc, Rp)
        dM_dvp = np.einsum("bij,bpkj->bpik", Rc, dRp)
        dE_dvc = np.einsum("bqij,bpij->bqp", G, dM_dvc)
        dE_dvp = np.einsum("bqij,bpij->bqp", G, dM_dvp)
        scatter(sr_scale * dE_dvc, row_or, curr_col + 3)
        scatter(sr_scale * dE_dvp, row_or, prev_col + 3, keep=prev_movable)

    if not data:
        return sp.csr_matrix((problem.n_residuals, problem.n_params))
    return sp.csr_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(problem.n_residuals, problem.n_params),
    )


def _objective(problem, pose_pos, pose_eul, lm_pos, lm_eul) -> float:
    r = _residuals(problem, pose_pos, pose_eul, lm_pos, lm_eul)
    return float(0.5 * r @ r)


def maximize_poses(state: MapState, weights, bundles, cfg: EmConfig) -> MapState:
    """Damped Gauss-Newton on the weighted negative log-likelihood.

    The objective is non-increasing across accepted steps by construction;
    the accepted objective sequence of this call is appended to
    ``state.gn_step_log``.  The first pose stays gauge-fixed.
    """
    problem = _pack_problem(state, weights, bundles, cfg)
    pose_pos = np.stack([p.position for p in state.trajectory[: problem.n_poses]])
    pose_eul = np.stack(
        [p.orientation.as_array() for p in state.trajectory[: problem.n_poses]]
    )
    if problem.n_landmarks:
        lm_pos = np.stack([lm.position for lm in state.landmarks])
        lm_eul = np.stack([lm.orientation.as_array() for lm in state.landmarks])
    else:
        lm_pos = np.zeros((0, 3))
        lm_eul = np.zeros((0, 3))

    x = _pack_params(pose_pos, pose_eul, lm_pos, lm_eul)
    pose0_pos, pose0_eul = pose_pos[0], pose_eul[0]

    def unpack(v):
        return _unpack_params(v, problem.n_poses, problem.n_landmarks, pose0_pos, pose0_eul)

    objective = _objective(problem, *unpack(x))
    accepted = [objective]
    state.gn_step_log.append(accepted)

    if x.size and problem.n_residuals:
        lam = cfg.damping_init
        for _ in range(cfg.max_gn_iterations):
            arrays = unpack(x)
            r = _residuals(problem, *arrays)
            J = _jacobian(problem, *arrays)
            g = J.T @ r
            if np.max(np.abs(g), initial=0.0) < 1e-12:
                break
            H = (J.T @ J).toarray()
            diag = np.maximum(H.diagonal(), 1e-12)
            step_taken = False
            while lam <= cfg.damping_max:
                H_damped = H + lam * np.diag(diag)
                try:
                    delta = np.linalg.solve(H_damped, -g)
                except np.linalg.LinAlgError:
                    lam *= 10.0
                    continue
                x_new = x + delta
                objective_new = _objective(problem, *unpack(x_new))
                if objective_new < objective:
                    x = x_new
                    improvement = objective - objective_new
                    objective = objective_new
                    accepted.append(objective)
                    lam = max(lam / 3.0, cfg.damping_min)
                    step_taken = True
                    break
                lam *= 10.0
            if not step_taken:
                break
            if improvement <= 1e-12 + 1e-9 * abs(objective):
                break
        else:
            state.solver_flags.append(f"gn_max_iterations_at_em{state.em_iterations}")

    pose_pos, pose_eul, lm_pos, lm_eul = unpack(x)
    trajectory = [
        Pose(pose_pos[t], EulerAngles.from_array(pose_eul[t]))
        for t in range(problem.n_poses)
    ]
    trajectory.extend(state.trajectory[problem.n_poses :])
    state.trajectory = trajectory
    state.landmarks = [
        replace(
            lm,
            position=lm_pos[m],
            orientation=EulerAngles.from_array(lm_eul[m]),
        )
        for m, lm in enumerate(state.landmarks)
    ]
    state.objective = objective
    return state


# ---------------------------------------------------------------------------
# Closed-form latent update and landmark lifecycle
# ---------------------------------------------------------------------------


def update_landmark_latents(
    state: MapState, weights, bundles, min_weight: float = 1e-6
) -> MapState:
    """Set each landmark latent to the weight-normalized mean of its
    associated observation latents; record the accumulated weight mass.

    Landmarks whose total weight falls below ``min_weight`` keep their latent.
    """
    M = len(state.landmarks)
    if M == 0:
        return state
    D = state.landmarks[0].latent_mean.shape[0]
    numerator = np.zeros((M, D))
    mass = np.zeros(M)
    for bundle, W in zip(_sorted_bundles(bundles), weights):
        if not bundle.observations:
            continue
        w = W.w[:, :M]
        latents = np.stack([o.shape_latent.mean for o in bundle.observations])
        mass += w.sum(axis=0)
        numerator += w.T @ latents
    updated = []
    for j, lm in enumerate(state.landmarks):
        if mass[j] >= min_weight:
            updated.append(
                replace(lm, latent_mean=numerator[j] / mass[j], weight_mass=float(mass[j]))
            )
        else:
            updated.append(replace(lm, weight_mass=float(mass[j])))
    state.landmarks = updated
    return state


def _looks_like_reobservation(obs: Observation, world_position, lm: Landmark, cfg: EmConfig) -> bool:
    """Re-observation gate used to veto duplicate spawns.

    Position must fall inside a range-scaled radius and the latent must lie
    in the re-draw ellipsoid of the landmark latent.  The radius grows with
    observation range because residual heading drift displaces back-projected
    points proportionally to range; a genuinely distinct same-class neighbor
    blocked at long range still spawns once it is sighted from nearby.  A
    fresh landmark latent is itself a single unit-variance draw, so the
    latent difference has variance 2 per axis; gating at the 0.9999
    chi-square quantile keeps genuine re-observations from fragmenting into
    duplicates while latents a class apart stay far outside the gate.
    """
    gate = cfg.spawn_position_gate + cfg.spawn_range_gate_factor * float(
        np.linalg.norm(obs.position)
    )
    if np.linalg.norm(world_position - lm.position) > gate:
        return False
    dim = lm.latent_mean.shape[0]
    d2 = float(np.sum((obs.shape_latent.mean - lm.latent_mean) ** 2))
    return d2 <= 2.0 * chi2.ppf(0.9999, dim)


def _anchored_frames(state: MapState, weights, n_frames: int) -> np.ndarray:
    """Frames holding at least one detection strongly explained by the map."""
    anchored = np.zeros(n_frames, dtype=bool)
    M = len(state.landmarks)
    for t, W in enumerate(weights):
        if M and W.w.shape[0] and float(W.w[:, :M].max()) > 0.5:
            anchored[t] = True
    if not anchored.any():
        anchored[0] = True  # empty map: seed at the gauge frame
    return anchored


def spawn_and_prune_landmarks(state: MapState, weights, bundles, cfg: EmConfig) -> MapState:
    """Spawn landmarks from unexplained confident detections; prune dead ones.

    A detection spawns only when its null-column weight and objectness both
    clear their gates and no landmark (existing or spawned earlier in this
    pass) passes the re-observation gate for it.  Spawning is further limited
    to frames within ``spawn_frame_window`` of a map-anchored frame, so the
    map grows outward from pose-corrected territory instead of minting
    duplicates from drifted loop-closure frames; when that windowed pass
    yields nothing, a final unrestricted pass picks up detections in frames
    the anchor wave cannot reach.
    """
    bundles = _sorted_bundles(bundles)
    for lm_id in state.landmark_ages:
        state.landmark_ages[lm_id] += 1

    anchored = _anchored_frames(state, weights, len(bundles))
    window = cfg.spawn_frame_window
    allowed = np.zeros(len(bundles), dtype=bool)
    for t in range(len(bundles)):
        lo = max(0, t - window)
        allowed[t] = anchored[lo : t + window + 1].any()

    def spawn_pass(frame_filter) -> list[Landmark]:
        spawned: list[Landmark] = []
        for t, (bundle, W) in enumerate(zip(bundles, weights)):
            if not frame_filter[t] or not bundle.observations:
                continue
            null_w = W.w[:, -1]
            pose = state.trajectory[t]
            for k, obs in enumerate(bundle.observations):
                if null_w[k] <= cfg.spawn_null_weight:
                    continue
                if obs.objectness <= cfg.spawn_min_objectness:
                    continue
                world_position = transform_from_observer_frame(obs.position, pose)
                if any(
                    _looks_like_reobservation(obs, world_position, lm, cfg)
                    for lm in state.landmarks + new_landmarks + spawned
                ):
                    continue
                spawned.append(
                    Landmark(
                        id=state.next_landmark_id,
                        latent_mean=obs.shape_latent.mean,
                        position=world_position,
                        orientation=global_orientation(
                            obs.decoded_angles(), pose.orientation
                        ),
                    )
                )
                state.next_landmark_id += 1
                state.landmark_ages[spawned[-1].id] = 0
        return spawned

    new_landmarks: list[Landmark] = []
    new_landmarks = spawn_pass(allowed)
    if not new_landmarks and not allowed.all():
        new_landmarks = spawn_pass(~allowed)

    kept = []
    for lm in state.landmarks:
        age = state.landmark_ages.get(lm.id, 0)
        if age >= cfg.prune_grace_iterations and lm.weight_mass < cfg.prune_min_weight:
            state.landmark_ages.pop(lm.id, None)
        else:
            kept.append(lm)

    # Collapse converged duplicates: drift can seed a second copy of a
    # landmark meters away, and once the poses are corrected the copies end
    # up side by side splitting the association mass forever.  Whenever two
    # landmarks sit inside each other's re-observation gate (base radius,
    # matching latents), the lighter copy is dropped; its detections flow to
    # the survivor at the next expectation step.
    survivors: list[Landmark] = []
    for lm in sorted(kept, key=lambda l: (-l.weight_mass, l.id)):
        duplicate = False
        for other in survivors:
            if (
                np.linalg.norm(lm.position - other.position) <= cfg.spawn_position_gate
                and float(np.sum((lm.latent_mean - other.latent_mean) ** 2))
                <= 2.0 * chi2.ppf(0.9999, lm.latent_mean.shape[0])
            ):
                duplicate = True
                break
        if duplicate:
            state.landmark_ages.pop(lm.id, None)
        else:
            survivors.append(lm)
    survivors.sort(key=lambda l: l.id)

    state.landmarks = survivors + new_landmarks
    return state


def run_em(bundles, cfg: EmConfig) -> MapState:
    """Full loop: odometry initialization, then E / M / latent / lifecycle
    rounds until the objective settles or the iteration cap is reached."""
    bundles = _sorted_bundles(bundles)
    state = MapState(trajectory=odometry_chain(bundles))
    previous_objective = None
    for iteration in range(cfg.max_em_iterations):
        start = time.perf_counter()
        weights = expectation_step(state, bundles, cfg)
        maximize_poses(state, weights, bundles, cfg)
        update_landmark_latents(
            state, weights, bundles, min_weight=cfg.latent_update_min_weight
        )
        ids_before = {lm.id for lm in state.landmarks}
        spawn_and_prune_landmarks(state, weights, bundles, cfg)
        ids_after = {lm.id for lm in state.landmarks}
        membership_changed = ids_before != ids_after
        state.em_iterations = iteration + 1
        state.em_log.append(
            {
                "iter": iteration,
                "objective": state.objective,
                "num_landmarks": len(state.landmarks),
                "wall_ms": (time.perf_counter() - start) * 1000.0,
            }
        )
        if previous_objective is not None and not membership_changed:
            if abs(previous_objective - state.objective) <= cfg.convergence_tol * max(
                1.0, abs(previous_objective)
            ):
                state.converged = True
                break
        previous_objective = None if membership_changed else state.objective
    return state
