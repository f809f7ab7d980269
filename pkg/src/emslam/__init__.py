"""EM SLAM with a closed-form variational multi-object observation model."""

from .data_association import (
    AssociationWeights,
    weights_exact,
    weights_factorized,
    weights_with_null,
)
from .distributions import (
    DEFAULT_ANGLE_SIGMA,
    DEFAULT_LATENT_DIM,
    AngleEncoding,
    ClassPriorTable,
    LatentGaussian,
    ObjectnessPrior,
    angle_gaussian_logpdf,
    class_logpdf,
    decode_angle,
    encode_angle,
    kl_bernoulli,
    kl_gaussian_diagonal,
    kl_gaussian_isotropic,
)
from .evaluation import (
    TrajectoryPair,
    ate,
    classification_accuracy,
    geodesic_rotation_distance,
    rpe,
    umeyama_alignment,
    viewpoint_metrics,
)
from .geometry import (
    EulerAngles,
    Pose,
    euler_to_rotation,
    global_orientation,
    is_rotation_matrix,
    local_orientation,
    rotation_to_euler,
    transform_from_observer_frame,
    transform_to_observer_frame,
    wrap_angle,
)
from .observation_model import (
    Landmark,
    NoiseConfig,
    Observation,
    elbo_kl_components,
    kappa_objectness,
    mle_label,
    mle_pose,
    observation_log_likelihood,
)
from .simulator import (
    CLUTTER_LABEL,
    GroundTruth,
    TrueLandmark,
    WorldSpec,
    generate_observations,
    generate_world,
)
from .slam_backend import (
    EmConfig,
    KeyframeBundle,
    MapState,
    OdometryDelta,
    default_new_landmark_level,
    expectation_step,
    maximize_poses,
    odometry_chain,
    run_em,
    spawn_and_prune_landmarks,
    update_landmark_latents,
)

__version__ = "0.1.0"
