"""udfnav: unsigned distance fields from point clouds, metric-modulated
motion policies, and oracle-backed evaluation."""

__version__ = "0.1.0"

from .cloud import (  # noqa: F401
    PointCloud,
    RigidTransform,
    SpatialIndex,
    chamfer,
    icp_align,
    load_cloud,
    nearest_distance,
    normalize,
    save_cloud,
)
from .field import FieldEvaluation, FieldModel, evaluate, init_model, loss_and_param_grads  # noqa: F401
from .policy import PolicyConfig, Trajectory, blow_up, integrate, modulated_velocity  # noqa: F401
from .scenes import CameraView, Scene, exact_distance, sample_surface  # noqa: F401
from .trainer import TrainConfig, load_checkpoint, sample_queries, save_checkpoint, train  # noqa: F401
from .evaluation import (  # noqa: F401
    OracleField,
    collision_audit,
    discrete_frechet,
    normalized_dfd,
    run_experiment,
    shell_starts,
)
