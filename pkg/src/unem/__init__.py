"""Transductive few-shot classification with unrolled EM-style solvers."""

from .distributions import (
    DegenerateClassError,
    DirichletParams,
    FeatureMapConfig,
    GaussianParams,
    dirichlet_log_pdf,
    dirichlet_mm_update,
    gaussian_log_pdf,
    gaussian_weighted_mean,
    map_features,
)
from .solver import (
    HyperSchedule,
    InitializationError,
    SolverState,
    SolverTrace,
    TaskInstance,
    default_schedule,
    evaluate_objective,
    init_state,
    predict,
    run_gem,
    update_assignments,
    update_pi,
    update_theta,
)
from .tasks import (
    Episode,
    EvalReport,
    FeatureBundle,
    ProtocolConfig,
    SyntheticWorld,
    dirichlet_world,
    gmm_world,
    make_synthetic_bundle,
    sample_task,
    score,
)
from .trainer import (
    GradientRecord,
    NonFiniteIntermediateError,
    TrainConfig,
    TrainReport,
    TrainingDivergedError,
    ablation_modes,
    grad,
    loss,
    train,
)

__all__ = [name for name in dir() if not name.startswith("_")]
