"""Trajectory inference from snapshots with Schrödinger bridges and iterative
reference refinement."""

from .bridge import RegressorConfig, drift_regression, forward_backward_sb, multi_marginal_sb
from .datagen import GeneratorSpec, generate, split_train_val
from .errors import (
    DivergedFit,
    InvalidParameterError,
    ProtocolError,
    RegressionError,
    SBIRRError,
    SchemaError,
    SimulationDiverged,
)
from .families import ParamVector, eval_drift, fit_mle, get_family, second_projection_loss
from .metrics import emd, mmd_sq
from .refinement import IRRConfig, RefinementState, impute_trajectories, run_irr
from .sde import (
    PiecewiseDrift,
    Snapshot,
    SnapshotDataset,
    TimeGrid,
    Trajectory,
    concat_full_trajectory,
    empirical_kl,
    gaussian_step_loglik,
    path_loglik,
    rng_stream,
    simulate_backward,
    simulate_forward,
)

__version__ = "0.1.0"
