"""quadtune: sampling-based MPC parameter tuning for quadrotor tracking.

The pipeline: generate or import a reference trajectory, split it into
segments by altitude profile, then search for per-segment controller
parameters (four state weights plus the horizon length) with
Metropolis-Hastings sampling over closed-loop simulation rollouts, scored
by penalized lap time. Warm-start regressors predict initial parameters
from segment features; random search, PSO and CMA-ES serve as baselines.
"""

from .dynamics import (
    ControlInput,
    CrashConfig,
    NoiseConfig,
    QuadState,
    VehicleParams,
    clamp_input,
    crashed,
    step,
)
from .evaluation import (
    EvalConfig,
    EvaluationOutcome,
    SimObjective,
    penalized_time,
    rollout,
    score,
    trajectory_completion,
    waypoint_passed,
)
from .mpc import (
    FixedMpcConfig,
    ParamVector,
    SegmentParams,
    SolverState,
    build_cost,
    linearize_dynamics,
    select_segment_params,
    solve_step,
)
from .segmentation import (
    SegmentClass,
    SegmentPlan,
    SegmentationConfig,
    classify_points,
    cluster_segments,
    segment_trajectory,
    split_steep,
)
from .trajectory import (
    ReferenceTrajectory,
    TrackSpec,
    load_reference_csv,
    make_circle_track,
    make_drop_track,
    make_track,
    save_reference_csv,
    spline_reference,
)
from .tuner import TunerConfig, TuneResult, accept, propose, run_chain, tune
from .warmstart import (
    TuningDataset,
    WarmStartModel,
    extract_features,
    fit_gbrt,
    predict_gbrt,
    predict_init,
    select_features_cv,
)
from .baselines import cma_es, pso, random_search, regressor_only

__version__ = "0.1.0"
