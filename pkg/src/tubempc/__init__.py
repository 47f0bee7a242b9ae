"""Robust tube-based MPC with ellipsoidal invariant tubes."""

from .bounders import FrobeniusBoundData, compute_frobenius_constants, omega_G, omega_n
from .closedloop import (
    FeedbackLaw,
    ScenarioResult,
    compare_controllers,
    feedback,
    run_ce_baseline,
    run_receding_horizon,
    sample_disturbance,
    simulate_closed_loop,
    simulate_open_loop,
)
from .config import ExperimentConfig
from .ellipsoid import (
    Direction,
    Ellipsoid,
    contains,
    gauss_map,
    inner_control_ellipsoid,
    inverse_gauss_map,
    minkowski_outer,
    pinv_psd,
    sample_directions,
    sqrt_psd,
    support,
)
from .models import (
    ControlAffineModel,
    LinearStateConstraints,
    eval_nonlinearity_remainder,
    make_model,
    register_model,
    spring_mass_damper,
)
from .ocp import (
    SolveReport,
    SolverOptions,
    TerminalSet,
    TubeOCP,
    objective_inertia,
    solve_nominal_ocp,
    solve_terminal_set,
    solve_tube_ocp,
    state_constraint_residuals,
)
from .tube import (
    PolicyParams,
    TubeTrajectory,
    di_residual,
    di_residual_sweep,
    integrate_tube,
    phi_g,
    propagate_openloop,
    tube_rhs,
)

__version__ = "0.1.0"
