"""Robust contraction-based model predictive control.

Constraint tightening for component-wise Lipschitz plants, grid-based
contraction certification, terminal-set verification, a two-stage MPC
controller, and closed-loop Monte-Carlo simulation, with two benchmark
plants included.
"""

__version__ = "0.1.0"

from .boxes import (
    Box,
    Ellipsoid,
    max_quadratic_on_box,
    max_sublevel_in_box,
    pontryagin_diff,
)
from .contraction import (
    ContractionCertificate,
    GridSpec,
    build_certificate,
    check_sublevel_containment,
    default_grid,
    estimate_gamma,
    load_certificate,
    save_certificate,
    select_min_horizon,
)
from .controller import (
    ControllerConfig,
    ControllerState,
    StepDiagnostics,
    init_theta,
    min_xi,
    solve_enumerated,
    solve_two_stage,
    stability_weight_bound,
    stage_cost_bound,
    update_theta,
    verify_lemma1_identity,
)
from .estimators import ContractionCertifier, RobustContractionMPC
from .ocp import OcpSolution, ProblemStack, SolverBudget, solve_stack
from .plants import (
    PlantModel,
    audit_lipschitz,
    make_deadbeat_toy,
    make_nonholonomic,
    make_quadruple_tank,
    plant_from_config,
    plant_to_config,
)
from .presets import PRESET_NAMES, get_preset
from .sim import (
    BatchReport,
    SimTrace,
    read_trace_csv,
    run_batch,
    run_closed_loop,
    save_report,
    verify_trace,
    write_trace_csv,
)
from .terminal import (
    TerminalIngredients,
    bisect_beta,
    linearize,
    robust_invariance_report,
    verify_lmi,
    verify_robust_invariance,
)
from .tightening import (
    TighteningSequences,
    compute_tightening,
    max_feasible_horizon,
    tightened_state_box,
    write_tightening_csv,
)

__all__ = [
    "__version__",
    "Box",
    "Ellipsoid",
    "max_quadratic_on_box",
    "max_sublevel_in_box",
    "pontryagin_diff",
    "ContractionCertificate",
    "GridSpec",
    "build_certificate",
    "check_sublevel_containment",
    "default_grid",
    "estimate_gamma",
    "load_certificate",
    "save_certificate",
    "select_min_horizon",
    "ControllerConfig",
    "ControllerState",
    "StepDiagnostics",
    "init_theta",
    "min_xi",
    "solve_enumerated",
    "solve_two_stage",
    "stability_weight_bound",
    "stage_cost_bound",
    "update_theta",
    "verify_lemma1_identity",
    "ContractionCertifier",
    "RobustContractionMPC",
    "OcpSolution",
    "ProblemStack",
    "SolverBudget",
    "solve_stack",
    "PlantModel",
    "audit_lipschitz",
    "make_deadbeat_toy",
    "make_nonholonomic",
    "make_quadruple_tank",
    "plant_from_config",
    "plant_to_config",
    "PRESET_NAMES",
    "get_preset",
    "BatchReport",
    "SimTrace",
    "read_trace_csv",
    "run_batch",
    "run_closed_loop",
    "save_report",
    "verify_trace",
    "write_trace_csv",
    "TerminalIngredients",
    "bisect_beta",
    "linearize",
    "robust_invariance_report",
    "verify_lmi",
    "verify_robust_invariance",
    "TighteningSequences",
    "compute_tightening",
    "max_feasible_horizon",
    "tightened_state_box",
    "write_tightening_csv",
]
