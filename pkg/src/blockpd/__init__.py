"""Randomized block-coordinate primal-dual solver for composite convex
problems whose linear coupling constraints may be inconsistent, plus a
distribution-grid pricing application built on it."""

__version__ = "0.1.0"

from .blocks import (
    BlockStructure,
    ProblemSpec,
    ProxBlock,
    SmoothBlock,
    eval_psi,
    grad_h,
    kkt_residual,
    make_consensus,
    make_model_fitting,
    make_random_inconsistent_ls,
    partial_grad_h,
    penalty_h,
)
from .oracles import Reference, least_squares_reference, quadratic_reference
from .proxops import (
    DiagonalMetric,
    dykstra_project,
    exact_projection_qp,
    project_ball,
    project_box,
    project_energy_budget,
    project_halfspace,
    project_hyperplane,
    weighted_prox,
)
from .sampling import (
    Sampling,
    draw,
    expectation_over_sampling,
    full,
    make_rng,
    nice,
    paired_dso,
    prob_matrix,
    single_coordinate,
    weight_matrix_p,
    weight_vector,
    xi_matrix,
)
from .solver import (
    PdaEngine,
    RbcdEngine,
    RunResult,
    TraceRecord,
    gamma_table,
    lyapunov,
    run,
)
from .stepsize import (
    AcceleratedPolicy,
    ConvexPolicy,
    accel_params,
    certify_mi,
    convex_default_policy,
    make_accelerated_policy,
    mi_margins,
    tau_lower_bound,
    tau_next,
)

__all__ = [name for name in dir() if not name.startswith("_")]
