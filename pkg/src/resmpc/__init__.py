"""Residual-model MPC: SQP/RTI solver with batch-evaluated sensitivities,
covariance-based constraint tightening and a closed-loop benchmark harness."""

from .fields import VectorField, make_field, register_field
from .gp import (GpDataset, GpModel, GpResidual, KernelConfig, fit_exact,
                 fit_sor, predict, update_online)
from .integrator import (DiscretizationConfig, IntegrationError,
                         StageSensitivity, rk4_step, rk4_with_sensitivities)
from .ocp import (Constraint, Iterate, OcpSpec, StageCost, TerminalConstraint,
                  TerminalCost, project_measurement,
                  residual_noise_covariance, validate_spec)
from .qp import QpSolution, QpSolveError, QpSubproblem, solve_qp
from .residual import (AffineStageDynamics, LinearizationBatch, MlpResidual,
                       ResidualEvaluationError, ResidualModel, ZeroResidual,
                       assemble_affine, evaluate_batch, load_mlp_weights,
                       save_mlp_weights)
from .sqp import (KktResiduals, PreparedStep, SolverOptions, SolveStats,
                  build_qp, cold_start, kkt_residuals, rti_feedback,
                  rti_prepare, shift_iterate, sqp_solve, total_cost)
from .zoro import (CovarianceSchedule, gamma_from_prob, propagate, tighten,
                   verify_feasibility, zero_schedule, zoro_step)

__version__ = "0.1.0"
