"""Problem description for the residual-augmented optimal control problem.

The discrete-time prediction model is x+ = F(x, u) + B_d g(x, u), where F is
the RK4-discretized nominal field and g an external residual model acting on
the subspace selected by the injection matrix B_d.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .fields import VectorField
from .integrator import DiscretizationConfig

# Singular values below RANK_RTOL * sigma_max count as zero.
RANK_RTOL = 1e-10
# Eigenvalue slack accepted when checking positive semi-definiteness.
PSD_EIG_TOL = 1e-10


class RankDeficientError(ValueError):
    """Raised when B_d does not have full column rank."""


@dataclass(frozen=True)
class StageCost:
    """Nonlinear-least-squares stage cost l(x,u) = 0.5 * y(x,u)' W y(x,u)."""

    residual: Callable[[np.ndarray, np.ndarray], np.ndarray]  # y(x,u) -> (n_y,)
    jac_x: Callable[[np.ndarray, np.ndarray], np.ndarray]     # (n_y, n_x)
    jac_u: Callable[[np.ndarray, np.ndarray], np.ndarray]     # (n_y, n_u)
    weight: np.ndarray                                        # (n_y, n_y)

    def value(self, x, u) -> float:
        y = self.residual(x, u)
        return 0.5 * float(y @ self.weight @ y)


@dataclass(frozen=True)
class TerminalCost:
    """Terminal NLS cost M(x) = 0.5 * y_N(x)' W y_N(x)."""

    residual: Callable[[np.ndarray], np.ndarray]
    jac_x: Callable[[np.ndarray], np.ndarray]
    weight: np.ndarray

    def value(self, x) -> float:
        y = self.residual(x)
        return 0.5 * float(y @ self.weight @ y)


@dataclass(frozen=True)
class Constraint:
    """Scalar stage constraint h(x,u) <= 0.

    Soft constraints receive a nonnegative slack s with penalty
    0.5*slack_quad*s^2 + slack_lin*s. ``prob`` enables probabilistic
    tightening at that satisfaction level.
    """

    name: str
    fn: Callable[[np.ndarray, np.ndarray], float]
    jac_x: Callable[[np.ndarray, np.ndarray], np.ndarray]  # (n_x,)
    jac_u: Callable[[np.ndarray, np.ndarray], np.ndarray]  # (n_u,)
    soft: bool = False
    slack_quad: float = 0.0
    slack_lin: float = 0.0
    prob: float | None = None


@dataclass(frozen=True)
class TerminalConstraint:
    """Scalar terminal constraint h_N(x) <= 0."""

    name: str
    fn: Callable[[np.ndarray], float]
    jac_x: Callable[[np.ndarray], np.ndarray]
    soft: bool = False
    slack_quad: float = 0.0
    slack_lin: float = 0.0
    prob: float | None = None


@dataclass(frozen=True)
class OcpSpec:
    """Full problem description; immutable after construction."""

    N: int
    n_x: int
    n_u: int
    n_g: int
    B_d: np.ndarray                    # (n_x, n_g)
    dynamics: VectorField              # continuous-time nominal field
    discretization: DiscretizationConfig
    stage_cost: StageCost
    terminal_cost: TerminalCost | None = None
    constraints: tuple[Constraint, ...] = ()
    terminal_constraints: tuple[TerminalConstraint, ...] = ()
    u_min: np.ndarray | None = None
    u_max: np.ndarray | None = None
    x_min: np.ndarray | None = None
    x_max: np.ndarray | None = None
    sigma_w: np.ndarray | None = None  # (n_x, n_x) process noise covariance
    # Point at which Jacobian shapes are probed during validation; defaults
    # to the origin, which is outside the domain of e.g. the bicycle field.
    probe_x: np.ndarray | None = None
    probe_u: np.ndarray | None = None

    @property
    def n_soft(self) -> int:
        return sum(1 for c in self.constraints if c.soft)


@dataclass
class Iterate:
    """SQP linearization point: trajectories, multipliers and soft slacks.

    Inequality multipliers are stored per stage (row counts differ at the
    first stage, where the state is fixed and carries no bound rows).
    """

    X: np.ndarray                      # (N+1, n_x)
    U: np.ndarray                      # (N, n_u)
    lam: np.ndarray                    # (N, n_x) dynamics multipliers
    mu: list                           # per stage (m_k,) inequality multipliers
    mu_N: np.ndarray                   # (m_term,) terminal multipliers
    slack: np.ndarray                  # (N, n_soft)
    slack_N: np.ndarray                # (n_soft_term,)

    def copy(self) -> "Iterate":
        return Iterate(self.X.copy(), self.U.copy(), self.lam.copy(),
                       [m.copy() for m in self.mu], self.mu_N.copy(),
                       self.slack.copy(), self.slack_N.copy())


@dataclass(frozen=True)
class Violation:
    code: str
    message: str


def _is_symmetric(M, tol=1e-12):
    return np.allclose(M, M.T, atol=tol * max(1.0, float(np.abs(M).max(initial=0.0))))


def matrix_rank(M, rtol=RANK_RTOL) -> int:
    s = np.linalg.svd(np.atleast_2d(M), compute_uv=False)
    if s.size == 0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def validate_spec(spec: OcpSpec) -> list[Violation]:
    """Check every spec invariant; returns violations as data, never raises."""
    out: list[Violation] = []

    B_d = np.asarray(spec.B_d, dtype=float)
    if B_d.shape != (spec.n_x, spec.n_g):
        out.append(Violation("bd_shape", f"B_d shape {B_d.shape} != ({spec.n_x}, {spec.n_g})"))
    elif matrix_rank(B_d) < spec.n_g:
        out.append(Violation("bd_rank", "B_d rank-deficient"))

    W = np.asarray(spec.stage_cost.weight, dtype=float)
    if not _is_symmetric(W):
        out.append(Violation("cost_weight_sym", "stage cost weight not symmetric"))
    elif np.linalg.eigvalsh(W).min() < -PSD_EIG_TOL:
        out.append(Violation("cost_weight_psd", "stage cost weight not PSD"))
    if spec.terminal_cost is not None:
        WN = np.asarray(spec.terminal_cost.weight, dtype=float)
        if not _is_symmetric(WN):
            out.append(Violation("term_weight_sym", "terminal cost weight not symmetric"))
        elif np.linalg.eigvalsh(WN).min() < -PSD_EIG_TOL:
            out.append(Violation("term_weight_psd", "terminal cost weight not PSD"))

    if spec.sigma_w is not None:
        Sw = np.asarray(spec.sigma_w, dtype=float)
        if Sw.shape != (spec.n_x, spec.n_x):
            out.append(Violation("sigma_w_shape", f"sigma_w shape {Sw.shape}"))
        elif not _is_symmetric(Sw):
            out.append(Violation("sigma_w_sym", "sigma_w not symmetric"))
        elif np.linalg.eigvalsh(Sw).min() < -PSD_EIG_TOL:
            out.append(Violation("sigma_w_psd", "sigma_w not PSD"))

    for c in list(spec.constraints) + list(spec.terminal_constraints):
        if c.prob is not None and not (0.0 < c.prob < 1.0):
            out.append(Violation("prob_range", f"constraint {c.name!r}: p={c.prob} not in (0,1)"))
        if c.soft and c.slack_quad < 0.0:
            out.append(Violation("slack_weight", f"constraint {c.name!r}: negative slack penalty"))

    if spec.dynamics.n_x != spec.n_x or spec.dynamics.n_u != spec.n_u:
        out.append(Violation("field_dims", "vector field dimensions do not match spec"))

    for name, bound, n in (("u_min", spec.u_min, spec.n_u), ("u_max", spec.u_max, spec.n_u),
                           ("x_min", spec.x_min, spec.n_x), ("x_max", spec.x_max, spec.n_x)):
        if bound is not None and np.asarray(bound).shape != (n,):
            out.append(Violation("bound_shape", f"{name} has wrong shape"))

    # Jacobian shape probe at the declared reference point.
    x = spec.probe_x if spec.probe_x is not None else np.zeros(spec.n_x)
    u = spec.probe_u if spec.probe_u is not None else np.zeros(spec.n_u)
    try:
        y = np.atleast_1d(spec.stage_cost.residual(x, u))
        n_y = y.shape[0]
        if np.shape(spec.stage_cost.jac_x(x, u)) != (n_y, spec.n_x):
            out.append(Violation("cost_jac_x_shape", "stage cost jac_x shape mismatch"))
        if np.shape(spec.stage_cost.jac_u(x, u)) != (n_y, spec.n_u):
            out.append(Violation("cost_jac_u_shape", "stage cost jac_u shape mismatch"))
        if W.shape != (n_y, n_y):
            out.append(Violation("cost_weight_shape", "stage cost weight shape mismatch"))
        for c in spec.constraints:
            if np.shape(c.jac_x(x, u)) != (spec.n_x,):
                out.append(Violation("con_jac_x_shape", f"constraint {c.name!r} jac_x shape mismatch"))
            if np.shape(c.jac_u(x, u)) != (spec.n_u,):
                out.append(Violation("con_jac_u_shape", f"constraint {c.name!r} jac_u shape mismatch"))
        for c in spec.terminal_constraints:
            if np.shape(c.jac_x(x)) != (spec.n_x,):
                out.append(Violation("term_con_jac_shape", f"constraint {c.name!r} jac_x shape mismatch"))
    except Exception as exc:  # probe failures are violations, not crashes
        out.append(Violation("probe_failed", f"evaluation at probe point failed: {exc}"))

    return out


def _pinv_full_rank(B_d: np.ndarray) -> np.ndarray:
    B_d = np.atleast_2d(np.asarray(B_d, dtype=float))
    if matrix_rank(B_d) < B_d.shape[1]:
        raise RankDeficientError("B_d is rank-deficient; pseudo-inverse projection undefined")
    return np.linalg.pinv(B_d, rcond=RANK_RTOL)


def project_measurement(x_next, f_val, B_d) -> np.ndarray:
    """Residual target y = pinv(B_d) (x_next - f(x,u)); least-squares projection."""
    diff = np.asarray(x_next, dtype=float) - np.asarray(f_val, dtype=float)
    return _pinv_full_rank(B_d) @ diff


def residual_noise_covariance(sigma_w, B_d) -> np.ndarray:
    """Covariance of the projected noise v = pinv(B_d) w."""
    P = _pinv_full_rank(B_d)
    Sw = np.asarray(sigma_w, dtype=float)
    return P @ Sw @ P.T
