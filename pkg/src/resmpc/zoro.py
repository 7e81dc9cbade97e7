"""Zero-order covariance propagation and chance-constraint tightening.

Between SQP iterations, state covariances are rolled forward along the
current iterate and every probabilistic constraint is tightened by
gamma * sqrt(C Sigma C'); the tightenings enter the next QP as constants,
their Jacobians deliberately neglected.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .integrator import StageSensitivity
from .ocp import Iterate, OcpSpec
from .residual import ResidualEvaluation


@dataclass(frozen=True)
class CovarianceSchedule:
    """Propagated covariances and fixed tightenings for one zoRO iteration."""

    sigmas: np.ndarray        # (N+1, n_x, n_x), sigmas[0] = 0
    beta: np.ndarray          # (N, n_con) per-stage tightenings (0 where not probabilistic)
    beta_N: np.ndarray        # (n_con_term,)
    clamped: int = 0          # negative radicands clamped to zero


@dataclass(frozen=True)
class TighteningConfig:
    """Satisfaction probabilities with cached inverse-CDF backoff factors."""

    probs: tuple[float, ...]
    gammas: tuple[float, ...] = field(default=())

    def __post_init__(self):
        if not self.gammas:
            object.__setattr__(self, "gammas",
                               tuple(gamma_from_prob(p) for p in self.probs))


def _std_normal_cdf(g: float) -> float:
    return 0.5 * (1.0 + math.erf(g / math.sqrt(2.0)))


def gamma_from_prob(p: float, tol: float = 1e-12) -> float:
    """Solve Phi(gamma) = p by Newton on the erf-based CDF (bisection fallback)."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {p}")
    g = 0.0
    for _ in range(60):
        err = _std_normal_cdf(g) - p
        if abs(err) <= tol:
            return g
        pdf = math.exp(-0.5 * g * g) / math.sqrt(2.0 * math.pi)
        if pdf < 1e-300:
            break
        g -= err / pdf
    # bisection fallback for extreme probabilities
    lo, hi = -40.0, 40.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _std_normal_cdf(mid) < p:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


def propagate(spec: OcpSpec, A_list, gp_cov) -> np.ndarray:
    """Forward covariance recursion Sigma+ = A Sigma A' + B_d S_g B_d' + Sigma_w.

    ``A_list``: per-stage Jacobians of the full (nominal + residual mean)
    dynamics; ``gp_cov``: per-stage residual covariance, or None for zero.
    Each step is symmetrized to suppress drift. Returns (N+1, n_x, n_x)
    with the zero initial covariance in front.
    """
    N = spec.N
    n_x = spec.n_x
    B_d = np.asarray(spec.B_d, dtype=float)
    sigma_w = (np.zeros((n_x, n_x)) if spec.sigma_w is None
               else np.asarray(spec.sigma_w, dtype=float))
    sigmas = np.zeros((N + 1, n_x, n_x))
    for k in range(N):
        A = np.asarray(A_list[k], dtype=float)
        S = A @ sigmas[k] @ A.T + sigma_w
        if gp_cov is not None:
            S = S + B_d @ np.asarray(gp_cov[k], dtype=float) @ B_d.T
        S = 0.5 * (S + S.T)
        if not np.all(np.isfinite(S)):
            raise FloatingPointError(f"non-finite covariance at stage {k + 1}")
        sigmas[k + 1] = S
    return sigmas


def tighten(C_rows: np.ndarray, sigma: np.ndarray, gammas: np.ndarray):
    """beta_j = gamma_j sqrt(max(C_j Sigma C_j', 0)) for each constraint row."""
    C = np.atleast_2d(np.asarray(C_rows, dtype=float))
    rad = np.einsum("ji,ik,jk->j", C, sigma, C)
    clamped = int(np.sum(rad < 0.0))
    beta = np.asarray(gammas, dtype=float) * np.sqrt(np.maximum(rad, 0.0))
    return beta, clamped


def zoro_step(spec: OcpSpec, iterate: Iterate,
              nominal: list[StageSensitivity],
              residual: ResidualEvaluation) -> CovarianceSchedule:
    """Propagate covariances along the iterate and tighten all probabilistic rows."""
    N = spec.N
    B_d = np.asarray(spec.B_d, dtype=float)
    A_list = [nominal[k].A + B_d @ residual.jac_x[k] for k in range(N)]
    sigmas = propagate(spec, A_list, residual.cov)

    n_con = len(spec.constraints)
    beta = np.zeros((N, n_con))
    clamped = 0
    prob_idx = [j for j, c in enumerate(spec.constraints) if c.prob is not None]
    if prob_idx:
        gammas = np.array([gamma_from_prob(spec.constraints[j].prob) for j in prob_idx])
        for k in range(N):
            if k == 0:
                continue  # sigma_0 = 0, first-stage constraints untightened
            C = np.stack([spec.constraints[j].jac_x(iterate.X[k], iterate.U[k])
                          for j in prob_idx])
            b, cl = tighten(C, sigmas[k], gammas)
            beta[k, prob_idx] = b
            clamped += cl

    term_idx = [j for j, c in enumerate(spec.terminal_constraints) if c.prob is not None]
    beta_N = np.zeros(len(spec.terminal_constraints))
    if term_idx:
        gammas = np.array([gamma_from_prob(spec.terminal_constraints[j].prob)
                           for j in term_idx])
        C = np.stack([spec.terminal_constraints[j].jac_x(iterate.X[N])
                      for j in term_idx])
        b, cl = tighten(C, sigmas[N], gammas)
        beta_N[term_idx] = b
        clamped += cl

    return CovarianceSchedule(sigmas=sigmas, beta=beta, beta_N=beta_N,
                              clamped=clamped)


def zero_schedule(spec: OcpSpec) -> CovarianceSchedule:
    """All-zero schedule: the reduced OCP coincides with the nominal OCP."""
    return CovarianceSchedule(
        sigmas=np.zeros((spec.N + 1, spec.n_x, spec.n_x)),
        beta=np.zeros((spec.N, len(spec.constraints))),
        beta_N=np.zeros(len(spec.terminal_constraints)),
    )


@dataclass(frozen=True)
class FeasibilityReport:
    violations: tuple[str, ...]
    max_defect: float
    max_constraint: float
    beta_change: float

    @property
    def feasible(self) -> bool:
        return not self.violations


def verify_feasibility(spec: OcpSpec, iterate: Iterate,
                       schedule: CovarianceSchedule,
                       model=None, tol: float = 1e-4) -> FeasibilityReport:
    """Recompute the schedule at the iterate and check the tightened OCP.

    Checks dynamics defects, hard tightened constraints and, for soft
    constraints, consistency with the stored slacks. A converged zoRO
    solution passes with zero violations and a beta change below tol.
    """
    from .integrator import rk4_with_sensitivities
    from .residual import LinearizationBatch, ZeroResidual, evaluate_batch

    N = spec.N
    model = model if model is not None else ZeroResidual(spec.n_g)
    batch = LinearizationBatch(X=iterate.X[:N], U=iterate.U)
    nominal = [rk4_with_sensitivities(spec.dynamics, iterate.X[k], iterate.U[k],
                                      spec.discretization) for k in range(N)]
    res = evaluate_batch(model, batch)
    fresh = zoro_step(spec, iterate, nominal, res)

    beta_change = max(
        float(np.max(np.abs(fresh.beta - schedule.beta), initial=0.0)),
        float(np.max(np.abs(fresh.beta_N - schedule.beta_N), initial=0.0)),
    )

    violations = []
    max_defect = 0.0
    B_d = np.asarray(spec.B_d, dtype=float)
    for k in range(N):
        pred = nominal[k].x_next + B_d @ res.values[k]
        defect = float(np.max(np.abs(pred - iterate.X[k + 1])))
        max_defect = max(max_defect, defect)
        if defect > tol:
            violations.append(f"dynamics defect {defect:.3e} at stage {k}")

    max_con = -np.inf
    for k in range(N):
        soft_i = 0
        for j, con in enumerate(spec.constraints):
            h = con.fn(iterate.X[k], iterate.U[k]) + fresh.beta[k, j]
            if con.soft:
                h -= iterate.slack[k, soft_i]
                soft_i += 1
            max_con = max(max_con, h)
            if h > tol:
                violations.append(
                    f"constraint {con.name!r} violated by {h:.3e} at stage {k}")
    soft_i = 0
    for j, con in enumerate(spec.terminal_constraints):
        h = con.fn(iterate.X[N]) + fresh.beta_N[j]
        if con.soft:
            h -= iterate.slack_N[soft_i]
            soft_i += 1
        max_con = max(max_con, h)
        if h > tol:
            violations.append(f"terminal constraint {con.name!r} violated by {h:.3e}")

    return FeasibilityReport(violations=tuple(violations),
                             max_defect=max_defect,
                             max_constraint=float(max_con),
                             beta_change=beta_change)


def dump_schedule(schedule: CovarianceSchedule, pairs, path) -> None:
    """JSON dump of per-stage covariances projected onto output pairs.

    ``pairs`` is a list of (i, j) state-index pairs; each stage records the
    2x2 covariance block usable as confidence-ellipse data.
    """
    records = []
    for k, S in enumerate(schedule.sigmas):
        entry = {"stage": k}
        for (i, j) in pairs:
            entry[f"cov_{i}_{j}"] = [[S[i, i], S[i, j]], [S[j, i], S[j, j]]]
        records.append(entry)
    payload = {
        "stages": records,
        "beta": schedule.beta.tolist(),
        "beta_terminal": schedule.beta_N.tolist(),
        "clamped": schedule.clamped,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
