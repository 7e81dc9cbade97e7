"""Gauss-Newton SQP with externally supplied dynamics sensitivities.

Each iteration linearizes the prediction model x+ = F(x,u) + B_d g(x,u)
into per-stage affine dynamics, builds a stage-sparse QP with a
Gauss-Newton Hessian of the nonlinear-least-squares costs, and takes a
full step. A real-time-iteration mode splits each solver call into a
preparation phase (shift, sensitivities, QP construction) and a feedback
phase that only injects the measured state and solves the prepared QP.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .integrator import rk4_with_sensitivities
from .ocp import PSD_EIG_TOL, Iterate, OcpSpec
from .qp import QpSolveError, QpSolution, QpSubproblem, solve_qp
from .residual import (AffineStageDynamics, LinearizationBatch, ResidualModel,
                       assemble_affine, evaluate_batch)
from .zoro import CovarianceSchedule, zero_schedule, zoro_step

EPS_REG = 1e-8


@dataclass(frozen=True)
class SolverOptions:
    """Tolerances and behavior switches for the SQP driver."""

    tol: float = 1e-4
    max_iter: int = 30
    eps_reg: float = EPS_REG
    qp_tol: float = 1e-8
    qp_max_iter: int = 100
    parallelism: int | None = None     # workers for residual batches
    tightening: str = "none"           # "none" | "zoro" | "fixed"

    def __post_init__(self):
        if self.tightening not in ("none", "zoro", "fixed"):
            raise ValueError(f"unknown tightening mode {self.tightening!r}")


@dataclass
class SolveStats:
    """Per-call diagnostics: iteration counts, residual history, timings."""

    iterations: int = 0
    status: str = "max_iter"
    kkt_history: list = field(default_factory=list)   # max KKT residual per iter
    qp_iterations: list = field(default_factory=list)
    t_prepare_ns: int = 0      # linearization + QP construction
    t_feedback_ns: int = 0     # QP solves
    schedule: object = None    # final CovarianceSchedule of the solve

    def to_record(self) -> dict:
        return {
            "iterations": self.iterations,
            "status": self.status,
            "kkt_history": [float(v) for v in self.kkt_history],
            "qp_iterations": list(self.qp_iterations),
            "t_prepare_ns": self.t_prepare_ns,
            "t_feedback_ns": self.t_feedback_ns,
        }


@dataclass(frozen=True)
class KktResiduals:
    """Infinity norms of the four KKT residual groups of the reduced OCP."""

    stationarity: float
    dynamics: float
    inequality: float
    complementarity: float

    @property
    def max(self) -> float:
        return max(self.stationarity, self.dynamics,
                   self.inequality, self.complementarity)


def stage_row_count(spec: OcpSpec, stage: int) -> int:
    """Number of inequality rows at a stage, excluding the s >= 0 rows."""
    m = len(spec.constraints)
    for bound in (spec.u_min, spec.u_max):
        if bound is not None:
            m += int(np.sum(np.isfinite(bound)))
    if stage > 0:
        for bound in (spec.x_min, spec.x_max):
            if bound is not None:
                m += int(np.sum(np.isfinite(bound)))
    return m


def _stage_rows(spec: OcpSpec, x, u, beta_k, with_x_bounds: bool):
    """Row data Hx dx + Hu du + h0 <= 0 at one stage of the iterate.

    Row order: spec constraints (tightened by beta), then finite input
    bounds (min, max), then finite state bounds (min, max). Only spec
    constraints can be soft; their row indices coincide with their
    position in ``spec.constraints``.
    """
    n_x, n_u = spec.n_x, spec.n_u
    Hx_rows, Hu_rows, h0_rows = [], [], []
    soft_idx, slack_quad, slack_lin = [], [], []
    for j, con in enumerate(spec.constraints):
        Hx_rows.append(np.asarray(con.jac_x(x, u), dtype=float))
        Hu_rows.append(np.asarray(con.jac_u(x, u), dtype=float))
        h0_rows.append(float(con.fn(x, u)) + float(beta_k[j]))
        if con.soft:
            soft_idx.append(j)
            slack_quad.append(con.slack_quad)
            slack_lin.append(con.slack_lin)

    def add_bound_block(bound, vec, sign, into_x):
        # lower bound (sign=-1): b - v <= 0; upper bound (sign=+1): v - b <= 0
        if bound is None:
            return
        b = np.asarray(bound, dtype=float)
        for i in np.flatnonzero(np.isfinite(b)):
            rx = np.zeros(n_x)
            ru = np.zeros(n_u)
            (rx if into_x else ru)[i] = sign
            Hx_rows.append(rx)
            Hu_rows.append(ru)
            h0_rows.append(sign * (vec[i] - b[i]))

    add_bound_block(spec.u_min, u, -1.0, into_x=False)
    add_bound_block(spec.u_max, u, 1.0, into_x=False)
    if with_x_bounds:
        add_bound_block(spec.x_min, x, -1.0, into_x=True)
        add_bound_block(spec.x_max, x, 1.0, into_x=True)

    Hx = np.vstack(Hx_rows) if Hx_rows else np.zeros((0, n_x))
    Hu = np.vstack(Hu_rows) if Hu_rows else np.zeros((0, n_u))
    h0 = np.asarray(h0_rows, dtype=float)
    return (Hx, Hu, h0, np.asarray(soft_idx, dtype=int),
            np.asarray(slack_quad, dtype=float),
            np.asarray(slack_lin, dtype=float))


def _terminal_rows(spec: OcpSpec, xN, beta_N):
    n_x = spec.n_x
    Hx_rows, h0_rows = [], []
    soft_idx, slack_quad, slack_lin = [], [], []
    for j, con in enumerate(spec.terminal_constraints):
        Hx_rows.append(np.asarray(con.jac_x(xN), dtype=float))
        h0_rows.append(float(con.fn(xN)) + float(beta_N[j]))
        if con.soft:
            soft_idx.append(j)
            slack_quad.append(con.slack_quad)
            slack_lin.append(con.slack_lin)
    for bound, sign in ((spec.x_min, -1.0), (spec.x_max, 1.0)):
        if bound is None:
            continue
        b = np.asarray(bound, dtype=float)
        for i in np.flatnonzero(np.isfinite(b)):
            row = np.zeros(n_x)
            row[i] = sign
            Hx_rows.append(row)
            h0_rows.append(sign * (xN[i] - b[i]))
    Hx = np.vstack(Hx_rows) if Hx_rows else np.zeros((0, n_x))
    h0 = np.asarray(h0_rows, dtype=float)
    return (Hx, h0, np.asarray(soft_idx, dtype=int),
            np.asarray(slack_quad, dtype=float),
            np.asarray(slack_lin, dtype=float))


def _gauss_newton_block(Jx, Ju, W, y, eps_reg):
    """Q, S, R, q, r from one NLS cost; regularized when nearly indefinite."""
    J = np.hstack([Jx, Ju])
    H = J.T @ W @ J
    H = 0.5 * (H + H.T)
    if float(np.min(np.linalg.eigvalsh(H))) < PSD_EIG_TOL:
        H = H + eps_reg * np.eye(H.shape[0])
    g = J.T @ (W @ y)
    n_x = Jx.shape[1]
    return (H[:n_x, :n_x], H[:n_x, n_x:], H[n_x:, n_x:], g[:n_x], g[n_x:])


def build_qp(spec: OcpSpec, iterate: Iterate,
             affine: AffineStageDynamics,
             schedule: CovarianceSchedule,
             x0: np.ndarray | None = None,
             eps_reg: float = EPS_REG) -> QpSubproblem:
    """Assemble the stage-sparse QP at the iterate.

    ``x0`` sets the fixed first state increment b0 = x0 - X[0]; omit it
    during an RTI preparation phase (b0 = 0, injected later).
    """
    N, n_x, n_u = spec.N, spec.n_x, spec.n_u
    X, U = iterate.X, iterate.U
    cost = spec.stage_cost

    Q = np.zeros((N, n_x, n_x))
    S = np.zeros((N, n_x, n_u))
    R = np.zeros((N, n_u, n_u))
    q = np.zeros((N, n_x))
    r = np.zeros((N, n_u))
    A = np.zeros((N, n_x, n_x))
    B = np.zeros((N, n_x, n_u))
    d = np.zeros((N, n_x))
    Hx, Hu, h0, soft_idx, s_quad, s_lin = [], [], [], [], [], []

    for k in range(N):
        y = np.asarray(cost.residual(X[k], U[k]), dtype=float)
        Jx = np.asarray(cost.jac_x(X[k], U[k]), dtype=float)
        Ju = np.asarray(cost.jac_u(X[k], U[k]), dtype=float)
        Q[k], S[k], R[k], q[k], r[k] = _gauss_newton_block(
            Jx, Ju, np.asarray(cost.weight, dtype=float), y, eps_reg)
        A[k] = affine.A[k]
        B[k] = affine.B[k]
        d[k] = affine.A[k] @ X[k] + affine.B[k] @ U[k] + affine.c[k] - X[k + 1]
        gx, gu, g0, sidx, squad, slin = _stage_rows(
            spec, X[k], U[k], schedule.beta[k], with_x_bounds=k > 0)
        Hx.append(gx)
        Hu.append(gu)
        h0.append(g0)
        soft_idx.append(sidx)
        s_quad.append(squad)
        s_lin.append(slin)
        for name, block in (("hessian", Q[k]), ("gradient", q[k]),
                            ("dynamics", d[k]), ("rows", g0)):
            if not np.all(np.isfinite(block)):
                raise FloatingPointError(
                    f"non-finite {name} block at stage {k}")

    if spec.terminal_cost is not None:
        yN = np.asarray(spec.terminal_cost.residual(X[N]), dtype=float)
        JN = np.asarray(spec.terminal_cost.jac_x(X[N]), dtype=float)
        WN = np.asarray(spec.terminal_cost.weight, dtype=float)
        QN = JN.T @ WN @ JN
        QN = 0.5 * (QN + QN.T)
        if float(np.min(np.linalg.eigvalsh(QN))) < PSD_EIG_TOL:
            QN = QN + eps_reg * np.eye(n_x)
        qN = JN.T @ (WN @ yN)
    else:
        QN = eps_reg * np.eye(n_x)
        qN = np.zeros(n_x)
    HxN, h0N, soft_idxN, s_quadN, s_linN = _terminal_rows(
        spec, X[N], schedule.beta_N)
    if not (np.all(np.isfinite(QN)) and np.all(np.isfinite(h0N))):
        raise FloatingPointError("non-finite terminal block")

    b0 = np.zeros(n_x) if x0 is None else np.asarray(x0, dtype=float) - X[0]
    return QpSubproblem(N=N, n_x=n_x, n_u=n_u, Q=Q, S=S, R=R, q=q, r=r,
                        QN=QN, qN=qN, A=A, B=B, d=d, Hx=Hx, Hu=Hu, h0=h0,
                        soft_idx=soft_idx, slack_quad=s_quad, slack_lin=s_lin,
                        HxN=HxN, h0N=h0N, soft_idxN=soft_idxN,
                        slack_quadN=s_quadN, slack_linN=s_linN, b0=b0)


def cold_start(spec: OcpSpec, x0: np.ndarray) -> Iterate:
    """Constant-state initial guess with zero inputs and multipliers."""
    x0 = np.asarray(x0, dtype=float)
    N = spec.N
    mu = [np.zeros(stage_row_count(spec, k) + spec.n_soft) for k in range(N)]
    n_soft_term = sum(1 for c in spec.terminal_constraints if c.soft)
    m_term = len(spec.terminal_constraints)
    for bound in (spec.x_min, spec.x_max):
        if bound is not None:
            m_term += int(np.sum(np.isfinite(np.asarray(bound, dtype=float))))
    return Iterate(
        X=np.tile(x0, (N + 1, 1)),
        U=np.zeros((N, spec.n_u)),
        lam=np.zeros((N, spec.n_x)),
        mu=mu,
        mu_N=np.zeros(m_term + n_soft_term),
        slack=np.zeros((N, spec.n_soft)),
        slack_N=np.zeros(n_soft_term),
    )


def _linearize(spec: OcpSpec, iterate: Iterate, model: ResidualModel,
               parallelism):
    """Nominal sensitivities + batched residual evaluation + affine assembly."""
    N = spec.N
    nominal = [rk4_with_sensitivities(spec.dynamics, iterate.X[k],
                                      iterate.U[k], spec.discretization)
               for k in range(N)]
    batch = LinearizationBatch(X=iterate.X[:N].copy(), U=iterate.U.copy())
    res = evaluate_batch(model, batch, parallelism=parallelism)
    affine = assemble_affine(spec.B_d, nominal, res, batch)
    return nominal, res, affine


def kkt_residuals(spec: OcpSpec, iterate: Iterate,
                  schedule: CovarianceSchedule,
                  affine: AffineStageDynamics,
                  x0: np.ndarray | None = None) -> KktResiduals:
    """KKT residual groups of the reduced (tightened) OCP at the iterate.

    Multiplier vectors follow the QP row convention: per stage the spec
    constraint rows, bound rows, then one s >= 0 row per soft constraint.
    """
    N, n_u = spec.N, spec.n_u
    X, U = iterate.X, iterate.U
    cost = spec.stage_cost
    stat = 0.0
    dyn = 0.0
    ineq = 0.0
    comp = 0.0

    if x0 is not None:
        dyn = float(np.max(np.abs(X[0] - np.asarray(x0, dtype=float)),
                           initial=0.0))

    for k in range(N):
        Hx, Hu, h0, sidx, squad, slin = _stage_rows(
            spec, X[k], U[k], schedule.beta[k], with_x_bounds=k > 0)
        m = Hx.shape[0]
        ns = len(sidx)
        mu_k = iterate.mu[k]
        if len(mu_k) != m + ns:
            raise ValueError(
                f"multiplier length {len(mu_k)} != {m + ns} at stage {k}")
        mu_rows, eta = mu_k[:m], mu_k[m:]
        s = iterate.slack[k]

        y = np.asarray(cost.residual(X[k], U[k]), dtype=float)
        Jx = np.asarray(cost.jac_x(X[k], U[k]), dtype=float)
        Ju = np.asarray(cost.jac_u(X[k], U[k]), dtype=float)
        W = np.asarray(cost.weight, dtype=float)
        gx = Jx.T @ (W @ y) + affine.A[k].T @ iterate.lam[k] + Hx.T @ mu_rows
        gu = Ju.T @ (W @ y) + affine.B[k].T @ iterate.lam[k] + Hu.T @ mu_rows
        if k > 0:
            gx = gx - iterate.lam[k - 1]
            stat = max(stat, float(np.max(np.abs(gx), initial=0.0)))
        stat = max(stat, float(np.max(np.abs(gu), initial=0.0)))
        if ns:
            g_s = squad * s + slin - mu_rows[sidx] - eta
            stat = max(stat, float(np.max(np.abs(g_s), initial=0.0)))

        pred = affine.A[k] @ X[k] + affine.B[k] @ U[k] + affine.c[k]
        dyn = max(dyn, float(np.max(np.abs(pred - X[k + 1]), initial=0.0)))

        vals = h0.copy()
        vals[sidx] -= s
        ineq = max(ineq, float(np.max(vals, initial=-np.inf) if m else 0.0))
        if ns:
            ineq = max(ineq, float(np.max(-s, initial=-np.inf)))
        comp = max(comp, float(np.max(np.abs(mu_rows * vals), initial=0.0)))
        if ns:
            comp = max(comp, float(np.max(np.abs(eta * s), initial=0.0)))
        ineq = max(ineq, 0.0)

    HxN, h0N, sidxN, squadN, slinN = _terminal_rows(spec, X[N], schedule.beta_N)
    mN = HxN.shape[0]
    nsN = len(sidxN)
    muN_rows, etaN = iterate.mu_N[:mN], iterate.mu_N[mN:]
    sN = iterate.slack_N
    gN = HxN.T @ muN_rows - iterate.lam[N - 1]
    if spec.terminal_cost is not None:
        yN = np.asarray(spec.terminal_cost.residual(X[N]), dtype=float)
        JN = np.asarray(spec.terminal_cost.jac_x(X[N]), dtype=float)
        gN = gN + JN.T @ (np.asarray(spec.terminal_cost.weight) @ yN)
    stat = max(stat, float(np.max(np.abs(gN), initial=0.0)))
    if nsN:
        g_sN = squadN * sN + slinN - muN_rows[sidxN] - etaN
        stat = max(stat, float(np.max(np.abs(g_sN), initial=0.0)))
    valsN = h0N.copy()
    valsN[sidxN] -= sN
    if mN:
        ineq = max(ineq, float(np.max(valsN)))
        comp = max(comp, float(np.max(np.abs(muN_rows * valsN))))
    if nsN:
        ineq = max(ineq, float(np.max(-sN)))
        comp = max(comp, float(np.max(np.abs(etaN * sN))))

    return KktResiduals(stationarity=stat, dynamics=dyn,
                        inequality=ineq, complementarity=comp)


def _apply_solution(iterate: Iterate, sol: QpSolution) -> Iterate:
    """Full SQP step: increment primals, overwrite multipliers and slacks."""
    new = iterate.copy()
    new.X = iterate.X + sol.dX
    new.U = iterate.U + sol.dU
    new.lam = sol.lam.copy()
    new.mu = [m.copy() for m in sol.mu]
    new.mu_N = sol.mu_N.copy()
    if new.slack.shape[1]:
        new.slack = np.stack([s for s in sol.slack])
    new.slack_N = sol.slack_N.copy()
    return new


def _schedule_for(spec, iterate, nominal, res, opts, frozen):
    """Tightening schedule per the solver's mode; respects a frozen one."""
    if opts.tightening == "none":
        return zero_schedule(spec), frozen
    if opts.tightening == "fixed" and frozen is not None:
        return frozen, frozen
    sched = zoro_step(spec, iterate, nominal, res)
    if opts.tightening == "fixed":
        frozen = sched
    return sched, frozen


def sqp_solve(spec: OcpSpec, model: ResidualModel, x0: np.ndarray,
              guess: Iterate | None = None,
              opts: SolverOptions | None = None,
              fixed_schedule: CovarianceSchedule | None = None):
    """Solve the residual-augmented OCP by full-step Gauss-Newton SQP.

    Returns (iterate, stats). The initial state enters every QP through
    b0 = x0 - X[0], so the first full step lands X[0] exactly on x0.
    Raises QpSolveError if a subproblem cannot be solved.
    """
    opts = opts or SolverOptions()
    x0 = np.asarray(x0, dtype=float)
    iterate = guess.copy() if guess is not None else cold_start(spec, x0)
    stats = SolveStats()
    frozen = fixed_schedule
    schedule = zero_schedule(spec)

    for it in range(1, opts.max_iter + 1):
        t0 = time.perf_counter_ns()
        nominal, res, affine = _linearize(spec, iterate, model,
                                          opts.parallelism)
        schedule, frozen = _schedule_for(spec, iterate, nominal, res,
                                         opts, frozen)
        kkt = kkt_residuals(spec, iterate, schedule, affine, x0=x0)
        stats.kkt_history.append(kkt.max)
        if kkt.max <= opts.tol:
            stats.t_prepare_ns += time.perf_counter_ns() - t0
            stats.status = "converged"
            break
        qp = build_qp(spec, iterate, affine, schedule, x0=x0,
                      eps_reg=opts.eps_reg)
        stats.t_prepare_ns += time.perf_counter_ns() - t0

        t1 = time.perf_counter_ns()
        sol = solve_qp(qp, tol=opts.qp_tol, max_iter=opts.qp_max_iter)
        stats.t_feedback_ns += time.perf_counter_ns() - t1
        stats.qp_iterations.append(sol.iterations)
        iterate = _apply_solution(iterate, sol)
        if not (np.all(np.isfinite(iterate.X)) and np.all(np.isfinite(iterate.U))):
            raise FloatingPointError(f"non-finite iterate after SQP step {it}")
        stats.iterations = it

    stats.schedule = schedule
    return iterate, stats


def shift_iterate(spec: OcpSpec, prev: Iterate) -> Iterate:
    """Advance the previous solution by one stage, duplicating the tail."""
    N = spec.N
    new = cold_start(spec, prev.X[1])
    new.X[:N] = prev.X[1:]
    new.X[N] = prev.X[N]
    new.U[:N - 1] = prev.U[1:]
    new.U[N - 1] = prev.U[N - 1]
    new.lam[:N - 1] = prev.lam[1:]
    new.lam[N - 1] = prev.lam[N - 1]
    if new.slack.shape[1]:
        new.slack[:N - 1] = prev.slack[1:]
        new.slack[N - 1] = prev.slack[N - 1]
    new.slack_N = prev.slack_N.copy()
    return new


@dataclass
class PreparedStep:
    """Output of the RTI preparation phase, awaiting the measured state."""

    spec: OcpSpec
    iterate: Iterate
    qp: QpSubproblem
    schedule: CovarianceSchedule
    opts: SolverOptions
    frozen: CovarianceSchedule | None
    t_prepare_ns: int


def rti_prepare(spec: OcpSpec, model: ResidualModel,
                prev: Iterate | None = None,
                opts: SolverOptions | None = None,
                fixed_schedule: CovarianceSchedule | None = None,
                x0_guess: np.ndarray | None = None) -> PreparedStep:
    """Shift, linearize and build the QP before the state measurement.

    The QP is built with b0 = 0; ``rti_feedback`` overwrites b0 with the
    measured deviation. With no previous iterate a cold start at
    ``x0_guess`` is used.
    """
    opts = opts or SolverOptions()
    t0 = time.perf_counter_ns()
    if prev is not None:
        iterate = shift_iterate(spec, prev)
    else:
        if x0_guess is None:
            raise ValueError("rti_prepare needs prev or x0_guess")
        iterate = cold_start(spec, x0_guess)
    nominal, res, affine = _linearize(spec, iterate, model, opts.parallelism)
    schedule, frozen = _schedule_for(spec, iterate, nominal, res, opts,
                                     fixed_schedule)
    qp = build_qp(spec, iterate, affine, schedule, x0=None,
                  eps_reg=opts.eps_reg)
    return PreparedStep(spec=spec, iterate=iterate, qp=qp, schedule=schedule,
                        opts=opts, frozen=frozen,
                        t_prepare_ns=time.perf_counter_ns() - t0)


def rti_feedback(prep: PreparedStep, x0: np.ndarray):
    """Inject the measured state, solve the prepared QP, take the full step.

    Returns (u0, iterate, stats) with u0 the input to apply.
    """
    t0 = time.perf_counter_ns()
    prep.qp.b0 = np.asarray(x0, dtype=float) - prep.iterate.X[0]
    sol = solve_qp(prep.qp, tol=prep.opts.qp_tol,
                   max_iter=prep.opts.qp_max_iter)
    iterate = _apply_solution(prep.iterate, sol)
    stats = SolveStats(iterations=1, status="rti",
                       kkt_history=[], qp_iterations=[sol.iterations],
                       t_prepare_ns=prep.t_prepare_ns,
                       t_feedback_ns=time.perf_counter_ns() - t0,
                       schedule=prep.schedule)
    return iterate.U[0].copy(), iterate, stats


def total_cost(spec: OcpSpec, iterate: Iterate) -> float:
    """Objective value at the iterate, including soft-constraint penalties."""
    val = sum(spec.stage_cost.value(iterate.X[k], iterate.U[k])
              for k in range(spec.N))
    if spec.terminal_cost is not None:
        val += spec.terminal_cost.value(iterate.X[spec.N])
    soft = [c for c in spec.constraints if c.soft]
    for k in range(spec.N):
        for i, con in enumerate(soft):
            s = iterate.slack[k, i]
            val += 0.5 * con.slack_quad * s * s + con.slack_lin * s
    soft_N = [c for c in spec.terminal_constraints if c.soft]
    for i, con in enumerate(soft_N):
        s = iterate.slack_N[i]
        val += 0.5 * con.slack_quad * s * s + con.slack_lin * s
    return float(val)
