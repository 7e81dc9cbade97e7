"""Stage-sparse QP subproblem and its interior-point solver.

The solver is a Mehrotra-style primal-dual interior-point method; each
Newton system is reduced by eliminating the inequality pairs and then
factorized by a backward Riccati recursion over the stages, so cost is
linear in the horizon length. Soft-constraint slacks are explicit
decision variables (augmented per-stage controls), which keeps every QP
feasible when all state constraints are soft.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

_VERBOSE = bool(os.environ.get("RESMPC_QP_VERBOSE"))

IP_TOL = 1e-8
IP_MAX_ITER = 100
FRACTION_TO_BOUNDARY = 0.995
SLACK_DIAG_REG = 1e-8


class QpSolveError(RuntimeError):
    """Interior-point method failed to converge or factorization broke down."""


@dataclass
class QpSubproblem:
    """Canonical stage-wise QP data.

    Decision variables: state increments dx_0..dx_N (dx_0 = b0 fixed by
    substitution), input increments du_0..du_{N-1} and absolute soft-
    constraint slacks s_k >= 0. Rows read Hx dx + Hu du + h0 <= 0 with
    h0 = h(iterate) + beta; soft rows additionally get -s on the left.
    """

    N: int
    n_x: int
    n_u: int
    Q: np.ndarray           # (N, n_x, n_x)
    S: np.ndarray           # (N, n_x, n_u)
    R: np.ndarray           # (N, n_u, n_u)
    q: np.ndarray           # (N, n_x)
    r: np.ndarray           # (N, n_u)
    QN: np.ndarray          # (n_x, n_x)
    qN: np.ndarray          # (n_x,)
    A: np.ndarray           # (N, n_x, n_x)
    B: np.ndarray           # (N, n_x, n_u)
    d: np.ndarray           # (N, n_x) dynamics defect
    Hx: list                # per stage (m_k, n_x)
    Hu: list                # per stage (m_k, n_u)
    h0: list                # per stage (m_k,)
    soft_idx: list          # per stage row indices carrying a slack
    slack_quad: list        # per stage (n_s_k,)
    slack_lin: list         # per stage (n_s_k,)
    HxN: np.ndarray         # (m_N, n_x)
    h0N: np.ndarray         # (m_N,)
    soft_idxN: np.ndarray
    slack_quadN: np.ndarray
    slack_linN: np.ndarray
    b0: np.ndarray          # fixed value of dx_0


@dataclass
class QpSolution:
    dX: np.ndarray          # (N+1, n_x)
    dU: np.ndarray          # (N, n_u)
    slack: list             # per stage (n_s_k,)
    slack_N: np.ndarray
    lam: np.ndarray         # (N, n_x) dynamics multipliers
    mu: list                # per stage (m_k + n_s_k,) row order: ineq rows, then s>=0 rows
    mu_N: np.ndarray
    iterations: int
    status: str = "optimal"


def _augment_stage(Hx, Hu, soft_idx, slack_quad, slack_lin, S, R, r, n_u):
    """Fold soft slacks into the stage control block and the row matrices."""
    m = Hx.shape[0]
    ns = len(soft_idx)
    Gx = np.vstack([Hx, np.zeros((ns, Hx.shape[1]))])
    Gv = np.zeros((m + ns, n_u + ns))
    Gv[:m, :n_u] = Hu
    for i, row in enumerate(soft_idx):
        Gv[row, n_u + i] = -1.0     # soft row: ... - s_i <= 0
        Gv[m + i, n_u + i] = -1.0   # -s_i <= 0
    Sv = np.hstack([S, np.zeros((S.shape[0], ns))])
    Rv = np.zeros((n_u + ns, n_u + ns))
    Rv[:n_u, :n_u] = R
    Rv[n_u:, n_u:] = np.diag(np.maximum(slack_quad, 0.0) + SLACK_DIAG_REG)
    rv = np.concatenate([r, slack_lin])
    return Gx, Gv, Sv, Rv, rv, m, ns


def solve_qp(qp: QpSubproblem, warm=None, tol: float = IP_TOL,
             max_iter: int = IP_MAX_ITER) -> QpSolution:
    """Solve the stage-sparse QP to KKT residuals <= tol.

    ``warm`` optionally carries (mu, w) lists from a previous solve with the
    same structure; values are clipped into a safe interior region.
    """
    N, n_x, n_u = qp.N, qp.n_x, qp.n_u

    # Augmented per-stage data; stage N holds the terminal block whose
    # "controls" are the terminal slacks.
    Gx, Gv, Sa, Ra, ra, Qa, qa = [], [], [], [], [], [], []
    m_rows, n_slk = [], []
    for k in range(N):
        gx, gv, sv, rv, rvec, m, ns = _augment_stage(
            qp.Hx[k], qp.Hu[k], qp.soft_idx[k], qp.slack_quad[k],
            qp.slack_lin[k], qp.S[k], qp.R[k], qp.r[k], n_u)
        Gx.append(gx)
        Gv.append(gv)
        Sa.append(sv)
        Ra.append(rv)
        ra.append(rvec)
        Qa.append(qp.Q[k])
        qa.append(qp.q[k])
        m_rows.append(m)
        n_slk.append(ns)
    gxN, gvN, svN, rvN, rvecN, mN, nsN = _augment_stage(
        qp.HxN, np.zeros((qp.HxN.shape[0], 0)), qp.soft_idxN,
        qp.slack_quadN, qp.slack_linN, np.zeros((n_x, 0)),
        np.zeros((0, 0)), np.zeros(0), 0)
    Gx.append(gxN)
    Gv.append(gvN)
    Sa.append(svN)
    Ra.append(rvN)
    ra.append(rvecN)
    Qa.append(qp.QN)
    qa.append(qp.qN)
    m_rows.append(mN)
    n_slk.append(nsN)

    g0 = [np.concatenate([qp.h0[k], np.zeros(n_slk[k])]) for k in range(N)]
    g0.append(np.concatenate([qp.h0N, np.zeros(nsN)]))

    nv = [Gv[k].shape[1] for k in range(N + 1)]
    rows = [Gx[k].shape[0] for k in range(N + 1)]
    n_ineq = int(sum(rows))

    # primal/dual state
    xs = np.zeros((N + 1, n_x))
    xs[0] = qp.b0
    for k in range(N):
        xs[k + 1] = qp.A[k] @ xs[k] + qp.d[k]  # inputs start at zero
    vs = [np.zeros(nv[k]) for k in range(N + 1)]
    lam = np.zeros((N, n_x))
    if warm is not None:
        mu = [np.clip(m_, 1e-6, 1e6) for m_ in warm[0]]
        w = [np.clip(w_, 1e-6, 1e6) for w_ in warm[1]]
    else:
        mu = [np.ones(rows[k]) for k in range(N + 1)]
        w = [np.ones(rows[k]) for k in range(N + 1)]

    # Dynamics act only on the input part of the augmented controls.
    Bv = [np.hstack([qp.B[k], np.zeros((n_x, n_slk[k]))]) for k in range(N)]

    def residuals():
        rdx = np.zeros((N + 1, n_x))
        rdv = [np.zeros(nv[k]) for k in range(N + 1)]
        req = np.zeros((N, n_x))
        rin = [np.zeros(rows[k]) for k in range(N + 1)]
        for k in range(N + 1):
            core = Qa[k] @ xs[k] + Sa[k] @ vs[k] + qa[k] + Gx[k].T @ mu[k]
            if k < N:
                core = core + qp.A[k].T @ lam[k]
            if k > 0:
                core = core - lam[k - 1]
            rdx[k] = core
            rdv[k] = Sa[k].T @ xs[k] + Ra[k] @ vs[k] + ra[k] + Gv[k].T @ mu[k]
            if k < N:
                rdv[k] += Bv[k].T @ lam[k]
                req[k] = qp.A[k] @ xs[k] + qp.B[k] @ vs[k][:n_u] + qp.d[k] - xs[k + 1]
            rin[k] = Gx[k] @ xs[k] + Gv[k] @ vs[k] + g0[k] + w[k]
        return rdx, rdv, req, rin

    def factor(D):
        """Backward Riccati factorization with barrier-augmented blocks."""
        Qb = [Qa[k] + Gx[k].T @ (D[k][:, None] * Gx[k]) for k in range(N + 1)]
        Sb = [Sa[k] + Gx[k].T @ (D[k][:, None] * Gv[k]) for k in range(N + 1)]
        Rb = [Ra[k] + Gv[k].T @ (D[k][:, None] * Gv[k]) for k in range(N + 1)]
        P = [None] * (N + 1)
        Ks = [None] * (N + 1)
        chol = [None] * (N + 1)
        if nv[N] > 0:
            chol[N] = cho_factor(Rb[N])
            Ks[N] = -cho_solve(chol[N], Sb[N].T)
            P[N] = Qb[N] + Sb[N] @ Ks[N]
        else:
            P[N] = Qb[N]
        P[N] = 0.5 * (P[N] + P[N].T)
        AtP, BtP = [None] * N, [None] * N
        for k in range(N - 1, -1, -1):
            AtP[k] = qp.A[k].T @ P[k + 1]
            BtP[k] = Bv[k].T @ P[k + 1]
            Quu = Rb[k] + BtP[k] @ Bv[k]
            Qxu = Sb[k] + AtP[k] @ Bv[k]
            try:
                chol[k] = cho_factor(Quu)
            except np.linalg.LinAlgError as exc:
                raise QpSolveError(f"factorization breakdown at stage {k}") from exc
            Ks[k] = -cho_solve(chol[k], Qxu.T)
            Pk = Qb[k] + AtP[k] @ qp.A[k] + Qxu @ Ks[k]
            P[k] = 0.5 * (Pk + Pk.T)
        return P, Ks, chol, Sb, AtP, BtP

    def solve_step(fac, rdx, rdv, req, cw, rin, D):
        """One Newton solve; ``cw`` is the centering vector pre-divided by w."""
        P, Ks, chol, Sb, AtP, BtP = fac
        # gradients folded with eliminated (mu, w) rows
        gx = [rdx[k] - Gx[k].T @ cw[k] + Gx[k].T @ (D[k] * rin[k])
              for k in range(N + 1)]
        gv = [rdv[k] - Gv[k].T @ cw[k] + Gv[k].T @ (D[k] * rin[k])
              for k in range(N + 1)]
        p = [None] * (N + 1)
        kff = [None] * (N + 1)
        if nv[N] > 0:
            kff[N] = -cho_solve(chol[N], gv[N])
            p[N] = gx[N] + Sb[N] @ kff[N]
        else:
            p[N] = gx[N]
        for k in range(N - 1, -1, -1):
            mvec = P[k + 1] @ req[k] + p[k + 1]
            ru = gv[k] + Bv[k].T @ mvec
            rx = gx[k] + qp.A[k].T @ mvec
            kff[k] = -cho_solve(chol[k], ru)
            Qxu = Sb[k] + AtP[k] @ Bv[k]
            p[k] = rx + Qxu @ kff[k]
        dx = np.zeros((N + 1, n_x))
        dv = [None] * (N + 1)
        dlam = np.zeros((N, n_x))
        for k in range(N):
            dv[k] = Ks[k] @ dx[k] + kff[k]
            dx[k + 1] = qp.A[k] @ dx[k] + Bv[k] @ dv[k] + req[k]
            dlam[k] = P[k + 1] @ dx[k + 1] + p[k + 1]
        dv[N] = (Ks[N] @ dx[N] + kff[N]) if nv[N] > 0 else np.zeros(0)
        dw = [-rin[k] - Gx[k] @ dx[k] - Gv[k] @ dv[k] for k in range(N + 1)]
        dmu = [-(cw[k] + D[k] * dw[k]) for k in range(N + 1)]
        return dx, dv, dlam, dw, dmu

    def max_step(vals, deltas):
        a = 1.0
        for v, dv_ in zip(vals, deltas):
            neg = dv_ < 0
            if np.any(neg):
                a = min(a, float(np.min(-FRACTION_TO_BOUNDARY * v[neg] / dv_[neg])))
        return a

    status = "optimal"
    it = 0
    for it in range(1, max_iter + 1):
        rdx, rdv, req, rin = residuals()
        comp = (sum(float(mu[k] @ w[k]) for k in range(N + 1)) / n_ineq
                if n_ineq else 0.0)
        err = max(
            float(np.max(np.abs(rdx[1:]), initial=0.0)),
            max(float(np.max(np.abs(v), initial=0.0)) for v in rdv),
            float(np.max(np.abs(req), initial=0.0)),
            max((float(np.max(np.abs(r_), initial=0.0)) for r_ in rin), default=0.0),
            comp,
        )
        if _VERBOSE:
            rdv_k = int(np.argmax([np.max(np.abs(v), initial=0.0) for v in rdv]))
            print(f"ip it={it} err={err:.3e} comp={comp:.3e} "
                  f"stat={float(np.max(np.abs(rdx[1:]), initial=0.0)):.2e} "
                  f"rdv={float(np.max(np.abs(rdv[rdv_k]), initial=0.0)):.2e}@k{rdv_k} "
                  f"eq={float(np.max(np.abs(req), initial=0.0)):.2e} "
                  f"in={max((float(np.max(np.abs(r_), initial=0.0)) for r_ in rin), default=0.0):.2e} "
                  f"minw={min(float(np.min(w_, initial=np.inf)) for w_ in w):.1e} "
                  f"minmu={min(float(np.min(m_, initial=np.inf)) for m_ in mu):.1e}")
        if err <= tol:
            break
        if not np.isfinite(err):
            raise QpSolveError("non-finite interior-point residual")

        if n_ineq == 0:
            D = [np.zeros(0) for _ in range(N + 1)]
            fac = factor(D)
            dx, dv, dlam, dw, dmu = solve_step(
                fac, rdx, rdv, req, [np.zeros(0)] * (N + 1), rin, D)
            alpha_p = alpha_d = 1.0
        elif comp <= 0.1 * tol:
            # Complementarity has converged but linear residuals remain.
            # Take full Newton refinement steps with the rows classified by
            # their converged pair: inactive rows (mu < w) get D = 0 and
            # their multiplier driven to zero, active rows keep a capped
            # barrier weight. This avoids the ill-conditioned divisions by
            # nearly-zero w that plain centering steps would perform.
            D, cw = [], []
            for k in range(N + 1):
                active = mu[k] > w[k]
                Dk = np.where(active,
                              np.minimum(mu[k] / np.maximum(w[k], 1e-14),
                                         1e14), 0.0)
                D.append(Dk)
                cw.append(mu[k].copy())
            fac = factor(D)
            dx, dv, dlam, dw, dmu = solve_step(fac, rdx, rdv, req, cw, rin, D)
            alpha_p = alpha_d = 1.0
        else:
            D = [mu[k] / w[k] for k in range(N + 1)]
            fac = factor(D)
            # predictor (affine centering c = mu*w, so c/w = mu exactly)
            cw_aff = [mu[k].copy() for k in range(N + 1)]
            dx, dv, dlam, dw, dmu = solve_step(fac, rdx, rdv, req, cw_aff,
                                               rin, D)
            a_p = max_step(w, dw)
            a_d = max_step(mu, dmu)
            comp_aff = sum(float((mu[k] + a_d * dmu[k]) @ (w[k] + a_p * dw[k]))
                           for k in range(N + 1)) / n_ineq
            sigma = min(1.0, max(0.0, comp_aff / comp)) ** 3 if comp > 0 else 0.0
            # corrector (reuses the factorization)
            cw_cor = [mu[k] + (dmu[k] * dw[k] - sigma * comp) / w[k]
                      for k in range(N + 1)]
            dx, dv, dlam, dw, dmu = solve_step(fac, rdx, rdv, req, cw_cor,
                                               rin, D)
            # one common step length: the KKT system couples primal and
            # dual blocks, so unequal steps leave mixed residuals behind
            alpha_p = alpha_d = min(max_step(w, dw), max_step(mu, dmu))

        xs = xs + alpha_p * dx
        for k in range(N + 1):
            vs[k] = vs[k] + alpha_p * dv[k]
            # the floor only matters after full refinement steps, which may
            # drive degenerate pairs slightly negative
            w[k] = np.maximum(w[k] + alpha_p * dw[k], 1e-30)
            mu[k] = np.maximum(mu[k] + alpha_d * dmu[k], 1e-30)
        lam = lam + alpha_d * dlam
    else:
        raise QpSolveError(
            f"interior-point method did not reach tol={tol} in {max_iter} iterations")

    return QpSolution(
        dX=xs,
        dU=np.stack([vs[k][:n_u] for k in range(N)]) if N else np.zeros((0, n_u)),
        slack=[vs[k][n_u:] for k in range(N)],
        slack_N=vs[N],
        lam=lam,
        mu=mu[:N],
        mu_N=mu[N],
        iterations=it,
        status=status,
    )
