"""Shared problem builders for the test suite."""

import numpy as np

from resmpc.fields import make_field
from resmpc.integrator import DiscretizationConfig
from resmpc.ocp import Constraint, OcpSpec, StageCost, TerminalCost


def tracking_cost(n_x, n_u, q_diag, r_diag, x_ref=None):
    """NLS tracking cost y = (x - x_ref, u) with diagonal weight."""
    x_ref = np.zeros(n_x) if x_ref is None else np.asarray(x_ref, dtype=float)
    W = np.diag(np.concatenate([q_diag, r_diag]).astype(float))
    Jx = np.vstack([np.eye(n_x), np.zeros((n_u, n_x))])
    Ju = np.vstack([np.zeros((n_x, n_u)), np.eye(n_u)])
    return StageCost(
        residual=lambda x, u: np.concatenate([x - x_ref, u]),
        jac_x=lambda x, u: Jx,
        jac_u=lambda x, u: Ju,
        weight=W,
    )


def terminal_tracking_cost(n_x, p_diag, x_ref=None):
    x_ref = np.zeros(n_x) if x_ref is None else np.asarray(x_ref, dtype=float)
    return TerminalCost(
        residual=lambda x: x - x_ref,
        jac_x=lambda x: np.eye(n_x),
        weight=np.diag(np.asarray(p_diag, dtype=float)),
    )


def double_integrator_spec(N=20, dt=0.1, soft=True, prob=None,
                           u_lim=2.0, v_lim=0.4, x_ref=(1.0, 0.0),
                           sigma_w=None):
    """Double integrator driven to x_ref with a velocity ceiling."""
    field = make_field("double_integrator")
    con = Constraint(
        name="v_max",
        fn=lambda x, u: x[1] - v_lim,
        jac_x=lambda x, u: np.array([0.0, 1.0]),
        jac_u=lambda x, u: np.array([0.0]),
        soft=soft,
        slack_quad=100.0 if soft else 0.0,
        slack_lin=10.0 if soft else 0.0,
        prob=prob,
    )
    return OcpSpec(
        N=N, n_x=2, n_u=1, n_g=1,
        B_d=np.array([[0.0], [1.0]]),
        dynamics=field,
        discretization=DiscretizationConfig(dt=dt, n_steps=1),
        stage_cost=tracking_cost(2, 1, [1.0, 0.1], [0.01], x_ref=x_ref),
        terminal_cost=terminal_tracking_cost(2, [5.0, 5.0], x_ref=x_ref),
        constraints=(con,),
        u_min=np.array([-u_lim]),
        u_max=np.array([u_lim]),
        sigma_w=sigma_w,
    )


def unconstrained_lq_spec(N=15, dt=0.1):
    """Linear dynamics, quadratic cost, no inequality rows at all."""
    M = np.array([[0.0, 1.0], [-0.8, -0.4]])
    L = np.array([[0.0], [1.0]])
    field = make_field("linear", params={"M": M, "L": L})
    return OcpSpec(
        N=N, n_x=2, n_u=1, n_g=1,
        B_d=np.array([[0.0], [1.0]]),
        dynamics=field,
        discretization=DiscretizationConfig(dt=dt, n_steps=1),
        stage_cost=tracking_cost(2, 1, [2.0, 1.0], [0.5]),
        terminal_cost=terminal_tracking_cost(2, [3.0, 3.0]),
    )


def scalar_quad_spec(N=10, dt=0.05, sigma_w=None, prob=None):
    """Scalar nonlinear plant x' = x^2 + u with an upper state constraint."""
    field = make_field("scalar_quad")
    con = Constraint(
        name="x_max",
        fn=lambda x, u: x[0] - 0.8,
        jac_x=lambda x, u: np.array([1.0]),
        jac_u=lambda x, u: np.array([0.0]),
        soft=True, slack_quad=50.0, slack_lin=5.0, prob=prob,
    )
    return OcpSpec(
        N=N, n_x=1, n_u=1, n_g=1,
        B_d=np.array([[1.0]]),
        dynamics=field,
        discretization=DiscretizationConfig(dt=dt, n_steps=1),
        stage_cost=tracking_cost(1, 1, [1.0], [0.1], x_ref=[0.5]),
        terminal_cost=terminal_tracking_cost(1, [2.0], x_ref=[0.5]),
        constraints=(con,),
        u_min=np.array([-1.5]),
        u_max=np.array([1.5]),
        sigma_w=sigma_w,
    )
