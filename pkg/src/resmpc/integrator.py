"""Explicit RK4 discretization of continuous-time vector fields.

Sensitivities of the discrete map are obtained by propagating the
variational equations through the RK4 stages, so they are the exact
derivatives of the discretized dynamics (not a finite-difference
approximation).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class IntegrationError(RuntimeError):
    """Raised when an RK4 stage produces a non-finite value."""


@dataclass(frozen=True)
class DiscretizationConfig:
    """Step length and sub-step count for one controller sampling period."""

    dt: float
    n_steps: int = 1

    def __post_init__(self):
        if not self.dt > 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")


@dataclass(frozen=True)
class StageSensitivity:
    """Discrete transition and its exact Jacobians at one linearization point."""

    x_next: np.ndarray  # (n_x,)
    A: np.ndarray       # (n_x, n_x) = d x_next / d x
    B: np.ndarray       # (n_x, n_u) = d x_next / d u


def _check_finite(v, sub_step, stage):
    if not np.all(np.isfinite(v)):
        raise IntegrationError(
            f"non-finite value in RK4 stage {stage} of sub-step {sub_step}"
        )


def rk4_step(field, x, u, cfg: DiscretizationConfig) -> np.ndarray:
    """Classical 4-stage RK4 over ``cfg.n_steps`` sub-steps, zero-order-hold input."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    h = cfg.dt / cfg.n_steps
    for i in range(cfg.n_steps):
        k1 = field.f(x, u)
        _check_finite(k1, i, 1)
        k2 = field.f(x + 0.5 * h * k1, u)
        _check_finite(k2, i, 2)
        k3 = field.f(x + 0.5 * h * k2, u)
        _check_finite(k3, i, 3)
        k4 = field.f(x + h * k3, u)
        _check_finite(k4, i, 4)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def rk4_with_sensitivities(field, x, u, cfg: DiscretizationConfig) -> StageSensitivity:
    """RK4 step plus exact Jacobians of the discrete map.

    The chain rule is applied through each RK4 stage using the field's
    analytic Jacobians, and composed across sub-steps.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    n_x = x.shape[0]
    n_u = u.shape[0]
    h = cfg.dt / cfg.n_steps
    eye = np.eye(n_x)
    A = np.eye(n_x)
    B = np.zeros((n_x, n_u))
    for i in range(cfg.n_steps):
        k1 = field.f(x, u)
        _check_finite(k1, i, 1)
        d1x = field.jac_x(x, u)
        d1u = field.jac_u(x, u)

        x2 = x + 0.5 * h * k1
        k2 = field.f(x2, u)
        _check_finite(k2, i, 2)
        f2x = field.jac_x(x2, u)
        d2x = f2x @ (eye + 0.5 * h * d1x)
        d2u = f2x @ (0.5 * h * d1u) + field.jac_u(x2, u)

        x3 = x + 0.5 * h * k2
        k3 = field.f(x3, u)
        _check_finite(k3, i, 3)
        f3x = field.jac_x(x3, u)
        d3x = f3x @ (eye + 0.5 * h * d2x)
        d3u = f3x @ (0.5 * h * d2u) + field.jac_u(x3, u)

        x4 = x + h * k3
        k4 = field.f(x4, u)
        _check_finite(k4, i, 4)
        f4x = field.jac_x(x4, u)
        d4x = f4x @ (eye + h * d3x)
        d4u = f4x @ (h * d3u) + field.jac_u(x4, u)

        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        A_sub = eye + (h / 6.0) * (d1x + 2.0 * d2x + 2.0 * d3x + d4x)
        B_sub = (h / 6.0) * (d1u + 2.0 * d2u + 2.0 * d3u + d4u)
        A = A_sub @ A
        B = A_sub @ B + B_sub
    return StageSensitivity(x_next=x, A=A, B=B)
