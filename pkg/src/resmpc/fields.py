"""Catalog of continuous-time vector fields with analytic Jacobians.

Fields are registered under a name so scenario files can select them;
parametrized fields are created through their factory with a params dict.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class VectorField:
    """Continuous-time dynamics xdot = f(x, u) with analytic Jacobians."""

    name: str
    n_x: int
    n_u: int
    f: Callable[[np.ndarray, np.ndarray], np.ndarray]
    jac_x: Callable[[np.ndarray, np.ndarray], np.ndarray]
    jac_u: Callable[[np.ndarray, np.ndarray], np.ndarray]
    params: dict = field(default_factory=dict)


_CATALOG: dict[str, Callable[[dict], VectorField]] = {}


def register_field(name: str):
    def deco(factory):
        _CATALOG[name] = factory
        return factory
    return deco


def make_field(name: str, params: dict | None = None) -> VectorField:
    if name not in _CATALOG:
        raise KeyError(f"unknown vector field {name!r}; available: {sorted(_CATALOG)}")
    return _CATALOG[name](dict(params or {}))


@register_field("double_integrator")
def _double_integrator(params: dict) -> VectorField:
    """Point mass: state (position, velocity), input acceleration."""
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    B = np.array([[0.0], [1.0]])
    return VectorField(
        name="double_integrator",
        n_x=2,
        n_u=1,
        f=lambda x, u: A @ x + B @ u,
        jac_x=lambda x, u: A.copy(),
        jac_u=lambda x, u: B.copy(),
    )


@register_field("scalar_quad")
def _scalar_quad(params: dict) -> VectorField:
    """Scalar toy xdot = x^2 + u, used by the nonlinear-equivalence tests."""
    return VectorField(
        name="scalar_quad",
        n_x=1,
        n_u=1,
        f=lambda x, u: np.array([x[0] ** 2 + u[0]]),
        jac_x=lambda x, u: np.array([[2.0 * x[0]]]),
        jac_u=lambda x, u: np.array([[1.0]]),
    )


@register_field("linear")
def _linear(params: dict) -> VectorField:
    """Generic linear field xdot = M x + L u; params carry M and L."""
    M = np.asarray(params["M"], dtype=float)
    L = np.asarray(params["L"], dtype=float)
    n_x, n_u = L.shape
    return VectorField(
        name="linear",
        n_x=n_x,
        n_u=n_u,
        f=lambda x, u: M @ x + L @ u,
        jac_x=lambda x, u: M.copy(),
        jac_u=lambda x, u: L.copy(),
        params={"M": M, "L": L},
    )


# Simplified-Pacejka bicycle parameters for a 1:43-scale car; values follow
# the commonly used ORCA identification. ``front_split`` is the fraction of
# drivetrain force applied at the front axle (0 = rear-wheel drive).
BICYCLE_DEFAULTS = {
    "m": 0.041,
    "Iz": 27.8e-6,
    "lf": 0.029,
    "lr": 0.033,
    "Bf": 2.579,
    "Cf": 1.2,
    "Df": 0.192,
    "Br": 3.3852,
    "Cr": 1.2665,
    "Dr": 0.1737,
    "Cm1": 0.287,
    "Cm2": 0.0545,
    "Cr0": 0.0518,
    "Cr2": 0.00035,
    "front_split": 0.5,
}


@register_field("bicycle_pacejka")
def _bicycle_pacejka(params: dict) -> VectorField:
    """Dynamic bicycle with simplified Pacejka tires, MPCC-augmented state.

    State: (X, Y, psi, vx, vy, omega, T, delta, theta); the last three are
    integrator states for torque, steering and track progress, driven by the
    inputs (dT, ddelta, dtheta). Valid for vx > 0 (slip angles divide by vx).
    """
    p = dict(BICYCLE_DEFAULTS)
    p.update(params)
    m, Iz, lf, lr = p["m"], p["Iz"], p["lf"], p["lr"]
    Bf, Cf, Df = p["Bf"], p["Cf"], p["Df"]
    Br, Cr, Dr = p["Br"], p["Cr"], p["Dr"]
    Cm1, Cm2, Cr0, Cr2 = p["Cm1"], p["Cm2"], p["Cr0"], p["Cr2"]
    zeta = p["front_split"]

    def f(x, u):
        X, Y, psi, vx, vy, om, T, delta, theta = x
        af = delta - math.atan2(vy + lf * om, vx)
        ar = -math.atan2(vy - lr * om, vx)
        Ffy = Df * math.sin(Cf * math.atan(Bf * af))
        Fry = Dr * math.sin(Cr * math.atan(Br * ar))
        Fx = (Cm1 - Cm2 * vx) * T - Cr0 - Cr2 * vx * vx
        Fxf, Fxr = zeta * Fx, (1.0 - zeta) * Fx
        cd, sd = math.cos(delta), math.sin(delta)
        return np.array([
            vx * math.cos(psi) - vy * math.sin(psi),
            vx * math.sin(psi) + vy * math.cos(psi),
            om,
            (Fxr + Fxf * cd - Ffy * sd) / m + vy * om,
            (Fry + Ffy * cd + Fxf * sd) / m - vx * om,
            (lf * (Ffy * cd + Fxf * sd) - lr * Fry) / Iz,
            u[0],
            u[1],
            u[2],
        ])

    def jac_x(x, u):
        X, Y, psi, vx, vy, om, T, delta, theta = x
        sf = (vy + lf * om) / vx
        sr = (vy - lr * om) / vx
        af = delta - math.atan(sf)
        ar = -math.atan(sr)
        gf = 1.0 / (1.0 + sf * sf)
        gr = 1.0 / (1.0 + sr * sr)
        daf = {"vx": gf * sf / vx, "vy": -gf / vx, "om": -gf * lf / vx}
        dar = {"vx": gr * sr / vx, "vy": -gr / vx, "om": gr * lr / vx}
        Ffy = Df * math.sin(Cf * math.atan(Bf * af))
        Fry = Dr * math.sin(Cr * math.atan(Br * ar))
        Gf = Df * math.cos(Cf * math.atan(Bf * af)) * Cf * Bf / (1.0 + (Bf * af) ** 2)
        Gr = Dr * math.cos(Cr * math.atan(Br * ar)) * Cr * Br / (1.0 + (Br * ar) ** 2)
        Fx = (Cm1 - Cm2 * vx) * T - Cr0 - Cr2 * vx * vx
        dFx_vx = -Cm2 * T - 2.0 * Cr2 * vx
        dFx_T = Cm1 - Cm2 * vx
        cd, sd = math.cos(delta), math.sin(delta)
        cpsi, spsi = math.cos(psi), math.sin(psi)
        drive = (1.0 - zeta) + zeta * cd

        J = np.zeros((9, 9))
        J[0, 2] = -vx * spsi - vy * cpsi
        J[0, 3] = cpsi
        J[0, 4] = -spsi
        J[1, 2] = vx * cpsi - vy * spsi
        J[1, 3] = spsi
        J[1, 4] = cpsi
        J[2, 5] = 1.0
        # vx dynamics
        J[3, 3] = (dFx_vx * drive - Gf * daf["vx"] * sd) / m
        J[3, 4] = (-Gf * daf["vy"] * sd) / m + om
        J[3, 5] = (-Gf * daf["om"] * sd) / m + vy
        J[3, 6] = dFx_T * drive / m
        J[3, 7] = (-zeta * Fx * sd - Gf * sd - Ffy * cd) / m
        # vy dynamics
        J[4, 3] = (Gr * dar["vx"] + Gf * daf["vx"] * cd + zeta * dFx_vx * sd) / m - om
        J[4, 4] = (Gr * dar["vy"] + Gf * daf["vy"] * cd) / m
        J[4, 5] = (Gr * dar["om"] + Gf * daf["om"] * cd) / m - vx
        J[4, 6] = zeta * dFx_T * sd / m
        J[4, 7] = (Gf * cd - Ffy * sd + zeta * Fx * cd) / m
        # omega dynamics
        J[5, 3] = (lf * (Gf * daf["vx"] * cd + zeta * dFx_vx * sd) - lr * Gr * dar["vx"]) / Iz
        J[5, 4] = (lf * Gf * daf["vy"] * cd - lr * Gr * dar["vy"]) / Iz
        J[5, 5] = (lf * Gf * daf["om"] * cd - lr * Gr * dar["om"]) / Iz
        J[5, 6] = lf * zeta * dFx_T * sd / Iz
        J[5, 7] = lf * (Gf * cd - Ffy * sd + zeta * Fx * cd) / Iz
        return J

    def jac_u(x, u):
        J = np.zeros((9, 3))
        J[6, 0] = 1.0
        J[7, 1] = 1.0
        J[8, 2] = 1.0
        return J

    return VectorField(
        name="bicycle_pacejka", n_x=9, n_u=3, f=f, jac_x=jac_x, jac_u=jac_u, params=p
    )
