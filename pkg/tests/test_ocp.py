import dataclasses

import numpy as np
import pytest

from conftest import double_integrator_spec, tracking_cost
from resmpc.ocp import (matrix_rank, project_measurement,
                        residual_noise_covariance, validate_spec)


def test_valid_spec_has_no_violations():
    spec = double_integrator_spec(sigma_w=np.diag([1e-5, 1e-4]))
    assert validate_spec(spec) == []


def test_rank_deficient_bd_flagged():
    spec = double_integrator_spec()
    bad = dataclasses.replace(spec, n_g=2, B_d=np.array([[1.0, 2.0],
                                                         [2.0, 4.0]]))
    codes = [v.code for v in validate_spec(bad)]
    assert "bd_rank" in codes


def test_bd_shape_flagged():
    spec = double_integrator_spec()
    bad = dataclasses.replace(spec, B_d=np.ones((3, 1)))
    codes = [v.code for v in validate_spec(bad)]
    assert "bd_shape" in codes


def test_asymmetric_weight_flagged():
    spec = double_integrator_spec()
    cost = tracking_cost(2, 1, [1.0, 1.0], [1.0])
    W = cost.weight.copy()
    W[0, 1] = 0.5
    bad_cost = dataclasses.replace(cost, weight=W)
    bad = dataclasses.replace(spec, stage_cost=bad_cost)
    codes = [v.code for v in validate_spec(bad)]
    assert "cost_weight_sym" in codes


def test_indefinite_sigma_w_flagged():
    spec = double_integrator_spec(sigma_w=np.diag([1e-5, -1e-5]))
    codes = [v.code for v in validate_spec(spec)]
    assert "sigma_w_psd" in codes


def test_prob_out_of_range_flagged():
    spec = double_integrator_spec(prob=1.5)
    codes = [v.code for v in validate_spec(spec)]
    assert "prob_range" in codes


def test_matrix_rank_uses_relative_tolerance():
    M = np.diag([1.0, 1e-16])
    assert matrix_rank(M) == 1
    assert matrix_rank(np.diag([1.0, 1e-6])) == 2


def test_project_measurement_least_squares_oracle():
    # projection must agree with an independent normal-equations solve
    rng = np.random.default_rng(5)
    B_d = rng.normal(size=(5, 2))
    x_next = rng.normal(size=5)
    f_val = rng.normal(size=5)
    got = project_measurement(x_next, f_val, B_d)
    oracle, *_ = np.linalg.lstsq(B_d, x_next - f_val, rcond=None)
    np.testing.assert_allclose(got, oracle, atol=1e-12)


def test_project_measurement_recovers_exact_residual():
    B_d = np.array([[0.0], [1.0]])
    g = np.array([0.37])
    x_next = np.array([0.1, 0.2]) + B_d @ g
    got = project_measurement(x_next, np.array([0.1, 0.2]), B_d)
    np.testing.assert_allclose(got, g, atol=1e-14)


def test_residual_noise_covariance_formula():
    rng = np.random.default_rng(9)
    B_d = rng.normal(size=(4, 2))
    A = rng.normal(size=(4, 4))
    sigma_w = A @ A.T
    got = residual_noise_covariance(sigma_w, B_d)
    P = np.linalg.pinv(B_d)
    np.testing.assert_allclose(got, P @ sigma_w @ P.T, atol=1e-12)


def test_residual_noise_covariance_monte_carlo():
    # [DERIVED] empirical covariance of pinv(B_d) w for w ~ N(0, sigma_w)
    rng = np.random.default_rng(1234)
    B_d = np.array([[0.0, 0.0], [1.0, 0.0], [0.3, 1.0]])
    sigma_w = np.diag([0.5, 0.2, 0.1])
    n = 200_000
    w = rng.multivariate_normal(np.zeros(3), sigma_w, size=n)
    proj = w @ np.linalg.pinv(B_d).T
    emp = proj.T @ proj / n
    got = residual_noise_covariance(sigma_w, B_d)
    np.testing.assert_allclose(got, emp, atol=5e-3)
