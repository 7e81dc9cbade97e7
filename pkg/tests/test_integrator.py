import numpy as np
import pytest

from resmpc.fields import VectorField, make_field
from resmpc.integrator import (DiscretizationConfig, IntegrationError,
                               rk4_step, rk4_with_sensitivities)


def _decay_field():
    # x' = -x, autonomous in u
    return VectorField(
        name="decay", n_x=1, n_u=1,
        f=lambda x, u: -x,
        jac_x=lambda x, u: -np.eye(1),
        jac_u=lambda x, u: np.zeros((1, 1)),
        params={},
    )


def test_rk4_matches_stability_polynomial():
    # [DERIVED] one RK4 step for x' = -x with h = 0.1:
    # 1 - 0.1 + 0.005 - 1/6000 + 1/240000 = 0.90483741666...6 truncation of e^-0.1
    cfg = DiscretizationConfig(dt=0.1, n_steps=1)
    got = rk4_step(_decay_field(), np.array([1.0]), np.zeros(1), cfg)
    expected = 1.0 - 0.1 + 0.005 - 1.0 / 6000.0 + 1.0 / 240000.0
    assert got[0] == pytest.approx(expected, abs=1e-15)
    # and the RK4 truncation error vs exp(-0.1) is O(h^5)
    assert abs(got[0] - np.exp(-0.1)) < 1e-7


def test_linear_system_sensitivity_equals_stability_matrix():
    # For x' = M x + L u the discrete A is the RK4 polynomial in h*M,
    # computed here independently via matrix powers.
    M = np.array([[0.0, 1.0], [-2.0, -0.7]])
    L = np.array([[0.3], [1.0]])
    field = make_field("linear", params={"M": M, "L": L})
    h = 0.05
    cfg = DiscretizationConfig(dt=h, n_steps=1)
    sens = rk4_with_sensitivities(field, np.array([0.4, -0.2]),
                                  np.array([0.1]), cfg)
    hM = h * M
    A_oracle = (np.eye(2) + hM + hM @ hM / 2.0 + hM @ hM @ hM / 6.0
                + hM @ hM @ hM @ hM / 24.0)
    np.testing.assert_allclose(sens.A, A_oracle, atol=1e-14)


def test_sensitivities_match_finite_differences():
    rng = np.random.default_rng(7)
    field = make_field("scalar_quad")
    cfg = DiscretizationConfig(dt=0.05, n_steps=2)
    for _ in range(100):
        x = rng.uniform(-1.0, 1.0, size=1)
        u = rng.uniform(-1.0, 1.0, size=1)
        sens = rk4_with_sensitivities(field, x, u, cfg)
        eps = 1e-6
        fd_A = (rk4_step(field, x + eps, u, cfg)
                - rk4_step(field, x - eps, u, cfg)) / (2 * eps)
        fd_B = (rk4_step(field, x, u + eps, cfg)
                - rk4_step(field, x, u - eps, cfg)) / (2 * eps)
        assert abs(sens.A[0, 0] - fd_A[0]) <= 1e-5 * max(1.0, abs(fd_A[0]))
        assert abs(sens.B[0, 0] - fd_B[0]) <= 1e-5 * max(1.0, abs(fd_B[0]))


def test_substeps_compose():
    field = make_field("scalar_quad")
    x = np.array([0.3])
    u = np.array([-0.2])
    two = rk4_step(field, x, u, DiscretizationConfig(dt=0.2, n_steps=2))
    half = DiscretizationConfig(dt=0.1, n_steps=1)
    manual = rk4_step(field, rk4_step(field, x, u, half), u, half)
    np.testing.assert_array_equal(two, manual)
    # sensitivities compose by the chain rule across sub-steps
    s2 = rk4_with_sensitivities(field, x, u,
                                DiscretizationConfig(dt=0.2, n_steps=2))
    sa = rk4_with_sensitivities(field, x, u, half)
    sb = rk4_with_sensitivities(field, sa.x_next, u, half)
    np.testing.assert_allclose(s2.A, sb.A @ sa.A, atol=1e-15)
    np.testing.assert_allclose(s2.B, sb.A @ sa.B + sb.B, atol=1e-15)


def test_bitwise_deterministic():
    field = make_field("scalar_quad")
    cfg = DiscretizationConfig(dt=0.1, n_steps=3)
    x = np.array([0.123456])
    u = np.array([0.654321])
    a = rk4_with_sensitivities(field, x, u, cfg)
    b = rk4_with_sensitivities(field, x, u, cfg)
    assert np.array_equal(a.x_next, b.x_next)
    assert np.array_equal(a.A, b.A)
    assert np.array_equal(a.B, b.B)


def test_nonfinite_value_raises_with_location():
    blow = VectorField(
        name="blow", n_x=1, n_u=1,
        f=lambda x, u: np.array([np.inf]),
        jac_x=lambda x, u: np.eye(1),
        jac_u=lambda x, u: np.zeros((1, 1)),
        params={},
    )
    with pytest.raises(IntegrationError, match="stage 1"):
        rk4_step(blow, np.zeros(1), np.zeros(1),
                 DiscretizationConfig(dt=0.1, n_steps=1))


def test_config_validation():
    with pytest.raises(ValueError):
        DiscretizationConfig(dt=0.0, n_steps=1)
    with pytest.raises(ValueError):
        DiscretizationConfig(dt=0.1, n_steps=0)
