"""Covariance propagation, tightening, and feasibility verification."""

import math

import numpy as np
import pytest
from scipy.special import ndtri

from resmpc.ocp import Iterate, OcpSpec
from resmpc.residual import ZeroResidual
from resmpc.sqp import SolverOptions, sqp_solve
from resmpc.zoro import (
    CovarianceSchedule,
    TighteningConfig,
    dump_schedule,
    gamma_from_prob,
    propagate,
    tighten,
    verify_feasibility,
    zero_schedule,
)

from conftest import double_integrator_spec


def test_gamma_matches_scipy_inverse_cdf():
    for p in (0.5, 0.6, 0.8, 0.9, 0.95, 0.975, 0.99, 0.999, 1e-3, 1e-6):
        assert gamma_from_prob(p) == pytest.approx(float(ndtri(p)), abs=1e-9)


def test_gamma_rejects_out_of_range():
    for p in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            gamma_from_prob(p)


def test_tightening_config_caches_gammas():
    cfg = TighteningConfig(probs=(0.9, 0.95))
    assert cfg.gammas == (gamma_from_prob(0.9), gamma_from_prob(0.95))


def test_scalar_recursion_by_hand():
    # A = 0.5, Sigma_w = 0.1:
    # S1 = 0.1, S2 = 0.25*0.1 + 0.1 = 0.125, S3 = 0.25*0.125 + 0.1 = 0.13125
    spec = double_integrator_spec(N=3, sigma_w=np.zeros((2, 2)))
    spec = _with_sigma_w(spec, np.diag([0.1, 0.0]))
    A = np.array([[0.5, 0.0], [0.0, 0.0]])
    sigmas = propagate(spec, [A, A, A], gp_cov=None)
    assert sigmas[0][0, 0] == 0.0
    assert sigmas[1][0, 0] == pytest.approx(0.1, abs=1e-15)
    assert sigmas[2][0, 0] == pytest.approx(0.125, abs=1e-15)
    assert sigmas[3][0, 0] == pytest.approx(0.13125, abs=1e-15)


def _with_sigma_w(spec: OcpSpec, sigma_w) -> OcpSpec:
    import dataclasses

    return dataclasses.replace(spec, sigma_w=np.asarray(sigma_w, dtype=float))


def test_propagate_includes_residual_covariance():
    spec = double_integrator_spec(N=1, sigma_w=np.zeros((2, 2)))
    A = np.zeros((2, 2))
    gp_cov = np.array([[[0.3]]])  # (N, n_g, n_g) with B_d = [[0], [1]]
    sigmas = propagate(spec, [A], gp_cov)
    expected = spec.B_d @ gp_cov[0] @ spec.B_d.T
    np.testing.assert_allclose(sigmas[1], expected, atol=1e-15)


def test_propagate_output_is_symmetric_psd():
    rng = np.random.default_rng(3)
    spec = double_integrator_spec(N=10, sigma_w=0.01 * np.eye(2))
    A_list = [np.eye(2) + 0.1 * rng.standard_normal((2, 2)) for _ in range(10)]
    sigmas = propagate(spec, A_list, gp_cov=None)
    for S in sigmas:
        np.testing.assert_allclose(S, S.T, atol=1e-14)
        assert np.min(np.linalg.eigvalsh(S)) >= -1e-12


def test_tighten_formula_and_scaling():
    C = np.array([[1.0, 2.0]])
    sigma = np.array([[0.5, 0.1], [0.1, 0.3]])
    gammas = np.array([1.6448536269514722])  # Phi^{-1}(0.95)
    beta, clamped = tighten(C, sigma, gammas)
    rad = float((C @ sigma @ C.T)[0, 0])
    assert beta[0] == pytest.approx(gammas[0] * math.sqrt(rad), rel=1e-14)
    assert clamped == 0
    # scaling sigma by c scales beta by sqrt(c)
    beta4, _ = tighten(C, 4.0 * sigma, gammas)
    assert beta4[0] == pytest.approx(2.0 * beta[0], rel=1e-12)


def test_tighten_clamps_negative_radicand():
    C = np.array([[1.0, 0.0]])
    sigma = np.array([[-1e-12, 0.0], [0.0, 0.0]])  # tiny indefinite drift
    beta, clamped = tighten(C, sigma, np.array([2.0]))
    assert beta[0] == 0.0
    assert clamped == 1


def test_zoro_stage_zero_untightened_and_schedule_shape():
    spec = double_integrator_spec(N=8, prob=0.95, sigma_w=0.01 * np.eye(2))
    opts = SolverOptions(tightening="zoro")
    iterate, stats = sqp_solve(spec, ZeroResidual(spec.n_g), np.zeros(2), opts=opts)
    assert stats.status == "converged"
    rep = verify_feasibility(spec, iterate, stats.schedule)
    assert rep.feasible
    assert rep.beta_change <= 1e-10
    sched = stats.schedule
    assert sched.sigmas.shape == (9, 2, 2)
    np.testing.assert_array_equal(sched.sigmas[0], np.zeros((2, 2)))
    np.testing.assert_array_equal(sched.beta[0], np.zeros(len(spec.constraints)))
    assert np.all(sched.beta[1:, 0] > 0.0)


def test_zoro_tightening_is_conservative():
    x0 = np.zeros(2)
    spec = double_integrator_spec(N=20, prob=0.95, sigma_w=0.005 * np.eye(2))
    nominal = double_integrator_spec(N=20, sigma_w=0.005 * np.eye(2))
    it_z, st_z = sqp_solve(spec, ZeroResidual(1), x0,
                           opts=SolverOptions(tightening="zoro"))
    it_n, st_n = sqp_solve(nominal, ZeroResidual(1), x0)
    assert st_z.status == st_n.status == "converged"
    # tightened velocity limit => peak velocity strictly below nominal peak
    assert np.max(it_z.X[:, 1]) < np.max(it_n.X[:, 1]) - 1e-4


def test_zero_schedule_matches_nominal_solve():
    spec = double_integrator_spec(N=10, prob=0.95, sigma_w=0.01 * np.eye(2))
    x0 = np.zeros(2)
    it_none, _ = sqp_solve(spec, ZeroResidual(1), x0)
    it_fix, _ = sqp_solve(spec, ZeroResidual(1), x0,
                          opts=SolverOptions(tightening="fixed"),
                          fixed_schedule=zero_schedule(spec))
    np.testing.assert_allclose(it_fix.X, it_none.X, atol=1e-12)
    np.testing.assert_allclose(it_fix.U, it_none.U, atol=1e-12)


def test_verify_feasibility_flags_violations():
    spec = double_integrator_spec(N=4)
    X = np.zeros((5, 2))
    X[2] = [0.0, 10.0]  # breaks dynamics defect and the soft velocity bound
    it = Iterate(X=X, U=np.zeros((4, 1)), lam=np.zeros((4, 2)),
                 mu=[np.zeros(0)] * 4, mu_N=np.zeros(0),
                 slack=np.zeros((4, 1)), slack_N=np.zeros(0))
    rep = verify_feasibility(spec, it, zero_schedule(spec))
    assert not rep.feasible
    assert rep.max_defect > 1.0
    assert any("defect" in v for v in rep.violations)
    assert any("v_max" in v for v in rep.violations)


def test_dump_schedule_roundtrip(tmp_path):
    import json

    sched = CovarianceSchedule(
        sigmas=np.arange(3 * 4).reshape(3, 2, 2).astype(float),
        beta=np.array([[0.0], [0.1]]),
        beta_N=np.zeros(0),
        clamped=2,
    )
    path = tmp_path / "sched.json"
    dump_schedule(sched, pairs=[(0, 1)], path=path)
    data = json.loads(path.read_text())
    assert data["clamped"] == 2
    assert data["beta"] == [[0.0], [0.1]]
    assert data["stages"][1]["cov_0_1"] == [[4.0, 5.0], [6.0, 7.0]]
