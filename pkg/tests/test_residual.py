import numpy as np
import pytest

from resmpc.integrator import DiscretizationConfig, rk4_with_sensitivities
from resmpc.fields import make_field
from resmpc.residual import (LinearizationBatch, MlpResidual, ResidualEvaluationError,
                             ResidualModel, ZeroResidual, assemble_affine,
                             evaluate_batch, load_mlp_weights, save_mlp_weights)


def _random_mlp(rng, n_in=3, n_out=2, widths=(8, 8)):
    weights, biases = [], []
    prev = n_in
    for wdt in list(widths) + [n_out]:
        weights.append(rng.normal(scale=0.5, size=(wdt, prev)))
        biases.append(rng.normal(scale=0.1, size=wdt))
        prev = wdt
    return MlpResidual(weights, biases)


class _FailAt(ResidualModel):
    """Raises on one specific state value, for failure-relocation tests."""

    n_g = 1

    def __init__(self, bad_value):
        self.bad = bad_value

    def evaluate(self, X, U):
        if np.any(X[:, 0] == self.bad):
            raise RuntimeError("poisoned point")
        vals = X[:, :1] * 2.0
        jx = np.zeros((len(X), 1, X.shape[1]))
        jx[:, 0, 0] = 2.0
        ju = np.zeros((len(X), 1, U.shape[1]))
        return vals, jx, ju, None


def test_zero_residual_outputs_zero():
    m = ZeroResidual(2)
    batch = LinearizationBatch(X=np.random.default_rng(0).normal(size=(5, 3)),
                               U=np.zeros((5, 1)))
    out = evaluate_batch(m, batch)
    assert np.all(out.values == 0.0)
    assert np.all(out.jac_x == 0.0)
    assert out.cov is None


def test_mlp_jacobian_matches_fd():
    rng = np.random.default_rng(21)
    mlp = _random_mlp(rng)
    X = rng.normal(size=(6, 3))
    U = rng.normal(size=(6, 1))
    vals, jx, ju, _ = mlp.evaluate(X, U)
    assert np.all(ju == 0.0)  # state-only features
    eps = 1e-6
    for i in range(3):
        dX = np.zeros_like(X)
        dX[:, i] = eps
        vp, *_ = mlp.evaluate(X + dX, U)
        vm, *_ = mlp.evaluate(X - dX, U)
        fd = (vp - vm) / (2 * eps)
        np.testing.assert_allclose(jx[:, :, i], fd, atol=1e-7)


def test_zero_mlp_factory():
    mlp = MlpResidual.zero(n_in=4, n_out=2, n_layers=2, width=16)
    X = np.random.default_rng(1).normal(size=(3, 4))
    vals, jx, ju, _ = mlp.evaluate(X, np.zeros((3, 1)))
    assert np.all(vals == 0.0) and np.all(jx == 0.0)


def test_weights_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(33)
    mlp = _random_mlp(rng)
    path = tmp_path / "weights.bin"
    save_mlp_weights(mlp, path)
    back = load_mlp_weights(path)
    assert len(back.weights) == len(mlp.weights)
    for W0, W1 in zip(mlp.weights, back.weights):
        assert np.array_equal(W0, W1)
    for b0, b1 in zip(mlp.biases, back.biases):
        assert np.array_equal(b0, b1)
    X = rng.normal(size=(4, 3))
    U = rng.normal(size=(4, 1))
    v0 = mlp.evaluate(X, U)[0]
    v1 = back.evaluate(X, U)[0]
    assert np.array_equal(v0, v1)


def test_weights_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"\x00" * 64)
    with pytest.raises(ValueError):
        load_mlp_weights(path)


@pytest.mark.parametrize("workers", [2, 3, 8])
def test_parallel_results_independent_of_worker_count(workers):
    rng = np.random.default_rng(4)
    mlp = _random_mlp(rng)
    batch = LinearizationBatch(X=rng.normal(size=(30, 3)),
                               U=rng.normal(size=(30, 1)))
    serial = evaluate_batch(mlp, batch, parallelism=1)
    par = evaluate_batch(mlp, batch, parallelism=workers)
    assert np.array_equal(serial.values, par.values)
    assert np.array_equal(serial.jac_x, par.jac_x)
    assert np.array_equal(serial.jac_u, par.jac_u)


def test_failure_located_to_stage():
    X = np.zeros((10, 2))
    X[:, 0] = np.arange(10.0)
    batch = LinearizationBatch(X=X, U=np.zeros((10, 1)))
    with pytest.raises(ResidualEvaluationError) as exc:
        evaluate_batch(_FailAt(7.0), batch, parallelism=4)
    assert exc.value.stage == 7


def test_nonfinite_output_located():
    class Bad(ResidualModel):
        n_g = 1

        def evaluate(self, X, U):
            vals = np.zeros((len(X), 1))
            vals[X[:, 0] == 3.0] = np.nan
            return (vals, np.zeros((len(X), 1, X.shape[1])),
                    np.zeros((len(X), 1, U.shape[1])), None)

    X = np.zeros((6, 1))
    X[:, 0] = np.arange(6.0)
    with pytest.raises(ResidualEvaluationError) as exc:
        evaluate_batch(Bad(), LinearizationBatch(X=X, U=np.zeros((6, 1))))
    assert exc.value.stage == 3


def test_batch_shape_validation():
    with pytest.raises(ValueError):
        LinearizationBatch(X=np.zeros((4, 2)), U=np.zeros((3, 1)))


def test_assemble_affine_exact_at_linearization_point():
    rng = np.random.default_rng(17)
    field = make_field("double_integrator")
    cfg = DiscretizationConfig(dt=0.1, n_steps=1)
    mlp = _random_mlp(rng, n_in=2, n_out=1)
    N = 8
    X = rng.normal(size=(N, 2))
    U = rng.normal(size=(N, 1))
    batch = LinearizationBatch(X=X, U=U)
    nominal = [rk4_with_sensitivities(field, X[k], U[k], cfg)
               for k in range(N)]
    res = evaluate_batch(mlp, batch)
    B_d = np.array([[0.0], [1.0]])
    affine = assemble_affine(B_d, nominal, res, batch)
    for k in range(N):
        fused = nominal[k].x_next + B_d @ res.values[k]
        recon = affine.A[k] @ X[k] + affine.B[k] @ U[k] + affine.c[k]
        assert np.max(np.abs(recon - fused)) < 1e-14
