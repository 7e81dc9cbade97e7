"""Bridge between the solver and externally supplied residual models.

A residual model is evaluated once per SQP iteration on the whole batch of
linearization points; its values and Jacobians are combined with the nominal
sensitivities into per-stage affine dynamics parameters (A_k, B_k, c_k).
"""

from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .integrator import StageSensitivity

WORKERS_ENV = "RESMPC_WORKERS"


class ResidualEvaluationError(RuntimeError):
    """Model evaluation failed; carries the offending stage index."""

    def __init__(self, stage: int, message: str):
        super().__init__(f"residual model failed at stage {stage}: {message}")
        self.stage = stage


@dataclass(frozen=True)
class LinearizationBatch:
    """States and inputs of stages 0..N-1 at the current iterate."""

    X: np.ndarray  # (N, n_x)
    U: np.ndarray  # (N, n_u)

    def __post_init__(self):
        if self.X.shape[0] != self.U.shape[0]:
            raise ValueError(
                f"batch stage counts differ: {self.X.shape[0]} states vs "
                f"{self.U.shape[0]} inputs"
            )

    def __len__(self):
        return self.X.shape[0]


@dataclass(frozen=True)
class ResidualEvaluation:
    """Batched residual values and Jacobians (plus optional covariances)."""

    values: np.ndarray              # (N, n_g)
    jac_x: np.ndarray               # (N, n_g, n_x)
    jac_u: np.ndarray               # (N, n_g, n_u)
    cov: np.ndarray | None = None   # (N, n_g, n_g)


@dataclass(frozen=True)
class AffineStageDynamics:
    """Per-stage parameters of the affine prediction model."""

    A: np.ndarray  # (N, n_x, n_x)
    B: np.ndarray  # (N, n_x, n_u)
    c: np.ndarray  # (N, n_x)


class ResidualModel:
    """Contract for external residual models.

    ``evaluate`` receives a batch of points and returns values, Jacobians
    with respect to the full state and input, and (optionally) per-point
    output covariances. Implementations must be safe for concurrent
    read-only evaluation; model mutation happens strictly between solver
    iterations.
    """

    n_g: int
    supplies_covariance: bool = False

    def evaluate(self, X: np.ndarray, U: np.ndarray):
        """Return (values (B,n_g), jac_x (B,n_g,n_x), jac_u (B,n_g,n_u), cov or None)."""
        raise NotImplementedError


class ZeroResidual(ResidualModel):
    """g == 0: attaches no correction and must not change solver output."""

    def __init__(self, n_g: int):
        self.n_g = n_g

    def evaluate(self, X, U):
        B = X.shape[0]
        return (np.zeros((B, self.n_g)),
                np.zeros((B, self.n_g, X.shape[1])),
                np.zeros((B, self.n_g, U.shape[1])),
                None)


class FiniteDifferenceResidual(ResidualModel):
    """Wraps a value-only (black-box) model with central-difference Jacobians.

    Step per coordinate: base_step * (1 + |coordinate|).
    """

    def __init__(self, fn, n_g: int, base_step: float = 1e-6):
        self.fn = fn
        self.n_g = n_g
        self.base_step = base_step

    def evaluate(self, X, U):
        B, n_x = X.shape
        n_u = U.shape[1]
        vals = np.empty((B, self.n_g))
        jx = np.empty((B, self.n_g, n_x))
        ju = np.empty((B, self.n_g, n_u))
        for i in range(B):
            x, u = X[i], U[i]
            vals[i] = self.fn(x, u)
            for j in range(n_x):
                h = self.base_step * (1.0 + abs(x[j]))
                xp, xm = x.copy(), x.copy()
                xp[j] += h
                xm[j] -= h
                jx[i, :, j] = (self.fn(xp, u) - self.fn(xm, u)) / (2.0 * h)
            for j in range(n_u):
                h = self.base_step * (1.0 + abs(u[j]))
                up, um = u.copy(), u.copy()
                up[j] += h
                um[j] -= h
                ju[i, :, j] = (self.fn(x, up) - self.fn(x, um)) / (2.0 * h)
        return vals, jx, ju, None


class MlpResidual(ResidualModel):
    """Dense tanh MLP on the state, with analytic Jacobian.

    Hidden layers use the activation; the output layer is linear. The
    Jacobian is accumulated in reverse through the layers. Inputs are the
    state only, so jac_u is identically zero.
    """

    def __init__(self, weights, biases, activation: str = "tanh"):
        if len(weights) != len(biases):
            raise ValueError("weights and biases must pair up")
        for i in range(1, len(weights)):
            if weights[i].shape[1] != weights[i - 1].shape[0]:
                raise ValueError(
                    f"layer {i} expects input dim {weights[i].shape[1]}, "
                    f"previous layer outputs {weights[i - 1].shape[0]}"
                )
        for W, b in zip(weights, biases):
            if W.shape[0] != b.shape[0]:
                raise ValueError("bias length does not match layer output dim")
        if activation not in ("tanh", "none"):
            raise ValueError(f"unsupported activation {activation!r}")
        self.weights = [np.asarray(W, dtype=float) for W in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        self.activation = activation
        self.n_in = self.weights[0].shape[1]
        self.n_g = self.weights[-1].shape[0]

    @classmethod
    def zero(cls, n_in: int, n_out: int, n_layers: int, width: int = 512,
             activation: str = "tanh") -> "MlpResidual":
        """All-zero network with ``n_layers`` hidden layers of given width."""
        dims = [n_in] + [width] * n_layers + [n_out]
        weights = [np.zeros((dims[i + 1], dims[i])) for i in range(len(dims) - 1)]
        biases = [np.zeros(dims[i + 1]) for i in range(len(dims) - 1)]
        return cls(weights, biases, activation)

    def evaluate(self, X, U):
        B = X.shape[0]
        if X.shape[1] != self.n_in:
            raise ValueError(f"MLP expects input dim {self.n_in}, got {X.shape[1]}")
        a = X
        pre = []
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            z = a @ W.T + b
            pre.append(z)
            a = np.tanh(z) if self.activation == "tanh" else z
        vals = a @ self.weights[-1].T + self.biases[-1]
        # Reverse accumulation: J = W_L * diag(act') * ... * W_0, batched.
        J = np.broadcast_to(self.weights[-1], (B,) + self.weights[-1].shape).copy()
        for W, z in zip(reversed(self.weights[:-1]), reversed(pre)):
            if self.activation == "tanh":
                J = J * (1.0 - np.tanh(z) ** 2)[:, None, :]
            J = J @ W
        ju = np.zeros((B, self.n_g, U.shape[1]))
        return vals, J, ju, None


_MLP_MAGIC = 0x4D4C5031  # "MLP1"


def save_mlp_weights(model: MlpResidual, path) -> None:
    """Flat little-endian float64 file: header with layer shapes, then W,b per layer."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", _MLP_MAGIC, len(model.weights)))
        for W in model.weights:
            fh.write(struct.pack("<qq", *W.shape))
        for W, b in zip(model.weights, model.biases):
            fh.write(np.ascontiguousarray(W, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_mlp_weights(path, activation: str = "tanh") -> MlpResidual:
    with open(path, "rb") as fh:
        magic, n_layers = struct.unpack("<II", fh.read(8))
        if magic != _MLP_MAGIC:
            raise ValueError(f"{path}: not an MLP weight file")
        shapes = [struct.unpack("<qq", fh.read(16)) for _ in range(n_layers)]
        weights, biases = [], []
        for rows, cols in shapes:
            W = np.frombuffer(fh.read(8 * rows * cols), dtype="<f8").reshape(rows, cols)
            b = np.frombuffer(fh.read(8 * rows), dtype="<f8")
            weights.append(W.copy())
            biases.append(b.copy())
    return MlpResidual(weights, biases, activation)


def default_workers() -> int:
    return max(1, int(os.environ.get(WORKERS_ENV, "1")))


def _eval_chunk(model, X, U, offset):
    try:
        vals, jx, ju, cov = model.evaluate(X, U)
    except Exception as exc:
        # relocate the failure to a single stage for diagnosis
        for i in range(X.shape[0]):
            try:
                model.evaluate(X[i:i + 1], U[i:i + 1])
            except Exception as inner:
                raise ResidualEvaluationError(offset + i, str(inner)) from inner
        raise ResidualEvaluationError(offset, str(exc)) from exc
    for i in range(X.shape[0]):
        if not (np.all(np.isfinite(vals[i])) and np.all(np.isfinite(jx[i]))
                and np.all(np.isfinite(ju[i]))):
            raise ResidualEvaluationError(offset + i, "non-finite model output")
    return vals, jx, ju, cov


def evaluate_batch(model: ResidualModel, batch: LinearizationBatch,
                   parallelism: int | None = None) -> ResidualEvaluation:
    """Evaluate the residual model once on the whole linearization batch.

    Stages are statically partitioned into ``parallelism`` contiguous chunks
    evaluated by a thread pool; per-stage results depend only on that
    stage's point, so the output is independent of the worker count.
    ``None`` reads the worker count from the environment (default 1).
    """
    if parallelism is None:
        parallelism = default_workers()
    if parallelism < 1:
        raise ValueError(f"parallelism must be >= 1, got {parallelism}")
    N = len(batch)
    n_x, n_u, n_g = batch.X.shape[1], batch.U.shape[1], model.n_g

    if N == 0:
        return ResidualEvaluation(np.zeros((0, n_g)), np.zeros((0, n_g, n_x)),
                                  np.zeros((0, n_g, n_u)), None)

    bounds = np.linspace(0, N, min(parallelism, N) + 1).astype(int)
    chunks = [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]

    if len(chunks) == 1:
        results = [_eval_chunk(model, batch.X, batch.U, 0)]
    else:
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            futures = [pool.submit(_eval_chunk, model, batch.X[a:b], batch.U[a:b], a)
                       for a, b in chunks]
            results = [f.result() for f in futures]

    values = np.concatenate([r[0] for r in results])
    jac_x = np.concatenate([r[1] for r in results])
    jac_u = np.concatenate([r[2] for r in results])
    covs = [r[3] for r in results]
    cov = np.concatenate(covs) if all(c is not None for c in covs) else None

    if values.shape != (N, n_g):
        raise ValueError(f"model returned values of shape {values.shape}, "
                         f"expected ({N}, {n_g})")
    if jac_x.shape != (N, n_g, n_x) or jac_u.shape != (N, n_g, n_u):
        raise ValueError("model returned Jacobians with inconsistent shapes")
    return ResidualEvaluation(values=values, jac_x=jac_x, jac_u=jac_u, cov=cov)


def assemble_affine(B_d: np.ndarray, nominal: list[StageSensitivity],
                    residual: ResidualEvaluation,
                    batch: LinearizationBatch) -> AffineStageDynamics:
    """Combine nominal sensitivities and residual Jacobians into affine dynamics.

    A_k = A_f + B_d dg/dx, B_k = B_f + B_d dg/du, and c_k chosen so the
    affine map reproduces f + B_d g exactly at the linearization point.
    """
    N = len(batch)
    if len(nominal) != N or residual.values.shape[0] != N:
        raise ValueError("nominal, residual and batch stage counts differ")
    B_d = np.asarray(B_d, dtype=float)
    n_x = B_d.shape[0]
    A = np.empty((N, n_x, n_x))
    B = np.empty((N, n_x, batch.U.shape[1]))
    c = np.empty((N, n_x))
    for k in range(N):
        A[k] = nominal[k].A + B_d @ residual.jac_x[k]
        B[k] = nominal[k].B + B_d @ residual.jac_u[k]
        fused = nominal[k].x_next + B_d @ residual.values[k]
        c[k] = fused - A[k] @ batch.X[k] - B[k] @ batch.U[k]
    return AffineStageDynamics(A=A, B=B, c=c)
