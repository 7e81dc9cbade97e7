"""Gaussian-process residual models.

Independent squared-exponential GPs with ARD lengthscales, one per output
dimension, so cross-output covariances are exactly zero. Variants: exact
(offline Cholesky), subset-of-regressors with inducing points, and online
(recursive Cholesky up/downdates with random replacement at capacity).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import solve_triangular

from .residual import ResidualModel

log = logging.getLogger(__name__)

JITTER_START = 1e-10
JITTER_MAX = 1e-4


class GpFitError(RuntimeError):
    """Kernel matrix not positive definite despite jitter escalation."""


@dataclass(frozen=True)
class KernelConfig:
    """Per-output SE-ARD hyperparameters; all strictly positive."""

    signal_variance: np.ndarray  # (n_g,)
    lengthscales: np.ndarray     # (n_g, n_feat)
    noise_variance: np.ndarray   # (n_g,)

    def __post_init__(self):
        sv = np.atleast_1d(np.asarray(self.signal_variance, dtype=float))
        ls = np.atleast_2d(np.asarray(self.lengthscales, dtype=float))
        nv = np.atleast_1d(np.asarray(self.noise_variance, dtype=float))
        object.__setattr__(self, "signal_variance", sv)
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "noise_variance", nv)
        if not (np.all(sv > 0) and np.all(ls > 0) and np.all(nv > 0)):
            raise ValueError("kernel hyperparameters must be strictly positive")
        if ls.shape[0] != sv.shape[0] or nv.shape[0] != sv.shape[0]:
            raise ValueError("kernel hyperparameter counts disagree")

    @property
    def n_g(self) -> int:
        return self.signal_variance.shape[0]

    @property
    def n_feat(self) -> int:
        return self.lengthscales.shape[1]


@dataclass(frozen=True)
class GpDataset:
    """Training inputs/targets plus capacity and feature-selection indices."""

    Z: np.ndarray                 # (D, n_feat)
    Y: np.ndarray                 # (D, n_g)
    d_max: int | None = None
    feature_indices: tuple[int, ...] = ()

    def __post_init__(self):
        Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        Y = np.atleast_2d(np.asarray(self.Y, dtype=float))
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "Y", Y)
        if Z.shape[0] != Y.shape[0]:
            raise ValueError("input and target row counts differ")
        if self.d_max is not None and Z.shape[0] > self.d_max:
            raise ValueError(f"dataset size {Z.shape[0]} exceeds capacity {self.d_max}")

    @property
    def D(self) -> int:
        return self.Z.shape[0]

    @staticmethod
    def empty(n_feat: int, n_g: int, d_max: int | None = None,
              feature_indices: tuple[int, ...] = ()) -> "GpDataset":
        return GpDataset(np.zeros((0, n_feat)), np.zeros((0, n_g)),
                         d_max=d_max, feature_indices=feature_indices)


def _se_kernel(A, B, sf2, ls):
    """k(a,b) = sf2 exp(-0.5 sum(((a-b)/ls)^2)), pairwise over rows."""
    d = (A[:, None, :] - B[None, :, :]) / ls
    return sf2 * np.exp(-0.5 * np.sum(d * d, axis=2))


def _chol_with_jitter(K):
    jitter = 0.0
    scale = JITTER_START
    while True:
        try:
            return np.linalg.cholesky(K + jitter * np.eye(K.shape[0])), jitter
        except np.linalg.LinAlgError:
            jitter = scale
            scale *= 10.0
            if jitter > JITTER_MAX:
                raise GpFitError(
                    f"kernel matrix not PD with jitter up to {JITTER_MAX}"
                ) from None


@dataclass(frozen=True)
class GpModel:
    """Fitted GP with per-output factors; immutable after fit/update."""

    dataset: GpDataset
    kernel: KernelConfig
    variant: str                         # "exact" | "sor"
    L: np.ndarray                        # (n_g, D, D) or (n_g, m, m) for SoR
    alpha: np.ndarray                    # (n_g, D) or SoR weights (n_g, m)
    inducing: np.ndarray | None = None   # (m, n_feat) for SoR
    seed: int | None = None              # replacement RNG seed (online use)
    replace_count: int = 0


def fit_exact(dataset: GpDataset, kernel: KernelConfig,
              seed: int | None = None) -> GpModel:
    """Factor each output's regularized kernel matrix; D = 0 gives the prior."""
    D = dataset.D
    n_g = kernel.n_g
    L = np.zeros((n_g, D, D))
    alpha = np.zeros((n_g, D))
    for j in range(n_g):
        K = _se_kernel(dataset.Z, dataset.Z, kernel.signal_variance[j],
                       kernel.lengthscales[j])
        K += kernel.noise_variance[j] * np.eye(D)
        L[j], _ = _chol_with_jitter(K)
        alpha[j] = _chol_solve(L[j], dataset.Y[:, j])
    return GpModel(dataset=dataset, kernel=kernel, variant="exact",
                   L=L, alpha=alpha, seed=seed)


def _chol_solve(L, b):
    return solve_triangular(L.T, solve_triangular(L, b, lower=True), lower=False)


def fit_sor(dataset: GpDataset, kernel: KernelConfig,
            inducing: np.ndarray) -> GpModel:
    """Subset-of-regressors fit through the given inducing inputs.

    Mean weights w = (Kmn Knm + sn2 Kmm)^{-1} Kmn y; predictive variance uses
    the standard SoR form, which underestimates far from the inducing set.
    """
    U = np.atleast_2d(np.asarray(inducing, dtype=float))
    m = U.shape[0]
    if m < 1:
        raise ValueError("need at least one inducing point")
    n_g = kernel.n_g
    L = np.zeros((n_g, m, m))
    alpha = np.zeros((n_g, m))
    for j in range(n_g):
        Kmn = _se_kernel(U, dataset.Z, kernel.signal_variance[j],
                         kernel.lengthscales[j])
        Kmm = _se_kernel(U, U, kernel.signal_variance[j], kernel.lengthscales[j])
        G = Kmn @ Kmn.T + kernel.noise_variance[j] * Kmm
        # jitter scaled to the diagonal: K_mm of coincident points is singular
        jitter = JITTER_START * max(1.0, float(np.trace(G)) / m)
        while True:
            try:
                L[j] = np.linalg.cholesky(G + jitter * np.eye(m))
                break
            except np.linalg.LinAlgError:
                jitter *= 10.0
                if jitter > JITTER_MAX * max(1.0, float(np.trace(G)) / m):
                    raise GpFitError("SoR system not PD despite jitter") from None
        alpha[j] = _chol_solve(L[j], Kmn @ dataset.Y[:, j])
    return GpModel(dataset=dataset, kernel=kernel, variant="sor",
                   L=L, alpha=alpha, inducing=U)


def redistribute_inducing(model: GpModel, trajectory: np.ndarray) -> GpModel:
    """Re-fit SoR with inducing points subsampled uniformly along a trajectory."""
    if model.variant != "sor":
        raise ValueError("redistribute_inducing requires a SoR model")
    traj = np.atleast_2d(np.asarray(trajectory, dtype=float))
    m = model.inducing.shape[0]
    if traj.shape[0] < m:
        raise ValueError(f"trajectory length {traj.shape[0]} < {m} inducing points")
    idx = np.linspace(0, traj.shape[0] - 1, m).astype(int)
    return fit_sor(model.dataset, model.kernel, traj[idx])


def predict(model: GpModel, Zq: np.ndarray):
    """Posterior means, block-diagonal covariances and mean-Jacobians.

    Returns (means (B,n_g), cov (B,n_g,n_g) diagonal, jac (B,n_g,n_feat)).
    """
    Zq = np.atleast_2d(np.asarray(Zq, dtype=float))
    if Zq.shape[1] != model.kernel.n_feat:
        raise ValueError(
            f"query dim {Zq.shape[1]} != n_feat {model.kernel.n_feat}")
    B = Zq.shape[0]
    n_g = model.kernel.n_g
    means = np.zeros((B, n_g))
    var = np.zeros((B, n_g))
    jac = np.zeros((B, n_g, model.kernel.n_feat))

    basis = model.inducing if model.variant == "sor" else model.dataset.Z
    for j in range(n_g):
        sf2 = model.kernel.signal_variance[j]
        ls = model.kernel.lengthscales[j]
        if basis.shape[0] == 0:
            var[:, j] = sf2
            continue
        Ks = _se_kernel(Zq, basis, sf2, ls)
        means[:, j] = Ks @ model.alpha[j]
        v = solve_triangular(model.L[j], Ks.T, lower=True)
        if model.variant == "sor":
            var[:, j] = model.kernel.noise_variance[j] * np.sum(v * v, axis=0)
        else:
            var[:, j] = np.maximum(sf2 - np.sum(v * v, axis=0), 0.0)
        diff = (Zq[:, None, :] - basis[None, :, :]) / (ls * ls)
        jac[:, j] = -np.einsum("bd,bdf->bf", Ks * model.alpha[j], diff)
    cov = np.zeros((B, n_g, n_g))
    cov[:, np.arange(n_g), np.arange(n_g)] = var
    return means, cov, jac


def _chol_extend(L, b, d):
    """Factor of [[K, b], [b', d]] given L with L L' = K."""
    Dn = L.shape[0]
    l = solve_triangular(L, b, lower=True) if Dn else np.zeros(0)
    lam2 = d - l @ l
    if lam2 <= 0.0:
        raise np.linalg.LinAlgError("extension loses positive definiteness")
    out = np.zeros((Dn + 1, Dn + 1))
    out[:Dn, :Dn] = L
    out[Dn, :Dn] = l
    out[Dn, Dn] = np.sqrt(lam2)
    return out


def _chol_rank1_update(L, v):
    """In-place-free factor of L L' + v v' (always well posed)."""
    L = L.copy()
    v = v.copy()
    n = L.shape[0]
    for i in range(n):
        r = np.hypot(L[i, i], v[i])
        c = r / L[i, i]
        s = v[i] / L[i, i]
        L[i, i] = r
        if i + 1 < n:
            L[i + 1:, i] = (L[i + 1:, i] + s * v[i + 1:]) / c
            v[i + 1:] = c * v[i + 1:] - s * L[i + 1:, i]
    return L


def _chol_remove(L, i):
    """Factor of K with row/column i removed, via rank-one update of the tail."""
    n = L.shape[0]
    out = np.zeros((n - 1, n - 1))
    out[:i, :i] = L[:i, :i]
    out[i:, :i] = L[i + 1:, :i]
    out[i:, i:] = _chol_rank1_update(L[i + 1:, i + 1:], L[i + 1:, i])
    return out


def update_online(model: GpModel, z: np.ndarray, y: np.ndarray) -> GpModel:
    """Add one data point; at capacity, replace a uniformly random old point.

    Cholesky factors are extended (and downdated on removal) in O(D^2); a
    failed extension falls back to a full refactorization.
    """
    if model.variant != "exact":
        raise ValueError("online updates require an exact-variant model")
    z = np.asarray(z, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    ds = model.dataset
    kern = model.kernel
    replace_count = model.replace_count

    Z, Y = ds.Z, ds.Y
    L = model.L
    if ds.d_max is not None and ds.D >= ds.d_max:
        rng = np.random.default_rng(None if model.seed is None
                                    else model.seed + replace_count)
        drop = int(rng.integers(ds.D))
        replace_count += 1
        Z = np.delete(Z, drop, axis=0)
        Y = np.delete(Y, drop, axis=0)
        L = np.stack([_chol_remove(L[j], drop) for j in range(kern.n_g)])

    try:
        new_L = []
        for j in range(kern.n_g):
            b = _se_kernel(Z, z[None, :], kern.signal_variance[j],
                           kern.lengthscales[j]).ravel()
            d = kern.signal_variance[j] + kern.noise_variance[j]
            new_L.append(_chol_extend(L[j], b, d))
        L = np.stack(new_L)
        Z = np.vstack([Z, z[None, :]])
        Y = np.vstack([Y, y[None, :]])
        new_ds = GpDataset(Z, Y, d_max=ds.d_max,
                           feature_indices=ds.feature_indices)
        alpha = np.stack([_chol_solve(L[j], Y[:, j]) for j in range(kern.n_g)])
        return GpModel(dataset=new_ds, kernel=kern, variant="exact",
                       L=L, alpha=alpha, seed=model.seed,
                       replace_count=replace_count)
    except np.linalg.LinAlgError:
        log.warning("Cholesky update lost positive definiteness; refactorizing")
        new_ds = GpDataset(np.vstack([Z, z[None, :]]), np.vstack([Y, y[None, :]]),
                           d_max=ds.d_max, feature_indices=ds.feature_indices)
        refit = fit_exact(new_ds, kern, seed=model.seed)
        return replace(refit, replace_count=replace_count)


def select_features(x: np.ndarray, u: np.ndarray,
                    indices: tuple[int, ...]) -> np.ndarray:
    """Gather the listed components of the concatenated (x, u)."""
    xu = np.concatenate([np.asarray(x, dtype=float).ravel(),
                         np.asarray(u, dtype=float).ravel()])
    idx = np.asarray(indices, dtype=int)
    if idx.size and (idx.min() < 0 or idx.max() >= xu.shape[0]):
        raise IndexError(f"feature index out of range for (x,u) of length {xu.shape[0]}")
    return xu[idx]


class GpResidual(ResidualModel):
    """Residual-model adapter: feature selection in front of a GpModel.

    Jacobians of the GP mean with respect to the selected features are
    scattered back into full d/dx and d/du (zero columns elsewhere).
    """

    supplies_covariance = True

    def __init__(self, model: GpModel, feature_indices: tuple[int, ...],
                 n_x: int, n_u: int):
        idx = tuple(int(i) for i in feature_indices)
        if len(idx) != model.kernel.n_feat:
            raise ValueError("feature index count does not match kernel n_feat")
        if idx and (min(idx) < 0 or max(idx) >= n_x + n_u):
            raise IndexError("feature index out of range")
        self.model = model
        self.feature_indices = idx
        self.n_x = n_x
        self.n_u = n_u
        self.n_g = model.kernel.n_g

    def evaluate(self, X, U):
        B = X.shape[0]
        XU = np.hstack([X, U])
        Zq = XU[:, list(self.feature_indices)]
        means, cov, jac_feat = predict(self.model, Zq)
        jx = np.zeros((B, self.n_g, self.n_x))
        ju = np.zeros((B, self.n_g, self.n_u))
        for col, idx in enumerate(self.feature_indices):
            if idx < self.n_x:
                jx[:, :, idx] = jac_feat[:, :, col]
            else:
                ju[:, :, idx - self.n_x] = jac_feat[:, :, col]
        return means, jx, ju, cov


def dataset_to_csv(dataset: GpDataset, path) -> None:
    """CSV with header: feature columns z*, then target columns y*."""
    n_feat = dataset.Z.shape[1]
    n_g = dataset.Y.shape[1]
    header = ",".join([f"z{i}" for i in range(n_feat)] + [f"y{j}" for j in range(n_g)])
    np.savetxt(path, np.hstack([dataset.Z, dataset.Y]), delimiter=",",
               header=header, comments="")


def dataset_from_csv(path, n_g: int, d_max: int | None = None,
                     feature_indices: tuple[int, ...] = ()) -> GpDataset:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] <= n_g:
        raise ValueError(f"{path}: expected feature columns before {n_g} target columns")
    return GpDataset(data[:, :-n_g], data[:, -n_g:], d_max=d_max,
                     feature_indices=feature_indices)


SNAPSHOT_VERSION = 1


def save_model(model: GpModel, path) -> None:
    """Binary snapshot: shapes, hyperparameters and factors (versioned)."""
    extra = {}
    if model.inducing is not None:
        extra["inducing"] = model.inducing
    np.savez(
        path,
        version=SNAPSHOT_VERSION,
        variant=model.variant,
        Z=model.dataset.Z,
        Y=model.dataset.Y,
        d_max=-1 if model.dataset.d_max is None else model.dataset.d_max,
        seed=-1 if model.seed is None else model.seed,
        replace_count=model.replace_count,
        feature_indices=np.asarray(model.dataset.feature_indices, dtype=int),
        signal_variance=model.kernel.signal_variance,
        lengthscales=model.kernel.lengthscales,
        noise_variance=model.kernel.noise_variance,
        L=model.L,
        alpha=model.alpha,
        **extra,
    )


def load_model(path) -> GpModel:
    with np.load(path) as data:
        version = int(data["version"])
        if version != SNAPSHOT_VERSION:
            raise ValueError(f"{path}: unsupported snapshot version {version}")
        d_max = int(data["d_max"])
        ds = GpDataset(data["Z"], data["Y"],
                       d_max=None if d_max < 0 else d_max,
                       feature_indices=tuple(int(i) for i in data["feature_indices"]))
        kern = KernelConfig(data["signal_variance"], data["lengthscales"],
                            data["noise_variance"])
        inducing = data["inducing"] if "inducing" in data else None
        seed = int(data["seed"])
        return GpModel(dataset=ds, kernel=kern, variant=str(data["variant"]),
                       L=data["L"], alpha=data["alpha"], inducing=inducing,
                       seed=None if seed < 0 else seed,
                       replace_count=int(data["replace_count"]))
