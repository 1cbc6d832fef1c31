"""Data containers, latent state and log-densities of the SVARO model.

Gamma distributions are parametrised by shape and *scale* everywhere
(mean = shape * scale).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np
from scipy.special import gammaln

from .lattice import LatticeGraph, LaplacianOperator, laplacian

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(eq=False)
class Dataset:
    """Observed ``Y`` (T x N), full design ``X_full`` (T x K) and lattice.

    The likelihood conditions on the first ``P`` time points.
    """

    Y: np.ndarray
    X_full: np.ndarray
    graph: LatticeGraph
    P: int

    def __post_init__(self):
        self.Y = np.ascontiguousarray(self.Y, dtype=np.float64)
        self.X_full = np.ascontiguousarray(self.X_full, dtype=np.float64)
        if self.X_full.ndim == 1:
            self.X_full = self.X_full[:, None]
        T, N = self.Y.shape
        if self.X_full.shape[0] != T:
            raise ValueError(f"design has {self.X_full.shape[0]} rows, data has T={T}")
        if self.X_full.shape[1] < 1:
            raise ValueError("design needs at least one column")
        if N != self.graph.n_voxels:
            raise ValueError(f"data has {N} voxels, lattice has {self.graph.n_voxels}")
        if not 0 <= self.P < T:
            raise ValueError(f"need T > P >= 0, got T={T}, P={self.P}")

    @property
    def T(self) -> int:
        return self.Y.shape[0]

    @property
    def N(self) -> int:
        return self.Y.shape[1]

    @property
    def K(self) -> int:
        return self.X_full.shape[1]

    @property
    def X(self) -> np.ndarray:
        return self.X_full[self.P:]

    def lagged(self, A: np.ndarray, lag: int) -> np.ndarray:
        """Rows ``P-lag .. T-lag-1`` of a T-row array (lag 0 = modelled rows)."""
        return A[self.P - lag:self.T - lag]

    @cached_property
    def design_gram(self) -> np.ndarray:
        """``G[j, l] = X_lag_j^T X_lag_l`` for lags 0..P, shape (P+1, P+1, K, K)."""
        L = self.P + 1
        G = np.empty((L, L, self.K, self.K))
        for j in range(L):
            for l in range(L):
                G[j, l] = self.lagged(self.X_full, j).T @ self.lagged(self.X_full, l)
        return G

    @cached_property
    def design_cross(self) -> np.ndarray:
        """``H[j, l] = X_lag_j^T Y_lag_l``, shape (P+1, P+1, K, N)."""
        L = self.P + 1
        H = np.empty((L, L, self.K, self.N))
        for j in range(L):
            for l in range(L):
                H[j, l] = self.lagged(self.X_full, j).T @ self.lagged(self.Y, l)
        return H

    @cached_property
    def laplacian(self) -> LaplacianOperator:
        return laplacian(self.graph)


@dataclass
class Hyperparams:
    """Fixed prior constants.

    ``beta0``/``beta1`` hold one Ising pair per AR order. ``w_ridge`` adds a
    multiple of the identity to ``S^T S`` in the regression-coefficient prior
    (zero gives the intrinsic prior).
    """

    beta0: np.ndarray
    beta1: np.ndarray
    q1: float = 1.0
    q2: float = 100.0
    u1: float = 1.0
    u2: float = 100.0
    r1: float = 1.0
    r2: float = 100.0
    epsilon: float = 1e6
    contrast: np.ndarray | None = None
    delta_e: float = 0.0
    delta_p: float = 0.95
    w_ridge: float = 0.0

    def __post_init__(self):
        self.beta0 = np.atleast_1d(np.asarray(self.beta0, dtype=np.float64))
        self.beta1 = np.atleast_1d(np.asarray(self.beta1, dtype=np.float64))
        if self.beta0.shape != self.beta1.shape:
            raise ValueError("beta0 and beta1 must have one entry per AR order")
        for name in ("q1", "q2", "u1", "u2", "r1", "r2"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.epsilon > 1:
            raise ValueError("epsilon must exceed 1")
        if not 0.5 < self.delta_p < 1:
            raise ValueError("delta_p must lie in (0.5, 1)")
        if self.w_ridge < 0:
            raise ValueError("w_ridge must be non-negative")
        if self.contrast is not None:
            self.contrast = np.atleast_1d(np.asarray(self.contrast, dtype=np.float64))

    @property
    def P(self) -> int:
        return int(self.beta0.shape[0])

    @classmethod
    def default(cls, P: int, beta0=-0.2, beta1=0.3, **kw) -> "Hyperparams":
        return cls(beta0=np.full(P, beta0, dtype=float), beta1=np.full(P, beta1, dtype=float), **kw)


def spatial_operator(dataset: Dataset, hyper: Hyperparams) -> LaplacianOperator:
    if hyper.w_ridge:
        return laplacian(dataset.graph, ridge=hyper.w_ridge)
    return dataset.laplacian


@dataclass
class ModelState:
    W: np.ndarray  # (K, N)
    A: np.ndarray  # (P, N)
    Gamma: np.ndarray  # (P, N) int8 in {0, 1}
    alpha: np.ndarray  # (K,)
    tau: np.ndarray  # (P,)
    lam: np.ndarray  # (N,)

    def copy(self) -> "ModelState":
        return ModelState(self.W.copy(), self.A.copy(), self.Gamma.copy(),
                          self.alpha.copy(), self.tau.copy(), self.lam.copy())

    @property
    def a_star(self) -> np.ndarray:
        """Lag filter ``(1, -a_1, ..., -a_P)`` per voxel, shape (N, P+1).

        Sign flipped with respect to the ``a*_0 = -1`` convention; only its
        square enters the likelihood.
        """
        return np.concatenate([np.ones((1, self.A.shape[1])), -self.A], axis=0).T


def residuals(dataset: Dataset, W: np.ndarray, n: int | None = None) -> np.ndarray:
    """Full-length residual ``y - X_full w`` (T-vector, or T x N when n is None)."""
    W = np.asarray(W, dtype=np.float64)
    if n is None:
        return dataset.Y - dataset.X_full @ W
    return dataset.Y[:, n] - dataset.X_full @ W[:, n]


def embed_errors(dataset: Dataset, W: np.ndarray, n: int) -> np.ndarray:
    """Lagged-residual matrix, (T-P) x P, entry (t, p) = residual at t - p."""
    r = residuals(dataset, W, n)
    P, T = dataset.P, dataset.T
    if P == 0:
        return np.zeros((T, 0))
    return np.stack([r[P - p:T - p] for p in range(1, P + 1)], axis=1)


def lag_gram(dataset: Dataset, W: np.ndarray) -> np.ndarray:
    """Per-voxel lag products of the residual, ``C[n, j, l] = sum_t e_{t-j} e_{t-l}``.

    Shape (N, P+1, P+1), summed over modelled rows ``t = P..T-1``.
    Every conditional except the regression-coefficient one is a function
    of this array.
    """
    E = residuals(dataset, W)
    L = dataset.P + 1
    lags = [dataset.lagged(E, j) for j in range(L)]
    C = np.empty((dataset.N, L, L))
    for j in range(L):
        for l in range(j, L):
            C[:, j, l] = np.einsum("tn,tn->n", lags[j], lags[l])
            C[:, l, j] = C[:, j, l]
    return C


def whitened_ssr(C: np.ndarray, A: np.ndarray) -> np.ndarray:
    """AR-whitened residual sum of squares per voxel from :func:`lag_gram`."""
    b = np.concatenate([np.ones((1, A.shape[1])), -A], axis=0).T
    return np.einsum("nj,njl,nl->n", b, C, b)


def voxel_log_likelihood(dataset: Dataset, state: ModelState, C=None) -> np.ndarray:
    """Per-voxel conditional Gaussian log-density of ``y_{P+1:T, n}``."""
    lam = np.asarray(state.lam, dtype=np.float64)
    if np.any(lam <= 0):
        raise ValueError("innovation precisions must be positive")
    if C is None:
        C = lag_gram(dataset, state.W)
    m = dataset.T - dataset.P
    ssr = whitened_ssr(C, state.A)
    return -0.5 * lam * ssr + 0.5 * m * (np.log(lam) - LOG_2PI)


def log_likelihood(dataset: Dataset, state: ModelState) -> float:
    return float(voxel_log_likelihood(dataset, state).sum())


def log_prior_w(W: np.ndarray, alpha: np.ndarray, op: LaplacianOperator) -> float:
    """LORETA prior on the rows of ``W``.

    The pseudo-determinant of ``S^T S`` and the 2*pi terms are omitted; they
    do not depend on any sampled quantity.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(alpha <= 0):
        raise ValueError("spatial precisions must be positive")
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    N = W.shape[1]
    quad = np.einsum("kn,kn->k", W, op.apply(W.T).T)
    return float(np.sum(0.5 * N * np.log(alpha) - 0.5 * alpha * quad))


def spike_factor(Gamma: np.ndarray, epsilon: float) -> np.ndarray:
    """``delta(gamma)``: epsilon where the indicator is 0, else 1."""
    return np.where(np.asarray(Gamma) == 1, 1.0, float(epsilon))


def log_prior_a(A, Gamma, tau, epsilon) -> float:
    """Spike-and-slab prior on AR coefficients, 2*pi constants dropped."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    tau = np.asarray(tau, dtype=np.float64)[:, None]
    d = spike_factor(Gamma, epsilon)
    return float(np.sum(-0.5 * tau * A**2 * d + 0.5 * np.log(tau) + 0.5 * np.log(d)))


def gamma_flip_log_odds(a, tau, epsilon) -> np.ndarray:
    """``log pi(a | gamma=1) - log pi(a | gamma=0)`` for the spike-and-slab prior."""
    a = np.asarray(a, dtype=np.float64)
    return 0.5 * (epsilon - 1.0) * tau * a**2 - 0.5 * np.log(epsilon)


def log_ising(gamma_p, beta0: float, beta1: float, graph: LatticeGraph) -> float:
    """Unnormalised Ising log-mass with the agreement-indicator coupling."""
    g = np.asarray(gamma_p).astype(np.int64)
    i, j = graph.adjacency[:, 0], graph.adjacency[:, 1]
    return float(beta0 * g.sum() + beta1 * np.count_nonzero(g[i] == g[j]))


def gamma_logpdf(x, shape, scale) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return (shape - 1.0) * np.log(x) - x / scale - gammaln(shape) - shape * np.log(scale)


def log_joint(dataset: Dataset, state: ModelState, hyper: Hyperparams) -> float:
    """Unnormalised log-posterior.

    Sum of the likelihood, all log-priors and the normalised Gamma
    hyperprior densities. Omitted constants (Ising partition functions,
    ``log det+ S^T S``, Gaussian 2*pi terms of the priors) never depend on
    sampled quantities.
    """
    op = spatial_operator(dataset, hyper)
    out = log_likelihood(dataset, state)
    out += log_prior_w(state.W, state.alpha, op)
    if dataset.P:
        out += log_prior_a(state.A, state.Gamma, state.tau, hyper.epsilon)
        for p in range(dataset.P):
            out += log_ising(state.Gamma[p], hyper.beta0[p], hyper.beta1[p], dataset.graph)
        out += float(gamma_logpdf(state.tau, hyper.u1, hyper.u2).sum())
    out += float(gamma_logpdf(state.alpha, hyper.q1, hyper.q2).sum())
    out += float(gamma_logpdf(state.lam, hyper.r1, hyper.r2).sum())
    return out


def initial_state(dataset: Dataset, hyper: Hyperparams, ridge: float = 1e-6) -> ModelState:
    """Ridge least squares for ``W``; zeros for ``A`` and ``Gamma``; prior means elsewhere."""
    X = dataset.X
    K, N, P = dataset.K, dataset.N, dataset.P
    XtX = X.T @ X
    W = np.linalg.solve(XtX + ridge * np.trace(XtX) / K * np.eye(K), X.T @ dataset.Y[P:])
    return ModelState(
        W=W,
        A=np.zeros((P, N)),
        Gamma=np.zeros((P, N), dtype=np.int8),
        alpha=np.full(K, hyper.q1 * hyper.q2),
        tau=np.full(P, hyper.u1 * hyper.u2),
        lam=np.full(N, hyper.r1 * hyper.r2),
    )


def with_state(state: ModelState, **changes) -> ModelState:
    return replace(state.copy(), **changes)
