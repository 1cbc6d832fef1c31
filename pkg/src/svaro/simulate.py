"""Synthetic datasets with known truth for the two simulation designs."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.signal import lfilter
from scipy.stats import gamma as gamma_dist

from .ising import IsingSamplerConfig, sample_ising_prior
from .lattice import LaplacianOperator, build_lattice, laplacian
from .model import Dataset


class SimulationError(RuntimeError):
    pass


@dataclass
class GroundTruth:
    W_true: np.ndarray  # (K, N)
    A_true: np.ndarray  # (P, N)
    Gamma_true: np.ndarray  # (P, N)
    lambda_true: np.ndarray  # (N,)

    @property
    def max_order(self) -> np.ndarray:
        """Largest included order per voxel (0 when none)."""
        P = self.Gamma_true.shape[0]
        if P == 0:
            return np.zeros(self.Gamma_true.shape[1], dtype=np.int64)
        return (self.Gamma_true * np.arange(1, P + 1)[:, None]).max(axis=0).astype(np.int64)

    def activation_threshold(self, c, top: float = 0.10) -> float:
        """True contrast value exceeded by the top ``top`` fraction of voxels."""
        return float(np.quantile(np.asarray(c) @ self.W_true, 1.0 - top))

    def active_set(self, c, top: float = 0.10) -> np.ndarray:
        vals = np.asarray(c) @ self.W_true
        return (vals > self.activation_threshold(c, top)).astype(np.int8)


def canonical_hrf(tr: float = 2.0, length: float = 32.0) -> np.ndarray:
    """Double-gamma response (peak 6 s, undershoot 16 s, ratio 1/6), unit sum."""
    t = np.arange(0.0, length, tr)
    h = gamma_dist.pdf(t, 6.0) - gamma_dist.pdf(t, 16.0) / 6.0
    return h / h.sum()


def block_regressor(T: int, period: int = 20, tr: float = 2.0) -> np.ndarray:
    """Boxcar (half period on, half off) convolved with the canonical HRF, peak 1."""
    box = ((np.arange(T) % period) < period // 2).astype(np.float64)
    x = np.convolve(box, canonical_hrf(tr))[:T]
    return x / np.abs(x).max()


def design_matrix(T: int, regressor=None) -> np.ndarray:
    """Two columns: the task regressor and an intercept."""
    reg = block_regressor(T) if regressor is None else np.asarray(regressor, dtype=np.float64)
    if reg.shape != (T,):
        raise ValueError(f"regressor must have length T={T}")
    return np.column_stack([reg, np.ones(T)])


def sample_gmrf(mean: float, precision_scale: float, op: LaplacianOperator,
                jitter: float | None, rng: np.random.Generator) -> np.ndarray:
    """Draw from ``N(mean, (precision_scale * S^T S + jitter * I)^-1)``.

    ``jitter=None`` uses ``1e-4 * precision_scale``.
    """
    if not precision_scale > 0:
        raise ValueError("precision_scale must be positive")
    if jitter is None:
        jitter = 1e-4 * precision_scale
    if jitter < 0:
        raise ValueError("jitter must be non-negative")
    Q = precision_scale * op.StS.toarray() + jitter * np.eye(op.n)
    try:
        U = sla.cholesky(Q, lower=False)
    except np.linalg.LinAlgError as exc:
        raise SimulationError("precision is singular; use a positive jitter") from exc
    if np.min(np.abs(np.diag(U))) < 1e-10 * np.max(np.abs(np.diag(U))):
        raise SimulationError("precision is singular; use a positive jitter")
    z = rng.standard_normal(op.n)
    return mean + sla.solve_triangular(U, z, lower=False)


def check_stationarity(a) -> bool:
    """True when every companion-matrix eigenvalue lies strictly inside the unit circle."""
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    # trailing zeros do not change the roots
    nz = np.flatnonzero(a)
    if nz.size == 0:
        return True
    a = a[:nz[-1] + 1]
    p = a.size
    comp = np.zeros((p, p))
    comp[0] = a
    comp[1:, :-1] = np.eye(p - 1)
    return bool(np.max(np.abs(np.linalg.eigvals(comp))) < 1.0)


@dataclass
class SimConfig:
    dims: tuple = (20, 20)
    mask: list | None = None
    T: int = 200
    P: int = 8  # maximum AR order carried by the dataset / model
    design: str = "sim1"  # "sim1" (Ising orders) | "sim2" (homogeneous AR(1))
    regressor: list | None = None
    lam: float = 0.1
    w1_mean: float = 0.0
    w2_mean: float = 100.0
    w_precision: float = 10.0
    w_jitter: float | None = None
    # sim1
    tau: float = 20.0
    beta0: float = -0.2
    beta1: float = 0.3
    ising_burnin: int = 500
    force_gamma_zero: bool = False
    # sim2
    true_order: int = 1
    ar_precision: float = 400.0
    ar_mean: float = 0.3
    ar_jitter: float = 100.0
    max_retries: int = 1000

    @classmethod
    def preset(cls, name: str, **overrides) -> "SimConfig":
        if name == "sim1":
            base = cls(design="sim1", P=8)
        elif name == "sim2":
            base = cls(design="sim2", P=12, tau=400.0)
        else:
            raise ValueError(f"unknown preset {name!r}")
        for k, v in overrides.items():
            if not hasattr(base, k):
                raise ValueError(f"unknown simulation option {k!r}")
            setattr(base, k, v)
        return base

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        return d


def _streams(seed):
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return ss.spawn(4)


def _noise(dataset_T: int, P: int, A: np.ndarray, lam: np.ndarray, seeds) -> np.ndarray:
    """AR innovations run through each voxel's filter after a 10*P-point warm-up."""
    burn = 10 * P
    N = A.shape[1]
    E = np.empty((dataset_T, N))
    for n in range(N):
        rng = np.random.default_rng(seeds[n])
        z = rng.standard_normal(dataset_T + burn) / np.sqrt(lam[n])
        e = lfilter([1.0], np.r_[1.0, -A[:, n]], z)
        E[:, n] = e[burn:]
    return E


def _w_fields(cfg: SimConfig, op, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    w1 = sample_gmrf(cfg.w1_mean, cfg.w_precision, op, cfg.w_jitter, rng)
    w2 = sample_gmrf(cfg.w2_mean, cfg.w_precision, op, cfg.w_jitter, rng)
    return np.vstack([w1, w2])


def _assemble(cfg, graph, X_full, W, A, Gamma, noise_seeds):
    N = graph.n_voxels
    lam = np.full(N, cfg.lam)
    E = _noise(cfg.T, cfg.P, A, lam, noise_seeds)
    Y = X_full @ W + E
    return Dataset(Y=Y, X_full=X_full, graph=graph, P=cfg.P), GroundTruth(W, A, Gamma, lam)


def simulate_svaro(cfg: SimConfig, seed=0):
    """Orders drawn from per-order Ising fields, slab coefficients N(0, 1/tau)."""
    graph = build_lattice(cfg.dims, cfg.mask)
    op = laplacian(graph)
    N, P = graph.n_voxels, cfg.P
    s_ising, s_w, s_ar, s_noise = _streams(seed)
    X_full = design_matrix(cfg.T, cfg.regressor)

    Gamma = np.zeros((P, N), dtype=np.int8)
    if not cfg.force_gamma_zero:
        for p, ss in enumerate(s_ising.spawn(P)):
            rng = np.random.default_rng(ss)
            icfg = IsingSamplerConfig(n_sweeps=1, n_burnin=cfg.ising_burnin)
            Gamma[p] = sample_ising_prior(graph, cfg.beta0, cfg.beta1, icfg, rng)[-1]

    A = np.zeros((P, N))
    for n, ss in enumerate(s_ar.spawn(N)):
        on = Gamma[:, n] == 1
        if not on.any():
            continue
        rng = np.random.default_rng(ss)
        for _ in range(cfg.max_retries):
            a = np.zeros(P)
            a[on] = rng.standard_normal(on.sum()) / np.sqrt(cfg.tau)
            if check_stationarity(a):
                break
        else:
            raise SimulationError(
                f"voxel {n}: no stationary AR draw in {cfg.max_retries} tries; "
                "increase tau or lower beta0/beta1")
        A[:, n] = a

    W = _w_fields(cfg, op, s_w)
    return _assemble(cfg, graph, X_full, W, A, Gamma, s_noise.spawn(N))


def simulate_glmar(cfg: SimConfig, seed=0):
    """Homogeneous order ``true_order`` with spatially smooth coefficients."""
    graph = build_lattice(cfg.dims, cfg.mask)
    op = laplacian(graph)
    N, P = graph.n_voxels, cfg.P
    if not 1 <= cfg.true_order <= P:
        raise ValueError("true_order must lie in [1, P]")
    s_ising, s_w, s_ar, s_noise = _streams(seed)
    X_full = design_matrix(cfg.T, cfg.regressor)

    rng = np.random.default_rng(s_ar)
    A = np.zeros((P, N))
    for _ in range(cfg.max_retries):
        for p in range(cfg.true_order):
            A[p] = sample_gmrf(cfg.ar_mean if p == 0 else 0.0, cfg.ar_precision, op,
                               cfg.ar_jitter, rng)
        if all(check_stationarity(A[:, n]) for n in range(N)):
            break
    else:
        raise SimulationError(
            f"no stationary AR field in {cfg.max_retries} tries; raise ar_jitter or ar_precision")
    Gamma = np.zeros((P, N), dtype=np.int8)
    Gamma[:cfg.true_order] = 1

    W = _w_fields(cfg, op, s_w)
    return _assemble(cfg, graph, X_full, W, A, Gamma, s_noise.spawn(N))


def simulate(cfg: SimConfig, seed=0):
    if cfg.design == "sim1":
        return simulate_svaro(cfg, seed)
    if cfg.design == "sim2":
        return simulate_glmar(cfg, seed)
    raise ValueError(f"unknown design {cfg.design!r}")
