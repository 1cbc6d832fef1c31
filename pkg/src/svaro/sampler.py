"""Gibbs / Swendsen-Wang posterior sampler.

One sweep updates, in order: every ``w_n`` (color by color), every ``a_n``,
every ``gamma_p``, every ``alpha_k``, every ``tau_p`` and every ``lambda_n``.

Random numbers come from counter-based Philox streams keyed by
``(seed, iteration, block)``; each block draws one array indexed by voxel
in the calling thread, and worker threads only split the linear algebra
over fixed-size voxel chunks. Output is therefore identical for any
thread count.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ising
from .lattice import LaplacianOperator, color_for_sweep
from .model import (
    Dataset,
    Hyperparams,
    ModelState,
    gamma_flip_log_odds,
    initial_state,
    lag_gram,
    spatial_operator,
    spike_factor,
    voxel_log_likelihood,
    whitened_ssr,
)

log = logging.getLogger(__name__)

# stream block ids
_W, _A, _GAMMA, _ALPHA, _TAU, _LAMBDA = 0, 1000, 2000, 3000, 3001, 3002


class SamplerError(RuntimeError):
    pass


@dataclass
class SamplerConfig:
    n_burnin: int = 1000
    n_samples: int = 1000
    thin: int = 1
    seed: int = 0
    sw_period: int = 5
    gamma_scan: str = "checkerboard"  # "checkerboard" | "raster" | "random"
    neighbor_rule: str = "ising"  # "ising" | "count"
    store_draws: bool = False
    store_loglik: bool = True
    contrasts: list = field(default_factory=list)  # [{"c": [...], "delta_e": float}]
    n_threads: int = 1
    chunk_size: int = 128

    def __post_init__(self):
        if self.n_burnin < 0 or self.n_samples < 0:
            raise ValueError("n_burnin and n_samples must be non-negative")
        if self.thin < 1 or self.sw_period < 1 or self.n_threads < 1 or self.chunk_size < 1:
            raise ValueError("thin, sw_period, n_threads and chunk_size must be positive")
        if self.gamma_scan not in ("checkerboard", "raster", "random"):
            raise ValueError(f"unknown gamma_scan {self.gamma_scan!r}")
        if self.neighbor_rule not in ("ising", "count"):
            raise ValueError(f"unknown neighbor_rule {self.neighbor_rule!r}")

    def to_dict(self) -> dict:
        return asdict(self)


class Streams:
    """Counter-based random streams, one per (iteration, block)."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._key = np.random.SeedSequence(self.seed).generate_state(2, np.uint64)

    def __call__(self, iteration: int, block: int) -> np.random.Generator:
        bg = np.random.Philox(key=self._key, counter=[0, 0, block, iteration])
        return np.random.Generator(bg)


# --------------------------------------------------------------------------
# Gaussian helpers


def _chol(Q: np.ndarray, what: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(Q)
    except np.linalg.LinAlgError:
        dim = Q.shape[-1]
        jit = 1e-10 * np.trace(Q, axis1=-2, axis2=-1) / dim
        try:
            return np.linalg.cholesky(Q + jit[..., None, None] * np.eye(dim))
        except np.linalg.LinAlgError as exc:
            raise SamplerError(f"{what}: conditional precision not positive definite") from exc


def gaussian_from_precision(Q: np.ndarray, rhs: np.ndarray, z: np.ndarray, what="gaussian"):
    """Batched draw from ``N(Q^-1 rhs, Q^-1)`` using standard normals ``z``."""
    L = _chol(Q, what)
    mean = np.linalg.solve(Q, rhs[..., None])[..., 0]
    Lt = np.swapaxes(L, -1, -2)
    return mean + np.linalg.solve(Lt, z[..., None])[..., 0]


def _moments_from_precision(Q, rhs):
    cov = np.linalg.inv(Q)
    return cov @ rhs, cov


# --------------------------------------------------------------------------
# Full conditionals (batched over voxel index arrays)


def _w_precision(idx, state: ModelState, dataset: Dataset, hyper: Hyperparams, op: LaplacianOperator,
                 offdiag_rows=None):
    b = state.a_star[idx]  # (m, P+1)
    G, H = dataset.design_gram, dataset.design_cross
    XtX = np.einsum("mj,ml,jlab->mab", b, b, G)
    Xty = np.einsum("mj,ml,jlam->ma", b, b, H[..., idx])
    lam = state.lam[idx]
    Q = lam[:, None, None] * XtX + op.diag[idx][:, None, None] * np.diag(state.alpha)
    rows = op.offdiag[idx] if offdiag_rows is None else offdiag_rows
    neigh = rows @ state.W.T  # (m, K)
    rhs = lam[:, None] * Xty - state.alpha * neigh
    return Q, rhs


def _a_precision(idx, state: ModelState, C: np.ndarray, hyper: Hyperparams):
    lam = state.lam[idx]
    Caa = C[idx, 1:, 1:]
    cea = C[idx, 1:, 0]
    prior = (state.tau[:, None] * spike_factor(state.Gamma[:, idx], hyper.epsilon)).T  # (m, P)
    Q = lam[:, None, None] * Caa + prior[:, :, None] * np.eye(Caa.shape[-1])
    return Q, lam[:, None] * cea


def w_conditional(n, state, dataset, hyper):
    """Mean and covariance of ``w_n`` given everything else."""
    Q, rhs = _w_precision(np.array([n]), state, dataset, hyper, spatial_operator(dataset, hyper))
    mean, cov = _moments_from_precision(Q[0], rhs[0])
    return mean, cov


def a_conditional(n, state, dataset, hyper):
    C = lag_gram(dataset, state.W)
    Q, rhs = _a_precision(np.array([n]), state, C, hyper)
    mean, cov = _moments_from_precision(Q[0], rhs[0])
    return mean, cov


def alpha_conditional(k, state, dataset, hyper):
    """(shape, scale) of the spatial precision ``alpha_k``."""
    op = spatial_operator(dataset, hyper)
    quad = op.quad(state.W[k])
    return dataset.N / 2 + hyper.q1, 1.0 / (0.5 * quad + 1.0 / hyper.q2)


def tau_conditional(p, state, hyper):
    a = state.A[p]
    ss = np.sum(a**2 * spike_factor(state.Gamma[p], hyper.epsilon))
    return a.size / 2 + hyper.u1, 1.0 / (0.5 * ss + 1.0 / hyper.u2)


def lambda_conditional(n, state, dataset, hyper, C=None):
    if C is None:
        C = lag_gram(dataset, state.W)
    ssr = whitened_ssr(C[[n]], state.A[:, [n]])[0]
    return (dataset.T - dataset.P) / 2 + hyper.r1, 1.0 / (0.5 * ssr + 1.0 / hyper.r2)


def gamma_field(p, state, hyper) -> np.ndarray:
    """Per-voxel log L(gamma=1)/L(gamma=0) from the spike-and-slab prior on ``a_pn``."""
    return gamma_flip_log_odds(state.A[p], state.tau[p], hyper.epsilon)


def gamma_site_probability(p, n, state, dataset, hyper, neighbor_rule="ising") -> float:
    lo = ising.site_log_odds(state.Gamma[p], dataset.graph, np.array([n]), hyper.beta0[p],
                             hyper.beta1[p], gamma_field(p, state, hyper), neighbor_rule)[0]
    return float(1.0 / (1.0 + np.exp(-lo)))


# --------------------------------------------------------------------------
# Single-block updates for one voxel / order (used by tests and tools)


def update_w(n, state, dataset, hyper, rng) -> np.ndarray:
    Q, rhs = _w_precision(np.array([n]), state, dataset, hyper, spatial_operator(dataset, hyper))
    z = rng.standard_normal((1, dataset.K))
    return gaussian_from_precision(Q, rhs, z, f"w update at voxel {n}")[0]


def update_a(n, state, dataset, hyper, rng, C=None) -> np.ndarray:
    if C is None:
        C = lag_gram(dataset, state.W)
    Q, rhs = _a_precision(np.array([n]), state, C, hyper)
    z = rng.standard_normal((1, dataset.P))
    return gaussian_from_precision(Q, rhs, z, f"a update at voxel {n}")[0]


def update_gamma_gibbs(p, state, dataset, hyper, rng, scan="checkerboard", neighbor_rule="ising"):
    N = dataset.N
    u = rng.random(N)
    order = rng.permutation(N) if scan == "random" else None
    return ising.gibbs_sweep(state.Gamma[p], dataset.graph, hyper.beta0[p], hyper.beta1[p],
                             gamma_field(p, state, hyper), u, scan, order, neighbor_rule)


def update_gamma_sw(p, state, dataset, hyper, rng):
    g = dataset.graph
    u_bond = rng.random(g.n_pairs)
    u_site = rng.random(g.n_voxels)
    return ising.sw_sweep(state.Gamma[p], g, hyper.beta0[p], hyper.beta1[p],
                          gamma_field(p, state, hyper), u_bond, u_site)


def update_alpha(k, state, dataset, hyper, rng) -> float:
    shape, scale = alpha_conditional(k, state, dataset, hyper)
    return float(rng.gamma(shape, scale))


def update_tau(p, state, hyper, rng) -> float:
    shape, scale = tau_conditional(p, state, hyper)
    return float(rng.gamma(shape, scale))


def update_lambda(n, state, dataset, hyper, rng) -> float:
    shape, scale = lambda_conditional(n, state, dataset, hyper)
    return float(rng.gamma(shape, scale))


# --------------------------------------------------------------------------
# Chain output


@dataclass
class ChainOutput:
    n_draws: int
    W_mean: np.ndarray
    W_var: np.ndarray
    A_mean: np.ndarray
    A_var: np.ndarray
    lam_mean: np.ndarray
    lam_var: np.ndarray
    gamma_freq: np.ndarray
    max_order_mean: np.ndarray
    order_count_mean: np.ndarray
    alpha_draws: np.ndarray
    tau_draws: np.ndarray
    exceed_counts: np.ndarray  # (n_contrasts, N)
    loglik_trace: np.ndarray  # total log-likelihood at every iteration
    contrasts: list = field(default_factory=list)
    W_draws: np.ndarray | None = None
    loglik_draws: np.ndarray | None = None
    seed: int = 0
    config: dict = field(default_factory=dict)
    final_state: ModelState | None = None

    ARRAYS = ("W_mean", "W_var", "A_mean", "A_var", "lam_mean", "lam_var", "gamma_freq",
              "max_order_mean", "order_count_mean", "alpha_draws", "tau_draws",
              "exceed_counts", "loglik_trace", "W_draws", "loglik_draws")

    def arrays(self) -> dict:
        out = {k: getattr(self, k) for k in self.ARRAYS if getattr(self, k) is not None}
        if self.final_state is not None:
            s = self.final_state
            out.update(final_W=s.W, final_A=s.A, final_Gamma=s.Gamma, final_alpha=s.alpha,
                       final_tau=s.tau, final_lam=s.lam)
        return out

    def metadata(self) -> dict:
        return {"n_draws": self.n_draws, "seed": self.seed, "config": self.config,
                "contrasts": self.contrasts}

    @classmethod
    def from_parts(cls, arrays: dict, meta: dict) -> "ChainOutput":
        kw = {k: arrays.get(k) for k in cls.ARRAYS}
        final = None
        if "final_W" in arrays:
            final = ModelState(arrays["final_W"], arrays["final_A"], arrays["final_Gamma"],
                               arrays["final_alpha"], arrays["final_tau"], arrays["final_lam"])
        return cls(n_draws=int(meta["n_draws"]), seed=int(meta["seed"]), config=meta["config"],
                   contrasts=meta["contrasts"], final_state=final, **kw)


class _Accumulator:
    def __init__(self, K, P, N, n_keep, contrasts, store_draws, store_loglik):
        self.k = 0
        self.W_mean = np.zeros((K, N)); self.W_m2 = np.zeros((K, N))
        self.A_mean = np.zeros((P, N)); self.A_m2 = np.zeros((P, N))
        self.lam_mean = np.zeros(N); self.lam_m2 = np.zeros(N)
        self.gamma_count = np.zeros((P, N), dtype=np.int64)
        self.max_order_sum = np.zeros(N)
        self.count_sum = np.zeros(N)
        self.alpha = np.zeros((n_keep, K)); self.tau = np.zeros((n_keep, P))
        self.contrasts = contrasts
        self.exceed = np.zeros((len(contrasts), N), dtype=np.int64)
        self.W_draws = np.zeros((n_keep, K, N)) if store_draws else None
        self.loglik = np.zeros((n_keep, N)) if store_loglik else None

    @staticmethod
    def _welford(mean, m2, x, k):
        d = x - mean
        mean += d / k
        m2 += d * (x - mean)

    def add(self, state: ModelState, loglik):
        i = self.k
        self.k += 1
        k = self.k
        self._welford(self.W_mean, self.W_m2, state.W, k)
        self._welford(self.A_mean, self.A_m2, state.A, k)
        self._welford(self.lam_mean, self.lam_m2, state.lam, k)
        G = state.Gamma.astype(np.int64)
        self.gamma_count += G
        P = G.shape[0]
        orders = np.arange(1, P + 1)[:, None]
        self.max_order_sum += (G * orders).max(axis=0) if P else 0
        self.count_sum += G.sum(axis=0)
        self.alpha[i] = state.alpha
        self.tau[i] = state.tau
        for j, (c, de) in enumerate(self.contrasts):
            self.exceed[j] += (c @ state.W) > de
        if self.W_draws is not None:
            self.W_draws[i] = state.W
        if self.loglik is not None:
            self.loglik[i] = loglik

    def finish(self, trace, seed, config, final_state) -> ChainOutput:
        k = max(self.k, 1)
        return ChainOutput(
            n_draws=self.k,
            W_mean=self.W_mean, W_var=self.W_m2 / k,
            A_mean=self.A_mean, A_var=self.A_m2 / k,
            lam_mean=self.lam_mean, lam_var=self.lam_m2 / k,
            gamma_freq=self.gamma_count / k,
            max_order_mean=self.max_order_sum / k,
            order_count_mean=self.count_sum / k,
            alpha_draws=self.alpha[:self.k], tau_draws=self.tau[:self.k],
            exceed_counts=self.exceed,
            loglik_trace=trace,
            contrasts=[{"c": c.tolist(), "delta_e": float(de)} for c, de in self.contrasts],
            W_draws=self.W_draws, loglik_draws=self.loglik,
            seed=seed, config=config, final_state=final_state,
        )


# --------------------------------------------------------------------------
# Chain driver


def _contrast_list(config: SamplerConfig, hyper: Hyperparams, K: int):
    out = []
    if hyper.contrast is not None:
        out.append((hyper.contrast, hyper.delta_e))
    for item in config.contrasts:
        out.append((np.asarray(item["c"], dtype=np.float64), float(item["delta_e"])))
    for c, _ in out:
        if c.shape != (K,):
            raise ValueError(f"contrast has length {c.shape[0]}, expected K={K}")
    return out


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=lambda o: np.asarray(o).tolist())
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def run_chain(dataset: Dataset, hyper: Hyperparams, config: SamplerConfig,
              clamp_gamma: np.ndarray | None = None, init: ModelState | None = None,
              callback=None) -> ChainOutput:
    """Run one chain; ``clamp_gamma`` freezes the indicators and skips their update."""
    K, N, P = dataset.K, dataset.N, dataset.P
    if hyper.P != P:
        raise ValueError(f"hyperparameters cover {hyper.P} orders, dataset has P={P}")
    contrasts = _contrast_list(config, hyper, K)
    op = spatial_operator(dataset, hyper)
    groups = color_for_sweep(dataset.graph).groups()
    group_rows = [op.offdiag[g] for g in groups]
    streams = Streams(config.seed)

    state = init.copy() if init is not None else initial_state(dataset, hyper)
    if clamp_gamma is not None:
        clamp_gamma = np.asarray(clamp_gamma, dtype=np.int8)
        if clamp_gamma.shape != (P, N):
            raise ValueError("clamp_gamma must have shape (P, N)")
        state.Gamma = clamp_gamma.copy()

    total = config.n_burnin + config.n_samples
    n_keep = config.n_samples // config.thin
    acc = _Accumulator(K, P, N, n_keep, contrasts, config.store_draws, config.store_loglik)
    trace = np.empty(total)
    pool = ThreadPoolExecutor(config.n_threads) if config.n_threads > 1 else None

    def chunked(fn, idx):
        parts = [idx[s:s + config.chunk_size] for s in range(0, len(idx), config.chunk_size)]
        if pool is None:
            res = [fn(p) for p in parts]
        else:
            res = list(pool.map(fn, parts))
        return np.concatenate(res, axis=0)

    try:
        for it in range(total):
            # 1. regression coefficients, one color class at a time
            for c, (idx, rows) in enumerate(zip(groups, group_rows)):
                z = streams(it, _W + c).standard_normal((len(idx), K))
                def draw_w(sub, idx=idx, rows=rows, z=z):
                    loc = np.searchsorted(idx, sub)
                    Q, rhs = _w_precision(sub, state, dataset, hyper, op, rows[loc])
                    return gaussian_from_precision(Q, rhs, z[loc], f"iteration {it}: w update")

                state.W[:, idx] = chunked(draw_w, idx).T

            C = lag_gram(dataset, state.W)

            # 2. AR coefficients
            if P:
                z = streams(it, _A).standard_normal((N, P))

                def draw_a(sub, z=z, C=C):
                    Q, rhs = _a_precision(sub, state, C, hyper)
                    return gaussian_from_precision(Q, rhs, z[sub], f"iteration {it}: a update")

                state.A = chunked(draw_a, np.arange(N)).T.copy()

            # 3. inclusion indicators
            if P and clamp_gamma is None:
                use_sw = it % config.sw_period == 0
                for p in range(P):
                    rng = streams(it, _GAMMA + p)
                    if use_sw and hyper.beta1[p] >= 0:
                        state.Gamma[p] = update_gamma_sw(p, state, dataset, hyper, rng)
                    else:
                        state.Gamma[p] = update_gamma_gibbs(p, state, dataset, hyper, rng,
                                                            config.gamma_scan, config.neighbor_rule)

            # 4. spatial precisions
            rng = streams(it, _ALPHA)
            quad = np.einsum("kn,kn->k", state.W, op.apply(state.W.T).T)
            state.alpha = rng.gamma(N / 2 + hyper.q1, 1.0 / (0.5 * quad + 1.0 / hyper.q2))

            # 5. slab precisions
            if P:
                rng = streams(it, _TAU)
                ss = np.sum(state.A**2 * spike_factor(state.Gamma, hyper.epsilon), axis=1)
                state.tau = rng.gamma(N / 2 + hyper.u1, 1.0 / (0.5 * ss + 1.0 / hyper.u2))

            # 6. innovation precisions
            rng = streams(it, _LAMBDA)
            ssr = whitened_ssr(C, state.A)
            state.lam = rng.gamma((dataset.T - dataset.P) / 2 + hyper.r1,
                                  1.0 / (0.5 * ssr + 1.0 / hyper.r2))

            for name in ("W", "A", "alpha", "tau", "lam"):
                if not np.all(np.isfinite(getattr(state, name))):
                    bad = np.argwhere(~np.isfinite(getattr(state, name)))[:3].tolist()
                    raise SamplerError(f"iteration {it}: non-finite {name} at {bad}")
            if np.any(state.lam <= 0) or np.any(state.alpha <= 0) or (P and np.any(state.tau <= 0)):
                raise SamplerError(f"iteration {it}: precision underflow")

            ll = voxel_log_likelihood(dataset, state, C)
            trace[it] = ll.sum()
            kept = it - config.n_burnin
            if kept >= 0 and (kept + 1) % config.thin == 0 and acc.k < n_keep:
                acc.add(state, ll)
            if callback is not None:
                callback(it, state)
    finally:
        if pool is not None:
            pool.shutdown()

    # thread count is an execution detail and does not change any draw
    sampler_echo = {k: v for k, v in config.to_dict().items() if k != "n_threads"}
    echo = {"sampler": sampler_echo, "hyper": _hyper_echo(hyper),
            "clamped": clamp_gamma is not None}
    echo["hash"] = config_hash(echo)
    return acc.finish(trace, config.seed, echo, state)


def _hyper_echo(hyper: Hyperparams) -> dict:
    out = {}
    for k, v in asdict(hyper).items():
        out[k] = np.asarray(v).tolist() if isinstance(v, np.ndarray) else v
    return out


def fixed_order_baseline(dataset: Dataset, hyper: Hyperparams, config: SamplerConfig, P0: int,
                         **kw) -> ChainOutput:
    """Homogeneous AR(P0) comparator: slabs on for orders <= P0, spikes above, never updated."""
    P = dataset.P
    if not 0 <= P0 <= P:
        raise ValueError(f"P0 must lie in [0, {P}]")
    clamp = np.zeros((P, dataset.N), dtype=np.int8)
    clamp[:P0] = 1
    return run_chain(dataset, hyper, config, clamp_gamma=clamp, **kw)
