"""Ising prior on binary inclusion fields.

The model is ``P(g) ~ exp(beta0 * sum_n g_n + beta1 * #{n1~n2 : g_n1 == g_n2})``,
optionally tilted by a per-site external field ``h`` (log-likelihood ratio
of g_n = 1 versus g_n = 0) when used inside the posterior sampler.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.special import expit, logsumexp

from .lattice import LatticeGraph, cube_neighbor_pair_count

MAX_ENUMERATION_VOXELS = 20


# --------------------------------------------------------------------------
# Hyperparameter bounds


@dataclass(frozen=True)
class IsingBoundInput:
    N: int
    pi_p: float
    R2: float
    T_len: int

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be positive")
        if not 0 < self.pi_p < 1:
            raise ValueError("pi_p must lie in (0, 1)")
        if not 0 <= self.R2 < 1:
            raise ValueError("R2 must lie in [0, 1)")
        if self.T_len < 1:
            raise ValueError("T_len must be positive")


@dataclass(frozen=True)
class IsingBound:
    """``beta0 + coef * beta1 >= rhs`` (low orders) and ``beta0 + 3 beta1 < 0`` (high orders)."""

    V: float
    coef: float
    rhs: float
    sparsity_coef: float = 3.0

    def low_order_ok(self, beta0: float, beta1: float) -> bool:
        return beta0 + self.coef * beta1 >= self.rhs

    def high_order_ok(self, beta0: float, beta1: float) -> bool:
        return beta0 + self.sparsity_coef * beta1 < 0

    def verdict(self, beta0: float, beta1: float) -> dict:
        return {
            "lower_bound": bool(self.low_order_ok(beta0, beta1)),
            "sparsity": bool(self.high_order_ok(beta0, beta1)),
        }


def ising_bounds(inp: IsingBoundInput) -> IsingBound:
    """Phase-transition guard for one order's Ising hyperparameters.

    A candidate set of ``pi_p * N`` voxels is treated as a cube of edge
    ``V = (pi_p N)^(1/3)`` with ``3 V^2 (V-1)`` neighbour pairs. Requiring the
    included configuration to beat the empty one when each inclusion explains
    a fraction ``R2`` of variance gives, after dividing by ``V^3``,
    ``beta0 + 3 (V-1)/V * beta1 >= -T R2 / (2 (1 - R2))``.
    """
    if inp.R2 >= 1:
        raise ValueError("R2 must be < 1")
    V = (inp.pi_p * inp.N) ** (1.0 / 3.0)
    coef = cube_neighbor_pair_count(V) / V**3
    rhs = -0.5 * inp.T_len * inp.R2 / (1.0 - inp.R2)
    return IsingBound(V=V, coef=coef, rhs=rhs)


def check_hyperparameters(beta0, beta1, bound: IsingBound, high_orders=()) -> list[str]:
    """Warn (never raise) about Ising pairs outside the advisory region."""
    problems = []
    for p, (b0, b1) in enumerate(zip(np.atleast_1d(beta0), np.atleast_1d(beta1)), start=1):
        if p in high_orders:
            if not bound.high_order_ok(b0, b1):
                problems.append(f"order {p}: beta0 + 3*beta1 = {b0 + 3 * b1:.3f} is not < 0")
        elif not bound.low_order_ok(b0, b1):
            problems.append(
                f"order {p}: beta0 + {bound.coef:.2f}*beta1 = {b0 + bound.coef * b1:.3f} < {bound.rhs:.3f}")
    for msg in problems:
        warnings.warn(msg, stacklevel=2)
    return problems


# --------------------------------------------------------------------------
# Exact enumeration


@dataclass(frozen=True)
class ExactIsing:
    marginals: np.ndarray
    log_z: float


def all_states(n: int) -> np.ndarray:
    """All 2^n binary configurations, shape (2^n, n), int8."""
    codes = np.arange(2**n, dtype=np.int64)
    return ((codes[:, None] >> np.arange(n)) & 1).astype(np.int8)


def ising_log_mass(states, graph: LatticeGraph, beta0, beta1, field=None) -> np.ndarray:
    states = np.atleast_2d(states)
    i, j = graph.adjacency[:, 0], graph.adjacency[:, 1]
    out = beta0 * states.sum(axis=1, dtype=np.float64)
    out = out + beta1 * (states[:, i] == states[:, j]).sum(axis=1)
    if field is not None:
        out = out + states @ np.asarray(field, dtype=np.float64)
    return out


def _enumerate(graph, beta0, beta1, field):
    n = graph.n_voxels
    if n > MAX_ENUMERATION_VOXELS:
        raise ValueError("enumeration infeasible")
    states = all_states(n)
    logm = ising_log_mass(states, graph, beta0, beta1, field)
    return states, logm


def exact_ising(graph: LatticeGraph, beta0: float, beta1: float, field=None) -> ExactIsing:
    states, logm = _enumerate(graph, beta0, beta1, field)
    log_z = float(logsumexp(logm))
    w = np.exp(logm - log_z)
    return ExactIsing(marginals=w @ states, log_z=log_z)


def exact_ising_draws(graph, beta0, beta1, rng: np.random.Generator, size: int, field=None) -> np.ndarray:
    """Independent exact draws by inverse-CDF over the enumerated states."""
    states, logm = _enumerate(graph, beta0, beta1, field)
    w = np.exp(logm - logsumexp(logm))
    idx = rng.choice(len(states), size=size, p=w)
    return states[idx]


# --------------------------------------------------------------------------
# MCMC kernels


def site_log_odds(g, graph: LatticeGraph, idx, beta0, beta1, field, neighbor_rule="ising",
                  rows=None):
    """Full-conditional log-odds of g_n = 1 for the sites in ``idx``."""
    if rows is None:
        rows = graph.adjacency_matrix[idx]
    n_on = rows @ g.astype(np.int64)
    if neighbor_rule == "ising":
        coupling = 2 * n_on - graph.degree[idx]
    elif neighbor_rule == "count":
        coupling = n_on
    else:
        raise ValueError(f"unknown neighbor_rule {neighbor_rule!r}")
    out = beta0 + beta1 * coupling
    if field is not None:
        out = out + field[idx]
    return out


def gibbs_sweep(g, graph, beta0, beta1, field, u, scan="checkerboard", order=None,
                neighbor_rule="ising") -> np.ndarray:
    """One systematic-scan Gibbs sweep.

    ``u`` holds one uniform per site. ``scan`` is ``"checkerboard"`` (both
    parity classes in turn, each updated as a block since same-parity sites
    are not neighbours), ``"raster"`` (voxel index order) or ``"random"``
    (visit ``order``, a permutation supplied by the caller).
    """
    g = np.array(g, dtype=np.int8, copy=True)
    if scan == "checkerboard":
        for idx, rows in graph.parity_blocks:
            if idx.size == 0:
                continue
            lo = site_log_odds(g, graph, idx, beta0, beta1, field, neighbor_rule, rows)
            g[idx] = u[idx] < expit(lo)
        return g
    if scan == "raster":
        order = range(graph.n_voxels)
    elif scan == "random":
        if order is None:
            raise ValueError("random scan needs an order")
    else:
        raise ValueError(f"unknown scan {scan!r}")
    nbrs = graph.neighbors
    deg = graph.degree
    h = np.zeros(graph.n_voxels) if field is None else field
    for n in order:
        n_on = int(g[nbrs[n]].sum())
        coupling = 2 * n_on - deg[n] if neighbor_rule == "ising" else n_on
        lo = beta0 + beta1 * coupling + h[n]
        g[n] = u[n] < 1.0 / (1.0 + math.exp(-lo)) if lo > -700 else 0
    return g


def sw_sweep(g, graph, beta0, beta1, field, u_bond, u_site) -> np.ndarray:
    """Swendsen-Wang update.

    Equal-label neighbours are bonded with probability ``1 - exp(-beta1)``;
    each connected cluster is then relabelled jointly with log-odds
    ``sum_{n in cluster} (beta0 + field_n)``. The cluster's decision uses
    the uniform of its lowest-index voxel.
    """
    if beta1 < 0:
        raise ValueError("Swendsen-Wang requires beta1 >= 0")
    g = np.asarray(g, dtype=np.int8)
    n = graph.n_voxels
    i, j = graph.adjacency[:, 0], graph.adjacency[:, 1]
    bonded = (g[i] == g[j]) & (u_bond < -math.expm1(-beta1))
    bi, bj = i[bonded], j[bonded]
    adj = sp.csr_matrix((np.ones(bi.size, dtype=np.int8), (bi, bj)), shape=(n, n))
    n_clusters, labels = connected_components(adj, directed=False)
    weight = np.full(n, float(beta0))
    if field is not None:
        weight = weight + field
    cluster_lo = np.bincount(labels, weights=weight, minlength=n_clusters)
    rep = np.full(n_clusters, n, dtype=np.int64)
    np.minimum.at(rep, labels, np.arange(n))
    new = (u_site[rep] < expit(cluster_lo)).astype(np.int8)
    return new[labels]


@dataclass
class IsingSamplerConfig:
    n_sweeps: int = 10_000
    n_burnin: int = 100
    sw_period: int = 5
    method: str = "hybrid"  # "hybrid" | "gibbs" | "sw"
    scan: str = "checkerboard"
    neighbor_rule: str = "ising"


def sample_ising_prior(graph: LatticeGraph, beta0: float, beta1: float,
                       config: IsingSamplerConfig | None = None,
                       rng: np.random.Generator | None = None,
                       init=None) -> np.ndarray:
    """Draws from the Ising prior, one row per retained sweep (int8)."""
    config = config or IsingSamplerConfig()
    rng = rng if rng is not None else np.random.default_rng()
    if config.method not in ("hybrid", "gibbs", "sw"):
        raise ValueError(f"unknown method {config.method!r}")
    n, E = graph.n_voxels, graph.n_pairs
    g = (rng.random(n) < 0.5).astype(np.int8) if init is None else np.asarray(init, np.int8).copy()
    out = np.empty((config.n_sweeps, n), dtype=np.int8)
    for it in range(config.n_burnin + config.n_sweeps):
        use_sw = config.method == "sw" or (
            config.method == "hybrid" and it % config.sw_period == 0)
        if use_sw:
            g = sw_sweep(g, graph, beta0, beta1, None, rng.random(E), rng.random(n))
        else:
            order = rng.permutation(n) if config.scan == "random" else None
            g = gibbs_sweep(g, graph, beta0, beta1, None, rng.random(n), config.scan, order,
                            config.neighbor_rule)
        if it >= config.n_burnin:
            out[it - config.n_burnin] = g
    return out
