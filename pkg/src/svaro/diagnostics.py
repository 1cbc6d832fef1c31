"""Posterior probability maps, LPML, MSE tables, sensitivity curves and order maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .sampler import ChainOutput
from .simulate import GroundTruth

DEFAULT_GRID = (0.90, 0.925, 0.95, 0.975, 0.99)


@dataclass
class PPM:
    values: np.ndarray
    c: np.ndarray
    delta_e: float
    n_draws: int


@dataclass
class SensitivityCurve:
    grid: np.ndarray
    sensitivity: np.ndarray
    tag: str = ""


def ppm(chain: ChainOutput, c, delta_e: float) -> PPM:
    """Monte Carlo estimate of ``Pr(c^T w_n > delta_e | y)`` per voxel.

    Uses stored draws of W when present, otherwise the exceedance counter
    accumulated for the same ``(c, delta_e)`` during sampling.
    """
    c = np.atleast_1d(np.asarray(c, dtype=np.float64))
    K = chain.W_mean.shape[0]
    if c.shape != (K,):
        raise ValueError(f"contrast has length {c.shape[0]}, expected K={K}")
    if chain.n_draws == 0:
        raise ValueError("chain has no retained draws")
    if chain.W_draws is not None:
        vals = np.einsum("k,dkn->dn", c, chain.W_draws)
        prob = (vals > delta_e).mean(axis=0)
        return PPM(prob, c, float(delta_e), chain.n_draws)
    for j, item in enumerate(chain.contrasts):
        if np.allclose(item["c"], c) and np.isclose(item["delta_e"], delta_e, rtol=0, atol=0):
            return PPM(chain.exceed_counts[j] / chain.n_draws, c, float(delta_e), chain.n_draws)
    raise ValueError("no stored draws or exceedance counter for this contrast/threshold; "
                     "rerun with store_draws or list the contrast in the sampler config")


def threshold_ppm(m: PPM | np.ndarray, delta_p: float) -> np.ndarray:
    if not 0 < delta_p < 1:
        raise ValueError("delta_p must lie in (0, 1)")
    vals = m.values if isinstance(m, PPM) else np.asarray(m)
    return (vals > delta_p).astype(np.int8)


def log_cpo(loglik_draws: np.ndarray) -> np.ndarray:
    """Harmonic-mean CPO per voxel from an (n_draws, N) array of log-densities."""
    ll = np.asarray(loglik_draws, dtype=np.float64)
    M = ll.shape[0]
    return -(logsumexp(-ll, axis=0) - np.log(M))


def lpml(chain: ChainOutput | np.ndarray) -> float:
    draws = chain if isinstance(chain, np.ndarray) else chain.loglik_draws
    if draws is None:
        raise ValueError("chain has no per-draw log-densities; rerun with store_loglik enabled")
    if draws.shape[0] == 0:
        raise ValueError("chain has no retained draws")
    return float(log_cpo(draws).sum())


def mse_table(estimate, truth: GroundTruth, a_rows=(0,)) -> dict:
    """Voxel-averaged squared error of posterior means against the truth.

    ``estimate`` is a ChainOutput or a dict with ``W`` (K x N) and ``A`` (P x N).
    """
    if isinstance(estimate, ChainOutput):
        W, A = estimate.W_mean, estimate.A_mean
    else:
        W = np.asarray(estimate["W"])
        A = np.asarray(estimate.get("A", np.zeros((0, W.shape[1]))))
    if W.shape != truth.W_true.shape:
        raise ValueError(f"W shape {W.shape} does not match truth {truth.W_true.shape}")
    out = {f"W{k + 1}": float(np.mean((W[k] - truth.W_true[k]) ** 2)) for k in range(W.shape[0])}
    for p in a_rows:
        true_p = truth.A_true[p] if p < truth.A_true.shape[0] else np.zeros(W.shape[1])
        est_p = A[p] if p < A.shape[0] else np.zeros(W.shape[1])
        out[f"a{p + 1}"] = float(np.mean((est_p - true_p) ** 2))
    return out


def sensitivity_curve(m: PPM | np.ndarray, truth_active, grid=DEFAULT_GRID, tag="") -> SensitivityCurve:
    active = np.asarray(truth_active).astype(bool)
    if not active.any():
        raise ValueError("truth_active is empty")
    grid = np.asarray(grid, dtype=np.float64)
    if np.any((grid <= 0) | (grid >= 1)):
        raise ValueError("grid must lie inside (0, 1)")
    vals = m.values if isinstance(m, PPM) else np.asarray(m)
    sens = np.array([np.count_nonzero(active & (vals > d)) / active.sum() for d in grid])
    return SensitivityCurve(grid, sens, tag)


def ar_order_map(chain: ChainOutput, rule: str = "median"):
    """Estimated maximum AR order per voxel and its histogram.

    ``median``: largest order whose inclusion frequency is >= 0.5.
    ``mean_max``: posterior mean of the largest included order, rounded.
    ``mean_count``: posterior mean of the number of included orders, rounded.
    """
    freq = chain.gamma_freq
    P, N = freq.shape
    if rule == "median":
        on = freq >= 0.5
        orders = (on * np.arange(1, P + 1)[:, None]).max(axis=0) if P else np.zeros(N)
    elif rule == "mean_max":
        orders = np.rint(chain.max_order_mean)
    elif rule == "mean_count":
        orders = np.rint(chain.order_count_mean)
    else:
        raise ValueError(f"unknown rule {rule!r}")
    orders = np.asarray(orders, dtype=np.int64)
    return orders, np.bincount(orders, minlength=P + 1)
