"""Exploratory voxelwise OLS followed by AIC-selected Yule-Walker AR fits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla


@dataclass
class ArFit:
    order: int
    coefficients: np.ndarray
    innovation_variance: float
    aic: float
    degenerate: bool = False


class RankDeficientDesign(ValueError):
    pass


def ols_fit(y, X_full):
    """Least squares via pivoted QR; returns (coefficients, residuals)."""
    y = np.asarray(y, dtype=np.float64)
    X = np.asarray(X_full, dtype=np.float64)
    T, K = X.shape
    if T <= K:
        raise ValueError(f"need more rows than columns, got T={T}, K={K}")
    Q, R, piv = sla.qr(X, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    tol = d[0] * max(T, K) * np.finfo(float).eps if d[0] > 0 else np.inf
    if np.any(d <= tol):
        bad = int(piv[np.flatnonzero(d <= tol)[0]])
        raise RankDeficientDesign(f"design column {bad} is linearly dependent on the others")
    coef = np.empty(K)
    coef[piv] = sla.solve_triangular(R, Q.T @ y)
    return coef, y - X @ coef


def autocovariance(x, max_lag: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    T = x.size
    return np.array([x[:T - k] @ x[k:] / T for k in range(max_lag + 1)])


def levinson_durbin(r, order: int):
    """Yule-Walker solutions for every order up to ``order``.

    Returns ``(coefs, variances)`` with ``coefs[p]`` the length-p AR vector and
    ``variances[p]`` its innovation variance.
    """
    r = np.asarray(r, dtype=np.float64)
    coefs = [np.zeros(0)]
    variances = [r[0]]
    a = np.zeros(0)
    v = r[0]
    for p in range(1, order + 1):
        if v <= 0:
            coefs.append(np.r_[a, np.zeros(p - a.size)])
            variances.append(0.0)
            continue
        k = (r[p] - a @ r[p - 1:0:-1]) / v if p > 1 else r[1] / v
        a = np.r_[a - k * a[::-1], k]
        v = v * (1.0 - k * k)
        coefs.append(a.copy())
        variances.append(v)
    return coefs, np.array(variances)


def fit_ar_aic(residuals, p_max: int) -> ArFit:
    """AIC(p) = T log(sigma_p^2) + 2p over Yule-Walker fits; ties go to the smaller order."""
    x = np.asarray(residuals, dtype=np.float64)
    T = x.size
    if T <= p_max + 1:
        raise ValueError(f"series of length {T} too short for p_max={p_max}")
    x = x - x.mean()
    r = autocovariance(x, p_max)
    if r[0] <= np.finfo(float).tiny:
        return ArFit(0, np.zeros(0), 0.0, 0.0, degenerate=True)
    coefs, var = levinson_durbin(r, p_max)
    var = np.maximum(var, np.finfo(float).tiny)
    aic = T * np.log(var) + 2.0 * np.arange(p_max + 1)
    best = int(np.argmin(aic))
    return ArFit(best, coefs[best], float(var[best]), float(aic[best]))


def ar_order_map_exploratory(dataset, p_max: int = 12) -> np.ndarray:
    orders = np.empty(dataset.N, dtype=np.int64)
    for n in range(dataset.N):
        _, res = ols_fit(dataset.Y[:, n], dataset.X_full)
        orders[n] = fit_ar_aic(res, p_max).order
    return orders
