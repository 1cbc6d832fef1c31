"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line in the summary."""

import time

import numpy as np
import pytest
import scipy.linalg as sla
from scipy.integrate import cumulative_trapezoid

from svaro import io as sio
from svaro.cli import main
from svaro.diagnostics import ar_order_map, lpml, mse_table, ppm, sensitivity_curve
from svaro.explore import autocovariance, levinson_durbin, ols_fit
from svaro.ising import (IsingBoundInput, IsingSamplerConfig, exact_ising, exact_ising_draws, ising_bounds,
                         sample_ising_prior)
from svaro.lattice import build_lattice, cube_neighbor_pair_count, laplacian
from svaro.model import Dataset, Hyperparams, ModelState, log_joint
from svaro.sampler import (SamplerConfig, a_conditional, fixed_order_baseline, gamma_site_probability,
                           run_chain, update_a, update_alpha, update_gamma_gibbs, update_lambda, update_tau,
                           update_w, w_conditional)
from svaro.simulate import SimConfig, check_stationarity, simulate

from conftest import make_dataset, make_state

SEEDS = (1, 2, 3, 4, 5)
GRID = (0.90, 0.925, 0.95, 0.975, 0.99)


# --------------------------------------------------------------------------
# 1. Ising samplers against exact enumeration


def test_01_ising_against_enumeration(report):
    worst, slowest, rows = 0.0, 0.0, []
    for dims in ((3, 3), (4, 4)):
        g = build_lattice(dims)
        for b0, b1 in ((-0.2, 0.3), (0.0, 0.0), (0.5, 0.1)):
            exact = exact_ising(g, b0, b1).marginals
            for method in ("gibbs", "sw"):
                t = time.perf_counter()
                cfg = IsingSamplerConfig(n_sweeps=100_000, n_burnin=1000, method=method)
                draws = sample_ising_prior(g, b0, b1, cfg, np.random.default_rng(2024))
                err = float(np.max(np.abs(draws.mean(axis=0) - exact)))
                slowest = max(slowest, time.perf_counter() - t)
                worst = max(worst, err)
                rows.append(err)
    ok = worst < 0.01 and slowest < 60
    report(1, ok, f"Ising Gibbs/SW vs enumeration: max |marginal error| {worst:.4f} over {len(rows)} "
                  f"cases (< 0.01), slowest case {slowest:.1f}s (< 60s)")
    assert ok


# --------------------------------------------------------------------------
# 2. Conditional oracles


def _quadratic_moments(f, x0):
    d = x0.size
    E = np.eye(d)
    f0 = f(x0)
    grad = np.array([(f(x0 + E[i]) - f(x0 - E[i])) / 2 for i in range(d)])
    H = np.array([[f(x0 + E[i] + E[j]) - f(x0 + E[i]) - f(x0 + E[j]) + f0 for j in range(d)]
                  for i in range(d)])
    cov = np.linalg.inv(-H)
    return x0 + cov @ grad, cov


def _ks_against_quadrature(draws, logf):
    """KS distance between draws and the density proportional to exp(logf) on a fine grid."""
    lo, hi = draws.min(), draws.max()
    span = hi - lo
    x = np.linspace(max(lo - 0.5 * span, 1e-12), hi + 0.5 * span, 20001)
    lf = np.array([logf(v) for v in x])
    dens = np.exp(lf - lf.max())
    cdf = cumulative_trapezoid(dens, x, initial=0.0)
    cdf /= cdf[-1]
    s = np.sort(draws)
    F = np.interp(s, x, cdf)
    n = s.size
    return float(max(np.max(np.arange(1, n + 1) / n - F), np.max(F - np.arange(n) / n)))


def test_02_conditional_oracles(report):
    ds = make_dataset((1, 2), T=30, P=2, K=2, seed=11)
    h = Hyperparams.default(2, epsilon=50.0)
    st = make_state(ds, seed=12, gamma=[[1, 0], [0, 1]])
    # put a_00 where the spike/slab field is close to zero so the site probability is not saturated
    st.A[0, 0] = np.sqrt(np.log(h.epsilon) / ((h.epsilon - 1) * st.tau[0]))
    rng = np.random.default_rng(7)
    n_draws = 100_000

    def along(name, index):
        def f(x):
            s = st.copy()
            getattr(s, name)[index] = x
            return log_joint(ds, s, h)
        return f

    ks = {}
    ks["alpha"] = _ks_against_quadrature(
        np.array([update_alpha(0, st, ds, h, rng) for _ in range(n_draws)]), along("alpha", 0))
    ks["tau"] = _ks_against_quadrature(
        np.array([update_tau(1, st, h, rng) for _ in range(n_draws)]), along("tau", 1))
    ks["lambda"] = _ks_against_quadrature(
        np.array([update_lambda(1, st, ds, h, rng) for _ in range(n_draws)]), along("lam", 1))
    # site gamma: voxel 0 is updated first in the checkerboard sweep, so its new
    # value is a draw from its full conditional given the current state
    on, off = st.copy(), st.copy()
    on.Gamma[0, 0], off.Gamma[0, 0] = 1, 0
    d = log_joint(ds, on, h) - log_joint(ds, off, h)
    p_exact = 1.0 / (1.0 + np.exp(-d))
    draws = np.array([update_gamma_gibbs(0, st, ds, h, rng)[0] for _ in range(n_draws)])
    ks["gamma"] = abs(draws.mean() - p_exact)
    assert 0.05 < p_exact < 0.95
    assert gamma_site_probability(0, 0, st, ds, h) == pytest.approx(p_exact, rel=1e-9)

    zmax = {}
    for name, upd, cond in (("w", update_w, w_conditional), ("a", update_a, a_conditional)):
        n = 1
        mean, cov = _quadratic_moments(along("W" if name == "w" else "A", (slice(None), n)),
                                       (st.W if name == "w" else st.A)[:, n].copy())
        m2, c2 = cond(n, st, ds, h)
        np.testing.assert_allclose(m2, mean, rtol=1e-6, atol=1e-9)
        x = np.array([upd(n, st, ds, h, rng) for _ in range(n_draws)])
        sd = np.sqrt(np.diag(cov))
        z_mean = np.abs(x.mean(axis=0) - mean) / (sd / np.sqrt(n_draws))
        z_var = np.abs(x.var(axis=0) - np.diag(cov)) / (np.diag(cov) * np.sqrt(2.0 / n_draws))
        zmax[name] = float(max(z_mean.max(), z_var.max()))

    ok = max(ks.values()) < 0.02 and max(zmax.values()) < 3
    detail = ", ".join(f"KS {k} {v:.4f}" for k, v in ks.items()) + f" (site p {p_exact:.3f})"
    detail += ", " + ", ".join(f"{k} max |z| {v:.2f}" for k, v in zmax.items())
    report(2, ok, f"conditional oracles at 1e5 draws: {detail} (KS < 0.02, |z| < 3)")
    assert ok


# --------------------------------------------------------------------------
# 3. Geweke joint-distribution test


class _Geweke:
    def __init__(self):
        self.graph = build_lattice((2, 2))
        self.T, self.P, self.K = 20, 2, 2
        rng = np.random.default_rng(99)
        self.X = np.column_stack([rng.standard_normal(self.T), np.ones(self.T)])
        self.y_init = rng.standard_normal((self.P, 4))
        self.h = Hyperparams(beta0=[-0.2, -0.4], beta1=[0.3, 0.2], q1=20, q2=0.05, u1=20, u2=0.5,
                             r1=20, r2=0.05, epsilon=25.0, w_ridge=1.0)
        self.Q = laplacian(self.graph, ridge=1.0).dense()

    def prior(self, rng):
        h, K, P, N = self.h, self.K, self.P, 4
        alpha = rng.gamma(h.q1, h.q2, K)
        L = np.linalg.cholesky(self.Q)
        W = np.array([sla.solve_triangular(L.T, rng.standard_normal(N)) / np.sqrt(a) for a in alpha])
        Gamma = np.vstack([exact_ising_draws(self.graph, h.beta0[p], h.beta1[p], rng, 1)[0]
                           for p in range(P)]).astype(np.int8)
        tau = rng.gamma(h.u1, h.u2, P)
        prec = tau[:, None] * np.where(Gamma == 1, 1.0, h.epsilon)
        A = rng.standard_normal((P, N)) / np.sqrt(prec)
        lam = rng.gamma(h.r1, h.r2, N)
        return ModelState(W, A, Gamma, alpha, tau, lam)

    def data(self, s, rng):
        mean = self.X @ s.W
        e = np.zeros((self.T, 4))
        e[:self.P] = self.y_init - mean[:self.P]
        z = rng.standard_normal((self.T, 4)) / np.sqrt(s.lam)
        for t in range(self.P, self.T):
            e[t] = np.einsum("pn,pn->n", s.A, e[t - 1::-1][:self.P]) + z[t]
        return Dataset(Y=mean + e, X_full=self.X, graph=self.graph, P=self.P)

    @staticmethod
    def stats(s):
        return np.concatenate([s.W.ravel(), s.W.ravel() ** 2, s.A.ravel(), s.A.ravel() ** 2,
                               s.Gamma.ravel().astype(float), np.log(s.alpha), np.log(s.tau),
                               np.log(s.lam)])


def _batch_se(x, n_batches=50):
    m = len(x) // n_batches
    means = x[:m * n_batches].reshape(n_batches, m, -1).mean(axis=1)
    return means.std(axis=0, ddof=1) / np.sqrt(n_batches)


def test_03_geweke(report):
    gw = _Geweke()
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    mc = np.array([gw.stats(gw.prior(rng)) for _ in range(20_000)])

    s = gw.prior(rng)
    ds = gw.data(s, rng)
    sc = []
    n_steps = 15_000
    for i in range(n_steps):
        cfg = SamplerConfig(n_burnin=1, n_samples=1, sw_period=2, seed=i, store_loglik=False)
        s = run_chain(ds, gw.h, cfg, init=s).final_state
        ds = gw.data(s, rng)
        sc.append(gw.stats(s))
    sc = np.array(sc)
    elapsed = time.perf_counter() - t0

    se = np.sqrt(mc.var(axis=0) / len(mc) + _batch_se(sc) ** 2)
    z = np.abs(mc.mean(axis=0) - sc.mean(axis=0)) / se
    ok = z.max() < 4 and elapsed < 600
    report(3, ok, f"Geweke (2x2, T=20, P=2, K=2): {z.size} moments, max |z| {z.max():.2f} (< 4), "
                  f"{elapsed:.0f}s (< 600s)")
    assert ok


# --------------------------------------------------------------------------
# 4. Bound reproduction


def test_04_bounds(report):
    b = ising_bounds(IsingBoundInput(N=56526, pi_p=0.1, R2=0.05, T_len=352))
    counts = all(cube_neighbor_pair_count(V) == build_lattice((V, V, V)).n_pairs for V in range(2, 7))
    ok = abs(b.coef - 2.83) <= 0.01 and abs(b.rhs + 9.26) <= 0.01 and counts
    report(4, ok, f"bounds: coef {b.coef:.4f} (2.83 +- 0.01), rhs {b.rhs:.4f} (-9.26 +- 0.01), "
                  f"cube pair counts V=2..6 {'exact' if counts else 'MISMATCH'}")
    assert ok


# --------------------------------------------------------------------------
# 5, 6, 8. Heterogeneous-order replicates


@pytest.fixture(scope="module")
def sim1_runs():
    t0 = time.perf_counter()
    runs = []
    for seed in SEEDS:
        cfg = SimConfig.preset("sim1", dims=(20, 20), T=200, P=4)
        ds, truth = simulate(cfg, seed=seed)
        c = np.array([1.0, 0.0])
        de = truth.activation_threshold(c, 0.10)
        hyper = Hyperparams.default(cfg.P)
        sc = SamplerConfig(n_burnin=2000, n_samples=2000, seed=seed, contrasts=[{"c": c, "delta_e": de}])
        out = run_chain(ds, hyper, sc)
        base = fixed_order_baseline(ds, hyper, sc, P0=1)
        runs.append({"truth": truth, "svaro": out, "base": base, "c": c, "delta_e": de})
    return runs, time.perf_counter() - t0


def test_05_order_recovery(report, sim1_runs):
    runs, elapsed = sim1_runs
    fracs = []
    for r in runs:
        est, _ = ar_order_map(r["svaro"], "median")
        fracs.append(float(np.mean(np.abs(est - r["truth"].max_order) <= 1)))
    ok = min(fracs) >= 0.70 and elapsed < 1800
    report(5, ok, "order within +-1 per replicate: " + ", ".join(f"{f:.4f}" for f in fracs)
           + f" (each >= 0.70), harness {elapsed / 60:.1f} min (< 30)")
    assert ok


def test_06_mse_and_lpml_beat_baseline(report, sim1_runs):
    runs, _ = sim1_runs
    mse_wins = lpml_wins = 0
    parts = []
    for r in runs:
        ms, mb = mse_table(r["svaro"], r["truth"])["W1"], mse_table(r["base"], r["truth"])["W1"]
        ls, lb = lpml(r["svaro"]), lpml(r["base"])
        mse_wins += ms < mb
        lpml_wins += ls > lb
        parts.append(f"W1 {ms:.5f}/{mb:.5f} LPML {ls:.0f}/{lb:.0f}")
    ok = mse_wins >= 4 and lpml_wins >= 4
    report(6, ok, f"vs fixed AR(1): W1 MSE lower in {mse_wins}/5, LPML higher in {lpml_wins}/5 "
                  f"(each >= 4); " + "; ".join(parts))
    assert ok


def test_08_sensitivity(report, sim1_runs):
    runs, _ = sim1_runs
    wins, parts = 0, []
    for r in runs:
        active = r["truth"].active_set(r["c"], 0.10)
        cs = sensitivity_curve(ppm(r["svaro"], r["c"], r["delta_e"]), active, GRID).sensitivity
        cb = sensitivity_curve(ppm(r["base"], r["c"], r["delta_e"]), active, GRID).sensitivity
        dom = bool(np.all(cs >= cb))
        wins += dom
        parts.append(f"[{' '.join(f'{v:.3f}' for v in cs)}] vs [{' '.join(f'{v:.3f}' for v in cb)}]"
                     f"{'' if dom else ' x'}")
    ok = wins >= 4
    report(8, ok, f"sensitivity weakly dominates in {wins}/5 replicates (>= 4): " + "; ".join(parts))
    assert ok


# --------------------------------------------------------------------------
# 7. Homogeneous AR(1) truth


def test_07_parity_under_homogeneous_truth(report):
    ms, mb = [], []
    for seed in SEEDS:
        cfg = SimConfig.preset("sim2", dims=(20, 20), T=200, P=4)
        ds, truth = simulate(cfg, seed=seed)
        hyper = Hyperparams.default(cfg.P)
        sc = SamplerConfig(n_burnin=2000, n_samples=2000, seed=seed)
        ms.append(mse_table(run_chain(ds, hyper, sc), truth))
        mb.append(mse_table(fixed_order_baseline(ds, hyper, sc, P0=1), truth))
    ratios = {k: np.mean([m[k] for m in ms]) / np.mean([m[k] for m in mb]) for k in ("W1", "W2")}
    ok = all(abs(v - 1) <= 0.15 for v in ratios.values())
    report(7, ok, "homogeneous AR(1): mean MSE ratio SVARO/AR(1) over 5 replicates "
                  + ", ".join(f"{k} {v:.3f}" for k, v in ratios.items()) + " (within 1 +- 0.15)")
    assert ok


# --------------------------------------------------------------------------
# 9. Determinism and thread invariance


def test_09_thread_invariance(report, tmp_path):
    sim = tmp_path / "sim"
    assert main(["simulate", "--seed", "4", "--out", str(sim), "--dims", "8,8", "--T", "60", "--P", "3"]) == 0
    outs = {}
    for threads in (1, 4):
        d = tmp_path / f"t{threads}"
        argv = ["fit", "--data", str(sim / "data.json"), "--design", str(sim / "design.csv"),
                "--out", str(d / "chain"), "--n-burnin", "30", "--n-samples", "30", "--seed", "9",
                "--threads", str(threads), "--chunk-size", "8", "--store-draws"]
        assert main(argv) == 0
        outs[threads] = ((d / "chain.bin").read_bytes(), (d / "chain.json").read_bytes())
    again = tmp_path / "again"
    main(["fit", "--data", str(sim / "data.json"), "--design", str(sim / "design.csv"),
          "--out", str(again / "chain"), "--n-burnin", "30", "--n-samples", "30", "--seed", "9",
          "--threads", "1", "--chunk-size", "8", "--store-draws"])
    rerun = (again / "chain.bin").read_bytes() == outs[1][0]
    same = outs[1] == outs[4]
    ok = same and rerun
    report(9, ok, f"fit output bytes identical across 1 and 4 threads: {same}; identical on rerun: {rerun}")
    assert ok


# --------------------------------------------------------------------------
# 10. Numerical hygiene


def test_10_numerical_hygiene(report, tmp_path):
    stationarity = (check_stationarity([0.5]) and not check_stationarity([1.5])
                    and check_stationarity([0.0] * 5))

    rng = np.random.default_rng(10)
    ld_err = 0.0
    for _ in range(20):
        x = rng.standard_normal(200)
        r = autocovariance(x - x.mean(), 10)
        coefs, var = levinson_durbin(r, 10)
        for p in range(1, 11):
            direct = np.linalg.solve(sla.toeplitz(r[:p]), r[1:p + 1])
            ld_err = max(ld_err, np.max(np.abs(coefs[p] - direct)),
                         abs(var[p] - (r[0] - direct @ r[1:p + 1])))

    ols_err = 0.0
    for _ in range(20):
        X = np.column_stack([rng.standard_normal(100), np.ones(100), rng.standard_normal(100)])
        y = rng.standard_normal(100)
        coef, _ = ols_fit(y, X)
        ols_err = max(ols_err, np.max(np.abs(coef - np.linalg.lstsq(X, y, rcond=None)[0])))

    g = build_lattice((5, 6), rng.random((5, 6)) < 0.8)
    Y = rng.standard_normal((40, g.n_voxels)) * 1e3
    sio.write_volume(tmp_path / "vol", Y, g, seed=1)
    Y2, _, _ = sio.read_volume(tmp_path / "vol")
    round_trip = Y2.tobytes() == Y.tobytes()

    ok = stationarity and ld_err < 1e-8 and ols_err < 1e-8 and round_trip
    report(10, ok, f"stationarity cases {'ok' if stationarity else 'WRONG'}, Levinson-Durbin vs solve "
                   f"{ld_err:.1e} (< 1e-8), OLS vs lstsq {ols_err:.1e} (< 1e-8), volume round-trip "
                   f"{'bit-exact' if round_trip else 'DIFFERS'}")
    assert ok
