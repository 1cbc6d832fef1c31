"""Command-line entry point.

Every failure ends with a single stderr line ``svaro: error <kind>: <message>``
and an exit status that identifies the kind (see ``EXIT``).
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import io as sio
from .diagnostics import (DEFAULT_GRID, ar_order_map, lpml, mse_table, ppm, sensitivity_curve,
                          threshold_ppm)
from .explore import RankDeficientDesign, ar_order_map_exploratory
from .ising import IsingBoundInput, check_hyperparameters, ising_bounds
from .model import Dataset, Hyperparams
from .sampler import ChainOutput, SamplerConfig, SamplerError, config_hash, fixed_order_baseline, run_chain
from .simulate import GroundTruth, SimConfig, SimulationError, simulate

EXIT = {"ok": 0, "internal": 1, "usage": 2, "config": 3, "io": 4, "numerical": 5}


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _emit(**kv):
    for k, v in kv.items():
        if isinstance(v, float):
            v = repr(v)
        elif isinstance(v, (list, tuple, np.ndarray)):
            v = ",".join(repr(float(x)) if isinstance(x, (float, np.floating)) else str(x) for x in v)
        print(f"{k} {v}")


# --------------------------------------------------------------------------
# simulate


def _parse_set(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise CliError("usage", f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


def cmd_simulate(args):
    overrides = {}
    if args.config:
        overrides.update(sio.read_config(args.config).get("sim", {}))
    overrides.update(_parse_set(args.set))
    for key in ("dims", "T", "P"):
        val = getattr(args, key)
        if val is not None:
            overrides[key] = tuple(val) if key == "dims" else val
    if "dims" in overrides:
        overrides["dims"] = tuple(overrides["dims"])
    try:
        cfg = SimConfig.preset(args.preset, **overrides)
    except ValueError as exc:
        raise CliError("config", str(exc)) from exc
    dataset, truth = simulate(cfg, args.seed)

    out = Path(args.out)
    prov = {"seed": args.seed, "preset": args.preset, "sim": cfg.to_dict()}
    prov["hash"] = config_hash(prov)
    sio.write_volume(out / "data", dataset.Y, dataset.graph, units="a.u.", seed=args.seed,
                     extra={"P": dataset.P, "provenance": prov})
    sio.write_design(out / "design.csv", dataset.X_full,
                     names=[f"x{k}" for k in range(dataset.K)])
    sio.write_bundle(out / "truth", {"W_true": truth.W_true, "A_true": truth.A_true,
                                     "Gamma_true": truth.Gamma_true,
                                     "lambda_true": truth.lambda_true}, prov)
    _emit(data=out / "data.json", design=out / "design.csv", truth=out / "truth.json",
          hash=prov["hash"])


def read_truth(path) -> GroundTruth:
    arrays, _ = sio.read_bundle(path)
    try:
        return GroundTruth(arrays["W_true"], arrays["A_true"], arrays["Gamma_true"].astype(np.int8),
                           arrays["lambda_true"])
    except KeyError as exc:
        raise sio.FormatError(f"truth bundle lacks {exc}") from exc


# --------------------------------------------------------------------------
# fit

_HYPER_KEYS = ("beta0", "beta1", "q1", "q2", "u1", "u2", "r1", "r2", "epsilon", "w_ridge")
_SAMPLER_KEYS = ("n_burnin", "n_samples", "thin", "seed", "sw_period", "gamma_scan",
                 "neighbor_rule", "store_draws", "store_loglik", "n_threads", "chunk_size")


def _merge_run_config(args) -> dict:
    cfg = sio.read_config(args.config) if args.config else {}
    cfg.setdefault("hyper", {})
    cfg.setdefault("sampler", {})
    for key in ("data", "design", "out", "mode", "P", "P0", "contrast", "delta_e", "delta_p"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    for key in _HYPER_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            cfg["hyper"][key] = val[0] if isinstance(val, list) and len(val) == 1 else val
    for key in _SAMPLER_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            cfg["sampler"][key] = val
    sio.validate_config(cfg)
    for key in ("data", "design", "out"):
        if key not in cfg:
            raise CliError("config", f"missing required setting {key!r}")
    return cfg


def load_dataset(data_path, design_path, P=None) -> tuple[Dataset, dict]:
    Y, graph, header = sio.read_volume(data_path)
    X = sio.read_design(design_path)
    if X.shape[0] != Y.shape[0]:
        raise CliError("config", f"design has {X.shape[0]} rows but the volume has T={Y.shape[0]}")
    P = header.get("P") if P is None else P
    if P is None:
        raise CliError("config", "AR order P not given and not recorded in the volume header")
    try:
        return Dataset(Y=Y, X_full=X, graph=graph, P=int(P)), header
    except ValueError as exc:
        raise CliError("config", str(exc)) from exc


def cmd_fit(args):
    cfg = _merge_run_config(args)
    dataset, header = load_dataset(cfg["data"], cfg["design"], cfg.get("P"))
    P, K = dataset.P, dataset.K
    h = dict(cfg["hyper"])
    b0 = np.broadcast_to(np.asarray(h.pop("beta0", -0.2), dtype=float), (P,)).copy()
    b1 = np.broadcast_to(np.asarray(h.pop("beta1", 0.3), dtype=float), (P,)).copy()
    contrast = cfg.get("contrast", [1.0] + [0.0] * (K - 1))
    if len(contrast) != K:
        raise CliError("config", f"contrast has length {len(contrast)}, design has K={K}")
    try:
        hyper = Hyperparams(beta0=b0, beta1=b1, contrast=contrast, delta_e=cfg.get("delta_e", 0.0),
                            delta_p=cfg.get("delta_p", 0.95), **h)
        sampler = SamplerConfig(**cfg["sampler"])
    except (ValueError, TypeError) as exc:
        raise CliError("config", str(exc)) from exc

    b = cfg.get("bounds", {})
    bound = ising_bounds(IsingBoundInput(dataset.N, b.get("pi", 0.1), b.get("r2", 0.05), dataset.T))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        check_hyperparameters(hyper.beta0, hyper.beta1, bound, tuple(b.get("high_orders", ())))
    for w in caught:
        print(f"svaro: warning bounds: {w.message}", file=sys.stderr)

    if cfg.get("mode", "svaro") == "fixed_order":
        chain = fixed_order_baseline(dataset, hyper, sampler, int(cfg.get("P0", 1)))
    else:
        chain = run_chain(dataset, hyper, sampler)
    meta = chain.metadata()
    meta["data_seed"] = header.get("seed")
    meta["mode"] = cfg.get("mode", "svaro")
    path = sio.write_bundle(cfg["out"], chain.arrays(), meta)
    _emit(chain=path, n_draws=chain.n_draws, seed=chain.seed, hash=chain.config["hash"])


def read_chain(path) -> ChainOutput:
    arrays, meta = sio.read_bundle(path)
    try:
        return ChainOutput.from_parts(arrays, meta)
    except (KeyError, TypeError) as exc:
        raise sio.FormatError(f"not a chain bundle: {exc}") from exc


def _graph_for(data_path):
    if not data_path:
        raise CliError("usage", "--data is required to lay out maps on the grid")
    return sio.read_volume(data_path)[1]


# --------------------------------------------------------------------------
# diagnostics


def _contrast_arg(args, chain: ChainOutput):
    K = chain.W_mean.shape[0]
    c = args.contrast if args.contrast is not None else [1.0] + [0.0] * (K - 1)
    return np.asarray(c, dtype=float)


def cmd_ppm(args):
    chain = read_chain(args.chain)
    graph = _graph_for(args.data)
    try:
        m = ppm(chain, _contrast_arg(args, chain), args.delta_e)
        active = threshold_ppm(m, args.delta_p)
    except ValueError as exc:
        raise CliError("config", str(exc)) from exc
    sio.write_maps(args.out, {"ppm": m.values, "active": active}, graph, pgm=args.pgm)
    _emit(n_active=int(active.sum()), n_voxels=active.size, n_draws=m.n_draws)


def cmd_lpml(args):
    chain = read_chain(args.chain)
    try:
        _emit(lpml=lpml(chain), n_draws=chain.n_draws)
    except ValueError as exc:
        raise CliError("config", str(exc)) from exc


def cmd_mse(args):
    chain = read_chain(args.chain)
    truth = read_truth(args.truth)
    try:
        table = mse_table(chain, truth, a_rows=tuple(p - 1 for p in args.a_orders))
    except ValueError as exc:
        raise CliError("config", str(exc)) from exc
    _emit(**table)


def cmd_sensitivity(args):
    chain = read_chain(args.chain)
    truth = read_truth(args.truth)
    c = _contrast_arg(args, chain)
    try:
        m = ppm(chain, c, args.delta_e)
        curve = sensitivity_curve(m, truth.active_set(c, args.top), args.grid)
    except ValueError as exc:
        raise CliError("config", str(exc)) from exc
    _emit(grid=curve.grid, sensitivity=curve.sensitivity)


def cmd_order_map(args):
    chain = read_chain(args.chain)
    try:
        orders, hist = ar_order_map(chain, args.rule)
    except ValueError as exc:
        raise CliError("config", str(exc)) from exc
    if args.out:
        graph = _graph_for(args.data)
        sio.write_maps(args.out, {"order": orders}, graph, pgm=args.pgm)
    _emit(histogram=hist.tolist())


def cmd_explore(args):
    dataset, _ = load_dataset(args.data, args.design, args.p_max)
    orders = ar_order_map_exploratory(dataset, args.p_max)
    if args.out:
        sio.write_maps(args.out, {"aic_order": orders}, dataset.graph, pgm=args.pgm)
    _emit(histogram=np.bincount(orders, minlength=args.p_max + 1).tolist())


def cmd_bounds(args):
    try:
        bound = ising_bounds(IsingBoundInput(args.n, args.pi, args.r2, args.t))
    except ValueError as exc:
        raise CliError("config", str(exc)) from exc
    if args.json:
        out = {"V": bound.V, "coef": bound.coef, "rhs": bound.rhs}
        if args.beta0 is not None:
            out.update(bound.verdict(args.beta0, args.beta1))
        print(json.dumps(out, sort_keys=True))
        return
    print(f"V {bound.V:.2f}")
    print(f"coef {bound.coef:.2f}")
    print(f"rhs {bound.rhs:.2f}")
    if args.beta0 is not None:
        v = bound.verdict(args.beta0, args.beta1)
        print(f"lower_bound {'ok' if v['lower_bound'] else 'violated'}")
        print(f"sparsity {'ok' if v['sparsity'] else 'violated'}")


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="svaro", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a synthetic dataset with known truth")
    s.add_argument("--preset", choices=["sim1", "sim2"], default="sim1")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="sim")
    s.add_argument("--config", help="run config whose 'sim' section overrides the preset")
    s.add_argument("--dims", type=_ints)
    s.add_argument("--T", type=int)
    s.add_argument("--P", type=int)
    s.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any simulation option (JSON value)")
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="run the sampler and store chain summaries")
    f.add_argument("--config")
    f.add_argument("--data")
    f.add_argument("--design")
    f.add_argument("--out")
    f.add_argument("--mode", choices=["svaro", "fixed_order"])
    f.add_argument("--P", type=int)
    f.add_argument("--P0", type=int)
    f.add_argument("--contrast", type=_floats)
    f.add_argument("--delta-e", dest="delta_e", type=float)
    f.add_argument("--delta-p", dest="delta_p", type=float)
    f.add_argument("--beta0", type=_floats)
    f.add_argument("--beta1", type=_floats)
    for key in ("q1", "q2", "u1", "u2", "r1", "r2", "epsilon"):
        f.add_argument(f"--{key}", type=float)
    f.add_argument("--w-ridge", dest="w_ridge", type=float)
    f.add_argument("--n-burnin", dest="n_burnin", type=int)
    f.add_argument("--n-samples", dest="n_samples", type=int)
    f.add_argument("--thin", type=int)
    f.add_argument("--seed", type=int)
    f.add_argument("--sw-period", dest="sw_period", type=int)
    f.add_argument("--gamma-scan", dest="gamma_scan", choices=["checkerboard", "raster", "random"])
    f.add_argument("--neighbor-rule", dest="neighbor_rule", choices=["ising", "count"])
    f.add_argument("--store-draws", dest="store_draws", action="store_const", const=True)
    f.add_argument("--threads", dest="n_threads", type=int)
    f.add_argument("--chunk-size", dest="chunk_size", type=int)
    f.set_defaults(func=cmd_fit)

    def chain_cmd(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--chain", required=True)
        p.set_defaults(func=func)
        return p

    p = chain_cmd("ppm", cmd_ppm, "posterior probability map and thresholded activation map")
    p.add_argument("--data", required=True, help="volume whose mask lays out the maps")
    p.add_argument("--contrast", type=_floats)
    p.add_argument("--delta-e", dest="delta_e", type=float, default=0.0)
    p.add_argument("--delta-p", dest="delta_p", type=float, default=0.95)
    p.add_argument("--out", required=True)
    p.add_argument("--pgm", action="store_true")

    chain_cmd("lpml", cmd_lpml, "log pseudo-marginal likelihood")

    p = chain_cmd("mse", cmd_mse, "mean squared error against simulation truth")
    p.add_argument("--truth", required=True)
    p.add_argument("--a-orders", dest="a_orders", type=_ints, default=[1])

    p = chain_cmd("sensitivity", cmd_sensitivity, "sensitivity over probability thresholds")
    p.add_argument("--truth", required=True)
    p.add_argument("--contrast", type=_floats)
    p.add_argument("--delta-e", dest="delta_e", type=float, default=0.0)
    p.add_argument("--top", type=float, default=0.10)
    p.add_argument("--grid", type=_floats, default=list(DEFAULT_GRID))

    p = chain_cmd("order-map", cmd_order_map, "posterior AR order map")
    p.add_argument("--rule", choices=["median", "mean_max", "mean_count"], default="median")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--pgm", action="store_true")

    p = sub.add_parser("explore", help="voxelwise OLS + AIC-selected AR order map")
    p.add_argument("--data", required=True)
    p.add_argument("--design", required=True)
    p.add_argument("--p-max", dest="p_max", type=int, default=12)
    p.add_argument("--out")
    p.add_argument("--pgm", action="store_true")
    p.set_defaults(func=cmd_explore)

    p = sub.add_parser("bounds", help="Ising hyperparameter bounds")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--pi", type=float, default=0.1)
    p.add_argument("--r2", type=float, default=0.05)
    p.add_argument("--t", type=int, required=True)
    p.add_argument("--beta0", type=float)
    p.add_argument("--beta1", type=float, default=0.0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_bounds)
    return ap


def _classify(exc: BaseException) -> str:
    if isinstance(exc, CliError):
        return exc.kind
    if isinstance(exc, sio.ConfigError):
        return "config"
    if isinstance(exc, (sio.FormatError, OSError)):
        return "io"
    if isinstance(exc, (SamplerError, SimulationError, RankDeficientDesign, np.linalg.LinAlgError,
                        FloatingPointError)):
        return "numerical"
    if isinstance(exc, ValueError):
        return "config"
    return "internal"


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure maps to an exit code
        kind = _classify(exc)
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"svaro: error {kind}: {msg}", file=sys.stderr)
        return EXIT[kind]
    return EXIT["ok"]


if __name__ == "__main__":
    sys.exit(main())
