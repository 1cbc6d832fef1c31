import json
import subprocess
import sys

import numpy as np
import pytest

from svaro import io as sio
from svaro.cli import EXIT, main


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def _kv(out):
    return dict(line.split(" ", 1) for line in out.strip().splitlines())


def test_bounds_worked_example(capsys):
    code, out, _ = run(["bounds", "--n", 56526, "--pi", 0.1, "--r2", 0.05, "--t", 352], capsys)
    assert code == 0
    kv = _kv(out)
    assert kv["coef"] == "2.83" and kv["rhs"] == "-9.26"


def test_bounds_json_and_verdict(capsys):
    code, out, _ = run(["bounds", "--n", 1000, "--t", 100, "--beta0", -0.2, "--beta1", 0.3, "--json"], capsys)
    d = json.loads(out)
    assert code == 0 and d["lower_bound"] is True and d["sparsity"] is False


def test_bounds_bad_r2(capsys):
    code, _, err = run(["bounds", "--n", 1000, "--t", 100, "--r2", 1.0], capsys)
    assert code == EXIT["config"] and err.count("\n") == 1


def test_simulate_preset_is_byte_identical(tmp_path, capsys):
    for d in ("a", "b"):
        assert run(["simulate", "--preset", "sim1", "--seed", 7, "--out", tmp_path / d], capsys)[0] == 0
    for name in ("data.bin", "data.json", "design.csv", "truth.bin", "truth.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    Y, g, header = sio.read_volume(tmp_path / "a" / "data")
    assert Y.shape == (200, 400) and header["P"] == 8 and header["seed"] == 7


@pytest.fixture(scope="module")
def sim(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--seed", "3", "--out", str(d), "--dims", "5,5", "--T", "50", "--P", "3",
                 "--set", "ising_burnin=20"]) == 0
    return d


def test_full_pipeline(sim, tmp_path, capsys):
    chain = tmp_path / "fit"
    code, out, _ = run(["fit", "--data", sim / "data.json", "--design", sim / "design.csv", "--out", chain,
                        "--n-burnin", 20, "--n-samples", 30, "--seed", 5], capsys)
    assert code == 0 and _kv(out)["n_draws"] == "30"
    code, out, _ = run(["lpml", "--chain", f"{chain}.json"], capsys)
    assert code == 0 and np.isfinite(float(_kv(out)["lpml"]))
    code, out, _ = run(["mse", "--chain", f"{chain}.json", "--truth", sim / "truth.json"], capsys)
    assert code == 0 and set(_kv(out)) == {"W1", "W2", "a1"}
    code, out, _ = run(["ppm", "--chain", f"{chain}.json", "--data", sim / "data.json",
                        "--out", tmp_path / "map", "--pgm"], capsys)
    assert code == 0 and (tmp_path / "map_ppm.pgm").exists() and (tmp_path / "map_active.csv").exists()
    code, out, _ = run(["sensitivity", "--chain", f"{chain}.json", "--truth", sim / "truth.json"], capsys)
    assert code == 0 and len(_kv(out)["sensitivity"].split(",")) == 5
    code, out, _ = run(["order-map", "--chain", f"{chain}.json", "--data", sim / "data.json",
                        "--out", tmp_path / "ord"], capsys)
    assert code == 0 and sum(map(int, _kv(out)["histogram"].split(","))) == 25
    code, out, _ = run(["explore", "--data", sim / "data.json", "--design", sim / "design.csv",
                        "--p-max", 4], capsys)
    assert code == 0


def test_fit_fixed_order_mode_from_config(sim, tmp_path, capsys):
    cfg = {"data": str(sim / "data.json"), "design": str(sim / "design.csv"), "out": str(tmp_path / "f"),
           "mode": "fixed_order", "P0": 1, "sampler": {"n_burnin": 5, "n_samples": 5}}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert run(["fit", "--config", tmp_path / "c.json"], capsys)[0] == 0
    arrays, meta = sio.read_bundle(tmp_path / "f")
    assert meta["mode"] == "fixed_order" and np.all(arrays["gamma_freq"][0] == 1)


def test_fit_design_row_mismatch(sim, tmp_path, capsys):
    X = sio.read_design(sim / "design.csv")
    sio.write_design(tmp_path / "short.csv", X[:-3])
    code, _, err = run(["fit", "--data", sim / "data.json", "--design", tmp_path / "short.csv",
                        "--out", tmp_path / "x"], capsys)
    assert code == EXIT["config"] and err.startswith("svaro: error config:") and err.count("\n") == 1


def test_fit_unknown_config_key(sim, tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"data": "x", "bogus": 1}))
    assert run(["fit", "--config", tmp_path / "c.json"], capsys)[0] == EXIT["config"]


def test_fit_bound_warning(sim, tmp_path, capsys):
    code, _, err = run(["fit", "--data", sim / "data.json", "--design", sim / "design.csv",
                        "--out", tmp_path / "w", "--beta0=-40", "--n-burnin", 1, "--n-samples", 1], capsys)
    assert code == 0 and "svaro: warning bounds" in err


def test_usage_and_io_errors(tmp_path, capsys):
    code, _, err = run(["frobnicate"], capsys)
    assert code == EXIT["usage"] and err.count("\n") == 1
    assert run(["bounds", "--n", "x", "--t", 1], capsys)[0] == EXIT["usage"]
    assert run(["lpml", "--chain", tmp_path / "missing.json"], capsys)[0] == EXIT["io"]
    (tmp_path / "v.json").write_text("{}")
    assert run(["explore", "--data", tmp_path / "v.json", "--design", tmp_path / "d.csv"], capsys)[0] == EXIT["io"]


def test_numerical_error_exit(sim, tmp_path, capsys):
    X = sio.read_design(sim / "design.csv")
    sio.write_design(tmp_path / "dup.csv", np.column_stack([X, 2 * X[:, 0]]))
    code, _, err = run(["explore", "--data", sim / "data.json", "--design", tmp_path / "dup.csv"], capsys)
    assert code == EXIT["numerical"] and "column" in err


def test_console_script_entry():
    proc = subprocess.run([sys.executable, "-m", "svaro.cli", "bounds", "--n", "56526", "--t", "352"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "coef 2.83" in proc.stdout
