import json
import os

import numpy as np
import pytest

from regfp.pipeline import io as rio
from regfp.pipeline.cli import main
from regfp.pipeline.manifest import verify_manifest


@pytest.fixture
def fixture_dir(tmp_path):
    rng = np.random.default_rng(0)
    N, n = 24, 60
    X = rng.standard_normal((N, 2))
    y = X @ [1.0, 0.8] + rng.standard_normal(N)
    xt = X + rng.standard_normal((N, 2)) / np.sqrt([20, 30])
    Z = rng.standard_normal((n, N))
    rio.write_matrix(tmp_path / "y.csv", y[:, None], header=["y"])
    rio.write_matrix(tmp_path / "x.csv", xt, header=["ANT", "NAT"])
    rio.write_matrix(tmp_path / "ens.csv", Z)
    rio.write_matrix(tmp_path / "cov.bin", np.eye(N))
    rio.write_matrix(tmp_path / "singular.csv", np.zeros((N, N)))
    return tmp_path


def fit_args(d, *extra):
    return ["--y", str(d / "y.csv"), "--x", str(d / "x.csv"), "--sizes", "20", "30", *extra]


def error_payload(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def load(path):
    with open(path) as fh:
        return json.load(fh)


def test_fit_two_intervals(fixture_dir):
    out = fixture_dir / "fit"
    assert main(["fit", *fit_args(fixture_dir, "--ensemble", str(fixture_dir / "ens.csv"), "--method", "M1"),
                 "--output-dir", str(out)]) == 0
    res = load(out / "fit.json")
    assert len(res["ci_lower"]) == len(res["ci_upper"]) == 2
    assert all(lo <= b <= hi for lo, b, hi in zip(res["ci_lower"], res["beta"], res["ci_upper"]))
    assert res["covariance"]["method"] == "linear_shrinkage"
    assert verify_manifest(out / "manifest.json") == []


def test_fit_with_precomputed_covariance_and_gls(fixture_dir):
    out = fixture_dir / "gls"
    assert main(["fit", *fit_args(fixture_dir, "--cov", str(fixture_dir / "cov.bin"), "--regression", "gls"),
                 "--output-dir", str(out)]) == 0
    assert len(load(out / "fit.json")["beta"]) == 2


def test_singular_covariance_exit_3(fixture_dir, capsys):
    code = main(["fit", *fit_args(fixture_dir, "--cov", str(fixture_dir / "singular.csv")),
                 "--output-dir", str(fixture_dir / "bad")])
    assert code == 3
    err = error_payload(capsys)
    assert err["exit_code"] == 3 and err["error"] and err["message"]


@pytest.mark.parametrize("argv", [
    ["fit", "--bogus"],
    ["nosuch"],
    [],
    ["fit", "--y", "a.csv"],
])
def test_usage_errors_exit_2(argv, capsys):
    assert main(argv) == 2
    assert error_payload(capsys)["exit_code"] == 2


def test_validation_errors_exit_2(fixture_dir, capsys):
    assert main(["fit", *fit_args(fixture_dir, "--cov", str(fixture_dir / "missing.csv")),
                 "--output-dir", str(fixture_dir / "o")]) == 2
    assert error_payload(capsys)["exit_code"] == 2
    # wrong number of ensemble sizes for the design
    args = ["--y", str(fixture_dir / "y.csv"), "--x", str(fixture_dir / "x.csv"), "--sizes", "20",
            "--cov", str(fixture_dir / "cov.bin")]
    assert main(["fit", *args, "--output-dir", str(fixture_dir / "o")]) == 2
    assert main(["simulate", "--threads", "-1", "--output-dir", str(fixture_dir / "o")]) == 2


def test_calibrate(fixture_dir):
    out = fixture_dir / "cal"
    argv = ["calibrate", *fit_args(fixture_dir, "--ensemble", str(fixture_dir / "ens.csv"), "--method", "M1"),
            "-B", "200", "--seed", "3", "--output-dir", str(out)]
    assert main(argv) == 0
    res = load(out / "calibration.json")
    assert res["kappa"] >= 1.0 and res["B"] == 200 and res["seed"] == 3
    assert len(res["ci_lower"]) == 2
    first = open(out / "calibration.json", "rb").read()
    assert main(argv) == 0
    assert open(out / "calibration.json", "rb").read() == first


def test_estimate_cov_formats_and_pooling(fixture_dir):
    out = fixture_dir / "cov"
    ens = str(fixture_dir / "ens.csv")
    assert main(["estimate-cov", "--ensemble", ens, "--method", "linear", "--output-dir", str(out)]) == 0
    M = rio.read_matrix(out / "covariance.bin")
    assert M.shape == (24, 24) and np.allclose(M, M.T)
    assert main(["estimate-cov", "--ensemble", ens, "--gamma", "0.4", "--format", "csv",
                 "--pool", "6", "4", "--output-dir", str(out)]) == 0
    meta = load(out / "covariance.json")
    assert meta["method"].startswith("nonlinear") and meta["gamma"] == 0.4 and meta["pooled"]
    assert rio.read_matrix(out / "covariance.csv").shape == (24, 24)


def test_select_bandwidth_global_seed_position(fixture_dir):
    ens = str(fixture_dir / "ens.csv")
    a, b = fixture_dir / "a", fixture_dir / "b"
    assert main(["--seed", "4", "--output-dir", str(a), "select-bandwidth", "--ensemble", ens]) == 0
    assert main(["select-bandwidth", "--ensemble", ens, "--seed", "4", "--output-dir", str(b)]) == 0
    ra, rb = load(a / "bandwidth.json"), load(b / "bandwidth.json")
    assert ra == rb and ra["seed"] == 4
    assert 0.2 <= ra["gamma"] <= 0.5
    assert load(a / "manifest.json")["seed"] == 4


def test_preprocess_observations_and_control(fixture_dir):
    rng = np.random.default_rng(1)
    obs = rng.standard_normal((12 * 20, 4))
    obs[:30, 1] = np.nan
    rio.write_matrix(fixture_dir / "obs.csv", obs)
    out = fixture_dir / "pre"
    assert main(["preprocess", "--input", str(fixture_dir / "obs.csv"), "--start-year", "1960",
                 "--reference", "1961", "1970", "--grid", "2", "2", "--aggregate", "2", "1",
                 "--output-dir", str(out)]) == 0
    pentads = rio.read_matrix(out / "pentads.csv")
    assert pentads.shape == (4, 2)
    assert rio.read_vector(out / "observations.csv").shape == (8,)

    for k in range(2):
        rio.write_matrix(fixture_dir / f"ctl{k}.csv", rng.standard_normal((12 * 130, 4)))
    ctl = fixture_dir / "ctl"
    assert main(["preprocess", "--mode", "control", "--input", str(fixture_dir / "ctl0.csv"),
                 "--input", str(fixture_dir / "ctl1.csv"), "--output-dir", str(ctl)]) == 0
    Z = rio.read_matrix(ctl / "ensemble.csv")
    assert Z.shape == (4, 4 * 12)
    man = load(ctl / "manifest.json")
    assert len(man["inputs"]) == 2 and man["rules"]["block_years"] == 60


def test_simulate_deterministic(tmp_path):
    cfg = tmp_path / "sim.toml"
    cfg.write_text(
        'replicates = 3\nn_control = 40\nci_kinds = ["N"]\n'
        '[sigma]\nkind = "ST"\nS = 5\nT = 4\n'
    )
    reports = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        assert main(["simulate", "--config", str(cfg), "--reps", "4", "--seed", "1",
                     "--output-dir", str(out)]) == 0
        reports.append((out / "report.csv").read_bytes())
        assert verify_manifest(out / "manifest.json") == []
        assert load(out / "manifest.json")["rules"]["replicates"] == 4
    assert reports[0] == reports[1]
    out = tmp_path / "r3"
    assert main(["simulate", "--config", str(cfg), "--seed", "2", "--output-dir", str(out)]) == 0
    assert (out / "report.csv").read_bytes() != reports[0]


def test_simulate_bad_config(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text('{"replicates": 2, "unknown_key": 1}')
    assert main(["simulate", "--config", str(cfg), "--output-dir", str(tmp_path / "o")]) == 2
    assert error_payload(capsys)["exit_code"] == 2


def test_every_run_writes_manifest(fixture_dir):
    out = fixture_dir / "m"
    main(["estimate-cov", "--ensemble", str(fixture_dir / "ens.csv"), "--method", "sample",
          "--output-dir", str(out)])
    man = load(out / "manifest.json")
    assert set(man["outputs"]) == {"covariance.bin", "covariance.json"}
    assert man["command"] == "estimate-cov"
    assert "timestamp" not in json.dumps(man)
    assert os.path.isabs(str(fixture_dir / "ens.csv")) and str(fixture_dir / "ens.csv") in man["inputs"]
