import csv
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from modelmix.cli import main
from modelmix.config import ConfigError, RunConfig
from modelmix.synthetic import FIXTURE_SEED, fixture_dir, make_fixture, write_fixture

EXAMPLE = fixture_dir() / "example.ini"


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def fitted(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["fit", str(EXAMPLE), "--draws", "300", "--chains", "2", "--out", str(out)]) == 0
    return out


class TestFit:
    def test_run_directory(self, fitted):
        for name in ("config.ini", "run.json", "draws.npy", "chain.npy", "diagnostics.json",
                     "trace.csv", "model.json"):
            assert (fitted / name).exists(), name
        info = json.loads((fitted / "run.json").read_text())
        assert info["variant"] == "gbmm-d" and info["seed"] == 1
        assert np.load(fitted / "draws.npy").shape[0] == 300

    def test_rerun_identical(self, fitted, tmp_path):
        assert main(["fit", str(EXAMPLE), "--draws", "300", "--chains", "2", "--out", str(tmp_path)]) == 0
        assert digest(tmp_path / "draws.npy") == digest(fitted / "draws.npy")

    def test_snapshot_rebuilds(self, fitted):
        cfg = RunConfig.from_file(fitted / "config.ini")
        assert cfg.sampler_config().total_draws == 300
        assert cfg.path("train").is_absolute()

    def test_predict(self, fitted):
        assert main(["predict", str(fitted)]) == 0
        pred = read_csv(fitted / "predictive.csv")
        assert len(pred) == 400
        assert list(pred[0]) == ["Z", "N", "mean", "sd", "q05", "q16", "q50", "q84", "q95"]
        wf = read_csv(fitted / "weight_field.csv")
        by_loc = {}
        for r in wf:
            by_loc.setdefault((r["Z"], r["N"]), 0.0)
            by_loc[(r["Z"], r["N"])] += float(r["mean"])
        assert all(abs(v - 1.0) < 1e-12 for v in by_loc.values())

    def test_evaluate(self, fitted):
        assert main(["evaluate", str(fitted)]) == 0
        rows = read_csv(fitted / "metrics.csv")
        assert [r["model"] for r in rows] == ["model_a", "model_b", "gbmm-d"]
        mix = rows[-1]
        assert float(mix["rms_test"]) < min(float(r["rms_test"]) for r in rows[:2])
        assert float(mix["sigma"]) == pytest.approx(0.1, abs=0.03)
        ecp_rows = read_csv(fitted / "ecp.csv")
        assert [float(r["level"]) for r in ecp_rows] == [0.5, 0.68, 0.9, 0.95]

    def test_weights(self, fitted):
        assert main(["weights", str(fitted)]) == 0
        rows = read_csv(fitted / "weights.csv")
        assert [r["model"] for r in rows] == ["model_a", "model_b"]
        assert float(rows[0]["mean"]) == pytest.approx(0.3, abs=0.05)


class TestBmaCommands:
    @pytest.mark.parametrize("variant", ["bma-ex", "bma-mc", "bma-laplace"])
    def test_fit_bma(self, variant, tmp_path):
        args = ["fit", str(EXAMPLE), "--variant", variant, "--out", str(tmp_path), "--set", "bma.n_mc=20000"]
        assert main(args) == 0
        rows = read_csv(tmp_path / "evidence.csv")
        assert abs(sum(float(r["weight"]) for r in rows) - 1.0) < 1e-12
        assert main(["evaluate", str(tmp_path)]) == 0
        assert (tmp_path / "ecp.csv").exists()

    def test_evidence_all_methods(self, tmp_path):
        args = ["evidence", str(EXAMPLE), "--variant", "bma-ex", "--out", str(tmp_path),
                "--set", "bma.n_mc=20000", "--set", "bma.approx_prior=conjugate"]
        assert main(args) == 0
        rows = read_csv(tmp_path / "evidence.csv")
        assert sorted({r["method"] for r in rows}) == ["exact", "laplace", "mc"]
        w = {(r["method"], r["model"]): float(r["weight"]) for r in rows}
        assert abs(w[("exact", "model_a")] - w[("mc", "model_a")]) < 0.05


class TestErrors:
    def test_invalid_variant_exit_2(self, capsys):
        assert main(["fit", str(EXAMPLE), "--variant", "gbmm-x"]) == 2
        assert "unknown variant" in capsys.readouterr().err

    def test_bad_override(self):
        assert main(["fit", str(EXAMPLE), "--set", "nonsense"]) == 2

    def test_missing_config(self, tmp_path):
        assert main(["fit", str(tmp_path / "none.ini")]) == 2

    def test_argparse_error(self):
        assert main(["frobnicate"]) == 2

    def test_runtime_error_exit_1(self, tmp_path, capsys):
        assert main(["predict", str(tmp_path)]) == 1
        assert "not a run directory" in capsys.readouterr().err

    def test_unknown_sampler_key(self):
        with pytest.raises(ConfigError, match="unknown key"):
            RunConfig.from_file(EXAMPLE, ["sampler.speed=fast"])

    def test_console_script(self):
        r = subprocess.run([sys.executable, "-m", "modelmix.cli", "--version"], capture_output=True, text=True)
        assert r.returncode == 0 and "modelmix" in r.stdout


class TestDomain:
    def test_even_even_default(self, tmp_path):
        out = tmp_path / "run"
        args = ["fit", str(EXAMPLE), "--draws", "100", "--chains", "1", "--out", str(out),
                "--set", "predict.domain=even-even"]
        assert main(args) == 0
        assert main(["predict", str(out)]) == 0
        locs = {(float(r["Z"]), float(r["N"])) for r in read_csv(out / "weight_field.csv")}
        assert locs and all(z % 2 == 0 and n % 2 == 0 for z, n in locs)


class TestFixture:
    def test_regenerates_identically(self, tmp_path):
        write_fixture(tmp_path)
        for name in ("train.csv", "test.csv", "model_a.csv", "model_b.csv", "example.ini"):
            assert (tmp_path / name).read_bytes() == (fixture_dir() / name).read_bytes(), name

    def test_shape(self):
        fx = make_fixture(FIXTURE_SEED)
        assert len(fx["train"]) == 200 and len(fx["test"]) == 100
        assert not set(fx["train"]) & set(fx["test"])
