import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from quantpk.cli import run_cli
from quantpk.config import RunConfig, config_from_dict, load_config
from quantpk.data import format_records
from quantpk.errors import ConfigError
from quantpk.likelihood import ResidualModel
from quantpk.model import FixedEffects
from quantpk.synthetic import SyntheticDesign, simulate_dataset

ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    recs, _ = simulate_dataset(SyntheticDesign(n_subjects=6), FixedEffects(), np.eye(6) * 0.09,
                               ResidualModel(), seed=2)
    (d / "data.csv").write_text(format_records(recs))
    cfg = {
        "dataset": "data.csv", "output_dir": "out", "seed": 7,
        "saem": {"n_iterations": 4, "n_burnin": 2, "mcmc_steps": 2},
        "trial": {"population_size": 4, "daily_grid": [5.0, 10.0], "weekly_grid": [20.0, 40.0]},
        "simulate": {"population_size": 3, "n_doses": 2},
        "qbench": {"n_steps": 5},
    }
    (d / "run.yaml").write_text(yaml.safe_dump(cfg))
    return d


def _header(path):
    return path.read_text().splitlines()[0]


def test_usage_errors(capsys):
    assert run_cli([]) == 2
    assert run_cli(["bogus"]) == 2
    assert run_cli(["fit", "--config", "x.yaml", "--frobnicate"]) == 2
    err = capsys.readouterr().err.strip().splitlines()[-1]
    assert json.loads(err)["error"] == "usage"


def test_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: [1, 2\n")
    assert run_cli(["fit", "--config", str(bad)]) == 3
    bad.write_text("seed: 1\nunknown_key: 3\n")
    assert run_cli(["fit", "--config", str(bad)]) == 3
    bad.write_text("omega: [[1, 2], [3, 4]]\n")
    assert run_cli(["fit", "--config", str(bad)]) == 3
    assert run_cli(["fit", "--config", str(tmp_path / "missing.yaml")]) == 3
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "config"


def test_config_parsing(tmp_path):
    cfg = config_from_dict({"dataset": "d.csv", "theta": {"cl": 3.0}, "omega": [0.1] * 6}, tmp_path)
    assert cfg.dataset == str(tmp_path / "d.csv")
    assert cfg.fixed_effects().cl == 3.0
    assert np.allclose(cfg.omega_matrix(), np.eye(6) * 0.1)
    with pytest.raises(ConfigError):
        config_from_dict({"theta": {"cl": -1.0}})
    with pytest.raises(ConfigError):
        config_from_dict({"saem": {"mcmc_steps": 0}})
    ex = load_config(ROOT / "configs" / "example.yaml")
    assert Path(ex.dataset).exists()


def test_hash_ignores_workers_and_output():
    a = RunConfig(seed=3)
    b = RunConfig(seed=3, workers=4, output_dir="elsewhere")
    assert a.hash() == b.hash() and a.hash() != RunConfig(seed=4).hash()
    assert a.header().startswith("# config_sha256=") and a.header().rstrip().endswith("seed=3")


def test_validate(workspace, capsys):
    assert run_cli(["validate", str(workspace / "data.csv")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["n_subjects"] == 6 and out["dose_levels"] == [1.0, 5.0, 10.0]
    assert out["n_pk_observations"] == out["n_pd_observations"] == 6 * 18


def test_fit_twice_identical(workspace):
    for name in ("a", "b"):
        assert run_cli(["fit", "--config", str(workspace / "run.yaml"), "--engine", "classical",
                        "--seed", "7", "--output-dir", str(workspace / name)]) == 0
    for f in ("theta.csv", "omega.csv", "trace.csv", "etas.csv"):
        assert (workspace / "a" / f).read_bytes() == (workspace / "b" / f).read_bytes()
    assert _header(workspace / "a" / "trace.csv").startswith("# config_sha256=")
    assert _header(workspace / "a" / "trace.csv").endswith("seed=7")


def test_fit_quantum_writes_angles(workspace):
    assert run_cli(["fit", "--config", str(workspace / "run.yaml"), "--engine", "quantum",
                    "--output-dir", str(workspace / "q")]) == 0
    assert (workspace / "q" / "quantum_angles.csv").exists()


def test_simulate_qbench_report(workspace):
    out = workspace / "misc"
    cfg = str(workspace / "run.yaml")
    assert run_cli(["simulate", "--config", cfg, "--output-dir", str(out)]) == 0
    assert run_cli(["qbench", "--config", cfg, "--output-dir", str(out)]) == 0
    assert run_cli(["fit", "--config", cfg, "--output-dir", str(out)]) == 0
    assert run_cli(["report", "--config", cfg, "--output-dir", str(out), "--fit-dir", str(out)]) == 0
    for f in ("profiles.csv", "qbench.csv", "counters.csv", "residuals.csv", "cv_profile.csv"):
        text = (out / f).read_text()
        assert text.startswith("# config_sha256=")
        assert "nan" not in text.lower()
    counters = dict(line.split(",") for line in (out / "counters.csv").read_text().splitlines()[2:])
    assert int(counters["cache_hits"]) >= 6 and int(counters["rhs_evaluations"]) > 0
    assert (out / "report_skipped.log").exists()


def test_optimize_rows(workspace):
    out = workspace / "opt"
    assert run_cli(["optimize", "--config", str(workspace / "run.yaml"), "--output-dir", str(out)]) == 0
    lines = (out / "recommendations.csv").read_text().splitlines()
    assert lines[1] == "scenario,regimen,target,dose_mg,achieved_fraction,boundary_flag"
    assert len(lines) == 2 + 12
    assert len((out / "reductions.csv").read_text().splitlines()) == 2 + 6


def test_runtime_error_exit(tmp_path, capsys):
    (tmp_path / "c.yaml").write_text("dataset: nope.csv\n")
    assert run_cli(["fit", "--config", str(tmp_path / "c.yaml")]) == 1
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "runtime"
