"""Command line interface and run configuration."""

import csv
import json
from pathlib import Path

import pytest

from wildns import cli
from wildns import config as C
from wildns import field as F

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def write_toml(path, text):
    path.write_text(text)
    return path


def test_verify_identities_exit_zero(capsys):
    assert cli.main(["verify-identities"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") >= 7


def test_unknown_key_is_rejected(tmp_path, capsys):
    cfg = write_toml(tmp_path / "bad.toml", 'variant = "A"\ncolour = "blue"\n')
    assert cli.main(["run-scheme", "--config", str(cfg)]) == 2
    assert "unknown key" in capsys.readouterr().err
    with pytest.raises(C.ConfigError):
        C.config_from_dict({"noise": {"amplitud": 1.0}})


def test_config_validation():
    with pytest.raises(C.ConfigError):
        C.config_from_dict({"grid_n": 8, "noise_n": 16})
    with pytest.raises(C.ConfigError):
        C.config_from_dict({"variant": "C"})
    with pytest.raises(C.ConfigError):
        C.config_from_dict({"desk": {"jets": [[1, 0.05, 0.9]]}})


def test_pinned_configs_load_with_overrides():
    a = C.load_config(CONFIGS / "desk_A.toml", {"seed": 9, "dt": None})
    assert (a.variant, a.grid_n, a.seed, a.dt) == ("A", 48, 9, 0.01)
    assert a.params().desk_jets == ((1, 0.05, 0.9, 50.0),)
    b = C.load_config(CONFIGS / "desk_B.toml")
    assert (b.variant, b.Q_levels, b.K, b.K2) == ("B", 3, 10.0, 40.0)
    assert json.loads(json.dumps(b.to_json()))["desk"]["ell"] == 0.05


def test_run_scheme_level0_only(tmp_path, capsys):
    out = tmp_path / "run"
    code = cli.main(["run-scheme", "--variant", "A", "--levels", "0", "--output", str(out)])
    assert code == 0
    rows = list(csv.DictReader(open(out / "levels.csv")))
    assert [r["name"] for r in rows] == ["R0 C_t L1"] and rows[0]["level"] == "0"
    summ = json.loads((out / "summary.json").read_text())
    assert summ["run"]["config"]["Q_levels"] == 0
    v = F.read_snapshot(out / "v_final.wns")
    assert isinstance(v, F.TimeTrajectory) and not v.data.any()
    capsys.readouterr()
    assert cli.main(["report", str(out)]) == 0
    assert "R0 C_t L1" in capsys.readouterr().out


def test_report_on_missing_ledger(tmp_path):
    assert cli.main(["report", str(tmp_path)]) == 2


def test_simulate_noise_writes_files(tmp_path, capsys):
    out = tmp_path / "noise"
    assert cli.main(["simulate-noise", "--output", str(out), "--seed", "3"]) == 0
    info = json.loads((out / "noise.json").read_text())
    Z = F.read_snapshot(out / "Z.wns")
    assert info["samples"] == Z.nt and info["C_G"] > 0
    assert 0 < info["stopping"]["time"] <= 1.0
