import json

import numpy as np
import pytest
import yaml

from cardassim.cli import main
from cardassim.errors import UsageError
from cardassim.harness import compare_runs, read_csv, read_table, run_scenario, summary_table
from cardassim.scenario import TwinScenario

SMALL = {
    "name": "small",
    "duration_ms": 100.0,
    "electro": {"n_nodes": 40, "length": 20.0},
    "truth": {"tau_out": 16.0},
    "prior": {"tau_out": 11.0},
    "pod": {"rank": 5, "snapshot_duration_ms": 100.0},
    "filter": {"alpha_std": 10.0, "param_std": 0.3},
}
SMALL_MECH = {
    **SMALL,
    "mech": {"n_nodes": 11, "length": 20.0},
    "pod": {"rank": 0},
    "filter": {"kind": "coupled", "obs": "both", "param_std": 0.3},
}


@pytest.fixture
def scenario_file(tmp_path):
    path = tmp_path / "small.yaml"
    path.write_text(yaml.safe_dump(SMALL))
    return path


def csv_bytes(d):
    return {p.name: p.read_bytes() for p in sorted(d.glob("*.csv"))}


def test_cli_pipeline(tmp_path, scenario_file, capsys):
    data = tmp_path / "data"
    assert main(["simulate", "--scenario", str(scenario_file), "--out", str(data)]) == 0
    assert (data / "truth.csv").read_text().startswith("# cardassim truth v1\n")
    assert main(["noise", "--in", str(data), "--seed", "3"]) == 0
    noisy, clean = read_table(data / "observations.csv"), read_table(data / "observations_clean.csv")
    assert noisy.channels == clean.channels and not np.array_equal(noisy.values, clean.values)
    assert main(["estimate", "--scenario", str(scenario_file), "--data", str(data), "--out", str(tmp_path / "run")]) == 0
    assert "tau_out" in capsys.readouterr().out
    for name in ("estimate.csv", "gramian.json", "sensitivity.csv", "meta.json", "summary.txt"):
        assert (tmp_path / "run" / name).is_file()
    assert main(["diagnose", "--run", str(tmp_path / "run"), "--gramian"]) == 0
    doc = json.loads((tmp_path / "run" / "gramian_diag.json").read_text())
    assert doc["lambda_min_ecg"] > 0
    assert not (tmp_path / "run" / "sensitivity_diag.csv").exists()


def test_cli_pod(tmp_path, scenario_file):
    out = tmp_path / "modes.csv"
    assert main(["pod", "--scenario", str(scenario_file), "--out", str(out), "--rank", "4"]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "# pod rank=4 gram=mass"
    assert lines[1] == "mode_0,mode_1,mode_2,mode_3"
    assert len(lines) == 2 + 80
    _, sv = read_csv(tmp_path / "modes_sv.csv", "singular-values")
    assert np.all(np.diff(sv[:, 1]) <= 0)
    assert main(["pod", "--scenario", str(scenario_file), "--out", str(out), "--rank", "0"]) == 2


def test_cli_configuration_errors(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("electro: {n_nodez: 3}\n")
    assert main(["simulate", "--scenario", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert main(["simulate", "--scenario", str(tmp_path / "missing.yaml"), "--out", str(tmp_path / "o")]) == 2
    bad.write_text("electro: [unclosed\n")
    assert main(["simulate", "--scenario", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert main(["diagnose", "--run", str(tmp_path)]) == 2


def test_cli_numerical_failure(tmp_path):
    cfg = {**SMALL, "duration_ms": 50.0, "electro": {"n_nodes": 40, "length": 20.0, "dt_ms": 1.0,
                                                     "ionic": {"tau_in": 0.05}},
           "filter": {"kind": "roukf"}}
    path = tmp_path / "unstable.yaml"
    path.write_text(yaml.safe_dump(cfg))
    with np.errstate(all="ignore"):
        assert main(["estimate", "--scenario", str(path), "--out", str(tmp_path / "o")]) == 3


def test_cli_compare_exit_codes(tmp_path, scenario_file):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["estimate", "--scenario", str(scenario_file), "--out", str(a)]) == 0
    assert main(["estimate", "--scenario", str(scenario_file), "--out", str(b)]) == 0
    # identical runs: every delta is zero, so B does not dominate
    assert main(["compare", "--a", str(a), "--b", str(b), "--json", str(tmp_path / "c.json")]) == 4
    rows = json.loads((tmp_path / "c.json").read_text())["rows"]
    assert [r["delta"] for r in rows] == [0.0]
    assert main(["estimate", "--scenario", str(scenario_file), "--filter", "roukf", "--out", str(tmp_path / "p")]) == 0
    best, worst = sorted([a, tmp_path / "p"], key=lambda d: compare_runs(d, d)["rows"][0]["error_a"])
    assert main(["compare", "--a", str(worst), "--b", str(best)]) == 0


def test_compare_mismatched_parameters(tmp_path):
    run_scenario(TwinScenario.from_dict(SMALL), tmp_path / "a")
    other = {**SMALL, "truth": {"tau_out": 16.0, "tau_in": 1.0}, "prior": {"tau_out": 11.0, "tau_in": 1.5}}
    run_scenario(TwinScenario.from_dict(other), tmp_path / "b")
    with pytest.raises(UsageError):
        compare_runs(tmp_path / "a", tmp_path / "b")
    assert main(["compare", "--a", str(tmp_path / "a"), "--b", str(tmp_path / "b")]) == 2


@pytest.mark.parametrize("cfg", [SMALL, SMALL_MECH], ids=["ecg", "ecg+mech"])
def test_artifacts_byte_identical(tmp_path, cfg):
    scn = TwinScenario.from_dict(cfg)
    run_scenario(scn, tmp_path / "one")
    run_scenario(scn, tmp_path / "two")
    one, two = csv_bytes(tmp_path / "one"), csv_bytes(tmp_path / "two")
    assert set(one) >= {"truth.csv", "observations.csv", "observations_clean.csv", "estimate.csv"}
    assert one == two
    assert (tmp_path / "one" / "gramian.json").read_bytes() == (tmp_path / "two" / "gramian.json").read_bytes()


def test_seed_changes_observations(tmp_path):
    run_scenario(TwinScenario.from_dict(SMALL), tmp_path / "one")
    run_scenario(TwinScenario.from_dict({**SMALL, "seed": 2}), tmp_path / "two")
    assert (tmp_path / "one" / "observations.csv").read_bytes() != (tmp_path / "two" / "observations.csv").read_bytes()
    assert (tmp_path / "one" / "truth.csv").read_bytes() == (tmp_path / "two" / "truth.csv").read_bytes()


@pytest.mark.parametrize("kind", ["ukf", "ekf", "roukf", "roekf", "pod-roukf"])
def test_every_filter_kind_runs(tmp_path, kind):
    cfg = {**SMALL, "duration_ms": 20.0, "filter": {**SMALL["filter"], "kind": kind, "state_std": 0.1}}
    rep = run_scenario(TwinScenario.from_dict(cfg), tmp_path)
    assert np.isfinite(rep["estimate"][0])


def test_full_covariance_filters_reject_mechanics(tmp_path):
    cfg = {**SMALL_MECH, "filter": {"kind": "ukf", "obs": "both"}}
    assert main(["estimate", "--scenario", _dump(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 2


def _dump(tmp_path, cfg):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def test_summary_table_layout():
    text = summary_table(["tau_in"], [1.0], [1.5], [1.02])
    assert text.splitlines()[1].split() == ["tau_in", "1.00", "1.50", "50.00%", "1.02", "2.00%"]
