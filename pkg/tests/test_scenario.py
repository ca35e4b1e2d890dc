import numpy as np
import pytest

from cardassim.errors import ConfigurationError
from cardassim.scenario import (
    NoiseModel,
    ObservationTable,
    TwinScenario,
    add_noise,
    builtin_scenarios,
    load_scenario,
    simulate_truth,
)

SMALL = {"name": "small", "duration_ms": 100.0, "electro": {"n_nodes": 40, "length": 20.0}}


def test_builtins_load():
    assert set(builtin_scenarios()) >= {"tau_inout", "tau_close", "state_only"}
    scn = load_scenario("tau_close")
    assert scn.param_names == ("tau_close.endo", "tau_close.mcell", "tau_close.epi", "tau_close.rv")
    assert scn.truth.tolist() == [140.0, 105.0, 105.0, 120.0]
    assert np.allclose(scn.prior, 0.4 * scn.truth)
    assert scn.true_p()[0] == pytest.approx(np.log2(2.5), abs=1e-15)
    inout = load_scenario("tau_inout")
    assert inout.truth.tolist() == [1.0, 16.0] and inout.prior.tolist() == [1.5, 11.0]


def test_load_from_yaml_file(tmp_path):
    path = tmp_path / "s.yaml"
    path.write_text("name: mine\nduration_ms: 50\nelectro: {n_nodes: 40}\n")
    scn = load_scenario(path)
    assert scn.name == "mine" and scn.cable().n_nodes == 40 and scn.times()[-1] == 50.0


@pytest.mark.parametrize("data,key", [
    ({"electro": {"n_node": 10}}, "electro.n_node"),
    ({"bogus": 1}, "bogus"),
    ({"electro": {"dt_ms": -0.1}}, "electro.dt_ms"),
    ({"electro": {"n_nodes": 2.5}}, "electro.n_nodes"),
    ({"filter": {"kind": "particle"}}, "filter.kind"),
    ({"filter": {"obs": "both"}}, "filter.obs"),
    ({"truth": {"tau_in": 1.0}, "prior": {"tau_out": 1.0}}, "prior"),
    ({"truth": {"tau_x": 1.0}, "prior": {"tau_x": 1.0}}, "truth"),
    ({"duration_ms": 10.5}, "duration_ms"),
    ({"mech": {"measured": [0, 99]}}, "mech.measured"),
    ({"seed": -1}, "seed"),
    ({"electro": {"ionic": {"tau_in": 0.0}}}, "electro.ionic"),
])
def test_configuration_errors_name_the_key(data, key):
    with pytest.raises(ConfigurationError) as exc:
        scn = TwinScenario.from_dict(data)
        scn.ms_base()
    assert exc.value.key is not None and exc.value.key.startswith(key)


def test_unknown_builtin():
    with pytest.raises(ConfigurationError):
        load_scenario("no_such_scenario")


def test_overrides_merge_sections():
    scn = load_scenario("tau_close").with_overrides(filter={"obs": "ecg"}, seed=4)
    assert scn.config["filter"]["obs"] == "ecg" and scn.config["filter"]["kind"] == "coupled"
    assert scn.seed == 4


def test_truth_run_deterministic():
    a = simulate_truth(TwinScenario.from_dict(SMALL))
    b = simulate_truth(TwinScenario.from_dict(SMALL))
    assert np.array_equal(a.states, b.states)
    assert a.observations.channels == ("lead_I", "lead_II", "lead_III")


def test_no_stimulus_gives_constant_observations():
    scn = TwinScenario.from_dict({**SMALL, "electro": {**SMALL["electro"], "stimulus": {"amplitude": 0.0}}})
    vals = simulate_truth(scn).observations.values
    # the baseline is zero up to the round-off of the extracellular solve
    assert np.max(np.abs(vals)) <= 1e-12


def test_mech_channels_off_cadence_are_nan():
    scn = TwinScenario.from_dict({**SMALL, "mech": {"n_nodes": 11, "length": 20.0}})
    obs = simulate_truth(scn).observations
    disp = obs.columns("disp_")
    assert disp.shape[1] == 11
    assert np.all(np.isnan(disp[0])) and np.all(np.isfinite(disp[1]))  # t = 1 ms, 2 ms


@pytest.mark.slow
def test_repolarization_shifts_with_tau_close():
    def t_wave_peak(scale):
        scn = TwinScenario.from_dict({"electro": {"ionic": {"tau_close": 140.0 * scale}}})
        tr = simulate_truth(scn)
        late = tr.times > 150.0
        return tr.times[late][np.argmax(np.abs(tr.observations.values[late, 0]))]

    assert t_wave_peak(1.5) > t_wave_peak(1.0) + 50.0


# -- noise ------------------------------------------------------------------

def table(n=10000, channels=("lead_I",)):
    return ObservationTable(np.arange(n, dtype=float), channels, np.zeros((n, len(channels))))


def test_noise_std_statistic():
    noisy = add_noise(table(), NoiseModel({"lead_": 0.25}, seed=3))
    assert abs(noisy.values.std() - 0.25) <= 0.03 * 0.25


def test_zero_noise_is_identity():
    t = table(50)
    assert np.array_equal(add_noise(t, NoiseModel({"lead_": 0.0}, seed=1)).values, t.values)


def test_noise_seeded():
    t = table(100, ("lead_I", "disp_0"))
    a = add_noise(t, NoiseModel({"lead_": 0.25, "disp_": 1.0}, seed=5)).values
    b = add_noise(t, NoiseModel({"lead_": 0.25, "disp_": 1.0}, seed=5)).values
    c = add_noise(t, NoiseModel({"lead_": 0.25, "disp_": 1.0}, seed=6)).values
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    assert a[:, 1].std() > 2 * a[:, 0].std()


def test_noise_keeps_missing_entries():
    t = ObservationTable(np.arange(3.0), ("disp_0",), np.array([[np.nan], [1.0], [np.nan]]))
    v = add_noise(t, NoiseModel({"disp_": 1.0}, seed=1)).values
    assert np.isnan(v[0, 0]) and np.isfinite(v[1, 0])


def test_negative_noise_rejected():
    with pytest.raises(ConfigurationError):
        NoiseModel({"lead_": -1.0}, seed=1)
