import numpy as np
import pytest

from cardassim.coupled import (
    CoupledModel,
    CoupledObserverConfig,
    DisplacementObservation,
    ElectroModel,
    LeadObservation,
    LinearCoupledTwin,
    ParamSpec,
    StackedObservation,
    decoupling_check,
    initial_filter,
    observability_gramian,
    run_reduced_filter,
    sensitivity_curves,
    support_width,
)
from cardassim.electro import CableConfig, MsParams, activation_times, default_lead_field, left_stimulus
from cardassim.errors import ConfigurationError, NumericalError
from cardassim.filters import ObservationRecord
from cardassim.mech import FiberConfig, MeasuredRegion

CABLE = CableConfig(n_nodes=40, length=20.0)
FIBER = FiberConfig(n_nodes=11, length=20.0)
STIM = left_stimulus(CABLE, 0.1, amplitude=0.1, duration=25.0)


def make_model(names=(), prior=(), gamma=0.0, dt_obs=2.0):
    em = ElectroModel(CABLE, MsParams(), ParamSpec(tuple(names), tuple(prior)), STIM, dt_e=0.1, dt_obs=dt_obs)
    return CoupledModel(em, FIBER, dt_m=1.0, gamma=gamma)


def rest(model, p=()):
    n, nm = CABLE.n_nodes, FIBER.n_nodes
    x = np.zeros(model.layout.size + len(p))
    x[:n] = MsParams().v_min
    x[n:2 * n] = MsParams().w_max
    x[model.layout.size:] = p
    return x


def run(model, x, n_windows):
    out = [x]
    for k in range(n_windows):
        x = model.step(x, k * model.electro.dt_obs)
        out.append(x)
    return np.array(out)


@pytest.fixture(scope="module")
def forward():
    m = make_model()
    return m, run(m, rest(m), 200)


def test_layout():
    m = make_model(("tau_in",), (1.0,))
    assert m.layout.names == ("vm", "w", "disp", "vel", "e_c", "k_c", "tau_c")
    assert m.layout.size == 2 * 40 + 2 * 11 + 3 * 10
    assert m.dim == m.layout.size + 1


def test_one_way_coupling(forward, rng):
    m, traj = forward
    x = traj[20].copy()
    y = x.copy()
    y[m.layout["disp"].slice] += rng.standard_normal(11)
    a, b = m.step(x, 40.0), m.step(y, 40.0)
    assert np.array_equal(a[: m.n_e], b[: m.n_e])
    assert not np.array_equal(a[m.n_e:], b[m.n_e:])


def test_zero_gain_equals_forward(forward):
    m, traj = forward
    nudged = make_model(gamma=0.0).with_data(np.ones(11))
    assert np.array_equal(nudged.step(traj[30], 60.0), m.step(traj[30], 60.0))


def test_multirate_grid_checked():
    em = ElectroModel(CABLE, MsParams(), ParamSpec((), ()), STIM, dt_e=0.1, dt_obs=1.0)
    with pytest.raises(ConfigurationError):
        CoupledModel(em, FIBER, dt_m=0.3)
    with pytest.raises(ConfigurationError):
        ElectroModel(CABLE, MsParams(), ParamSpec((), ()), STIM, dt_e=0.3, dt_obs=1.0)


def test_window_equals_repeated_single_steps(forward):
    _, traj = forward
    one = make_model(dt_obs=1.0)
    two = make_model(dt_obs=2.0)
    x = traj[10]
    assert np.allclose(two.step(x, 20.0), one.step(one.step(x, 20.0), 21.0), rtol=0, atol=1e-12)


def test_contraction_follows_activation(forward):
    m, traj = forward
    times = 2.0 * np.arange(traj.shape[0])
    at = activation_times(times, traj[:, :40], -67.0)
    disp = traj[:, m.layout["disp"].slice]
    peak = np.abs(disp).max(axis=0)
    assert np.argmax(peak) == 10  # free end
    onset = times[np.argmax(np.abs(disp[:, -1]) > 0.1 * peak[-1])]
    assert onset > np.nanmin(at)


def test_param_spec_validation():
    with pytest.raises(ConfigurationError):
        ParamSpec(("tau_in",), ())
    with pytest.raises(ConfigurationError):
        ParamSpec(("tau_x",), (1.0,))
    with pytest.raises(ConfigurationError):
        ParamSpec(("tau_in.endo",), (1.0,))
    with pytest.raises(ConfigurationError):
        ParamSpec(("tau_close",), (-1.0,))


def test_param_spec_regional_tau_close():
    spec = ParamSpec(("tau_close.endo", "tau_close.rv"), (100.0, 50.0))
    p = spec.apply(MsParams(), CABLE, np.array([1.0, 0.0]))
    tc = np.asarray(p.tau_close)
    assert tc[CABLE.region_slice("endo")].tolist() == [200.0] * 12
    assert tc[CABLE.region_slice("rv")].tolist() == [50.0] * 10
    assert tc[CABLE.region_slice("mcell")].tolist() == [140.0] * 6


def test_observation_cadence():
    m = make_model()
    ecg = LeadObservation(m, default_lead_field(CABLE), sigma=0.25, period=1.0)
    disp = DisplacementObservation(m, MeasuredRegion.all_nodes(FIBER), sigma=1.0, period=2.0)
    both = StackedObservation([ecg, disp])
    assert ecg.noise_norm(3.0).tolist() == [16.0] * 3
    assert disp.noise_norm(2.0).tolist() == [2.0] * 11
    assert not disp.noise_norm(3.0).any()
    y = both.observe(rest(m), 0.0)
    assert [v.size for v in both.split(y)] == [3, 11]


def test_truth_initialized_filter_stays_at_truth():
    names, truth = ("tau_out",), (18.0,)
    m = make_model(names, truth)
    ecg = LeadObservation(m, default_lead_field(CABLE), period=2.0)
    x = rest(m, [0.0])
    records = []
    for k in range(60):
        x = m.step(x, 2.0 * k)
        t = 2.0 * (k + 1)
        records.append(ObservationRecord(t, ecg.observe(x, t), ecg.noise_norm(t)))
    cfg = CoupledObserverConfig(None, param_std=1e-8)
    f, trace = run_reduced_filter(m, ecg, records, initial_filter(m, rest(m, [0.0]), cfg), cfg)
    assert abs(f.estimate[-1]) < 1e-9
    assert np.allclose(f.estimate[:-1], x[:-1], atol=1e-6)
    assert max(np.max(np.abs(i)) for i in trace.innovations) < 1e-6


def test_initial_filter_shapes():
    m = make_model(("tau_in", "tau_out"), (1.0, 18.0))
    f = initial_filter(m, rest(m, [0.0, 0.0]), CoupledObserverConfig(None, param_std=[0.5, 0.25]))
    assert f.lowrank.L.shape == (m.dim, 2)
    assert np.allclose(np.diag(f.lowrank.U), [4.0, 16.0])
    with pytest.raises(ConfigurationError):
        initial_filter(make_model(), rest(make_model()), CoupledObserverConfig(None))


# -- linear analysis --------------------------------------------------------

def test_decoupling_on_linear_twin(rng):
    ne, nm = 3, 4
    Ae = 0.97 * np.linalg.qr(rng.standard_normal((ne, ne)))[0]
    Am = 0.9 * np.eye(nm) + 0.05 * rng.standard_normal((nm, nm))
    B = 0.1 * rng.standard_normal((nm, ne))
    He, Hm = rng.standard_normal((2, ne)), np.eye(nm)
    twin = LinearCoupledTwin(Ae, Am, B, He, Hm, 0.3 * np.eye(nm))
    x0 = rng.standard_normal(ne + nm)
    gap = decoupling_check(twin, x0, x0 + rng.standard_normal(ne + nm), np.ones(2 + nm), 50)
    assert gap < 1e-6


def test_gramian_zero_and_full(rng):
    Lr = np.eye(3)
    lam, _, ok = observability_gramian([np.zeros((2, 3))] * 5, [Lr] * 5, [np.ones(2)] * 5, 1.0)
    assert lam == 0.0 and not ok
    lam, G, ok = observability_gramian([np.eye(3)] * 5, [Lr] * 5, [np.ones(3)] * 5, 0.5)
    assert lam == pytest.approx(2.5) and ok
    assert np.allclose(G, 2.5 * np.eye(3))


def test_gramian_errors():
    with pytest.raises(NumericalError):
        observability_gramian([np.eye(2)], [np.zeros((2, 2))], [np.ones(2)], 1.0)
    with pytest.raises(ConfigurationError):
        observability_gramian([], [], [], 1.0)


def test_gramian_grows_with_extra_outputs(rng):
    HL = [rng.standard_normal((5, 3)) for _ in range(10)]
    Lr = [np.eye(3) + 0.1 * rng.standard_normal((3, 3)) for _ in range(10)]
    w = [np.ones(5)] * 10
    lam_all, _, _ = observability_gramian(HL, Lr, w, 1.0)
    lam_sub, _, _ = observability_gramian([h[:2] for h in HL], Lr, [v[:2] for v in w], 1.0)
    assert lam_all >= lam_sub


def test_sensitivity_zero_influence():
    HL = [np.column_stack([np.ones(4), np.zeros(4)]) for _ in range(6)]
    tr = sensitivity_curves(np.arange(6.0), HL, [np.eye(2)] * 6, n_e=2, y_e_mean=1.0, y_m_mean=1.0,
                            names=("a", "b"))
    assert not tr.s_e[:, 1].any() and not tr.s_m[:, 1].any()
    assert np.allclose(tr.s_e[:, 0], 1.0 / np.log(2.0))
    assert support_width(tr.times, tr.s_e[:, 1]) == 0.0


def test_sensitivity_singular_factor():
    with pytest.raises(NumericalError):
        sensitivity_curves([0.0], [np.ones((2, 2))], [np.zeros((2, 2))], 1, 1.0, 1.0, ("a", "b"))


def test_support_width():
    t = np.arange(10.0)
    c = np.array([0, 0, 0.2, 1.0, 0.5, 0.05, 0.3, 0, 0, 0])
    assert support_width(t, c) == 4.0
