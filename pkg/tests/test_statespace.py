import numpy as np
import pytest

from cardassim.electro import CableConfig, MsParams, resting_state
from cardassim.coupled import ElectroModel, ParamSpec
from cardassim.errors import ConfigurationError
from cardassim.statespace import (
    AugmentedState,
    Layout,
    Segment,
    StateVector,
    TimeGrid,
    Transition,
    join_augmented,
    propagate,
    split_augmented,
)


class Scale(Transition):
    def __init__(self, factor, n=1):
        self.factor = factor
        self.layout = Layout.from_sizes([("x", n)])

    def step(self, x, t):
        return self.factor * x


def aug(values, layout=None, params=()):
    layout = layout or Layout.from_sizes([("x", len(values))])
    return AugmentedState(StateVector(values, layout), params)


def test_layout_offsets_and_lookup():
    lay = Layout.from_sizes([("vm", 3), ("w", 3), ("disp", 2)])
    assert lay.size == 8
    assert lay.names == ("vm", "w", "disp")
    assert lay["disp"].slice == slice(6, 8)
    assert "w" in lay and "ue" not in lay


def test_layout_rejects_gaps_and_duplicates():
    with pytest.raises(ConfigurationError):
        Layout((Segment("a", 0, 2), Segment("b", 3, 1)))
    with pytest.raises(ConfigurationError):
        Layout.from_sizes([("a", 1), ("a", 1)])


def test_state_vector_size_checked():
    with pytest.raises(ConfigurationError):
        StateVector(np.zeros(3), Layout.from_sizes([("x", 2)]))


def test_identity_propagation():
    x0 = aug([0.3, -1.0])
    traj = propagate(Scale(1.0, 2), x0, TimeGrid(0.0, 1.0, 3))
    assert len(traj) == 4
    for s in traj:
        assert np.array_equal(s.to_vector(), x0.to_vector())


def test_scalar_decay_propagation():
    traj = propagate(Scale(0.5), aug([1.0]), TimeGrid(0.0, 1.0, 2))
    assert [s.to_vector()[0] for s in traj] == [1.0, 0.5, 0.25]


def test_layout_mismatch_is_configuration_error():
    with pytest.raises(ConfigurationError):
        propagate(Scale(1.0, 2), aug([1.0]), TimeGrid(0.0, 1.0, 1))
    with pytest.raises(ConfigurationError):
        propagate(Scale(1.0, 1), aug([1.0], params=[2.0]), TimeGrid(0.0, 1.0, 1))


def test_resting_cable_is_constant():
    cable = CableConfig(n_nodes=20)
    p = MsParams()
    model = ElectroModel(cable, p, ParamSpec((), ()), None, dt_e=0.1, dt_obs=0.1)
    rest = resting_state(p, cable.n_nodes)
    x0 = aug(np.concatenate([rest.vm, rest.w]), model.layout)
    traj = propagate(model, x0, TimeGrid(0.0, 0.1, 100))
    for s in traj[1:]:
        assert np.max(np.abs(s.to_vector() - x0.to_vector())) <= 1e-12


def test_split_examples():
    s, p = split_augmented(aug([1.0, 2.0], params=[3.0]))
    assert s.values.tolist() == [1.0, 2.0] and p.tolist() == [3.0]
    s, p = split_augmented(aug([1.0, 2.0]))
    assert p.size == 0


def test_split_join_round_trip(rng):
    lay = Layout.from_sizes([("a", 3), ("b", 2)])
    for _ in range(1000):
        k = int(rng.integers(0, 4))
        v = rng.standard_normal(lay.size + k)
        x = AugmentedState.from_vector(v, lay)
        y = join_augmented(*split_augmented(x))
        assert np.array_equal(y.to_vector(), v)


def test_time_grid():
    g = TimeGrid(2.0, 0.5, 4, sub_steps_per_obs=2)
    assert g.times().tolist() == [2.0, 2.5, 3.0, 3.5, 4.0]
    assert g.observation_times().tolist() == [2.0, 3.0, 4.0]
    assert g.obs_interval == 1.0
    with pytest.raises(ConfigurationError):
        TimeGrid(0.0, 0.0, 3)


def test_step_many_independent_of_threads(monkeypatch, rng):
    op = Scale(0.7, 3)
    X = rng.standard_normal((3, 5))
    monkeypatch.setenv("CARDASSIM_THREADS", "1")
    a = op.step_many(X, 0.0)
    monkeypatch.setenv("CARDASSIM_THREADS", "3")
    b = op.step_many(X, 0.0)
    assert np.array_equal(a, b)


def test_state_values_are_read_only():
    s = StateVector(np.zeros(2), Layout.from_sizes([("x", 2)]))
    with pytest.raises(ValueError):
        s.values[0] = 1.0
