"""Twin-experiment scenarios: configuration, truth runs and observation noise.

A scenario is a nested mapping (usually read from YAML) merged over
:data:`DEFAULTS`.  Errors name the offending entry with a dotted key such as
``electro.dt_ms``.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .coupled import CoupledModel, DisplacementObservation, ElectroModel, LeadObservation, ParamSpec
from .electro import CableConfig, MsParams, StimulusProtocol, default_lead_field, left_stimulus
from .errors import ConfigurationError
from .filters import reparametrize
from .mech import FiberConfig, MeasuredRegion

__all__ = [
    "DEFAULTS",
    "TwinScenario",
    "NoiseModel",
    "ObservationTable",
    "TruthRun",
    "load_scenario",
    "builtin_scenarios",
    "simulate_truth",
    "add_noise",
]

FILTER_KINDS = ("ukf", "ekf", "roukf", "roekf", "pod-roukf", "coupled")
OBS_KINDS = ("ecg", "mech", "both")

DEFAULTS = {
    "name": "twin",
    "seed": 1,
    "duration_ms": 800.0,
    "electro": {
        "n_nodes": 200,
        "length": 100.0,
        "dt_ms": 0.1,
        "monodomain": False,
        "lead_mode": "lead",
        "ionic": {"tau_in": 0.8, "tau_out": 18.0, "tau_open": 120.0, "tau_close": 140.0},
        "stimulus": {"amplitude": 0.1, "duration": 25.0, "onset": 0.0, "period": None, "fraction": 0.1},
    },
    "mech": None,
    "truth": {},
    "prior": {},
    "observations": {"ecg_period_ms": 1.0, "mech_period_ms": 2.0, "start_ms": 0.0},
    "noise": {"sigma_e": 0.25, "sigma_m": 1.0},
    "pod": {
        "rank": 20,
        "gram": "mass",
        "w_scale": 1.0e6,
        "snapshot_period_ms": 5.0,
        "snapshot_duration_ms": 800.0,
        "snapshot_params": [{}],
    },
    "filter": {
        "kind": "pod-roukf",
        "obs": "ecg",
        "alpha_std": 1.0,
        "param_std": 1.0,
        "state_std": 1.0,
        "stimulus_onset_ms": None,
        "stimulus": True,
    },
    "diagnostics": {"param_std": 0.01, "threshold": 1.0e-8},
}

MECH_DEFAULTS = {"n_nodes": 51, "length": 100.0, "dt_ms": 1.0, "gamma": 0.0, "measured": "all"}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigurationError("unknown entry", key=where)
        if isinstance(base[key], dict) and base[key]:
            if not isinstance(val, dict):
                raise ConfigurationError("expected a mapping", key=where)
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


def _number(cfg: dict, path: str, positive: bool = True, allow_none: bool = False) -> float | None:
    node = cfg
    for part in path.split("."):
        node = node[part]
    if node is None and allow_none:
        return None
    if isinstance(node, bool) or not isinstance(node, (int, float)) or not math.isfinite(node):
        raise ConfigurationError(f"expected a finite number, got {node!r}", key=path)
    if positive and not node > 0:
        raise ConfigurationError(f"must be positive, got {node!r}", key=path)
    return float(node)


def _check_params(mapping, key: str) -> dict:
    if not isinstance(mapping, dict):
        raise ConfigurationError("expected a mapping of parameter name to value", key=key)
    out = {}
    for name, val in mapping.items():
        base = str(name).split(".")[0]
        if base not in DEFAULTS["electro"]["ionic"]:
            raise ConfigurationError(f"unknown parameter {name!r}", key=key)
        if isinstance(val, bool) or not isinstance(val, (int, float)) or not val > 0:
            raise ConfigurationError(f"parameter {name!r} must be a positive number", key=key)
        out[str(name)] = float(val)
    return out


@dataclass(frozen=True)
class TwinScenario:
    """Resolved twin experiment.  ``config`` is the full merged mapping."""

    config: dict

    def __post_init__(self):
        cfg = self.config
        for path in ("duration_ms", "electro.length", "electro.dt_ms", "observations.ecg_period_ms",
                     "observations.mech_period_ms", "noise.sigma_e", "noise.sigma_m",
                     "pod.w_scale", "pod.snapshot_period_ms", "pod.snapshot_duration_ms",
                     "filter.param_std", "filter.state_std", "diagnostics.param_std", "diagnostics.threshold",
                     "electro.stimulus.duration"):
            _number(cfg, path)
        _number(cfg, "observations.start_ms", positive=False)
        _number(cfg, "electro.stimulus.amplitude", positive=False)
        _number(cfg, "electro.stimulus.onset", positive=False)
        _number(cfg, "electro.stimulus.period", allow_none=True)
        _number(cfg, "filter.stimulus_onset_ms", positive=False, allow_none=True)
        if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool) or cfg["seed"] < 0:
            raise ConfigurationError("expected a non-negative integer", key="seed")
        for path in ("electro.n_nodes", "pod.rank"):
            node = cfg[path.split(".")[0]][path.split(".")[1]]
            if not isinstance(node, int) or isinstance(node, bool) or node < 0:
                raise ConfigurationError("expected a non-negative integer", key=path)
        if cfg["filter"]["kind"] not in FILTER_KINDS:
            raise ConfigurationError(f"expected one of {FILTER_KINDS}", key="filter.kind")
        if cfg["filter"]["obs"] not in OBS_KINDS:
            raise ConfigurationError(f"expected one of {OBS_KINDS}", key="filter.obs")
        if not isinstance(cfg["filter"]["stimulus"], bool):
            raise ConfigurationError("expected true or false", key="filter.stimulus")
        a = np.asarray(cfg["filter"]["alpha_std"], dtype=float) if not isinstance(cfg["filter"]["alpha_std"], str) else None
        if a is None or a.ndim > 1 or not np.all(a > 0):
            raise ConfigurationError("expected a positive number or list", key="filter.alpha_std")
        if cfg["pod"]["gram"] not in ("mass", "l2"):
            raise ConfigurationError("expected 'mass' or 'l2'", key="pod.gram")
        if cfg["electro"]["lead_mode"] not in ("lead", "electrode"):
            raise ConfigurationError("expected 'lead' or 'electrode'", key="electro.lead_mode")
        truth = _check_params(cfg["truth"], "truth")
        prior = _check_params(cfg["prior"], "prior")
        if list(truth) != list(prior):
            raise ConfigurationError("truth and prior must list the same parameters in the same order", key="prior")
        if not isinstance(cfg["pod"]["snapshot_params"], list) or not cfg["pod"]["snapshot_params"]:
            raise ConfigurationError("expected a nonempty list of parameter sets", key="pod.snapshot_params")
        for i, ps in enumerate(cfg["pod"]["snapshot_params"]):
            _check_params(ps, f"pod.snapshot_params.{i}")
        if cfg["mech"] is not None:
            for path in ("mech.length", "mech.dt_ms"):
                _number(cfg, path)
            _number(cfg, "mech.gamma", positive=False)
        if cfg["filter"]["obs"] in ("mech", "both") and cfg["mech"] is None:
            raise ConfigurationError("mechanical observations need a mech section", key="filter.obs")
        if cfg["filter"]["kind"] == "coupled" and cfg["mech"] is None:
            raise ConfigurationError("the coupled filter needs a mech section", key="filter.kind")
        for path in ("duration_ms", "observations.mech_period_ms"):
            _grid_ratio(_number(cfg, path), _number(cfg, "observations.ecg_period_ms"), path)
        # building the objects validates the remaining physical entries
        self.cable()
        self.param_spec()
        if cfg["mech"] is not None:
            self.omega()

    # -- construction -------------------------------------------------------
    @classmethod
    def from_dict(cls, data: dict | None) -> "TwinScenario":
        data = dict(data or {})
        mech = data.get("mech")
        merged = _merge({k: v for k, v in DEFAULTS.items() if k != "mech"},
                        {k: v for k, v in data.items() if k != "mech"})
        if mech is None or mech is False:
            merged["mech"] = None
        else:
            merged["mech"] = _merge(MECH_DEFAULTS, {} if mech is True else mech, "mech.")
        return cls(merged)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.config)

    def with_overrides(self, **sections) -> "TwinScenario":
        """Copy with top-level entries replaced or sections merged, e.g. ``filter={'obs': 'ecg'}``."""
        data = self.to_dict()
        for key, val in sections.items():
            if isinstance(val, dict) and isinstance(data.get(key), dict):
                data[key] = _merge(data[key], val, key + ".")
            else:
                data[key] = val
        return TwinScenario.from_dict(data)

    # -- accessors ----------------------------------------------------------
    @property
    def name(self) -> str:
        return str(self.config["name"])

    @property
    def seed(self) -> int:
        return int(self.config["seed"])

    @property
    def duration(self) -> float:
        return float(self.config["duration_ms"])

    @property
    def has_mech(self) -> bool:
        return self.config["mech"] is not None

    @property
    def param_names(self) -> tuple[str, ...]:
        return tuple(self.config["prior"])

    @property
    def truth(self) -> np.ndarray:
        return np.array([self.config["truth"][n] for n in self.param_names], dtype=float)

    @property
    def prior(self) -> np.ndarray:
        return np.array([self.config["prior"][n] for n in self.param_names], dtype=float)

    @property
    def window(self) -> float:
        return float(self.config["observations"]["ecg_period_ms"])

    def times(self) -> np.ndarray:
        n = _grid_ratio(self.duration, self.window, "duration_ms")
        return self.window * np.arange(1, n + 1)

    def cable(self) -> CableConfig:
        e = self.config["electro"]
        return CableConfig(n_nodes=e["n_nodes"], length=float(e["length"]))

    def ms_base(self) -> MsParams:
        try:
            return MsParams(**{k: float(v) for k, v in self.config["electro"]["ionic"].items()})
        except ConfigurationError as exc:
            raise ConfigurationError(str(exc), key="electro.ionic") from exc

    def stimulus(self, onset: float | None = None) -> StimulusProtocol:
        s = self.config["electro"]["stimulus"]
        return left_stimulus(
            self.cable(), fraction=float(s["fraction"]), amplitude=float(s["amplitude"]),
            onset=float(s["onset"] if onset is None else onset), duration=float(s["duration"]),
            period=None if s["period"] is None else float(s["period"]),
        )

    def lead_field(self):
        return default_lead_field(self.cable())

    def fiber(self) -> FiberConfig:
        m = self.config["mech"]
        return FiberConfig(n_nodes=int(m["n_nodes"]), length=float(m["length"]))

    def omega(self) -> MeasuredRegion:
        meas = self.config["mech"]["measured"]
        fiber = self.fiber()
        if meas == "all":
            return MeasuredRegion.all_nodes(fiber)
        if not isinstance(meas, list):
            raise ConfigurationError("expected 'all' or a list of node indices", key="mech.measured")
        omega = MeasuredRegion(tuple(int(i) for i in meas))
        try:
            omega.check(fiber)
        except ConfigurationError as exc:
            raise ConfigurationError(str(exc), key="mech.measured") from exc
        return omega

    def param_spec(self) -> ParamSpec:
        spec = ParamSpec(self.param_names, tuple(self.prior))
        # resolves region names against the cable
        spec.apply(self.ms_base(), self.cable(), np.zeros(len(spec)))
        return spec

    def electro_model(self, params: dict | None = None, estimator: bool = False) -> ElectroModel:
        """Cable model over one window; ``params`` overrides the base ionic constants."""
        base = self.ms_base()
        if params is not None and params:
            spec = ParamSpec(tuple(params), tuple(params.values()))
            base = spec.apply(base, self.cable(), np.zeros(len(spec)))
        onset = self.config["filter"]["stimulus_onset_ms"] if estimator else None
        stim = self.stimulus(onset)
        if estimator and not self.config["filter"]["stimulus"]:
            stim = None
        return ElectroModel(self.cable(), base, self.param_spec() if params is None else ParamSpec((), ()),
                            stim, dt_e=float(self.config["electro"]["dt_ms"]), dt_obs=self.window,
                            monodomain=bool(self.config["electro"]["monodomain"]))

    def model(self, estimator: bool = False):
        """Transition used for the truth run (``estimator=False``) or by the filters."""
        em = self.electro_model(estimator=estimator)
        if not self.has_mech:
            return em
        gamma = float(self.config["mech"]["gamma"]) if estimator else 0.0
        return CoupledModel(em, self.fiber(), dt_m=float(self.config["mech"]["dt_ms"]), gamma=gamma,
                            omega=self.omega())

    def observation_ops(self, model):
        """``(ecg_op, mech_op)``; ``mech_op`` is ``None`` without mechanics."""
        obs = self.config["observations"]
        noise = self.config["noise"]
        ecg = LeadObservation(model, self.lead_field(), float(noise["sigma_e"]), float(obs["ecg_period_ms"]),
                              mode=self.config["electro"]["lead_mode"])
        mech = None
        if self.has_mech:
            mech = DisplacementObservation(model, self.omega(), float(noise["sigma_m"]), float(obs["mech_period_ms"]))
        return ecg, mech

    def initial_state(self, params: np.ndarray | None = None) -> np.ndarray:
        """Resting electrical state, fiber at rest, parameters ``params`` (reparametrized)."""
        base, n = self.ms_base(), self.cable().n_nodes
        parts = [np.full(n, base.v_min), np.full(n, base.w_max)]
        if self.has_mech:
            m = self.fiber().n_nodes
            parts.append(np.zeros(2 * m + 3 * (m - 1)))
        parts.append(np.zeros(len(self.param_names)) if params is None else np.asarray(params, float))
        return np.concatenate(parts)

    def true_p(self) -> np.ndarray:
        return reparametrize(self.truth, self.prior) if self.param_names else np.zeros(0)


def _grid_ratio(big: float, small: float, key: str) -> int:
    n = int(round(big / small))
    if n < 1 or abs(n * small - big) > 1e-9 * big:
        raise ConfigurationError(f"{big} is not a multiple of the {small} ms observation window", key=key)
    return n


def builtin_scenarios() -> tuple[str, ...]:
    files = resources.files("cardassim").joinpath("scenarios")
    return tuple(sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".yaml")))


def load_scenario(source) -> TwinScenario:
    """Scenario from a YAML path, a built-in name, or a mapping."""
    if isinstance(source, dict):
        return TwinScenario.from_dict(source)
    path = Path(source)
    if path.is_file():
        text = path.read_text()
    else:
        res = resources.files("cardassim").joinpath("scenarios", f"{source}.yaml")
        if not res.is_file():
            raise ConfigurationError(f"no scenario file or built-in scenario named {source!r}", key="scenario")
        text = res.read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"invalid YAML: {exc}", key="scenario") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigurationError("top level must be a mapping", key="scenario")
    return TwinScenario.from_dict(data)


@dataclass(frozen=True)
class ObservationTable:
    """Observations on the window grid; ``nan`` marks a channel off its cadence."""

    times: np.ndarray
    channels: tuple[str, ...]
    values: np.ndarray

    def columns(self, prefix: str) -> np.ndarray:
        idx = [i for i, c in enumerate(self.channels) if c.startswith(prefix)]
        return self.values[:, idx]

    @property
    def n_ecg(self) -> int:
        return sum(c.startswith("lead_") for c in self.channels)


@dataclass(frozen=True)
class TruthRun:
    times: np.ndarray
    states: np.ndarray
    state_names: tuple[str, ...]
    observations: ObservationTable


def state_names(scn: TwinScenario, model) -> tuple[str, ...]:
    names = []
    for seg in model.layout.segments:
        names.extend(f"{seg.name}_{i}" for i in range(seg.length))
    names.extend(f"p_{n}" for n in scn.param_names)
    return tuple(names)


def simulate_truth(scn: TwinScenario) -> TruthRun:
    """Deterministic forward run with the true parameters and clean observations."""
    model = scn.model(estimator=False)
    ecg, mech = scn.observation_ops(model)
    x = scn.initial_state(scn.true_p())
    times = scn.times()
    states, rows = [], []
    t_prev = 0.0
    for t in times:
        x = model.step(x, t_prev)
        t_prev = t
        states.append(x)
        row = [ecg.observe(x, t)]
        if mech is not None:
            ym = mech.observe(x, t)
            row.append(ym if mech.noise_norm(t)[0] > 0 else np.full(ym.shape, np.nan))
        rows.append(np.concatenate(row))
    channels = [f"lead_{n}" for n in scn.lead_field().names]
    if mech is not None:
        channels += [f"disp_{i}" for i in scn.omega().nodes]
    table = ObservationTable(times, tuple(channels), np.array(rows))
    return TruthRun(times, np.array(states), state_names(scn, model), table)


@dataclass(frozen=True)
class NoiseModel:
    """Additive Gaussian white noise with a standard deviation per channel group."""

    std: dict
    seed: int

    def __post_init__(self):
        for key, val in self.std.items():
            if not (isinstance(val, (int, float)) and val >= 0):
                raise ConfigurationError("noise level must be non-negative", key=f"noise.{key}")

    @classmethod
    def from_scenario(cls, scn: TwinScenario, seed: int | None = None) -> "NoiseModel":
        n = scn.config["noise"]
        return cls({"lead_": float(n["sigma_e"]), "disp_": float(n["sigma_m"])}, scn.seed if seed is None else seed)

    def stds(self, channels) -> np.ndarray:
        out = np.zeros(len(channels))
        for i, c in enumerate(channels):
            for prefix, val in self.std.items():
                if c.startswith(prefix):
                    out[i] = val
        return out


def add_noise(table: ObservationTable, nm: NoiseModel) -> ObservationTable:
    """Channel-wise i.i.d. Gaussian noise; ``nan`` entries stay ``nan``."""
    rng = np.random.default_rng(nm.seed)
    noise = rng.standard_normal(table.values.shape) * nm.stds(table.channels)
    return replace(table, values=table.values + noise)
