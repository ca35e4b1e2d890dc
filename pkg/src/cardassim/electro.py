"""Mitchell-Schaeffer bidomain cable: ionic model, IMEX stepper, leads, stimulus.

Units: ms, mV, mm.  All step functions accept either single-trajectory arrays
of shape ``(n_nodes,)`` or particle batches of shape ``(n_nodes, n_particles)``;
scalar parameters may then be given per particle as ``(n_particles,)`` arrays
and ``tau_close`` as ``(n_nodes, n_particles)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Mapping

import numpy as np
from scipy.linalg import lapack

from .errors import ConfigurationError, NumericalError

REGIONS = ("endo", "mcell", "epi", "rv")
# fractions of the cable occupied by each region, in cable order
REGION_FRACTIONS = (0.30, 0.15, 0.30, 0.25)


def default_regions(n_nodes: int) -> tuple[tuple[str, int, int], ...]:
    bounds = np.round(np.cumsum((0.0,) + REGION_FRACTIONS) * n_nodes).astype(int)
    bounds[-1] = n_nodes
    return tuple((name, int(bounds[i]), int(bounds[i + 1])) for i, name in enumerate(REGIONS))


@dataclass(frozen=True)
class CableConfig:
    n_nodes: int = 200
    length: float = 100.0
    sigma_i: float = 0.02
    sigma_e: float = 0.02
    am: float = 1.0
    cm: float = 0.01
    regions: tuple[tuple[str, int, int], ...] = ()

    def __post_init__(self):
        if self.n_nodes < 2:
            raise ConfigurationError("cable needs at least two nodes", key="electro.n_nodes")
        for key in ("length", "sigma_i", "sigma_e", "am", "cm"):
            if not getattr(self, key) > 0:
                raise ConfigurationError("must be positive", key=f"electro.{key}")
        if not self.regions:
            object.__setattr__(self, "regions", default_regions(self.n_nodes))
        covered = np.zeros(self.n_nodes, dtype=int)
        for name, lo, hi in self.regions:
            if not 0 <= lo <= hi <= self.n_nodes:
                raise ConfigurationError(f"region {name} [{lo},{hi}) outside cable", key="electro.regions")
            covered[lo:hi] += 1
        if not np.all(covered == 1):
            raise ConfigurationError("regions must partition the cable nodes", key="electro.regions")

    @property
    def h(self) -> float:
        return self.length / (self.n_nodes - 1)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, self.length, self.n_nodes)

    def region_slice(self, name: str) -> slice:
        for reg, lo, hi in self.regions:
            if reg == name:
                return slice(lo, hi)
        raise KeyError(name)

    def region_names(self) -> tuple[str, ...]:
        return tuple(r[0] for r in self.regions)

    def lumped_mass(self) -> np.ndarray:
        m = np.full(self.n_nodes, self.h)
        m[0] = m[-1] = 0.5 * self.h
        return m


@dataclass(frozen=True)
class MsParams:
    """Mitchell-Schaeffer constants; ``tau_close`` is given per node."""

    tau_in: float | np.ndarray = 0.8
    tau_out: float | np.ndarray = 18.0
    tau_open: float | np.ndarray = 120.0
    tau_close: float | np.ndarray = 140.0
    v_gate: float = -67.0
    v_min: float = -80.0
    v_max: float = 20.0

    def __post_init__(self):
        for key in ("tau_in", "tau_out", "tau_open", "tau_close"):
            if not np.all(np.asarray(getattr(self, key)) > 0):
                raise ConfigurationError("time constants must be positive", key=f"electro.{key}")
        if not self.v_min < self.v_gate < self.v_max:
            raise ConfigurationError("need v_min < v_gate < v_max", key="electro.v_gate")

    @property
    def w_max(self) -> float:
        """Open-gate equilibrium ``(v_max - v_min)^-2``."""
        return 1.0 / (self.v_max - self.v_min) ** 2

    def with_regional_tau_close(self, cable: CableConfig, values: Mapping[str, float]) -> "MsParams":
        tc = np.empty(cable.n_nodes)
        for name, lo, hi in cable.regions:
            tc[lo:hi] = values[name]
        return replace(self, tau_close=tc)


@dataclass(frozen=True)
class ElectroState:
    vm: np.ndarray
    ue: np.ndarray
    w: np.ndarray


@dataclass(frozen=True)
class StimulusProtocol:
    nodes: tuple[int, ...]
    amplitude: float = 0.1
    onset: float = 0.0
    duration: float = 25.0
    period: float | None = None

    def active(self, t: float) -> bool:
        s = t - self.onset
        if s < 0:
            return False
        if self.period:
            s = np.fmod(s, self.period)
        # small slack so that accumulated float time hits exact step boundaries
        return s < self.duration - 1e-9


@dataclass(frozen=True)
class LeadField:
    matrix: np.ndarray
    names: tuple[str, ...] = ()

    def __post_init__(self):
        m = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        if not self.names:
            object.__setattr__(self, "names", tuple(f"lead{i + 1}" for i in range(m.shape[0])))
        if len(self.names) != m.shape[0]:
            raise ConfigurationError("one name per lead row", key="electro.leads")
        if np.any(np.all(m == 0.0, axis=1)):
            raise ConfigurationError("every lead row needs a nonzero entry", key="electro.leads")

    @property
    def n_leads(self) -> int:
        return self.matrix.shape[0]


def ms_ion_current(vm, w, p: MsParams):
    span = p.v_max - p.v_min
    return -(w / p.tau_in) * (vm - p.v_min) ** 2 * (p.v_max - vm) / span + (vm - p.v_min) / (p.tau_out * span)


def ms_gate_rhs(vm, w, p: MsParams, node=None):
    """Rate ``dw/dt = -g(vm, w)``; ``node`` selects an entry of a per-node ``tau_close``."""
    tau_close = p.tau_close
    if node is not None and np.ndim(tau_close) > 0:
        tau_close = np.asarray(tau_close)[node]
    g_open = w / p.tau_open - 1.0 / (p.tau_open * (p.v_max - p.v_min) ** 2)
    g_closed = w / tau_close
    return -np.where(vm <= p.v_gate, g_open, g_closed)


def stimulus(t: float, protocol: StimulusProtocol, n_nodes: int) -> np.ndarray:
    out = np.zeros(n_nodes)
    if protocol.active(t):
        out[list(protocol.nodes)] = protocol.amplitude
    return out


def left_stimulus(cable: CableConfig, fraction: float = 0.1, **kw) -> StimulusProtocol:
    k = max(1, int(round(fraction * cable.n_nodes)))
    return StimulusProtocol(nodes=tuple(range(k)), **kw)


def _apply_stiffness(v: np.ndarray, h: float) -> np.ndarray:
    """Neumann P1 stiffness ``K v`` (unit conductivity) along axis 0."""
    out = np.empty_like(v)
    out[1:-1] = 2.0 * v[1:-1] - v[:-2] - v[2:]
    out[0] = v[0] - v[1]
    out[-1] = v[-1] - v[-2]
    return out / h


class _Tridiag:
    """Factored tridiagonal matrix (LAPACK gttrf) reusable for many solves."""

    def __init__(self, dl, d, du):
        self.factors = lapack.dgttrf(np.array(dl, float), np.array(d, float), np.array(du, float))
        info = self.factors[-1]
        if info != 0:
            raise NumericalError("singular tridiagonal system", info=info)

    def solve(self, b: np.ndarray) -> np.ndarray:
        dl, d, du, du2, ipiv, _ = self.factors
        x, info = lapack.dgttrs(dl, d, du, du2, ipiv, b)
        if info != 0:
            raise NumericalError("tridiagonal solve failed", info=info)
        return x


class CableOperators:
    """Precomputed factorizations for one cable at one time step."""

    def __init__(self, cable: CableConfig, dt: float, monodomain: bool = False):
        if not dt > 0:
            raise ConfigurationError("dt must be positive", key="electro.dt_ms")
        self.cable = cable
        self.dt = dt
        self.monodomain = monodomain
        n, h = cable.n_nodes, cable.h
        self.mass = cable.lumped_mass()
        self.cap = cable.am * cable.cm * self.mass / dt
        off = np.full(n - 1, -cable.sigma_i / h)
        diag = np.full(n, 2.0 * cable.sigma_i / h)
        diag[0] = diag[-1] = cable.sigma_i / h
        self.vm_system = _Tridiag(off, diag + self.cap, off)
        # (Ki + Ke) ue = -Ki vm, made regular by pinning node 0; mean removed afterwards
        s = cable.sigma_i + cable.sigma_e
        dl = np.full(n - 1, -s / h)
        du = np.full(n - 1, -s / h)
        d = np.full(n, 2.0 * s / h)
        d[-1] = s / h
        d[0], du[0] = 1.0, 0.0
        self.ue_system = _Tridiag(dl, d, du)

    def solve_ue(self, vm: np.ndarray) -> np.ndarray:
        if self.monodomain:
            return np.zeros_like(vm)
        rhs = -self.cable.sigma_i * _apply_stiffness(vm, self.cable.h)
        rhs[0] = 0.0
        ue = self.ue_system.solve(rhs)
        ue -= ue.mean(axis=0)
        return ue


@lru_cache(maxsize=32)
def cable_operators(cable: CableConfig, dt: float, monodomain: bool = False) -> CableOperators:
    return CableOperators(cable, dt, monodomain)


def _column(v: np.ndarray, like: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if like.ndim == 2 and v.ndim == 1:
        return v[:, None]
    return v


def bidomain_step(s: ElectroState, p: MsParams, c: CableConfig, i_app, dt: float,
                  monodomain: bool = False) -> ElectroState:
    """One IMEX step: implicit intracellular diffusion with lagged ``ue``,
    explicit ionic current, then the static ``ue`` constraint, then the gate."""
    ops = cable_operators(c, float(dt), monodomain)
    vm, ue, w = s.vm, s.ue, s.w
    if monodomain:
        ue = np.zeros_like(vm)
    mass = _column(ops.mass, vm)
    cap = _column(ops.cap, vm)
    rhs = cap * vm + c.am * mass * (_column(i_app, vm) - ms_ion_current(vm, w, p))
    if not monodomain:
        rhs = rhs - c.sigma_i * _apply_stiffness(ue, c.h)
    vm_new = ops.vm_system.solve(rhs)
    ue_new = ops.solve_ue(vm_new)
    w_new = w + dt * ms_gate_rhs(vm, w, p)
    return ElectroState(vm_new, ue_new, w_new)


def resting_state(p: MsParams, n_nodes: int) -> ElectroState:
    return ElectroState(np.full(n_nodes, p.v_min), np.zeros(n_nodes), np.full(n_nodes, p.w_max))


def lead_observe(s: ElectroState, lf: LeadField, mode: str = "lead") -> np.ndarray:
    """ECG-like leads from ``ue`` (``mode='lead'``) or electrode picks of ``vm``."""
    src = s.ue if mode == "lead" else s.vm
    if lf.matrix.shape[1] != src.shape[0]:
        raise ConfigurationError(
            f"lead field has {lf.matrix.shape[1]} columns for {src.shape[0]} nodes", key="electro.leads"
        )
    return lf.matrix @ src


def default_lead_field(cable: CableConfig, amplitude: float = 2.5, v_span: float = 100.0) -> LeadField:
    """Three synthetic leads: a mean-free ramp-weighted sum and two dipole differences.

    Rows are scaled so that a travelling front of height ``v_span`` gives
    signals of roughly ``amplitude`` mV.
    """
    n, h, length = cable.n_nodes, cable.h, cable.length
    k = cable.sigma_i / (cable.sigma_i + cable.sigma_e)
    x = cable.x
    ramp = h * (x - x.mean()) / length
    ramp -= ramp.mean()
    ramp *= amplitude / (k * v_span * length / 8.0)
    dip = amplitude / (k * v_span)

    def pair(fa, fb):
        row = np.zeros(n)
        row[int(round(fa * (n - 1)))] = dip
        row[int(round(fb * (n - 1)))] = -dip
        return row

    return LeadField(np.vstack([ramp, pair(0.2, 0.8), pair(0.4, 0.95)]), ("I", "II", "III"))


def activation_times(times: np.ndarray, vm_traj: np.ndarray, threshold: float) -> np.ndarray:
    """First crossing time of ``threshold`` per node (``nan`` if never), linear interpolation.

    ``vm_traj`` has shape ``(n_times, n_nodes)``.
    """
    above = vm_traj > threshold
    out = np.full(vm_traj.shape[1], np.nan)
    for j in range(vm_traj.shape[1]):
        idx = np.flatnonzero(above[:, j])
        if idx.size == 0:
            continue
        k = idx[0]
        if k == 0:
            out[j] = times[0]
            continue
        v0, v1 = vm_traj[k - 1, j], vm_traj[k, j]
        out[j] = times[k - 1] + (threshold - v0) / (v1 - v0) * (times[k] - times[k - 1])
    return out
