"""1D visco-elastic active fiber with Bestel-Clement-Sorine internal variables.

Node 0 is tethered by a spring/damper, the last node is free.  Active stress
``tau_c`` acts per element; the internal strain ``e_c`` is tied to the element
strain.  Arrays may carry a trailing particle axis, as in :mod:`.electro`.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg as sla

from .errors import ConfigurationError, NumericalError


@dataclass(frozen=True)
class FiberConfig:
    n_nodes: int = 51
    length: float = 100.0
    rho: float = 1.0
    E: float = 10.0
    eta_s: float = 100.0
    k_s: float = 1.0
    c_s: float = 0.5
    a: float = 6.0e-4
    b: float = 0.036
    alpha: float = 1.0
    k0: float = 2.0
    sigma0: float = 1.2
    n0: float | tuple = 1.0
    mu: float = 1.0

    def __post_init__(self):
        if self.n_nodes < 2:
            raise ConfigurationError("fiber needs at least two nodes", key="mech.n_nodes")
        for key in ("length", "rho", "E"):
            if not getattr(self, key) > 0:
                raise ConfigurationError("must be positive", key=f"mech.{key}")
        for key in ("eta_s", "k_s", "c_s", "mu", "alpha"):
            if getattr(self, key) < 0:
                raise ConfigurationError("must be nonnegative", key=f"mech.{key}")

    @property
    def h(self) -> float:
        return self.length / (self.n_nodes - 1)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(0.0, self.length, self.n_nodes)

    def frank_starling(self, e_c):
        """``n0(e_c)``: a constant, or a table ``((e_points...), (values...))``."""
        if isinstance(self.n0, tuple):
            pts, vals = self.n0
            return np.interp(e_c, pts, vals)
        return self.n0


@dataclass(frozen=True)
class MechState:
    disp: np.ndarray
    vel: np.ndarray
    e_c: np.ndarray
    k_c: np.ndarray
    tau_c: np.ndarray

    @property
    def internal(self):
        return self.e_c, self.k_c, self.tau_c


@dataclass(frozen=True)
class MeasuredRegion:
    nodes: tuple[int, ...]

    def __post_init__(self):
        if len(self.nodes) == 0:
            raise ConfigurationError("measured region must be nonempty", key="mech.measured_nodes")
        if len(set(self.nodes)) != len(self.nodes):
            raise ConfigurationError("duplicate measured nodes", key="mech.measured_nodes")

    @classmethod
    def all_nodes(cls, cfg: FiberConfig) -> "MeasuredRegion":
        return cls(tuple(range(cfg.n_nodes)))

    def check(self, cfg: FiberConfig):
        if min(self.nodes) < 0 or max(self.nodes) >= cfg.n_nodes:
            raise ConfigurationError("measured nodes outside the fiber", key="mech.measured_nodes")

    @property
    def index(self) -> np.ndarray:
        return np.asarray(self.nodes, dtype=int)


def rest_state(cfg: FiberConfig) -> MechState:
    n = cfg.n_nodes
    z = np.zeros(n - 1)
    return MechState(np.zeros(n), np.zeros(n), z.copy(), z.copy(), z.copy())


def element_strain(disp: np.ndarray, h: float) -> np.ndarray:
    return (disp[1:] - disp[:-1]) / h


def _tridiag_dense(n, coef, h):
    k = np.zeros((n, n))
    i = np.arange(n - 1)
    k[i, i] += coef / h
    k[i + 1, i + 1] += coef / h
    k[i, i + 1] -= coef / h
    k[i + 1, i] -= coef / h
    return k


def fiber_matrices(cfg: FiberConfig):
    """Lumped mass, stiffness (with tether spring) and damping matrices."""
    n, h = cfg.n_nodes, cfg.h
    mass = np.full(n, cfg.rho * h)
    mass[0] = mass[-1] = 0.5 * cfg.rho * h
    stiff = _tridiag_dense(n, cfg.E, h)
    stiff[0, 0] += cfg.k_s
    damp = _tridiag_dense(n, cfg.eta_s + cfg.mu, h)
    damp[0, 0] += cfg.c_s
    return mass, stiff, damp


def active_force(tau_c: np.ndarray) -> np.ndarray:
    """Nodal force ``B^T h tau_c`` of a per-element active stress."""
    shape = (tau_c.shape[0] + 1,) + tau_c.shape[1:]
    f = np.zeros(shape)
    f[1:] += tau_c
    f[:-1] -= tau_c
    return f


def passive_energy(s: MechState, cfg: FiberConfig) -> float:
    mass, stiff, _ = fiber_matrices(cfg)
    return 0.5 * float(s.vel @ (mass * s.vel)) + 0.5 * float(s.disp @ stiff @ s.disp)


def bcs_internal_step(iv, u, de_c, cfg: FiberConfig, dt: float):
    """Explicit Euler step of the chemically controlled active law.

    ``iv`` is ``(e_c, k_c, tau_c)``; ``de_c`` is the strain rate over the step.
    """
    e_c, k_c, tau_c = iv
    u_pos = np.maximum(u, 0.0)
    decay = np.abs(u) + cfg.alpha * np.abs(de_c)
    n0 = cfg.frank_starling(e_c)
    k_new = k_c + dt * (-decay * k_c + n0 * cfg.k0 * u_pos)
    tau_new = tau_c + dt * (-decay * tau_c + de_c * k_c + n0 * cfg.sigma0 * u_pos)
    return e_c + dt * de_c, k_new, tau_new


def extension_matrix(cfg: FiberConfig, omega: MeasuredRegion) -> np.ndarray:
    """Matrix of the static elastic extension from ``omega`` to the whole fiber."""
    return _extension_matrix(cfg, omega.nodes)


@lru_cache(maxsize=64)
def _extension_matrix(cfg: FiberConfig, nodes: tuple[int, ...]) -> np.ndarray:
    n = cfg.n_nodes
    om = np.asarray(nodes, dtype=int)
    ext = np.zeros((n, om.size))
    ext[om, np.arange(om.size)] = 1.0
    comp = np.setdiff1d(np.arange(n), om)
    if comp.size:
        _, stiff, _ = fiber_matrices(cfg)
        kcc = stiff[np.ix_(comp, comp)]
        kco = stiff[np.ix_(comp, om)]
        try:
            ext[comp] = -np.linalg.solve(kcc, kco)
        except np.linalg.LinAlgError as exc:
            cond = np.linalg.cond(kcc)
            raise NumericalError("singular extension stiffness", condition=cond) from exc
    ext.setflags(write=False)
    return ext


def extension_op(d_on_omega, cfg: FiberConfig, omega: MeasuredRegion) -> np.ndarray:
    omega.check(cfg)
    out = extension_matrix(cfg, omega) @ np.asarray(d_on_omega, dtype=float)
    # the restriction to omega is the identity by construction; enforce it bitwise
    out[omega.index] = d_on_omega
    return out


def mech_observe(s: MechState, omega: MeasuredRegion) -> np.ndarray:
    return s.disp[omega.index]


@lru_cache(maxsize=16)
def interpolation_matrix(n_from: int, n_to: int) -> np.ndarray:
    """Linear interpolation between two uniform grids on the same interval."""
    xf = np.linspace(0.0, 1.0, n_from)
    xt = np.linspace(0.0, 1.0, n_to)
    mat = np.zeros((n_to, n_from))
    pos = np.clip(np.searchsorted(xf, xt, side="right") - 1, 0, n_from - 2)
    theta = (xt - xf[pos]) / (xf[pos + 1] - xf[pos])
    rows = np.arange(n_to)
    mat[rows, pos] = 1.0 - theta
    mat[rows, pos + 1] += theta
    if n_from == n_to:
        mat = np.eye(n_to)
    mat.setflags(write=False)
    return mat


def interp_e2m(vm_electro: np.ndarray, n_mech: int) -> np.ndarray:
    vm = np.asarray(vm_electro, dtype=float)
    if vm.shape[0] == n_mech:
        return vm.copy()
    return interpolation_matrix(vm.shape[0], n_mech) @ vm


class _MidpointSystem:
    """LU-factored block system of the midpoint step, optionally with nudging."""

    def __init__(self, cfg: FiberConfig, dt: float, gamma: float, nodes: tuple[int, ...] | None):
        if not dt > 0:
            raise ConfigurationError("dt must be positive", key="mech.dt_ms")
        n = cfg.n_nodes
        mass, stiff, damp = fiber_matrices(cfg)
        self.mass, self.stiff, self.damp = mass, stiff, damp
        self.dt = dt
        eye = np.eye(n)
        if gamma and nodes is not None:
            ext = _extension_matrix(cfg, nodes)
            sel = np.zeros((len(nodes), n))
            sel[np.arange(len(nodes)), list(nodes)] = 1.0
            self.gain = gamma * ext
            g = self.gain @ sel
        else:
            self.gain = None
            g = np.zeros((n, n))
        self.g = g
        block = np.block([
            [eye + 0.5 * dt * g, -0.5 * dt * eye],
            [0.5 * dt * stiff, np.diag(mass) + 0.5 * dt * damp],
        ])
        try:
            self.lu = sla.lu_factor(block)
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise NumericalError("singular mass/stiffness block") from exc
        if not np.all(np.isfinite(self.lu[0])) or np.any(np.diag(self.lu[0]) == 0):
            raise NumericalError("singular mass/stiffness block", condition=np.linalg.cond(block))

    def solve(self, y0, v0, force, y_obs=None):
        dt = self.dt
        n = y0.shape[0]
        m = self.mass[:, None] if y0.ndim == 2 else self.mass
        top = y0 + 0.5 * dt * v0
        if self.gain is not None:
            nudge = self.gain @ y_obs
            if y0.ndim == 2 and nudge.ndim == 1:
                nudge = nudge[:, None]
            top = top - 0.5 * dt * (self.g @ y0) + dt * nudge
        bottom = m * v0 - 0.5 * dt * (self.stiff @ y0) - 0.5 * dt * (self.damp @ v0) - dt * force
        z = sla.lu_solve(self.lu, np.concatenate([top, bottom], axis=0))
        return z[:n], z[n:]


@lru_cache(maxsize=32)
def _midpoint_system(cfg, dt, gamma, nodes):
    return _MidpointSystem(cfg, dt, gamma, nodes)


def _advance(s: MechState, vm_on_fiber, cfg: FiberConfig, dt: float, system: _MidpointSystem, y_obs=None):
    vm = np.asarray(vm_on_fiber, dtype=float)
    if vm.shape[0] != cfg.n_nodes:
        raise ConfigurationError(
            f"expected {cfg.n_nodes} fiber potentials, got {vm.shape[0]}", key="mech.n_nodes"
        )
    y1, v1 = system.solve(s.disp, s.vel, active_force(s.tau_c), y_obs)
    strain1 = element_strain(y1, cfg.h)
    de_c = (strain1 - s.e_c) / dt
    vm_el = 0.5 * (vm[1:] + vm[:-1])
    u = cfg.a * vm_el + cfg.b
    _, k1, tau1 = bcs_internal_step(s.internal, u, de_c, cfg, dt)
    return MechState(y1, v1, strain1, k1, tau1)


def fiber_step(s: MechState, vm_on_fiber, cfg: FiberConfig, dt: float) -> MechState:
    """Midpoint step of ``M v' + K y + C v + f_active = 0``, then the active law."""
    return _advance(s, vm_on_fiber, cfg, dt, _midpoint_system(cfg, float(dt), 0.0, None))


def luenberger_step(s: MechState, y_m, gamma: float, vm_input, cfg: FiberConfig,
                    omega: MeasuredRegion, dt: float) -> MechState:
    """Fiber step with ``y' = v + gamma * Ext(y_m - y|omega)`` (midpoint-implicit in ``y``).

    The innovation compares ``y_m`` with the midpoint displacement, so data
    sampled at ``t + dt/2`` gives an exactly zero correction on the truth.
    """
    if gamma < 0:
        raise ConfigurationError("gamma must be nonnegative", key="mech.gamma")
    if gamma == 0:
        return fiber_step(s, vm_input, cfg, dt)
    omega.check(cfg)
    system = _midpoint_system(cfg, float(dt), float(gamma), tuple(omega.nodes))
    return _advance(s, vm_input, cfg, dt, system, np.asarray(y_m, dtype=float))
