"""Coupled cable/fiber models as transitions, and the aggregated estimator.

The electrical cable drives the fiber one way through ``u = a Vm + b``.  The
flat state is ``(vm, w, disp, vel, e_c, k_c, tau_c)`` followed by the
reparametrized electrical parameters ``p`` (``theta = 2**p * prior``).  The
extracellular potential is not carried: it is a static function of ``vm``
and is recomputed where needed.

Inside every particle the fiber is advanced by the Luenberger-corrected step
using the displacement data of the current window; the reduced filter then
corrects ``(alpha, p)`` with the stacked electrical and mechanical innovation.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, replace

import numpy as np

from .electro import (
    CableConfig,
    ElectroState,
    LeadField,
    MsParams,
    StimulusProtocol,
    bidomain_step,
    cable_operators,
    stimulus,
)
from .errors import ConfigurationError, NumericalError
from .filters import (
    FilterState,
    LowRankCovariance,
    ObservationRecord,
    pod_roukf_step,
    roukf_step,
    simplex_sigma_points,
)
from .mech import FiberConfig, MeasuredRegion, MechState, interpolation_matrix, luenberger_step
from .pod import PodBasis
from .statespace import Layout, Observation, Transition

PARAM_NAMES = ("tau_in", "tau_out", "tau_open", "tau_close")


@dataclass(frozen=True)
class ParamSpec:
    """Estimated parameters: names like ``tau_in`` or ``tau_close.endo`` and priors."""

    names: tuple[str, ...]
    prior: tuple[float, ...]

    def __post_init__(self):
        if len(self.names) != len(self.prior):
            raise ConfigurationError("one prior value per estimated parameter", key="estimate.params")
        if len(set(self.names)) != len(self.names):
            raise ConfigurationError("duplicate estimated parameter", key="estimate.params")
        for name, val in zip(self.names, self.prior):
            base = name.split(".")[0]
            if base not in PARAM_NAMES or ("." in name and base != "tau_close"):
                raise ConfigurationError(f"unknown parameter {name!r}", key="estimate.params")
            if not val > 0:
                raise ConfigurationError(f"prior of {name} must be positive", key="estimate.params")

    def __len__(self):
        return len(self.names)

    def apply(self, base: MsParams, cable: CableConfig, p: np.ndarray) -> MsParams:
        """Physical parameters for reparametrized ``p`` of shape ``(k,)`` or ``(k, N)``."""
        if not self.names:
            return base
        p = np.asarray(p, dtype=float)
        theta = np.asarray(self.prior)[:, None] * np.exp2(p.reshape(len(self), -1))
        batched = p.ndim == 2
        upd = {}
        tc = None
        for i, name in enumerate(self.names):
            val = theta[i] if batched else theta[i, 0]
            if name.startswith("tau_close"):
                if tc is None:
                    tc = np.broadcast_to(np.asarray(base.tau_close, dtype=float), (cable.n_nodes,))
                    tc = np.repeat(tc[:, None], theta.shape[1], axis=1) if batched else tc.copy()
                if name == "tau_close":
                    tc[...] = val
                else:
                    tc[cable.region_slice(name.split(".", 1)[1])] = val
            else:
                upd[name] = val
        if tc is not None:
            upd["tau_close"] = tc
        return replace(base, **upd)


class ElectroModel(Transition):
    """Cable advanced over one observation window of ``dt_obs`` ms."""

    def __init__(self, cable: CableConfig, params: MsParams, spec: ParamSpec,
                 stim: StimulusProtocol | None, dt_e: float = 0.1, dt_obs: float = 1.0,
                 monodomain: bool = False):
        self.cable, self.params, self.spec, self.stim = cable, params, spec, stim
        self.dt_e, self.dt_obs, self.monodomain = float(dt_e), float(dt_obs), monodomain
        self.n_sub = _ratio(dt_obs, dt_e, "electro.dt_ms")
        n = cable.n_nodes
        self.layout = Layout.from_sizes([("vm", n), ("w", n)])
        self.n_params = len(spec)
        self.n_e = 2 * n

    def _advance(self, vm, w, t, p, n_sub, dt):
        ops = cable_operators(self.cable, dt, self.monodomain)
        params = self.spec.apply(self.params, self.cable, p)
        if vm.ndim == 2 and np.ndim(params.tau_close) == 1:
            # per-node constants must broadcast against the particle axis
            params = replace(params, tau_close=np.asarray(params.tau_close)[:, None])
        s = ElectroState(vm, ops.solve_ue(vm), w)
        for j in range(n_sub):
            tj = t + j * dt
            i_app = stimulus(tj, self.stim, self.cable.n_nodes) if self.stim else 0.0
            s = bidomain_step(s, params, self.cable, i_app, dt, self.monodomain)
        return s

    def step_many(self, X, t):
        n = self.cable.n_nodes
        s = self._advance(X[:n], X[n:2 * n], t, X[2 * n:], self.n_sub, self.dt_e)
        return np.concatenate([s.vm, s.w, X[2 * n:]], axis=0)

    def step(self, x, t):
        return self.step_many(x[:, None], t)[:, 0]

    def ue(self, X):
        return cable_operators(self.cable, self.dt_e, self.monodomain).solve_ue(X[: self.cable.n_nodes])


class CoupledModel(Transition):
    """Electrical window followed by Luenberger-corrected fiber steps.

    ``y_m`` is the displacement data held over the window (``None`` or
    ``gamma = 0`` gives the plain forward model).
    """

    def __init__(self, electro: ElectroModel, fiber: FiberConfig, dt_m: float = 1.0,
                 gamma: float = 0.0, omega: MeasuredRegion | None = None, y_m=None):
        self.electro, self.fiber = electro, fiber
        self.dt_m = float(dt_m)
        self.gamma = float(gamma)
        self.omega = omega or MeasuredRegion.all_nodes(fiber)
        self.omega.check(fiber)
        self.y_m = None if y_m is None else np.asarray(y_m, dtype=float)
        self.n_mech = _ratio(electro.dt_obs, dt_m, "mech.dt_ms")
        self.n_sub_e = _ratio(dt_m, electro.dt_e, "mech.dt_ms")
        nm = fiber.n_nodes
        ne = electro.cable.n_nodes
        self.layout = Layout.from_sizes([
            ("vm", ne), ("w", ne), ("disp", nm), ("vel", nm),
            ("e_c", nm - 1), ("k_c", nm - 1), ("tau_c", nm - 1),
        ])
        self.n_params = electro.n_params
        self.n_e = 2 * ne
        self.cable = electro.cable
        self._interp = interpolation_matrix(ne, nm) if ne != nm else None

    def with_data(self, y_m) -> "CoupledModel":
        other = copy.copy(self)
        other.y_m = None if y_m is None else np.asarray(y_m, dtype=float)
        return other

    def split(self, X):
        lay = self.layout
        return {name: X[lay[name].slice] for name in lay.names}, X[lay.size:]

    def step_many(self, X, t):
        parts, p = self.split(X)
        vm, w = parts["vm"], parts["w"]
        m = MechState(parts["disp"], parts["vel"], parts["e_c"], parts["k_c"], parts["tau_c"])
        gamma = self.gamma if self.y_m is not None else 0.0
        for k in range(self.n_mech):
            tk = t + k * self.dt_m
            s = self.electro._advance(vm, w, tk, p, self.n_sub_e, self.electro.dt_e)
            vm, w = s.vm, s.w
            vm_f = vm if self._interp is None else self._interp @ vm
            m = luenberger_step(m, self.y_m, gamma, vm_f, self.fiber, self.omega, self.dt_m)
        return np.concatenate([vm, w, m.disp, m.vel, m.e_c, m.k_c, m.tau_c, p], axis=0)

    def step(self, x, t):
        return self.step_many(x[:, None], t)[:, 0]

    def ue(self, X):
        return self.electro.ue(X)


def _ratio(big: float, small: float, key: str) -> int:
    k = int(round(big / small))
    if k < 1 or abs(k * small - big) > 1e-9 * big:
        raise ConfigurationError(f"{big} ms is not a multiple of {small} ms", key=key)
    return k


@dataclass(frozen=True)
class CoupledState:
    electro: ElectroState
    mech: MechState
    params: np.ndarray

    def to_vector(self) -> np.ndarray:
        e, m = self.electro, self.mech
        return np.concatenate([e.vm, e.w, m.disp, m.vel, m.e_c, m.k_c, m.tau_c, np.asarray(self.params, float)])

    @classmethod
    def from_vector(cls, x, model: CoupledModel) -> "CoupledState":
        parts, p = model.split(x)
        return cls(
            ElectroState(parts["vm"], model.ue(x), parts["w"]),
            MechState(parts["disp"], parts["vel"], parts["e_c"], parts["k_c"], parts["tau_c"]),
            p,
        )


def coupled_particle_step(x: CoupledState, y_m, model: CoupledModel, t: float) -> CoupledState:
    """Advance one particle over one window with displacement data ``y_m``."""
    out = model.with_data(y_m).step(x.to_vector(), t)
    return CoupledState.from_vector(out, model)


def _on_cadence(t: float, period: float) -> bool:
    q = t / period
    return abs(q - round(q)) < 1e-9 * max(1.0, abs(q))


class LeadObservation(Observation):
    """Leads ``M ue(vm)`` (or electrode picks of ``vm``), weight ``dt_obs / sigma^2``."""

    def __init__(self, model, lf: LeadField, sigma: float = 0.25, period: float = 1.0, mode: str = "lead"):
        if lf.matrix.shape[1] != model.cable.n_nodes:
            raise ConfigurationError("lead field columns must match the cable nodes", key="electro.leads")
        if not sigma > 0:
            raise ConfigurationError("noise level must be positive", key="noise.sigma_e")
        self.model, self.lf, self.sigma, self.period, self.mode = model, lf, sigma, period, mode
        self.output_dim = lf.n_leads

    def observe_many(self, X, t):
        src = self.model.ue(X) if self.mode == "lead" else X[: self.lf.matrix.shape[1]]
        return self.lf.matrix @ src

    def observe(self, x, t):
        return self.observe_many(x[:, None], t)[:, 0]

    def noise_norm(self, t):
        w = self.period / self.sigma**2 if _on_cadence(t, self.period) else 0.0
        return np.full(self.output_dim, w)


class DisplacementObservation(Observation):
    def __init__(self, model: CoupledModel, omega: MeasuredRegion, sigma: float = 1.0, period: float = 2.0):
        omega.check(model.fiber)
        if not sigma > 0:
            raise ConfigurationError("noise level must be positive", key="noise.sigma_m")
        self.index = model.layout["disp"].offset + omega.index
        self.sigma, self.period = sigma, period
        self.output_dim = len(omega.nodes)

    def observe_many(self, X, t):
        return X[self.index]

    def observe(self, x, t):
        return x[self.index]

    def noise_norm(self, t):
        w = self.period / self.sigma**2 if _on_cadence(t, self.period) else 0.0
        return np.full(self.output_dim, w)


class StackedObservation(Observation):
    """Concatenation of observation operators with a block-diagonal weight."""

    def __init__(self, ops):
        self.ops = tuple(ops)
        if not self.ops:
            raise ConfigurationError("need at least one observation operator", key="estimate.obs")
        self.output_dim = sum(o.output_dim for o in self.ops)

    def observe_many(self, X, t):
        return np.concatenate([o.observe_many(X, t) for o in self.ops], axis=0)

    def observe(self, x, t):
        return np.concatenate([o.observe(x, t) for o in self.ops])

    def noise_norm(self, t):
        return np.concatenate([o.noise_norm(t) for o in self.ops])

    def split(self, y):
        out, pos = [], 0
        for o in self.ops:
            out.append(y[pos:pos + o.output_dim])
            pos += o.output_dim
        return out


@dataclass(frozen=True)
class CoupledObserverConfig:
    """``basis`` may be ``None`` for parameter-only estimation.

    ``alpha_std`` is the prior spread of the POD coordinates (in the basis
    inner product), ``param_std`` that of the reparametrized parameters.
    """

    basis: PodBasis | None
    gamma: float = 0.05
    alpha_std: float | np.ndarray = 1.0
    param_std: float | np.ndarray = 1.0

    def reduced_dim(self, n_params: int) -> int:
        return (self.basis.rank if self.basis is not None else 0) + n_params


def initial_filter(model: Transition, x0: np.ndarray, cfg: CoupledObserverConfig, t0: float = 0.0) -> FilterState:
    """Estimate ``x0`` with ``L = (phi; 1)`` and ``U = diag(std)^-2``."""
    k = model.n_params
    r = cfg.basis.rank if cfg.basis is not None else 0
    d = r + k
    if d == 0:
        raise ConfigurationError("nothing to estimate: no POD modes and no parameters", key="estimate.params")
    n = model.layout.size + k
    L = np.zeros((n, d))
    std = []
    if r:
        if cfg.basis.dim != model.n_e:
            raise ConfigurationError(
                f"basis of dimension {cfg.basis.dim} for electrical state of size {model.n_e}", key="pod.rank")
        L[: model.n_e, :r] = cfg.basis.phi
        std.append(np.broadcast_to(np.asarray(cfg.alpha_std, float), (r,)))
    if k:
        L[model.layout.size:, r:] = np.eye(k)
        std.append(np.broadcast_to(np.asarray(cfg.param_std, float), (k,)))
    U = np.diag(1.0 / np.concatenate(std) ** 2)
    return FilterState(np.asarray(x0, float), t0, lowrank=LowRankCovariance(L, U))


@dataclass
class RunTrace:
    """Per-step record of a reduced-filter run."""

    times: list
    estimates: list
    innovations: list
    u_eigs: list
    HL: list
    L_params: list
    L_reduced: list
    y_pred: list

    @classmethod
    def empty(cls):
        return cls([], [], [], [], [], [], [], [])


def run_reduced_filter(model: Transition, obs: Observation, records, f0: FilterState,
                       cfg: CoupledObserverConfig, mech_data=None, keep_factors: bool = True):
    """Sequential POD-RoUKF (or plain RoUKF without a basis) over ``records``.

    ``mech_data`` maps each window index to the displacement data held by the
    Luenberger term inside the particles (``None`` for no nudging).
    Returns the final filter state and a :class:`RunTrace`.
    """
    f = f0
    k = model.n_params
    sp = simplex_sigma_points(f.lowrank.rank)
    trace = RunTrace.empty()
    r = cfg.basis.rank if cfg.basis is not None else 0
    for i, rec in enumerate(records):
        op = model
        if isinstance(model, CoupledModel):
            op = model.with_data(None if mech_data is None else mech_data[i])
        try:
            if cfg.basis is not None:
                f = pod_roukf_step(f, op, obs, rec, cfg.basis, sp)
            else:
                f = roukf_step(f, op, obs, rec, sp)
        except NumericalError as exc:
            raise NumericalError(f"reduced filter failed at t={rec.time}", step=i, **exc.diagnostics) from exc
        trace.times.append(rec.time)
        trace.estimates.append(f.estimate)
        trace.innovations.append(f.info["innovation"])
        trace.y_pred.append(f.info["y_pred"])
        trace.u_eigs.append(np.linalg.eigvalsh(f.lowrank.U))
        if keep_factors:
            L = f.lowrank.L
            trace.HL.append(f.info["HL"])
            trace.L_params.append(L[L.shape[0] - k:] if k else np.zeros((0, L.shape[1])))
            if r:
                trace.L_reduced.append(np.vstack([cfg.basis.coefficients(L[: cfg.basis.dim]), L[L.shape[0] - k:]]))
            else:
                trace.L_reduced.append(L[L.shape[0] - k:])
    return f, trace


def observability_gramian(HL_seq, Lr_seq, w_seq, dt: float, rel_threshold: float = 1e-8):
    """``G = sum dt (HL Lr^-1)^T W (HL Lr^-1)`` along a run.

    ``Lr`` are the reduced rows of the extension factor (square).  Returns
    ``(lambda_min, G, satisfied)`` with the threshold relative to
    ``trace(G) / dim``.
    """
    G = None
    for HL, Lr, w in zip(HL_seq, Lr_seq, w_seq):
        Lr = np.atleast_2d(Lr)
        if Lr.shape[0] != Lr.shape[1]:
            raise ConfigurationError("reduced factor must be square for the observability Gramian")
        cond = np.linalg.cond(Lr)
        if not np.isfinite(cond) or cond > 1e14:
            raise NumericalError("reduced extension factor is numerically singular", condition=cond)
        S = np.linalg.solve(Lr.T, np.atleast_2d(HL).T).T
        term = dt * S.T @ (np.asarray(w)[:, None] * S)
        G = term if G is None else G + term
    if G is None:
        raise ConfigurationError("empty horizon for the observability Gramian")
    G = 0.5 * (G + G.T)
    lam = float(np.linalg.eigvalsh(G)[0])
    thr = rel_threshold * float(np.trace(G)) / G.shape[0]
    return lam, G, bool(lam > thr)


@dataclass(frozen=True)
class SensitivityTrace:
    times: np.ndarray
    s_e: np.ndarray
    s_m: np.ndarray
    names: tuple[str, ...]


def sensitivity_curves(times, HL_seq, Ltheta_seq, n_e: int, y_e_mean: float, y_m_mean: float,
                       names, w_m: np.ndarray | None = None, lead: int = 0) -> SensitivityTrace:
    """Normalized observation sensitivities to each parameter along a run.

    ``HL`` rows are the stacked outputs, electrical channels first (``n_e``
    of them).  ``HL (L^theta)^-1`` is the derivative of the outputs with
    respect to ``p``; dividing by ``ln 2`` turns it into ``theta dy/dtheta``.
    ``s_e`` uses lead ``lead``; ``s_m`` is the weighted norm over the
    displacement channels.
    """
    se, sm = [], []
    for HL, Lt in zip(HL_seq, Ltheta_seq):
        Lt = np.atleast_2d(Lt)
        if Lt.shape[0] != Lt.shape[1]:
            S = HL @ np.linalg.pinv(Lt)
        else:
            cond = np.linalg.cond(Lt)
            if not np.isfinite(cond) or cond > 1e14:
                raise NumericalError("parameter factor is numerically singular", condition=cond)
            S = np.linalg.solve(Lt.T, HL.T).T
        S = S / np.log(2.0)
        se.append(S[lead] / y_e_mean)
        mech = S[n_e:]
        if mech.shape[0]:
            wm = np.ones(mech.shape[0]) if w_m is None else np.asarray(w_m)
            sm.append(np.sqrt(np.sum(wm[:, None] * mech**2, axis=0)) / y_m_mean)
        else:
            sm.append(np.zeros(S.shape[1]))
    return SensitivityTrace(np.asarray(times), np.array(se), np.array(sm), tuple(names))


def support_width(times, curve, frac: float = 0.1) -> float:
    """Length of the time window where ``|curve|`` exceeds ``frac`` of its peak."""
    a = np.abs(np.asarray(curve))
    if a.max() == 0:
        return 0.0
    idx = np.flatnonzero(a >= frac * a.max())
    return float(times[idx[-1]] - times[idx[0]])


class LinearCoupledTwin:
    """Linear electrics ``xe <- Ae xe`` driving linear mechanics ``xm <- Am xm + B xe``.

    Used to check the error split: with ``L = (Le; Lm)`` propagated by the
    nudged tangent, ``eta = xm_err - Lm Le^-1 xe_err`` obeys
    ``eta <- (Am - G Hm) eta`` whatever the electrical error does.
    """

    def __init__(self, Ae, Am, B, He, Hm, gain):
        self.Ae, self.Am, self.B = (np.asarray(a, float) for a in (Ae, Am, B))
        self.He, self.Hm, self.gain = (np.asarray(a, float) for a in (He, Hm, gain))
        self.ne, self.nm = self.Ae.shape[0], self.Am.shape[0]

    def truth_step(self, x):
        xe, xm = x[: self.ne], x[self.ne:]
        return np.concatenate([self.Ae @ xe, self.Am @ xm + self.B @ xe])

    def observer_step(self, x, y_m):
        xe, xm = x[: self.ne], x[self.ne:]
        nudged = self.Am @ xm + self.B @ xe + self.gain @ (y_m - self.Hm @ xm)
        return np.concatenate([self.Ae @ xe, nudged])

    def tangent(self):
        n = self.ne + self.nm
        T = np.zeros((n, n))
        T[: self.ne, : self.ne] = self.Ae
        T[self.ne:, : self.ne] = self.B
        T[self.ne:, self.ne:] = self.Am - self.gain @ self.Hm
        return T

    def H(self):
        H = np.zeros((self.He.shape[0] + self.Hm.shape[0], self.ne + self.nm))
        H[: self.He.shape[0], : self.ne] = self.He
        H[self.He.shape[0]:, self.ne:] = self.Hm
        return H


def decoupling_check(twin: LinearCoupledTwin, x_true0, x_hat0, w, n_steps: int = 50) -> float:
    """Run the aggregated observer on the linear twin (full electrical rank).

    Returns the largest relative gap between ``eta_n`` and
    ``(Am - G Hm)^n eta_0``.
    """
    ne = twin.ne
    T, H = twin.tangent(), twin.H()
    L = np.zeros((ne + twin.nm, ne))
    L[:ne] = np.eye(ne)
    U = np.eye(ne)
    x, xh = np.asarray(x_true0, float), np.asarray(x_hat0, float)
    Amg = twin.Am - twin.gain @ twin.Hm

    def eta(x, xh, L):
        err = xh - x
        return err[ne:] - L[ne:] @ np.linalg.solve(L[:ne], err[:ne])

    eta_ref = eta(x, xh, L)
    gap = 0.0
    for _ in range(n_steps):
        y_m = twin.Hm @ x[ne:]
        x = twin.truth_step(x)
        xh = twin.observer_step(xh, y_m)
        L = T @ L
        y = H @ x
        HL = H @ L
        U = U + HL.T @ (w[:, None] * HL)
        xh = xh + L @ np.linalg.solve(U, HL.T @ (w * (y - H @ xh)))
        eta_ref = Amg @ eta_ref
        e = eta(x, xh, L)
        gap = max(gap, float(np.linalg.norm(e - eta_ref) / max(np.linalg.norm(eta_ref), 1e-300)))
    return gap
