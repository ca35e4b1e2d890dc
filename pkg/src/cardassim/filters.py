"""Discrete EKF, UKF and their reduced-order variants (RoEKF, RoUKF, POD-RoUKF).

All engines act on flat augmented vectors through a :class:`~.statespace.Transition`
(one observation interval per call) and an :class:`~.statespace.Observation`.
Reduced filters carry the covariance as ``P = L U^-1 L^T``.

Observation weights ``W`` are diagonal and may contain zeros (channels without
data at this instant); every correction is written so that ``W^-1`` is never
formed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import ConfigurationError, DomainError, NumericalError
from .pod import PodBasis

__all__ = [
    "SigmaPointSet",
    "LowRankCovariance",
    "FilterState",
    "ObservationRecord",
    "simplex_sigma_points",
    "ekf_step",
    "ukf_step",
    "roekf_step",
    "roukf_step",
    "pod_roukf_step",
    "reparametrize",
    "physical_params",
    "fd_jacobian",
]


@dataclass(frozen=True)
class SigmaPointSet:
    points: np.ndarray
    weights: np.ndarray

    @property
    def dim(self) -> int:
        return self.points.shape[0]

    @property
    def count(self) -> int:
        return self.points.shape[1]

    @property
    def weight_matrix(self) -> np.ndarray:
        return np.diag(self.weights)


def simplex_sigma_points(d: int) -> SigmaPointSet:
    """``d + 1`` equally weighted points with zero mean and identity covariance.

    The points are ``sqrt(d+1)`` times the rows of an orthonormal basis of the
    complement of ``(1, ..., 1)`` (Helmert basis), so both moment identities
    hold by construction.
    """
    if d < 1:
        raise ConfigurationError(f"sigma-point dimension must be >= 1, got {d}")
    n = d + 1
    basis = np.zeros((n, d))
    for j in range(1, n):
        c = 1.0 / np.sqrt(j * (j + 1.0))
        basis[:j, j - 1] = c
        basis[j, j - 1] = -j * c
    pts = np.sqrt(n) * basis.T
    pts.setflags(write=False)
    w = np.full(n, 1.0 / n)
    w.setflags(write=False)
    return SigmaPointSet(pts, w)


@dataclass(frozen=True)
class LowRankCovariance:
    L: np.ndarray
    U: np.ndarray

    def __post_init__(self):
        L = np.atleast_2d(np.asarray(self.L, dtype=float))
        U = np.atleast_2d(np.asarray(self.U, dtype=float))
        if U.shape != (L.shape[1], L.shape[1]):
            raise ConfigurationError(f"U of shape {U.shape} for L of shape {L.shape}")
        object.__setattr__(self, "L", L)
        object.__setattr__(self, "U", U)

    @property
    def rank(self) -> int:
        return self.L.shape[1]

    def cholesky(self, step=None) -> np.ndarray:
        return _cholesky(self.U, "U", step)

    def dense(self) -> np.ndarray:
        R = self.cholesky()
        Z = sla.solve_triangular(R, self.L.T, lower=True)
        return Z.T @ Z


@dataclass(frozen=True)
class ObservationRecord:
    time: float
    value: np.ndarray
    noise_norm: np.ndarray

    def __post_init__(self):
        v = np.atleast_1d(np.asarray(self.value, dtype=float))
        w = np.atleast_1d(np.asarray(self.noise_norm, dtype=float))
        if w.shape != v.shape:
            raise ConfigurationError(f"noise norm of size {w.size} for observation of size {v.size}")
        if np.any(w < 0):
            raise ConfigurationError("noise norm entries must be nonnegative")
        object.__setattr__(self, "value", v)
        object.__setattr__(self, "noise_norm", w)

    @property
    def informative(self) -> bool:
        return bool(np.any(self.noise_norm > 0))


@dataclass(frozen=True)
class FilterState:
    """Estimate at ``time``; ``cov`` for full filters, ``lowrank`` for reduced ones.

    ``info`` carries diagnostics of the step that produced this state
    (predicted observation, innovation, ``HL``).
    """

    estimate: np.ndarray
    time: float = 0.0
    cov: np.ndarray | None = None
    lowrank: LowRankCovariance | None = None
    step: int = 0
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "estimate", np.asarray(self.estimate, dtype=float).reshape(-1))
        if self.cov is not None:
            object.__setattr__(self, "cov", np.asarray(self.cov, dtype=float))
        if (self.cov is None) == (self.lowrank is None):
            raise ConfigurationError("filter state needs exactly one of cov or lowrank")
        if self.lowrank is not None and self.lowrank.L.shape[0] != self.estimate.size:
            raise ConfigurationError("L rows must match the estimate dimension")

    @property
    def covariance(self) -> np.ndarray:
        return self.cov if self.cov is not None else self.lowrank.dense()


def _cholesky(a: np.ndarray, name: str, step) -> np.ndarray:
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        eig = np.linalg.eigvalsh(0.5 * (a + a.T))
        raise NumericalError(
            f"{name} is not positive definite", step=step,
            min_eig=float(eig[0]), max_eig=float(eig[-1]),
            asymmetry=float(np.max(np.abs(a - a.T))),
        ) from exc


def _covariance_root(P: np.ndarray, step, rel_tol: float = 1e-12) -> np.ndarray:
    """Cholesky factor of ``P``; a clipped eigen-root if ``P`` is singular only up to round-off.

    Any ``S`` with ``S S^T = P`` serves for sampling, so the fallback changes
    nothing but the orientation of the sigma points.
    """
    try:
        return np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        lam, V = np.linalg.eigh(P)
        if lam[0] < -rel_tol * max(lam[-1], 0.0) or lam[-1] <= 0.0:
            raise NumericalError("P is not positive semidefinite", step=step,
                                 min_eig=float(lam[0]), max_eig=float(lam[-1])) from None
        return V * np.sqrt(np.clip(lam, 0.0, None))


def _check_finite(a: np.ndarray, name: str, step) -> None:
    if not np.all(np.isfinite(a)):
        bad = int(np.sum(~np.isfinite(a)))
        raise NumericalError(f"non-finite values in {name}", step=step, count=bad)


def _check_obs(y: ObservationRecord, obs_op):
    if y.value.size != obs_op.output_dim:
        raise ConfigurationError(f"observation of size {y.value.size}, operator output_dim {obs_op.output_dim}")


def fd_jacobian(fun, x: np.ndarray, many=None) -> np.ndarray:
    """Central finite-difference jacobian with step ``1e-6 * (1 + |x_j|)``.

    ``many`` evaluates ``fun`` on the columns of a matrix, if available.
    """
    n = x.size
    h = 1e-6 * (1.0 + np.abs(x))
    X = np.concatenate([x[:, None] + np.diag(h), x[:, None] - np.diag(h)], axis=1)
    F = many(X) if many is not None else np.column_stack([fun(X[:, j]) for j in range(2 * n)])
    return (F[:, :n] - F[:, n:]) / (2.0 * h)


def _transition_jacobian(op, x, t):
    jac = getattr(op, "jacobian", None)
    if jac is not None:
        return np.asarray(jac(x, t), dtype=float)
    return fd_jacobian(lambda v: op.step(v, t), x, lambda X: op.step_many(X, t))


def _observation_jacobian(obs_op, x, t):
    jac = getattr(obs_op, "jacobian", None)
    if jac is not None:
        return np.asarray(jac(x, t), dtype=float)
    return fd_jacobian(lambda v: obs_op.observe(v, t), x, lambda X: obs_op.observe_many(X, t))


def _weighted_gain_solve(HPHt: np.ndarray, w: np.ndarray, step) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(s, F)`` with ``s = W^1/2`` and ``F`` the Cholesky factor of ``1 + s HPH^T s``.

    ``s F^-T F^-1 s`` equals ``(HPH^T + W^-1)^-1`` whenever ``W`` is invertible.
    """
    s = np.sqrt(w)
    S = np.eye(w.size) + s[:, None] * HPHt * s[None, :]
    return s, _cholesky(0.5 * (S + S.T), "innovation matrix", step)


def _apply_inverse_innovation(s, F, rhs):
    z = sla.cho_solve((F, True), s[:, None] * rhs if rhs.ndim == 2 else s * rhs)
    return s[:, None] * z if z.ndim == 2 else s * z


def ekf_step(f: FilterState, op, obs_op, y: ObservationRecord, jacobians=None) -> FilterState:
    """Extended Kalman filter: tangent prediction then Kalman correction.

    ``jacobians`` may be ``(A, H)`` matrices; otherwise analytic jacobians
    registered on the operators or central finite differences are used.
    """
    if f.cov is None:
        raise ConfigurationError("ekf_step needs a full covariance")
    _check_obs(y, obs_op)
    x = f.estimate
    if jacobians is not None:
        A, H = (np.asarray(m, dtype=float) for m in jacobians)
    else:
        A, H = _transition_jacobian(op, x, f.time), None
    x_pred = op.step(x, f.time)
    _check_finite(x_pred, "prediction", f.step)
    P = A @ f.cov @ A.T
    P = 0.5 * (P + P.T)
    y_pred = obs_op.observe(x_pred, y.time)
    innov = y.value - y_pred
    if not y.informative:
        return FilterState(x_pred, y.time, cov=P, step=f.step + 1,
                           info={"y_pred": y_pred, "innovation": innov})
    if H is None:
        H = _observation_jacobian(obs_op, x_pred, y.time)
    PHt = P @ H.T
    s, F = _weighted_gain_solve(H @ PHt, y.noise_norm, f.step)
    P_new = P - PHt @ _apply_inverse_innovation(s, F, PHt.T)
    P_new = 0.5 * (P_new + P_new.T)
    x_new = x_pred + PHt @ _apply_inverse_innovation(s, F, innov)
    return FilterState(x_new, y.time, cov=P_new, step=f.step + 1,
                       info={"y_pred": y_pred, "innovation": innov})


def ukf_step(f: FilterState, op, obs_op, y: ObservationRecord, sp: SigmaPointSet | None = None) -> FilterState:
    """Unscented filter with the simplex rule around the current estimate."""
    if f.cov is None:
        raise ConfigurationError("ukf_step needs a full covariance")
    _check_obs(y, obs_op)
    n = f.estimate.size
    sp = sp or simplex_sigma_points(n)
    if sp.dim != n:
        raise ConfigurationError(f"sigma points of dimension {sp.dim} for state of size {n}")
    root = _covariance_root(0.5 * (f.cov + f.cov.T), f.step)
    X = f.estimate[:, None] + root @ sp.points
    Xp = op.step_many(X, f.time)
    _check_finite(Xp, "propagated particles", f.step)
    x_pred = Xp @ sp.weights
    dX = Xp - x_pred[:, None]
    P = (dX * sp.weights) @ dX.T
    P = 0.5 * (P + P.T)
    Y = obs_op.observe_many(Xp, y.time)
    y_pred = Y @ sp.weights
    innov = y.value - y_pred
    if not y.informative:
        return FilterState(x_pred, y.time, cov=P, step=f.step + 1,
                           info={"y_pred": y_pred, "innovation": innov})
    dY = Y - y_pred[:, None]
    Pxy = (dX * sp.weights) @ dY.T
    Pyy = (dY * sp.weights) @ dY.T
    s, F = _weighted_gain_solve(Pyy, y.noise_norm, f.step)
    gain = _apply_inverse_innovation(s, F, Pxy.T).T
    x_new = x_pred + gain @ innov
    P_new = P - gain @ Pxy.T
    P_new = 0.5 * (P_new + P_new.T)
    return FilterState(x_new, y.time, cov=P_new, step=f.step + 1,
                       info={"y_pred": y_pred, "innovation": innov})


def _reduced_correction(U_pred, HL, w, innov, step):
    """``U = U_pred + HL^T W HL`` and the reduced increment ``U^-1 HL^T W innov``."""
    U = U_pred + HL.T @ (w[:, None] * HL)
    U = 0.5 * (U + U.T)
    R = _cholesky(U, "U", step)
    dz = sla.cho_solve((R, True), HL.T @ (w * innov))
    return U, dz


def roekf_step(f: FilterState, op, obs_op, y: ObservationRecord) -> FilterState:
    """Reduced-order EKF: ``L <- (dA) L``, ``U <- U + (HL)^T W (HL)``.

    Directional derivatives of the transition along the columns of ``L`` are
    taken by central differences unless ``op`` registers a jacobian.  With
    ``L = [0; 1]`` on a parameter block this is the parameter-mode filter,
    and the parameter rows of ``L`` stay the identity because parameters are
    constant under the dynamics.
    """
    if f.lowrank is None:
        raise ConfigurationError("roekf_step needs a low-rank covariance")
    _check_obs(y, obs_op)
    L, U = f.lowrank.L, f.lowrank.U
    _cholesky(U, "U", f.step)
    x = f.estimate
    x_pred = op.step(x, f.time)
    _check_finite(x_pred, "prediction", f.step)
    jac = getattr(op, "jacobian", None)
    if jac is not None:
        L_pred = np.asarray(jac(x, f.time)) @ L
    else:
        L_pred = _directional(op, x, L, f.time)
    y_pred = obs_op.observe(x_pred, y.time)
    innov = y.value - y_pred
    ojac = getattr(obs_op, "jacobian", None)
    if ojac is not None:
        HL = np.asarray(ojac(x_pred, y.time)) @ L_pred
    else:
        HL = _directional(obs_op, x_pred, L_pred, y.time, observe=True)
    info = {"y_pred": y_pred, "innovation": innov, "HL": HL}
    if not y.informative:
        return FilterState(x_pred, y.time, lowrank=LowRankCovariance(L_pred, U), step=f.step + 1, info=info)
    U_new, dz = _reduced_correction(U, HL, y.noise_norm, innov, f.step)
    x_new = x_pred + L_pred @ dz
    return FilterState(x_new, y.time, lowrank=LowRankCovariance(L_pred, U_new), step=f.step + 1, info=info)


def _directional(op, x, L, t, observe=False):
    d = L.shape[1]
    scale = np.max(np.abs(L), axis=0)
    scale[scale == 0] = 1.0
    eps = 1e-6 * (1.0 + np.max(np.abs(x))) / scale
    X = np.concatenate([x[:, None] + L * eps, x[:, None] - L * eps], axis=1)
    F = op.observe_many(X, t) if observe else op.step_many(X, t)
    return (F[:, :d] - F[:, d:]) / (2.0 * eps)


def _sample(f: FilterState, sp: SigmaPointSet) -> tuple[np.ndarray, np.ndarray]:
    """Particles ``x + L C^T I`` with ``C^T C = U^-1``; returns ``(particles, C^T I)``."""
    L, U = f.lowrank.L, f.lowrank.U
    if sp.dim != L.shape[1]:
        raise ConfigurationError(f"sigma points of dimension {sp.dim} for reduced rank {L.shape[1]}")
    R = f.lowrank.cholesky(f.step)
    # U = R R^T, so C = R^-1 satisfies C^T C = U^-1
    offsets = sla.solve_triangular(R.T, sp.points, lower=False)
    return f.estimate[:, None] + L @ offsets, offsets


def roukf_step(f: FilterState, op, obs_op, y: ObservationRecord, sp: SigmaPointSet | None = None) -> FilterState:
    """Reduced-order unscented filter: sampling, prediction, correction.

    ``info['particles']`` holds the propagated particles, which the
    diagnostics reuse.
    """
    if f.lowrank is None:
        raise ConfigurationError("roukf_step needs a low-rank covariance")
    _check_obs(y, obs_op)
    sp = sp or simplex_sigma_points(f.lowrank.rank)
    X, _ = _sample(f, sp)
    Xp = op.step_many(X, f.time)
    _check_finite(Xp, "propagated particles", f.step)
    x_pred = Xp @ sp.weights
    L_new = (Xp * sp.weights) @ sp.points.T
    Y = obs_op.observe_many(Xp, y.time)
    y_pred = Y @ sp.weights
    HL = (Y * sp.weights) @ sp.points.T
    innov = y.value - y_pred
    info = {"y_pred": y_pred, "innovation": innov, "HL": HL, "particles": Xp}
    eye = np.eye(sp.dim)
    if not y.informative:
        return FilterState(x_pred, y.time, lowrank=LowRankCovariance(L_new, eye), step=f.step + 1, info=info)
    U_new, dz = _reduced_correction(eye, HL, y.noise_norm, innov, f.step)
    x_new = x_pred + L_new @ dz
    return FilterState(x_new, y.time, lowrank=LowRankCovariance(L_new, U_new), step=f.step + 1, info=info)


def pod_roukf_step(f: FilterState, op, obs_op, y: ObservationRecord, basis: PodBasis,
                   sp: SigmaPointSet | None = None, block: slice | None = None) -> FilterState:
    """RoUKF whose uncertainty lives in POD coordinates ``alpha`` and the parameters.

    ``block`` locates the reduced (electrical) part of the state vector; it
    defaults to the leading ``basis.dim`` entries.  Each propagated particle is
    split as ``x_e = phi alpha + x_perp``; the rest of the state and the
    parameters are carried as they are.  The extension factor is kept as the
    blocks ``(L_perp, L_alpha, L_rest)`` and recombined as
    ``L_e = L_perp + phi L_alpha`` for the next sampling.
    """
    if f.lowrank is None:
        raise ConfigurationError("pod_roukf_step needs a low-rank covariance")
    _check_obs(y, obs_op)
    block = block if block is not None else slice(0, basis.dim)
    if block.stop - block.start != basis.dim:
        raise ConfigurationError(f"block of size {block.stop - block.start} for basis of dimension {basis.dim}")
    sp = sp or simplex_sigma_points(f.lowrank.rank)
    X, _ = _sample(f, sp)
    Xp = op.step_many(X, f.time)
    _check_finite(Xp, "propagated particles", f.step)
    alpha = basis.coefficients(Xp[block])
    perp = Xp[block] - basis.phi @ alpha
    a_mean = alpha @ sp.weights
    perp_mean = perp @ sp.weights
    rest = np.delete(Xp, np.arange(block.start, block.stop), axis=0)
    rest_mean = rest @ sp.weights
    L_alpha = (alpha * sp.weights) @ sp.points.T
    L_perp = (perp * sp.weights) @ sp.points.T
    L_rest = (rest * sp.weights) @ sp.points.T
    Y = obs_op.observe_many(Xp, y.time)
    y_pred = Y @ sp.weights
    HL = (Y * sp.weights) @ sp.points.T
    innov = y.value - y_pred
    eye = np.eye(sp.dim)
    if y.informative:
        U_new, dz = _reduced_correction(eye, HL, y.noise_norm, innov, f.step)
    else:
        U_new, dz = eye, np.zeros(sp.dim)
    a_new = a_mean + L_alpha @ dz
    perp_new = perp_mean + L_perp @ dz
    rest_new = rest_mean + L_rest @ dz
    k = block.start
    x_new = np.concatenate([rest_new[:k], basis.phi @ a_new + perp_new, rest_new[k:]])
    L_e = L_perp + basis.phi @ L_alpha
    L_new = np.concatenate([L_rest[:k], L_e, L_rest[k:]], axis=0)
    info = {"y_pred": y_pred, "innovation": innov, "HL": HL, "particles": Xp,
            "L_alpha": L_alpha, "L_perp": L_perp}
    return FilterState(x_new, y.time, lowrank=LowRankCovariance(L_new, U_new), step=f.step + 1, info=info)


def reparametrize(theta_phys, theta_prior) -> np.ndarray:
    """Internal parameters ``p`` with ``theta = 2**p * theta_prior``."""
    phys = np.asarray(theta_phys, dtype=float)
    prior = np.asarray(theta_prior, dtype=float)
    if np.any(prior <= 0):
        raise DomainError("prior parameters must be strictly positive")
    if np.any(phys <= 0):
        raise DomainError("physical parameters must be strictly positive")
    return np.log2(phys / prior)


def physical_params(p, theta_prior) -> np.ndarray:
    prior = np.asarray(theta_prior, dtype=float)
    if np.any(prior <= 0):
        raise DomainError("prior parameters must be strictly positive")
    return prior * np.exp2(np.asarray(p, dtype=float))

