"""Proper orthogonal decomposition in a weighted inner product.

Bases are computed by the method of snapshots: the small snapshot correlation
matrix ``S^T M S`` is diagonalized and the modes are lifted back to state space.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

__all__ = ["SnapshotSet", "PodBasis", "build_pod", "project", "electrical_gram", "reconstruction_error"]


@dataclass(frozen=True)
class SnapshotSet:
    columns: np.ndarray
    tags: tuple = ()

    def __post_init__(self):
        cols = np.atleast_2d(np.asarray(self.columns, dtype=float))
        object.__setattr__(self, "columns", cols)
        if self.tags and len(self.tags) != cols.shape[1]:
            raise ConfigurationError("one tag per snapshot column")

    @classmethod
    def stack(cls, columns, tags=()) -> "SnapshotSet":
        return cls(np.column_stack(columns), tuple(tags))

    @property
    def dim(self) -> int:
        return self.columns.shape[0]

    @property
    def count(self) -> int:
        return self.columns.shape[1]


@dataclass(frozen=True)
class PodBasis:
    phi: np.ndarray
    gram: np.ndarray
    singular_values: np.ndarray
    requested_rank: int = 0
    rank_deficient: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def rank(self) -> int:
        return self.phi.shape[1]

    @property
    def dim(self) -> int:
        return self.phi.shape[0]

    def orthonormality_error(self) -> float:
        g = self.phi.T @ (self.gram[:, None] * self.phi)
        return float(np.max(np.abs(g - np.eye(self.rank)))) if self.rank else 0.0

    def coefficients(self, x: np.ndarray) -> np.ndarray:
        w = self.gram if x.ndim == 1 else self.gram[:, None]
        return self.phi.T @ (w * x)


def _as_gram(gram, dim: int) -> np.ndarray:
    if gram is None:
        return np.ones(dim)
    g = np.asarray(gram, dtype=float)
    if g.ndim == 2:
        if not np.allclose(g, np.diag(np.diag(g))):
            raise ConfigurationError("only diagonal Gramians are supported", key="pod.gram")
        g = np.diag(g).copy()
    if g.shape != (dim,) or np.any(g <= 0):
        raise ConfigurationError("Gramian must be a positive diagonal of matching size", key="pod.gram")
    return g


def build_pod(snapshots: SnapshotSet, r: int, gram=None, rel_tol: float = 1e-12) -> PodBasis:
    """Dominant ``r`` modes of the snapshot correlation in the ``gram`` inner product.

    Modes whose eigenvalue falls below ``rel_tol`` times the largest are
    dropped; the returned basis then has a smaller rank and
    ``rank_deficient=True``.
    """
    S = snapshots.columns
    dim, count = S.shape
    if r < 1 or r > min(dim, count):
        raise ConfigurationError(
            f"rank {r} exceeds min(dimension={dim}, snapshots={count})", key="pod.rank"
        )
    g = _as_gram(gram, dim)
    corr = S.T @ (g[:, None] * S)
    evals, evecs = np.linalg.eigh(0.5 * (corr + corr.T))
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    keep = int(np.sum(evals[:r] > rel_tol * max(evals[0], 0.0)))
    deficient = keep < r
    if deficient:
        warnings.warn(f"snapshot set has effective rank {keep} < requested {r}", RuntimeWarning, stacklevel=2)
    sv = np.sqrt(evals[:keep])
    phi = S @ evecs[:, :keep] / sv
    # one weighted QR pass removes the round-off loss of orthogonality of tail modes
    sq = np.sqrt(g)
    q, rr = np.linalg.qr(sq[:, None] * phi)
    q *= np.sign(np.diag(rr))
    phi = q / sq[:, None]
    return PodBasis(phi, g, sv, requested_rank=r, rank_deficient=deficient)


def project(x_e: np.ndarray, basis: PodBasis) -> tuple[np.ndarray, np.ndarray]:
    """Split ``x_e = phi @ alpha + x_perp`` with ``alpha = phi^T M x_e``."""
    x_e = np.asarray(x_e, dtype=float)
    if x_e.shape[0] != basis.dim:
        raise ConfigurationError(f"state of size {x_e.shape[0]} for basis of dimension {basis.dim}")
    alpha = basis.coefficients(x_e)
    return alpha, x_e - basis.phi @ alpha


def reconstruction_error(snapshots: SnapshotSet, basis: PodBasis) -> float:
    """Sum over snapshots of the squared ``gram``-norm of the projection residual."""
    _, perp = project(snapshots.columns, basis)
    return float(np.sum(basis.gram[:, None] * perp**2))


def electrical_gram(mass: np.ndarray, kind: str = "mass", w_scale: float = 1.0e6) -> np.ndarray:
    """Diagonal inner product on ``(vm, w)`` snapshots.

    ``kind='mass'`` uses the lumped L2 mass of the cable, ``'l2'`` the
    Euclidean product.  The gate block is weighted by ``w_scale**2`` so both
    blocks are measured in comparable units (``w_scale = (v_max - v_min)**3``
    maps the gate range onto the potential range).
    """
    if kind == "mass":
        base = np.asarray(mass, dtype=float)
    elif kind == "l2":
        base = np.ones_like(np.asarray(mass, dtype=float))
    else:
        raise ConfigurationError(f"unknown gram kind {kind!r}", key="pod.gram")
    return np.concatenate([base, base * w_scale**2])
