"""State vectors, time grids and the transition/observation contracts.

Every model in the package exposes its discrete dynamics as a
:class:`Transition` acting on flat *augmented* vectors ``(state, params)``;
parameters are constant under the dynamics.  Filters only ever see these flat
vectors, so the same engines run on a scalar toy system or on the coupled
cable/fiber model.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError

__all__ = [
    "Segment",
    "Layout",
    "StateVector",
    "AugmentedState",
    "TimeGrid",
    "Transition",
    "Observation",
    "propagate",
    "split_augmented",
    "join_augmented",
    "thread_count",
]


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    length: int

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.offset + self.length)


@dataclass(frozen=True)
class Layout:
    """Ordered, contiguous named segments covering a flat vector."""

    segments: tuple[Segment, ...]

    def __post_init__(self):
        pos = 0
        names = set()
        for seg in self.segments:
            if seg.offset != pos or seg.length < 0:
                raise ConfigurationError(
                    f"segment {seg.name!r} at offset {seg.offset} breaks contiguity (expected {pos})"
                )
            if seg.name in names:
                raise ConfigurationError(f"duplicate segment name {seg.name!r}")
            names.add(seg.name)
            pos += seg.length

    @classmethod
    def from_sizes(cls, sizes: Sequence[tuple[str, int]]) -> "Layout":
        segs = []
        pos = 0
        for name, n in sizes:
            segs.append(Segment(name, pos, int(n)))
            pos += int(n)
        return cls(tuple(segs))

    @property
    def size(self) -> int:
        return sum(s.length for s in self.segments)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.segments)

    def __getitem__(self, name: str) -> Segment:
        for seg in self.segments:
            if seg.name == name:
                return seg
        raise KeyError(name)

    def __contains__(self, name) -> bool:
        return any(s.name == name for s in self.segments)


@dataclass(frozen=True)
class StateVector:
    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if values.ndim != 1 or values.size != self.layout.size:
            raise ConfigurationError(
                f"vector of size {values.size} does not match layout of size {self.layout.size}"
            )

    def segment(self, name: str) -> np.ndarray:
        return self.values[self.layout[name].slice]

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class AugmentedState:
    """State plus parameter block; flattened in the order ``(state, params)``."""

    state: StateVector
    params: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        params = np.array(self.params, dtype=float).reshape(-1)
        params.setflags(write=False)
        object.__setattr__(self, "params", params)

    @property
    def dim(self) -> int:
        return len(self.state) + self.params.size

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.state.values, self.params])

    @classmethod
    def from_vector(cls, vec, layout: Layout) -> "AugmentedState":
        vec = np.asarray(vec, dtype=float)
        return cls(StateVector(vec[: layout.size], layout), vec[layout.size :])


def split_augmented(x: AugmentedState) -> tuple[StateVector, np.ndarray]:
    return x.state, x.params


def join_augmented(state: StateVector, params) -> AugmentedState:
    return AugmentedState(state, params)


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    dt: float
    n_steps: int
    sub_steps_per_obs: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive", key="dt")
        if self.n_steps < 1 or self.sub_steps_per_obs < 1:
            raise ConfigurationError("n_steps and sub_steps_per_obs must be positive integers")

    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    def observation_times(self) -> np.ndarray:
        k = np.arange(0, self.n_steps + 1, self.sub_steps_per_obs)
        return self.t0 + self.dt * k

    @property
    def obs_interval(self) -> float:
        return self.dt * self.sub_steps_per_obs


def thread_count() -> int:
    raw = os.environ.get("CARDASSIM_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(n, 1)


class Transition:
    """Discrete dynamics ``x_{n+1} = A_{n+1|n}(x_n)`` on augmented vectors.

    Subclasses implement :meth:`step` on a single flat vector.  Models that can
    advance many particles at once override :meth:`step_many`, which receives
    particles as the columns of a 2-D array.  Both must be pure functions.
    """

    layout: Layout
    n_params: int = 0

    @property
    def dim(self) -> int:
        return self.layout.size + self.n_params

    def step(self, x: np.ndarray, t: float) -> np.ndarray:
        raise NotImplementedError

    def step_many(self, X: np.ndarray, t: float) -> np.ndarray:
        cols = [X[:, i] for i in range(X.shape[1])]
        workers = thread_count()
        if workers > 1 and len(cols) > 1:
            # map preserves order, so the result is independent of scheduling
            with ThreadPoolExecutor(max_workers=workers) as pool:
                out = list(pool.map(lambda c: self.step(c, t), cols))
        else:
            out = [self.step(c, t) for c in cols]
        return np.column_stack(out)


class Observation:
    """Observation operator ``y = H(x, t)`` with its noise norm ``W_n``.

    ``noise_norm`` returns the diagonal of ``W_n`` as a vector.
    """

    output_dim: int

    def observe(self, x: np.ndarray, t: float) -> np.ndarray:
        raise NotImplementedError

    def observe_many(self, X: np.ndarray, t: float) -> np.ndarray:
        return np.column_stack([self.observe(X[:, i], t) for i in range(X.shape[1])])

    def noise_norm(self, t: float) -> np.ndarray:
        raise NotImplementedError


def propagate(op: Transition, x0: AugmentedState, grid: TimeGrid) -> list[AugmentedState]:
    """Run ``grid.n_steps`` steps of ``op`` from ``x0``; entry 0 is ``x0`` itself."""
    if x0.state.layout != op.layout or x0.params.size != op.n_params:
        raise ConfigurationError(
            f"initial state layout {x0.state.layout.names}+{x0.params.size} params does not match "
            f"operator layout {op.layout.names}+{op.n_params} params"
        )
    traj = [x0]
    x = x0.to_vector()
    for k in range(grid.n_steps):
        x = op.step(x, grid.t0 + k * grid.dt)
        traj.append(AugmentedState.from_vector(x, op.layout))
    return traj
