"""Linear transition and observation operators for small test systems."""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError
from .statespace import Layout, Observation, Transition


class LinearTransition(Transition):
    """``x <- A x`` on the state, parameters (if any) held constant.

    ``A`` acts on the full augmented vector, so parameter-dependent dynamics
    can be written as extra columns; the parameter rows are forced to the
    identity.
    """

    def __init__(self, A, n_params: int = 0):
        A = np.array(A, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ConfigurationError(f"A must be square, got shape {A.shape}")
        n = A.shape[0] - n_params
        if n < 1:
            raise ConfigurationError("no state left after the parameter block")
        A[n:] = 0.0
        A[n:, n:] = np.eye(n_params)
        A.setflags(write=False)
        self.A = A
        self.layout = Layout.from_sizes([("x", n)])
        self.n_params = n_params

    def step(self, x, t):
        return self.A @ x

    def step_many(self, X, t):
        return self.A @ X

    def jacobian(self, x, t):
        return self.A


class LinearObservation(Observation):
    """``y = H x`` with a fixed diagonal weight ``w``."""

    def __init__(self, H, w):
        H = np.atleast_2d(np.array(H, dtype=float))
        w = np.broadcast_to(np.asarray(w, dtype=float), (H.shape[0],)).copy()
        H.setflags(write=False)
        self.H = H
        self.w = w
        self.output_dim = H.shape[0]

    def observe(self, x, t):
        return self.H @ x

    def observe_many(self, X, t):
        return self.H @ X

    def noise_norm(self, t):
        return self.w.copy()

    def jacobian(self, x, t):
        return self.H
