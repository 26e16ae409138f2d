"""Space-time white noise on DG0 and its Matern-type elliptic smoothing.

Raw increments are stored unscaled (iid N(0, dt) per cell). The white-noise
function they represent carries a ``1/sqrt(h)`` factor per cell, applied when
the first elliptic stage's load vector is formed.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .grid import FemOperators, Mesh


@dataclass(frozen=True)
class MaternParams:
    kappa: float = 1.0
    eta: float = 1.0
    k_smooth: int = 3

    def __post_init__(self):
        if not (self.kappa > 0 and self.eta > 0):
            raise ValueError("kappa and eta must be positive")
        if int(self.k_smooth) != self.k_smooth or self.k_smooth < 1:
            raise ValueError("k_smooth must be a positive integer")


@dataclass
class NoisePath:
    """Brownian increments and nudging control for one assimilation window.

    Both arrays have shape ``(n_steps, N)``; row ``n`` belongs to model step
    ``n`` of the window.
    """

    dW: np.ndarray
    lam: np.ndarray

    @classmethod
    def zeros(cls, n_steps: int, n_cells: int) -> "NoisePath":
        return cls(np.zeros((n_steps, n_cells)), np.zeros((n_steps, n_cells)))

    @classmethod
    def sample(cls, n_steps: int, mesh: Mesh, dt: float, rng) -> "NoisePath":
        dW = np.stack([sample_white_increment(mesh, dt, rng) for _ in range(n_steps)])
        return cls(dW, np.zeros_like(dW))

    @property
    def n_steps(self) -> int:
        return self.dW.shape[0]

    def copy(self) -> "NoisePath":
        return NoisePath(self.dW.copy(), self.lam.copy())


def sample_white_increment(mesh: Mesh, dt: float, rng: np.random.Generator) -> np.ndarray:
    """iid N(0, dt) cell values for one model step."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    return rng.normal(0.0, np.sqrt(dt), size=mesh.N)


class MaternSmoother:
    """k-stage solve of ``(M + kappa^-2 K) x_j = rhs_j`` with one cached factorisation."""

    def __init__(self, params: MaternParams, ops: FemOperators):
        self.params = params
        self.ops = ops
        self.system = ops.helmholtz(params.kappa ** -2)

    def _factors(self):
        return (*self.system.factors, self.system.off, self.ops.mesh.h)

    def cascade(self, load: np.ndarray) -> np.ndarray:
        return _kernels.smooth_cascade(np.ascontiguousarray(load, dtype=float),
                                       self.params.k_smooth, *self._factors())

    def __call__(self, w, lambda_n, dt):
        return smooth_increment(w, lambda_n, dt, self.params, self.ops, smoother=self)

    def path(self, path: NoisePath, dt: float) -> np.ndarray:
        """Smoothed increments for every step of ``path``; shape ``(n_steps, N)``."""
        return _kernels.smooth_path(
            np.ascontiguousarray(path.dW, dtype=float),
            np.ascontiguousarray(path.lam, dtype=float),
            dt, self.params.eta, self.params.k_smooth, *self._factors())

    def load_transpose(self, g: np.ndarray, dt: float) -> np.ndarray:
        """Pull back a derivative w.r.t. the smoothed increment onto the control.

        The cascade operator is symmetric, so its transpose is itself.
        """
        back = self.cascade(g)
        return self.params.eta * dt * _kernels.dg0_load_transpose(back, self.ops.mesh.h)


def smooth_increment(w, lambda_n, dt: float, params: MaternParams, ops: FemOperators,
                     smoother: MaternSmoother = None) -> np.ndarray:
    """Smooth one DG0 white-noise increment (plus optional control) into P1.

    Parameters
    ----------
    w : array (N,)
        Raw Brownian increments per cell, N(0, dt) distributed.
    lambda_n : array (N,) or None
        DG0 control values; enters the first stage as ``lambda_n * dt``.
    """
    mesh = ops.mesh
    w = np.asarray(w, dtype=float)
    lam = np.zeros(mesh.N) if lambda_n is None else np.asarray(lambda_n, dtype=float)
    if w.shape != (mesh.N,) or lam.shape != (mesh.N,):
        raise ValueError("increment and control must be DG0 fields on the mesh")
    if smoother is None:
        smoother = MaternSmoother(params, ops)
    cells = params.eta * (w / np.sqrt(mesh.h) + lam * dt)
    return smoother.cascade(ops.mixed_mass @ cells)
