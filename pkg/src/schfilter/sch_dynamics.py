"""Spatially discrete stochastic Camassa-Holm model and its midpoint stepper."""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .gaussian_field import MaternParams, MaternSmoother, NoisePath
from .grid import FemOperators, Mesh, assemble


class StepFailure(RuntimeError):
    """Newton iteration did not converge."""

    def __init__(self, message, residual=float("nan"), step=None):
        super().__init__(message)
        self.residual = residual
        self.step = step


@dataclass(frozen=True)
class SchParams:
    alpha: float = 1.0
    mu: float = 0.01
    dt: float = 0.025
    n_steps_per_window: int = 5
    newton_tol: float = 1e-9
    newton_max_iters: int = 50
    newton_max_halvings: int = 8

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.mu < 0:
            raise ValueError("mu must be non-negative")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.n_steps_per_window < 1:
            raise ValueError("need at least one model step per window")

    @property
    def window_length(self) -> float:
        return self.dt * self.n_steps_per_window


@dataclass
class ModelState:
    m: np.ndarray
    u: np.ndarray

    def copy(self) -> "ModelState":
        return ModelState(self.m.copy(), self.u.copy())


def helmholtz_solve(m, params: SchParams, ops: FemOperators) -> np.ndarray:
    """Velocity from momentum: ``(M + alpha^2 K) u = M m``."""
    return ops.helmholtz(params.alpha ** 2).solve(ops.mass @ np.asarray(m, dtype=float))


def momentum_from_velocity(u, params: SchParams, ops: FemOperators) -> np.ndarray:
    """Weak-form ``m = u - alpha^2 u_xx``: ``M m = (M + alpha^2 K) u``."""
    u = np.asarray(u, dtype=float)
    return ops.mass_solver.solve(ops.helmholtz(params.alpha ** 2).matvec(u))


class SchModel:
    """Bundle of mesh, operators and parameters with cached factorisations.

    Instances are immutable after construction and can be shared by worker
    threads; every kernel call allocates its own workspace.
    """

    def __init__(self, mesh: Mesh, params: SchParams = SchParams(),
                 matern: MaternParams = MaternParams(), ops: FemOperators = None):
        self.mesh = mesh
        self.params = params
        self.matern = matern
        self.ops = ops if ops is not None else assemble(mesh)
        self.smoother = MaternSmoother(matern, self.ops)
        self._helm = self.ops.helmholtz(params.alpha ** 2)
        self._mass = self.ops.mass_solver

    @property
    def dt(self) -> float:
        return self.params.dt

    @property
    def n_steps(self) -> int:
        return self.params.n_steps_per_window

    def _phys(self):
        p = self.params
        return self.mesh.h, p.alpha ** 2, p.mu, p.dt

    def _newton(self):
        p = self.params
        return (p.newton_tol, p.newton_max_iters, p.newton_max_halvings,
                *self._mass.factors, self._mass.off)

    def state_from_velocity(self, u) -> ModelState:
        u = np.array(u, dtype=float)
        return ModelState(momentum_from_velocity(u, self.params, self.ops), u)

    def helmholtz(self, m) -> np.ndarray:
        return self._helm.solve(self.ops.mass @ np.asarray(m, dtype=float))

    def residual(self, old: ModelState, new: ModelState, dU) -> np.ndarray:
        return _kernels.sch_residual(old.m, old.u, new.m, new.u,
                                     np.asarray(dU, dtype=float), *self._phys())

    def step(self, state: ModelState, dU=None) -> ModelState:
        dU = np.zeros(self.mesh.N) if dU is None else np.ascontiguousarray(dU, dtype=float)
        m1, u1, status, rn, iters = _kernels.sch_step(
            state.m, state.u, dU, *self._phys(), *self._newton())
        if status != _kernels.CONVERGED:
            raise StepFailure(f"Newton failed after {iters} iterations, residual {rn:.3e}",
                              residual=rn)
        return ModelState(m1, u1)

    def trajectory(self, state: ModelState, dUs: np.ndarray):
        """All intermediate states for the smoothed increments ``dUs``."""
        dUs = np.ascontiguousarray(dUs, dtype=float)
        ms, us, status, rn, failed = _kernels.sch_evolve(
            np.ascontiguousarray(state.m, dtype=float),
            np.ascontiguousarray(state.u, dtype=float),
            dUs, *self._phys(), *self._newton())
        if status != _kernels.CONVERGED:
            raise StepFailure(f"Newton failed at step {failed}, residual {rn:.3e}",
                              residual=rn, step=int(failed))
        return ms, us

    def evolve(self, state: ModelState, path: NoisePath) -> ModelState:
        """Propagate ``state`` through every step of ``path``."""
        ms, us = self.trajectory(state, self.smoother.path(path, self.dt))
        return ModelState(ms[-1].copy(), us[-1].copy())

    def control_gradient(self, anchor: ModelState, path: NoisePath, stage: int, loss):
        """Value and gradient of ``loss(final_state)`` w.r.t. ``path.lam[stage]``.

        ``loss`` returns ``(value, d value / d u)`` at the final state. The
        gradient is obtained with one reverse sweep through the stored
        trajectory.
        """
        dUs = self.smoother.path(path, self.dt)
        ms, us = self.trajectory(anchor, dUs)
        final = ModelState(ms[-1].copy(), us[-1].copy())
        value, gu = loss(final)
        g_dU, _, _ = _kernels.sch_adjoint(ms, us, dUs, np.zeros(self.mesh.N),
                                          np.ascontiguousarray(gu, dtype=float),
                                          *self._phys(), stage)
        return final, value, self.smoother.load_transpose(g_dU[stage], self.dt)


def step(state: ModelState, dU, params: SchParams, ops: FemOperators) -> ModelState:
    return SchModel(ops.mesh, params, ops=ops).step(state, dU)


def evolve_window(state: ModelState, path: NoisePath, params: SchParams,
                  matern: MaternParams, ops: FemOperators) -> ModelState:
    return SchModel(ops.mesh, params, matern, ops=ops).evolve(state, path)


def total_momentum(state: ModelState, ops: FemOperators) -> float:
    """Discrete integral of ``m`` over the domain."""
    return float(np.sum(ops.mass @ state.m))


def energy(state: ModelState, params: SchParams, ops: FemOperators) -> float:
    """``||u||^2 + alpha^2 ||u_x||^2``."""
    u = state.u
    return float(u @ (ops.mass @ u) + params.alpha ** 2 * u @ (ops.stiffness @ u))
