"""Point observations of the velocity field, likelihoods and ESS."""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .grid import Mesh, interpolation_matrix


@dataclass(frozen=True)
class ObsConfig:
    points: np.ndarray
    sigma: np.ndarray
    steps_between_obs: int = 5

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        sig = np.broadcast_to(np.asarray(self.sigma, dtype=float), pts.shape).copy()
        if pts.ndim != 1 or pts.size == 0:
            raise ValueError("need a non-empty 1D array of observation points")
        if np.any(np.diff(pts) <= 0):
            raise ValueError("observation points must be strictly increasing")
        if np.any(sig <= 0):
            raise ValueError("observation noise std must be positive")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "sigma", sig)

    @property
    def M(self) -> int:
        return self.points.size

    @classmethod
    def equispaced(cls, n_points: int, extent: float, sigma: float,
                   steps_between_obs: int = 5) -> "ObsConfig":
        """``n_points`` at ``j*extent/n_points``, j = 0..n_points-1."""
        return cls(np.arange(n_points) * extent / n_points, sigma, steps_between_obs)


@dataclass
class ObsRecord:
    t_index: int
    values: np.ndarray


class Observer:
    """Observation operator bound to a mesh; the interpolation matrix is cached."""

    def __init__(self, cfg: ObsConfig, mesh: Mesh):
        if np.any(cfg.points < 0) or np.any(cfg.points >= mesh.L):
            raise ValueError(f"observation points must lie in [0, {mesh.L})")
        self.cfg = cfg
        self.mesh = mesh
        self.P = interpolation_matrix(cfg.points, mesh)
        self._inv_var = 1.0 / cfg.sigma ** 2

    def observe(self, state) -> np.ndarray:
        return self.P @ state.u

    def log_likelihood(self, state, obs: ObsRecord) -> float:
        r = self.observe(state) - obs.values
        return float(-0.5 * np.sum(r * r * self._inv_var))

    def loss(self, obs: ObsRecord):
        """Callable returning ``(log_likelihood, d log_likelihood / d u)``."""
        def f(state):
            r = self.observe(state) - obs.values
            return float(-0.5 * np.sum(r * r * self._inv_var)), -(self.P.T @ (r * self._inv_var))
        return f

    def synthesize(self, truth, t_index: int, rng: np.random.Generator) -> ObsRecord:
        clean = self.observe(truth)
        return ObsRecord(t_index, clean + self.cfg.sigma * rng.standard_normal(clean.size))


def observe(state, cfg: ObsConfig, mesh: Mesh) -> np.ndarray:
    return Observer(cfg, mesh).observe(state)


def synthesize_observation(truth, cfg: ObsConfig, mesh: Mesh, rng, t_index: int = 0) -> ObsRecord:
    return Observer(cfg, mesh).synthesize(truth, t_index, rng)


def log_likelihood(state, obs: ObsRecord, cfg: ObsConfig, mesh: Mesh) -> float:
    return Observer(cfg, mesh).log_likelihood(state, obs)


def normalise_log_weights(log_weights) -> np.ndarray:
    lw = np.asarray(log_weights, dtype=float)
    if not np.any(np.isfinite(lw)):
        raise ValueError("all log-weights are -inf")
    return np.exp(lw - logsumexp(lw))


def ess(log_weights) -> float:
    """Effective sample size ``1 / sum(w_bar^2)`` of unnormalised log-weights."""
    w = normalise_log_weights(log_weights)
    return float(1.0 / np.sum(w * w))


def write_observations(path, records, cfg: ObsConfig):
    path = Path(path)
    with path.open("w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["step", "point_index", "x", "value"])
        for rec in records:
            for j, (x, y) in enumerate(zip(cfg.points, rec.values)):
                out.writerow([rec.t_index, j, repr(float(x)), repr(float(y))])


def read_observations(path):
    rows = {}
    with Path(path).open() as fh:
        for row in csv.DictReader(fh):
            rows.setdefault(int(row["step"]), []).append((int(row["point_index"]), float(row["value"])))
    records = []
    for step in sorted(rows):
        vals = sorted(rows[step])
        records.append(ObsRecord(step, np.array([v for _, v in vals])))
    return records
