"""Run configuration, ensemble initialisation, truth generation and the run loop."""

import csv
import dataclasses
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import diagnostics
from .ensemble_runtime import (INIT, MODES, OBSERVATION, TRUTH, Ensemble, EnsembleLayout,
                               random_stream, run_window)
from .filtering import NudgeSettings, Particle, TemperSettings
from .gaussian_field import MaternParams, NoisePath
from .grid import Mesh, assemble
from .observing import ObsConfig, Observer, write_observations
from .sch_dynamics import ModelState, SchModel, SchParams, momentum_from_velocity

logger = logging.getLogger(__name__)

SEED_ENV = "SCHFILTER_SEED"


@dataclass
class RunConfig:
    """Every knob of a run, flat so it round-trips through a key-value file."""

    experiment: int = 1
    L: float = 40.0
    N: int = 100
    alpha: float = 1.0
    mu: float = 0.01
    dt: float = 0.025
    n_steps_per_window: int = 5
    kappa: float = 1.0
    eta: float = 1.0
    k_smooth: int = 3
    obs_count: int = 81
    obs_extent: float = 40.0
    obs_variance: float = 0.5
    ess_threshold: int = 80
    pcn_delta: float = 0.15
    jitter_steps: int = 5
    max_temper_steps: int = 100
    nudge_enabled: bool = True
    nudge_max_iters: int = 20
    nudge_gtol: float = 1e-6
    n_particles: int = 150
    n_batches: int = 1
    seed: int = 2024
    n_assim_steps: int = 1000
    mode: str = "tempered"
    snapshot_steps: list = field(default_factory=lambda: [1, 100, 500, 1000])
    newton_tol: float = 1e-9
    newton_max_iters: int = 50

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.obs_extent > self.L:
            raise ValueError("observation extent exceeds the domain")
        self.snapshot_steps = sorted(int(s) for s in self.snapshot_steps)
        # constructing the components runs their own validation
        self.mesh, self.sch, self.matern, self.obs, self.temper, self.nudge, self.layout

    @classmethod
    def experiment1(cls, **overrides) -> "RunConfig":
        base = dict(experiment=1, obs_count=81, obs_extent=40.0, n_assim_steps=1000,
                    snapshot_steps=[1, 100, 500, 1000])
        return cls(**{**base, **overrides})

    @classmethod
    def experiment2(cls, **overrides) -> "RunConfig":
        base = dict(experiment=2, obs_count=41, obs_extent=20.0, n_assim_steps=2000,
                    snapshot_steps=[100, 500, 1000, 2000])
        return cls(**{**base, **overrides})

    @property
    def mesh(self) -> Mesh:
        return Mesh(self.L, self.N)

    @property
    def sch(self) -> SchParams:
        return SchParams(self.alpha, self.mu, self.dt, self.n_steps_per_window,
                         newton_tol=self.newton_tol, newton_max_iters=self.newton_max_iters)

    @property
    def matern(self) -> MaternParams:
        return MaternParams(self.kappa, self.eta, self.k_smooth)

    @property
    def obs(self) -> ObsConfig:
        return ObsConfig.equispaced(self.obs_count, self.obs_extent,
                                    np.sqrt(self.obs_variance), self.n_steps_per_window)

    @property
    def temper(self) -> TemperSettings:
        return TemperSettings(self.ess_threshold, self.pcn_delta, self.jitter_steps,
                              self.max_temper_steps)

    @property
    def nudge(self) -> NudgeSettings:
        return NudgeSettings(self.nudge_enabled, self.nudge_max_iters, self.nudge_gtol)

    @property
    def layout(self) -> EnsembleLayout:
        return EnsembleLayout(self.n_particles, self.n_batches)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def load_config(path, **overrides) -> RunConfig:
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ValueError("config file must be a flat key-value mapping")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    data.update({k: v for k, v in overrides.items() if v is not None})
    if SEED_ENV in os.environ:
        data["seed"] = int(os.environ[SEED_ENV])
    return RunConfig(**data)


def save_config(cfg: RunConfig, path):
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


# ---------------------------------------------------------------- initial data

def initialize_particle(rng: np.random.Generator, model: SchModel) -> ModelState:
    """Random smooth non-negative initial velocity.

    A DG0 field with N(0, h) cell values is rectified and passed through
    three unit-coefficient Helmholtz solves on the periodic mesh; the result
    is scaled by ``a^2`` and shifted by ``b^2`` with ``a, b ~ N(0, 1)``.
    """
    mesh, ops = model.mesh, model.ops
    w = rng.normal(0.0, np.sqrt(mesh.h), size=mesh.N)
    a, b = rng.normal(size=2)
    return ModelState(*_initial_fields(np.abs(w), a, b, model))


def _initial_fields(w_abs, a, b, model):
    ops = model.ops
    system = ops.helmholtz(1.0)
    U = system.solve(ops.mixed_mass @ w_abs)
    for _ in range(2):
        U = system.solve(ops.mass @ U)
    u = a * a * U + b * b
    return momentum_from_velocity(u, model.params, ops), u


def initial_ensemble(cfg: RunConfig, model: SchModel):
    states = [initialize_particle(random_stream(cfg.seed, INIT, i), model)
              for i in range(cfg.n_particles)]
    zero = NoisePath.zeros(model.n_steps, model.mesh.N)
    return [Particle(s, zero.copy(), s.copy()) for s in states]


def generate_truth(cfg: RunConfig, model: SchModel, observer: Observer):
    """Truth states at assimilation times 0..n and noisy observations 1..n."""
    state = initialize_particle(random_stream(cfg.seed, TRUTH, 0), model)
    states = [state]
    records = []
    for w in range(1, cfg.n_assim_steps + 1):
        path = NoisePath.sample(model.n_steps, model.mesh, model.dt,
                                random_stream(cfg.seed, TRUTH, w))
        state = model.evolve(state, path)
        states.append(state)
        records.append(observer.synthesize(state, w, random_stream(cfg.seed, OBSERVATION, w)))
    return states, records


def build(cfg: RunConfig):
    mesh = cfg.mesh
    model = SchModel(mesh, cfg.sch, cfg.matern, assemble(mesh))
    return model, Observer(cfg.obs, mesh)


# ---------------------------------------------------------------- run loop

TRACE_COLUMNS = ["step", "n_temper", "ess_pre", "ess_post", "theta_schedule",
                 "accept_rate", "girsanov_mean"]


def _write_snapshot(path, step, model, truth, particles):
    ens = np.array([p.state.u for p in particles])
    with Path(path).open("w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["x", "truth", "mean"] + [f"p{i}" for i in range(len(particles))])
        for j, x in enumerate(model.mesh.nodes):
            out.writerow([repr(float(x)), repr(float(truth.u[j])), repr(float(ens[:, j].mean()))]
                         + [repr(float(v)) for v in ens[:, j]])


def run_experiment(cfg: RunConfig, out_dir, progress: bool = False) -> Path:
    """Run one filter configuration end to end and write its artefacts to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    model, observer = build(cfg)
    truth, records = generate_truth(cfg, model, observer)
    write_observations(out / "observations.csv", records, cfg.obs)
    with (out / "truth.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step"] + [f"u{j}" for j in range(cfg.N)])
        for k, s in enumerate(truth):
            w.writerow([k] + [repr(float(v)) for v in s.u])

    mass = model.ops.mass
    stats = diagnostics.StatsWriter(out / "diagnostics.csv")
    trace_fh = (out / "trace.csv").open("w", newline="")
    trace_out = csv.writer(trace_fh)
    trace_out.writerow(TRACE_COLUMNS)
    snapshots = set(cfg.snapshot_steps)
    started = time.time()
    with Ensemble(initial_ensemble(cfg, model), cfg.layout, cfg.seed) as ens:
        u0 = [p.state.u for p in ens.particles]
        stats.write(diagnostics.step_stats(0, truth[0].u, u0, mass))
        if 0 in snapshots:
            _write_snapshot(out / "snapshot_0000.csv", 0, model, truth[0], ens.particles)
        step = 0
        try:
            for step in range(1, cfg.n_assim_steps + 1):
                tr = run_window(ens, records[step - 1], cfg.mode, model, observer, step,
                                cfg.temper, cfg.nudge)
                ensemble_u = [p.state.u for p in ens.particles]
                stats.write(diagnostics.step_stats(step, truth[step].u, ensemble_u, mass,
                                                   tr.ess_pre, tr.n_temper))
                trace_out.writerow([step, tr.n_temper, repr(tr.ess_pre), repr(tr.ess_post),
                                    ";".join(repr(float(t)) for t in tr.theta_schedule),
                                    repr(tr.accept_rate), repr(tr.girsanov_mean)])
                trace_fh.flush()
                if step in snapshots:
                    _write_snapshot(out / f"snapshot_{step:04d}.csv", step, model, truth[step],
                                    ens.particles)
                if progress and step % 10 == 0:
                    logger.info("step %d/%d  n_temper=%d  %.1fs", step, cfg.n_assim_steps,
                                tr.n_temper, time.time() - started)
        except Exception:
            logger.error("run aborted at assimilation step %d; diagnostics up to step %d "
                         "are in %s", step, step - 1, out)
            raise
        finally:
            stats.close()
            trace_fh.close()
    return out
