"""Batch-parallel execution of per-particle work and the resampling exchange.

Per-particle randomness comes from counter-based Philox streams keyed by
``(seed, purpose, slot, window)``. Work for one slot always consumes its own
stream in the same order, so results do not depend on how slots are grouped
into batches or on thread interleaving.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .filtering import (assimilate_tempered, bootstrap_assimilate, optimize_nudge,
                        propagate, NudgeSettings, TemperSettings)

logger = logging.getLogger(__name__)

# stream purposes
FILTER = 0
PARTICLE = 1
TRUTH = 2
INIT = 3
OBSERVATION = 4

MODES = ("bootstrap", "tempered", "nudged")


def random_stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``(seed, key)``; identical inputs replay exactly."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


class ParticleError(RuntimeError):
    def __init__(self, index, cause):
        super().__init__(f"particle {index} failed: {type(cause).__name__}: {cause}")
        self.index = index
        self.cause = cause


@dataclass(frozen=True)
class EnsembleLayout:
    n_particles: int
    n_batches: int = 1

    def __post_init__(self):
        if self.n_particles < 1 or self.n_batches < 1:
            raise ValueError("need at least one particle and one batch")
        if self.n_batches > self.n_particles:
            raise ValueError("more batches than particles")

    @property
    def batches(self):
        return [b.tolist() for b in np.array_split(np.arange(self.n_particles), self.n_batches)]

    @property
    def assignment(self) -> np.ndarray:
        out = np.empty(self.n_particles, dtype=int)
        for k, batch in enumerate(self.batches):
            out[batch] = k
        return out


class Ensemble:
    """Particles plus the machinery to run work on them batch by batch."""

    def __init__(self, particles, layout: EnsembleLayout, seed: int):
        if len(particles) != layout.n_particles:
            raise ValueError("layout does not match the number of particles")
        self.particles = list(particles)
        self.layout = layout
        self.seed = int(seed)
        self.transfers = 0
        self._pool = ThreadPoolExecutor(layout.n_batches) if layout.n_batches > 1 else None
        self.begin_window(0)

    def begin_window(self, window: int):
        self.window = window
        self.rngs = [random_stream(self.seed, PARTICLE, i, window)
                     for i in range(self.layout.n_particles)]
        self.filter_rng = random_stream(self.seed, FILTER, window)

    def map(self, fn):
        """Apply ``fn(index, particle, rng)`` to every particle; results in index order."""
        def run_batch(indices):
            out = []
            for i in indices:
                try:
                    out.append(fn(i, self.particles[i], self.rngs[i]))
                except Exception as exc:
                    raise ParticleError(i, exc) from exc
            return out

        batches = self.layout.batches
        if self._pool is None:
            chunks = [run_batch(b) for b in batches]
        else:
            chunks = list(self._pool.map(run_batch, batches))
        results = [None] * self.layout.n_particles
        for batch, chunk in zip(batches, chunks):
            for i, r in zip(batch, chunk):
                results[i] = r
        return results

    def resample(self, ancestors):
        return exchange_resample(self, ancestors)

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def exchange_resample(ensemble, ancestors) -> int:
    """Replace particle ``i`` by a copy of particle ``ancestors[i]``.

    Copies are taken from the pre-resampling ensemble; slots whose ancestor
    is themselves are left untouched. Returns the number of transfers.
    """
    anc = np.asarray(ancestors)
    n = len(ensemble.particles)
    if anc.shape != (n,) or anc.dtype.kind not in "iu":
        raise IndexError("ancestors must be an integer vector with one entry per particle")
    if np.any(anc < 0) or np.any(anc >= n):
        raise IndexError("ancestor index out of range")
    old = ensemble.particles
    new = list(old)
    moved = 0
    for i, a in enumerate(anc):
        if a != i:
            new[i] = old[a].copy()
            moved += 1
    ensemble.particles = new
    ensemble.transfers = getattr(ensemble, "transfers", 0) + moved
    return moved


def run_window(ensemble: Ensemble, obs, mode: str, model, observer, window: int,
               temper: TemperSettings = TemperSettings(),
               nudge: NudgeSettings = NudgeSettings()):
    """Forecast every particle over one window and assimilate ``obs``."""
    if mode not in MODES:
        raise ValueError(f"unknown filter mode {mode!r}")
    ensemble.begin_window(window)
    if mode == "nudged":
        def forecast(i, p, rng):
            return optimize_nudge(p.state, obs, nudge, rng, model, observer)
    else:
        def forecast(i, p, rng):
            return propagate(p.state, rng, model, observer, obs)
    ensemble.particles = ensemble.map(forecast)
    if mode == "bootstrap":
        return bootstrap_assimilate(ensemble, obs, step=window)
    return assimilate_tempered(ensemble, obs, temper, model, observer,
                               nudging=(mode == "nudged"), step=window)
