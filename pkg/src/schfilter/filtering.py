"""Particle-filter building blocks: resampling, tempering, jittering, nudging.

Particles are stored in the ``(anchor state, noise path)`` representation so
that MCMC moves act on the Brownian increments of the current window while
the state at the previous assimilation time stays fixed.

The coordinator-level routines (:func:`bootstrap_assimilate`,
:func:`assimilate_tempered`) only need an ensemble object exposing
``particles``, ``map(fn)``, ``resample(ancestors)`` and ``filter_rng``; see
:mod:`schfilter.ensemble_runtime`.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .gaussian_field import NoisePath, sample_white_increment
from .observing import ess, normalise_log_weights
from .sch_dynamics import ModelState, StepFailure

logger = logging.getLogger(__name__)


class ResamplingError(ValueError):
    pass


class TemperingDegeneracy(RuntimeError):
    """No admissible tempering increment keeps the ESS above threshold."""


@dataclass
class Particle:
    anchor: ModelState
    path: NoisePath
    state: ModelState
    log_like: float = 0.0
    log_girsanov: float = 0.0

    @property
    def log_weight(self) -> float:
        return self.log_like + self.log_girsanov

    def copy(self) -> "Particle":
        return Particle(self.anchor.copy(), self.path.copy(), self.state.copy(),
                        self.log_like, self.log_girsanov)


@dataclass(frozen=True)
class TemperSettings:
    ess_threshold: int = 80
    pcn_delta: float = 0.15
    jitter_steps: int = 5
    max_temper_steps: int = 100
    bisection_tol: float = 1e-3
    min_increment: float = 1e-6

    def __post_init__(self):
        if self.ess_threshold < 1:
            raise ValueError("ess_threshold must be at least 1")
        if not 0 < self.pcn_delta < 2:
            raise ValueError("pcn_delta must lie in (0, 2)")


@dataclass(frozen=True)
class NudgeSettings:
    enabled: bool = True
    max_opt_iters: int = 20
    gtol: float = 1e-6

    def __post_init__(self):
        if self.max_opt_iters < 1:
            raise ValueError("max_opt_iters must be positive")


@dataclass
class StepTrace:
    """Bookkeeping for one assimilation step.

    ``ess_pre`` is the smallest pre-resampling ESS over the tempering stages
    (the single ESS for the bootstrap filter). ``ess_post`` is the ESS of the
    offspring counts of the final resampling, ``N_p^2 / sum(c_i^2)``, which
    measures how many distinct ancestors survived.
    """

    step: int
    n_temper: int = 1
    ess_pre: float = float("nan")
    ess_post: float = float("nan")
    ess_full: float = float("nan")
    theta_schedule: list = field(default_factory=list)
    accept_rate: float = float("nan")
    girsanov_mean: float = 0.0
    min_stage_ess: list = field(default_factory=list)


# ---------------------------------------------------------------- resampling

def systematic_resample(weights, u0: float) -> np.ndarray:
    """Ancestor indices from a single uniform offset ``u0``."""
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise ResamplingError("weights must be a non-empty vector")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
        raise ResamplingError(f"weights must be non-negative and sum to 1 (sum={w.sum()!r})")
    if not 0.0 <= u0 < 1.0:
        raise ResamplingError("u0 must lie in [0, 1)")
    n = w.size
    cum = np.cumsum(w)
    cum[-1] = 1.0
    positions = (u0 + np.arange(n)) / n
    # (u0 + n - 1) / n can round up to exactly 1 when u0 is just below 1
    idx = np.searchsorted(cum, positions, side="right")
    return np.minimum(idx, n - 1).astype(np.intp)


def offspring_counts(ancestors, n: int) -> np.ndarray:
    return np.bincount(np.asarray(ancestors), minlength=n)


# ----------------------------------------------------------------- tempering

def adapt_temper_increment(log_likes, theta_done: float, threshold: float,
                           tol: float = 1e-3, min_increment: float = 1e-6) -> float:
    """Largest increment keeping ``ess(dtheta * log_likes) >= threshold``.

    Returns the full remainder ``1 - theta_done`` when that is admissible,
    otherwise bisects until the bracket is narrower than ``tol`` times its
    upper end. Since increments never exceed 1 this is also within ``tol``
    absolutely, and it still resolves increments much smaller than ``tol``
    instead of falling back to ``min_increment``.
    """
    if not 0.0 <= theta_done < 1.0:
        raise ValueError(f"theta_done must lie in [0, 1), got {theta_done}")
    ll = np.asarray(log_likes, dtype=float)
    ll = ll - np.max(ll)
    remainder = 1.0 - theta_done
    if ess(remainder * ll) >= threshold:
        return remainder
    lo = min(min_increment, remainder)
    if ess(lo * ll) < threshold:
        raise TemperingDegeneracy(
            f"ESS {ess(lo * ll):.2f} < {threshold} even at increment {lo:g}")
    hi = remainder
    while hi - lo > tol * hi:
        mid = 0.5 * (lo + hi)
        if ess(mid * ll) >= threshold:
            lo = mid
        else:
            hi = mid
    return lo


# ----------------------------------------------------------------- jittering

def pcn_coefficients(delta: float):
    return (2.0 - delta) / (2.0 + delta), np.sqrt(8.0 * delta) / (2.0 + delta)


def pcn_propose(path: NoisePath, delta: float, rng, dt: float) -> NoisePath:
    """Prior-preserving Crank-Nicolson move of the Brownian increments."""
    if not 0.0 <= delta < 2.0:
        raise ValueError("delta must lie in [0, 2)")
    a, b = pcn_coefficients(delta)
    fresh = rng.normal(0.0, np.sqrt(dt), size=path.dW.shape)
    return NoisePath(a * path.dW + b * fresh, path.lam.copy())


def log_girsanov_weight(path: NoisePath, mesh, dt: float) -> float:
    """Log Radon-Nikodym factor correcting a nudged path back to the prior.

    The control enters the white-noise increment of cell ``i`` as
    ``Lambda_i * dt`` next to ``dW_i / sqrt(A_i)``, so in terms of the
    driving Brownian motions the drift is ``sqrt(A_i) * Lambda_i``. The
    resulting discrete weight is
    ``-sum_n [ 0.5 * (Lambda^n, Lambda^n) dt + (Lambda^n, dW_h^n) ]``
    with L2 inner products over the DG0 cells.
    """
    areas = mesh.cell_areas
    lam, dW = path.lam, path.dW
    quad = 0.5 * dt * np.sum(areas * lam * lam)
    cross = np.sum(areas * lam * dW / np.sqrt(areas))
    return float(-(quad + cross))


def _girsanov_stage_grad(path: NoisePath, stage: int, mesh, dt: float) -> np.ndarray:
    areas = mesh.cell_areas
    return -(areas * dt * path.lam[stage] + np.sqrt(areas) * path.dW[stage])


def jitter_once(particle: Particle, theta: float, obs, delta: float, rng, model,
                observer, nudging: bool = False):
    """One Metropolis step on the theta-tempered posterior over the noise path.

    Returns ``(particle, accepted)``; the input particle is not modified.
    """
    proposal = pcn_propose(particle.path, delta, rng, model.dt)
    try:
        state = model.evolve(particle.anchor, proposal)
    except StepFailure as exc:
        logger.warning("jitter proposal rejected after step failure: %s", exc)
        rng.random()
        return particle, False
    log_like = observer.log_likelihood(state, obs)
    log_g = log_girsanov_weight(proposal, model.mesh, model.dt) if nudging else 0.0
    log_ratio = theta * ((log_like + log_g) - particle.log_weight)
    if np.log(rng.random()) < log_ratio:
        return Particle(particle.anchor, proposal, state, log_like, log_g), True
    return particle, False


def jitter_chain(particle: Particle, theta: float, obs, settings: TemperSettings, rng,
                 model, observer, nudging: bool = False):
    accepted = 0
    for _ in range(settings.jitter_steps):
        particle, ok = jitter_once(particle, theta, obs, settings.pcn_delta, rng, model,
                                   observer, nudging)
        accepted += ok
    return particle, accepted


# ------------------------------------------------------------------ forecast

def propagate(anchor: ModelState, rng, model, observer, obs) -> Particle:
    """Plain forecast: fresh prior noise, evolve, cache the log-likelihood."""
    path = NoisePath.sample(model.n_steps, model.mesh, model.dt, rng)
    state = model.evolve(anchor, path)
    return Particle(anchor, path, state, observer.log_likelihood(state, obs), 0.0)


def optimize_nudge(anchor: ModelState, obs, settings: NudgeSettings, rng, model,
                   observer) -> Particle:
    """Forecast with controls chosen stage by stage before each noise draw.

    For model step ``n`` the control ``Lambda^n`` maximises the corrected
    log-weight of the window (with later increments still zero), then
    ``dW^n`` is drawn. ``Lambda^n`` therefore only depends on past noise.
    """
    mesh, dt = model.mesh, model.dt
    path = NoisePath.zeros(model.n_steps, mesh.N)
    loss = observer.loss(obs)
    for n in range(model.n_steps):
        if settings.enabled:
            path.lam[n] = _optimise_stage(anchor, path, n, loss, settings, model)
        path.dW[n] = sample_white_increment(mesh, dt, rng)
    state = model.evolve(anchor, path)
    log_g = log_girsanov_weight(path, mesh, dt) if settings.enabled else 0.0
    return Particle(anchor, path, state, observer.log_likelihood(state, obs), log_g)


def nudge_objective(anchor, path: NoisePath, stage: int, loss, model):
    """Negative corrected log-weight and its gradient w.r.t. ``path.lam[stage]``."""
    _, value, grad = model.control_gradient(anchor, path, stage, loss)
    value += log_girsanov_weight(path, model.mesh, model.dt)
    grad = grad + _girsanov_stage_grad(path, stage, model.mesh, model.dt)
    return -value, -grad


def _optimise_stage(anchor, path, stage, loss, settings, model):
    trial = path.copy()

    def f(x):
        trial.lam[stage] = x
        return nudge_objective(anchor, trial, stage, loss, model)

    start = np.zeros(model.mesh.N)
    try:
        f0, _ = f(start)
        res = minimize(f, start, jac=True, method="BFGS",
                       options={"maxiter": settings.max_opt_iters, "gtol": settings.gtol})
    except StepFailure as exc:
        logger.warning("nudge optimisation failed at stage %d (%s); using zero control",
                       stage, exc)
        return start
    if not np.all(np.isfinite(res.x)) or not res.fun <= f0:
        logger.warning("nudge optimisation made no progress at stage %d; using zero control",
                       stage)
        return start
    return res.x


# -------------------------------------------------------------- assimilation

def bootstrap_assimilate(ensemble, obs, step: int = 0) -> StepTrace:
    """Weight by likelihood and resample once."""
    lw = np.array([p.log_like for p in ensemble.particles])
    trace = StepTrace(step, n_temper=1, theta_schedule=[1.0])
    trace.ess_pre = trace.ess_full = ess(lw)
    logger.debug("step %d: ESS before resampling %.2f", step, trace.ess_pre)
    ancestors = systematic_resample(normalise_log_weights(lw), ensemble.filter_rng.random())
    ensemble.resample(ancestors)
    counts = offspring_counts(ancestors, lw.size)
    trace.ess_post = lw.size ** 2 / float(np.sum(counts ** 2))
    trace.min_stage_ess = [trace.ess_pre]
    return trace


def assimilate_tempered(ensemble, obs, settings: TemperSettings, model, observer,
                        nudging: bool = False, step: int = 0) -> StepTrace:
    """Adaptive tempering with resampling and PCN jittering at every stage."""
    trace = StepTrace(step, n_temper=0)
    n = len(ensemble.particles)
    lw0 = np.array([p.log_weight for p in ensemble.particles])
    trace.ess_full = ess(lw0)
    trace.girsanov_mean = float(np.mean([p.log_girsanov for p in ensemble.particles]))
    theta = 0.0
    accepted = proposed = 0
    counts = np.ones(n, dtype=int)
    while theta < 1.0:
        lw = np.array([p.log_weight for p in ensemble.particles])
        if trace.n_temper >= settings.max_temper_steps:
            raise TemperingDegeneracy(
                f"step {step}: exceeded {settings.max_temper_steps} tempering steps "
                f"(theta={theta:.3g}, log-weight spread {np.ptp(lw):.3g})")
        try:
            inc = adapt_temper_increment(lw, theta, settings.ess_threshold,
                                         settings.bisection_tol, settings.min_increment)
        except TemperingDegeneracy as exc:
            raise TemperingDegeneracy(f"step {step}: {exc}") from exc
        new_theta = 1.0 if inc >= 1.0 - theta else theta + inc
        inc = new_theta - theta
        stage_ess = ess(inc * lw)
        trace.min_stage_ess.append(stage_ess)
        ancestors = systematic_resample(normalise_log_weights(inc * lw),
                                        ensemble.filter_rng.random())
        ensemble.resample(ancestors)
        counts = offspring_counts(ancestors, n)
        theta = new_theta
        trace.theta_schedule.append(theta)
        trace.n_temper += 1

        def move(i, particle, rng, theta=theta):
            return jitter_chain(particle, theta, obs, settings, rng, model, observer, nudging)

        results = ensemble.map(move)
        ensemble.particles = [p for p, _ in results]
        accepted += sum(a for _, a in results)
        proposed += n * settings.jitter_steps
    trace.ess_pre = min(trace.min_stage_ess)
    trace.ess_post = n ** 2 / float(np.sum(counts ** 2))
    trace.accept_rate = accepted / proposed if proposed else float("nan")
    return trace
