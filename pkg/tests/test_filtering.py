from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from schfilter.ensemble_runtime import Ensemble, EnsembleLayout, random_stream
from schfilter.filtering import (NudgeSettings, Particle, ResamplingError,
                                 TemperingDegeneracy, TemperSettings, _optimise_stage,
                                 adapt_temper_increment, assimilate_tempered,
                                 bootstrap_assimilate, jitter_once, log_girsanov_weight,
                                 nudge_objective, offspring_counts, optimize_nudge,
                                 pcn_coefficients, pcn_propose, propagate,
                                 systematic_resample)
from schfilter.gaussian_field import MaternParams, NoisePath
from schfilter.grid import Mesh
from schfilter.observing import ObsConfig, ObsRecord, Observer, ess
from schfilter.sch_dynamics import ModelState, SchModel, SchParams, StepFailure

from oracles import (central_difference, plain_moment, scalar_sde_paths,
                     tempered_gaussian_posterior, weighted_moment)


# ---------------------------------------------------------------- resampling

def test_resample_uniform_weights_identity():
    w = np.full(10, 0.1)
    np.testing.assert_array_equal(systematic_resample(w, 0.5), np.arange(10))


def test_resample_point_mass():
    w = np.zeros(6)
    w[4] = 1.0
    assert np.all(systematic_resample(w, 0.3) == 4)


def test_resample_four_particle_example():
    w = np.array([0.5, 0.25, 0.125, 0.125])
    rng = np.random.default_rng(44)
    counts = np.array([offspring_counts(systematic_resample(w, u), 4) for u in rng.random(10_000)])
    assert np.all(counts.sum(axis=1) == 4)
    assert set(counts[:, 0]) <= {2, 3} and set(counts[:, 1]) == {1}
    assert set(counts[:, 2]) <= {0, 1} and set(counts[:, 3]) <= {0, 1}
    np.testing.assert_allclose(counts.mean(axis=0), 4 * w, rtol=0.02)


def test_resample_offset_next_to_one():
    u0 = np.nextafter(1.0, 0.0)
    anc = systematic_resample(np.array([0.5, 0.5]), u0)
    np.testing.assert_array_equal(anc, [0, 1])


def test_resample_rejects_bad_input():
    with pytest.raises(ResamplingError):
        systematic_resample(np.array([0.5, 0.6]), 0.1)
    with pytest.raises(ResamplingError):
        systematic_resample(np.array([1.5, -0.5]), 0.1)
    with pytest.raises(ResamplingError):
        systematic_resample(np.array([0.5, 0.5]), 1.0)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 60), elements=st.floats(0, 1)),
       st.floats(0, 1, exclude_max=True))
def test_resample_count_bounds(raw, u0):
    if raw.sum() == 0:
        raw = np.ones_like(raw)
    w = raw / raw.sum()
    w[-1] = 1.0 - w[:-1].sum()
    if w[-1] < 0:
        return
    n = w.size
    c = offspring_counts(systematic_resample(w, u0), n)
    assert c.sum() == n
    # n * w is only known to rounding accuracy
    assert np.all(c >= np.floor(n * w - 1e-9))
    assert np.all(c <= np.floor(n * w + 1e-9) + 1)
    assert np.all(c[w == 0] == 0)


def test_resample_unbiased_counts():
    rng = np.random.default_rng(0)
    w = rng.dirichlet(np.ones(20))
    u0 = rng.random(10_000)
    mean = np.mean([offspring_counts(systematic_resample(w, u), 20) for u in u0], axis=0)
    # 2% of the expected count, or of one particle for weights below 1/N
    assert np.all(np.abs(mean - 20 * w) <= 0.02 * np.maximum(20 * w, 1))


# ----------------------------------------------------------------- tempering

def test_temper_full_step_when_admissible():
    assert adapt_temper_increment(np.zeros(150), 0.0, 80) == 1.0
    assert adapt_temper_increment(np.zeros(150), 0.6, 80) == pytest.approx(0.4)


def test_temper_matches_grid_scan():
    rng = np.random.default_rng(1)
    ll = -0.5 * rng.chisquare(30, size=150) * 3
    inc = adapt_temper_increment(ll, 0.0, 80, tol=1e-4)
    grid = np.linspace(1e-6, 1.0, 4001)
    scan = max(g for g in grid if ess(g * ll) >= 80)
    assert ess(inc * ll) >= 80
    assert abs(inc - scan) <= 1e-4 + (grid[1] - grid[0])


def test_temper_boundary():
    rng = np.random.default_rng(12)
    for _ in range(20):
        ll = -0.5 * rng.chisquare(20, size=150) * rng.uniform(1, 20)
        if ess(ll) >= 80:
            continue
        inc = adapt_temper_increment(ll, 0.0, 80)
        assert ess(inc * ll) >= 80
        assert ess((inc + 1e-3) * ll) < 80


def test_temper_resolves_small_increments():
    rng = np.random.default_rng(13)
    ll = -rng.uniform(0, 7000, size=150)
    inc = adapt_temper_increment(ll, 0.0, 80)
    grid = np.geomspace(1e-6, 1e-2, 4001)
    scan = max(g for g in grid if ess(g * ll) >= 80)
    assert inc == pytest.approx(scan, rel=3e-3)
    assert inc > 100 * 1e-6


def test_temper_degenerate_raises():
    ll = np.zeros(150)
    ll[0] = 1e12
    with pytest.raises(TemperingDegeneracy):
        adapt_temper_increment(ll, 0.0, 80)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 50, elements=st.floats(-200, 0)), st.floats(0, 0.9))
def test_temper_increment_keeps_ess(ll, done):
    try:
        inc = adapt_temper_increment(ll, done, 25)
    except TemperingDegeneracy:
        return
    assert 0 < inc <= 1 - done + 1e-15
    assert ess(inc * ll) >= 25


# ----------------------------------------------------------------------- PCN

@pytest.mark.parametrize("delta", [0.05, 0.15, 0.5, 1.0])
def test_pcn_identity(delta):
    a, b = pcn_coefficients(delta)
    assert a * a + b * b == pytest.approx(1.0, abs=4e-16)


def test_pcn_preserves_prior():
    rng = np.random.default_rng(5)
    dt = 0.025
    x = NoisePath(rng.normal(0, np.sqrt(dt), size=(1, 10_000)), np.zeros((1, 10_000)))
    y = pcn_propose(x, 0.15, rng, dt)
    assert y.dW.var() == pytest.approx(dt, rel=0.05)
    a, _ = pcn_coefficients(0.15)
    assert np.corrcoef(x.dW[0], y.dW[0])[0, 1] == pytest.approx(a, abs=0.02)


def test_pcn_small_delta_keeps_path(rng):
    x = NoisePath.sample(3, Mesh(4.0, 4), 0.1, rng)
    np.testing.assert_array_equal(pcn_propose(x, 0.0, rng, 0.1).dW, x.dW)
    assert np.max(np.abs(pcn_propose(x, 1e-12, rng, 0.1).dW - x.dW)) < 1e-5


def test_pcn_delta_validated(rng):
    with pytest.raises(ValueError):
        pcn_propose(NoisePath.zeros(1, 4), 2.0, rng, 0.1)


class ScalarModel:
    """Window state is the sum of every cell increment; prior N(0, n dt)."""

    def __init__(self, n_steps=1, dt=0.025):
        self.mesh = Mesh(4.0, 4)
        self.dt = dt
        self.n_steps = n_steps

    def evolve(self, anchor, path):
        x = anchor.u + path.dW.sum()
        return ModelState(x, x)


class ScalarObserver:
    def __init__(self, var):
        self.var = var

    def log_likelihood(self, state, obs):
        return float(-0.5 * (state.u[0] - obs.values[0]) ** 2 / self.var)


@pytest.mark.parametrize("theta", [0.3, 1.0])
def test_jitter_targets_tempered_posterior(theta):
    model, observer = ScalarModel(), ScalarObserver(0.05)
    obs = ObsRecord(1, np.array([0.4]))
    anchor = ModelState(np.zeros(1), np.zeros(1))
    rng = np.random.default_rng(9)
    path = NoisePath.sample(1, model.mesh, model.dt, rng)
    state = model.evolve(anchor, path)
    p = Particle(anchor, path, state, observer.log_likelihood(state, obs))
    xs = np.empty(100_000)
    for k in range(xs.size):
        p, _ = jitter_once(p, theta, obs, 0.5, rng, model, observer)
        xs[k] = p.state.u[0]
    mean, var = tempered_gaussian_posterior(4 * model.dt, 0.4, 0.05, theta)
    # batch means give an error bar that accounts for autocorrelation
    batches = xs[5000:].reshape(95, -1).mean(axis=1)
    se = batches.std(ddof=1) / np.sqrt(batches.size)
    assert abs(xs[5000:].mean() - mean) < 4 * se + 1e-3
    assert xs[5000:].var() == pytest.approx(var, rel=0.05)


# ------------------------------------------------------------------ girsanov

def test_girsanov_single_cell_value():
    mesh = Mesh(40.0, 100)
    path = NoisePath.zeros(1, mesh.N)
    path.lam[0, 7] = 1.0
    assert log_girsanov_weight(path, mesh, 0.025) == pytest.approx(-0.005)


def test_girsanov_zero_control_is_zero(rng):
    mesh = Mesh(40.0, 100)
    path = NoisePath.sample(5, mesh, 0.025, rng)
    assert log_girsanov_weight(path, mesh, 0.025) == 0.0


def test_girsanov_dense_quadrature(rng):
    """Midpoint quadrature of the continuum integrals on a refined sub-grid."""
    mesh, dt = Mesh(40.0, 10), 0.05
    path = NoisePath(rng.normal(size=(3, 10)), rng.normal(size=(3, 10)))
    sub = 64
    lam_fine = np.repeat(path.lam, sub, axis=1)
    # white-noise density of cell i is dW_i / sqrt(h) on every sub-interval
    xi_fine = np.repeat(path.dW / np.sqrt(mesh.h), sub, axis=1)
    dx = mesh.h / sub
    quad = -np.sum(0.5 * dt * lam_fine ** 2 * dx + lam_fine * xi_fine * dx)
    assert log_girsanov_weight(path, mesh, dt) == pytest.approx(quad, rel=1e-12)


def test_girsanov_scalar_importance_identity():
    rng = np.random.default_rng(21)
    x_plain, _ = scalar_sde_paths(20_000, rng, nudged=False)
    x_nudged, logw = scalar_sde_paths(20_000, rng, nudged=True)
    assert np.exp(logw).mean() == pytest.approx(1.0, abs=0.02)
    assert abs(x_nudged.mean() - x_plain.mean()) > 0.1
    for power in (1, 2):
        a, sa = plain_moment(x_plain ** power)
        b, sb = weighted_moment(x_nudged ** power, logw)
        assert abs(a - b) < 3 * np.hypot(sa, sb)


def test_girsanov_identity_with_model_coupling():
    """Localised control through the real smoother and stepper on a small mesh."""
    mesh = Mesh(40.0, 16)
    model = SchModel(mesh, SchParams(n_steps_per_window=2))
    anchor = model.state_from_velocity(1.0 + 0.3 * np.cos(2 * np.pi * mesh.nodes / mesh.L))
    rng = np.random.default_rng(3)
    n = 8000

    def sample(nudged):
        out, logw = np.empty(n), np.zeros(n)
        for k in range(n):
            path = NoisePath.sample(2, mesh, model.dt, rng)
            if nudged:
                path.lam[:, 2:5] = 1.0
                logw[k] = log_girsanov_weight(path, mesh, model.dt)
            out[k] = model.evolve(anchor, path).u[3]
        return out, logw

    xp, _ = sample(False)
    xn, lw = sample(True)
    assert abs(xp.mean() - xn.mean()) > 5 * xp.std() / np.sqrt(n)  # the nudge is visible
    a, sa = plain_moment(xp)
    b, sb = weighted_moment(xn, lw)
    assert abs(a - b) < 3 * np.hypot(sa, sb)


# ------------------------------------------------------------------- nudging

def small_problem(seed):
    mesh = Mesh(40.0, 16)
    model = SchModel(mesh, SchParams(n_steps_per_window=2), MaternParams())
    rng = np.random.default_rng(seed)
    u = 1.0 + 0.3 * np.cos(2 * np.pi * mesh.nodes / mesh.L) + 0.05 * rng.normal(size=16)
    anchor = model.state_from_velocity(u)
    cfg = ObsConfig.equispaced(8, 40.0, np.sqrt(0.5))
    observer = Observer(cfg, mesh)
    obs = ObsRecord(1, observer.observe(anchor) + rng.normal(size=8))
    path = NoisePath(rng.normal(0, np.sqrt(model.dt), (2, 16)), rng.normal(size=(2, 16)))
    return model, observer, anchor, obs, path


@pytest.mark.parametrize("seed,stage", [(0, 0), (1, 1), (2, 0)])
def test_nudge_gradient_matches_finite_differences(seed, stage):
    model, observer, anchor, obs, path = small_problem(seed)
    loss = observer.loss(obs)
    _, g = nudge_objective(anchor, path, stage, loss, model)

    def f(lam):
        trial = path.copy()
        trial.lam[stage] = lam
        return nudge_objective(anchor, trial, stage, loss, model)[0]

    fd = central_difference(f, path.lam[stage].copy())
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) <= 1e-5


def test_nudge_objective_value(rng):
    model, observer, anchor, obs, path = small_problem(4)
    value, _ = nudge_objective(anchor, path, 0, observer.loss(obs), model)
    final = model.evolve(anchor, path)
    expected = observer.log_likelihood(final, obs) + log_girsanov_weight(path, model.mesh,
                                                                         model.dt)
    assert value == pytest.approx(-expected, rel=1e-12)


def test_optimised_control_is_stationary():
    model, observer, anchor, obs, path = small_problem(5)
    path.lam[:] = 0.0
    settings = NudgeSettings(max_opt_iters=200, gtol=1e-9)
    lam = _optimise_stage(anchor, path, 0, observer.loss(obs), settings, model)
    trial = path.copy()
    trial.lam[0] = lam
    f_opt, g = nudge_objective(anchor, trial, 0, observer.loss(obs), model)
    f0, g0 = nudge_objective(anchor, path, 0, observer.loss(obs), model)
    assert f_opt < f0
    assert np.linalg.norm(g) < 1e-4 * np.linalg.norm(g0)


class LinearModel:
    """Final velocity is ``G @ Lambda^0 + c``; lets the optimum be computed exactly."""

    def __init__(self, G, c, mesh, dt):
        self.G, self.c, self.mesh, self.dt = G, c, mesh, dt

    def control_gradient(self, anchor, path, stage, loss):
        u = self.G @ path.lam[stage] + self.c
        value, gu = loss(ModelState(u, u))
        return ModelState(u, u), value, self.G.T @ gu


def test_nudge_quadratic_surrogate_closed_form():
    rng = np.random.default_rng(8)
    mesh, dt = Mesh(8.0, 8), 0.1
    G = rng.normal(size=(8, 8)) * 0.3
    c = rng.normal(size=8)
    P = rng.normal(size=(3, 8))
    y, s2 = rng.normal(size=3), 0.5

    def loss(state):
        r = P @ state.u - y
        return -0.5 * r @ r / s2, -(P.T @ r) / s2

    path = NoisePath(rng.normal(0, np.sqrt(dt), (1, 8)), np.zeros((1, 8)))
    model = LinearModel(G, c, mesh, dt)
    lam = _optimise_stage(None, path, 0, loss, NudgeSettings(max_opt_iters=500, gtol=1e-10),
                          model)
    # stationarity of  -|P(G lam + c) - y|^2 / (2 s2) - 0.5 h dt |lam|^2 - sqrt(h) lam.dW
    H = G.T @ P.T @ P @ G / s2 + mesh.h * dt * np.eye(8)
    rhs = G.T @ P.T @ (y - P @ c) / s2 - np.sqrt(mesh.h) * path.dW[0]
    np.testing.assert_allclose(lam, np.linalg.solve(H, rhs), rtol=1e-5, atol=1e-7)


def test_disabled_nudge_equals_plain_forecast():
    model, observer, anchor, obs, _ = small_problem(6)
    a = optimize_nudge(anchor, obs, NudgeSettings(enabled=False), random_stream(1, 1, 0, 0),
                       model, observer)
    b = propagate(anchor, random_stream(1, 1, 0, 0), model, observer, obs)
    np.testing.assert_array_equal(a.state.u, b.state.u)
    assert a.log_girsanov == 0.0 and a.log_like == b.log_like


def test_nudged_forecast_moves_towards_data():
    model, observer, anchor, obs, _ = small_problem(7)
    plain = [propagate(anchor, random_stream(2, 1, i, 0), model, observer, obs).log_like
             for i in range(10)]
    nudged = [optimize_nudge(anchor, obs, NudgeSettings(), random_stream(2, 1, i, 0), model,
                             observer) for i in range(10)]
    assert np.mean([p.log_like for p in nudged]) > np.mean(plain)
    assert all(p.log_girsanov < 0.5 for p in nudged)


# -------------------------------------------------------------- assimilation

def _ensemble(model, observer, obs, n, seed, batches=1):
    rngs = [random_stream(seed, 3, i) for i in range(n)]
    base = model.state_from_velocity(1.0 + 0.3 * np.cos(2 * np.pi * model.mesh.nodes / 40.0))
    parts = []
    for r in rngs:
        s = model.state_from_velocity(base.u * (1 + 0.3 * r.normal()))
        parts.append(Particle(s, NoisePath.zeros(model.n_steps, model.mesh.N), s.copy()))
    ens = Ensemble(parts, EnsembleLayout(n, batches), seed)
    ens.begin_window(1)
    ens.particles = ens.map(lambda i, p, r: propagate(p.state, r, model, observer, obs))
    return ens


def test_tempered_assimilation_contract():
    model, observer, anchor, obs, _ = small_problem(10)
    obs = ObsRecord(1, observer.observe(anchor))
    ens = _ensemble(model, observer, obs, 40, 3)
    settings = TemperSettings(ess_threshold=20, jitter_steps=2)
    tr = assimilate_tempered(ens, obs, settings, model, observer, step=1)
    assert tr.theta_schedule[-1] == 1.0
    assert np.all(np.diff([0.0] + tr.theta_schedule) > 0)
    assert tr.n_temper == len(tr.theta_schedule)
    assert min(tr.min_stage_ess) >= 20
    assert 0 <= tr.accept_rate <= 1
    assert len(ens.particles) == 40


def test_bootstrap_equal_weights_keep_everyone():
    model, observer, anchor, obs, _ = small_problem(11)
    ens = _ensemble(model, observer, obs, 10, 4)
    for p in ens.particles:
        p.log_like = 0.0
    before = [p.state.u.copy() for p in ens.particles]
    tr = bootstrap_assimilate(ens, obs, step=1)
    assert tr.ess_pre == pytest.approx(10.0)
    assert tr.ess_post == pytest.approx(10.0)
    for a, p in zip(before, ens.particles):
        np.testing.assert_array_equal(a, p.state.u)


def test_jitter_rejects_failed_proposal():
    model = SimpleNamespace(dt=0.025, mesh=Mesh(4.0, 4))

    def boom(anchor, path):
        raise StepFailure("forced")

    model.evolve = boom
    p = Particle(None, NoisePath.zeros(1, 4), None, -1.0)
    out, ok = jitter_once(p, 1.0, None, 0.2, np.random.default_rng(0), model, None)
    assert out is p and not ok


def test_settings_validation():
    with pytest.raises(ValueError):
        TemperSettings(pcn_delta=0.0)
    with pytest.raises(ValueError):
        TemperSettings(ess_threshold=0)
    with pytest.raises(ValueError):
        NudgeSettings(max_opt_iters=0)
