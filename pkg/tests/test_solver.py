import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sddekit.noise import JumpLaw, RegulatedLevySpec, brownian_increments, sample_levy
from sddekit.paths import CadlagPath, Segment
from sddekit.solver import (ConfigError, DelayCoefficients, FunctionalCoefficients, SolverConfig, SolverError,
                            delay_steps, history_matrix, integrate_ensemble, integrate_sdde, picard_iterate,
                            simulate_ensemble, transform_exp)

QUIET = RegulatedLevySpec(sigma=0.0)
JUMPY = RegulatedLevySpec(sigma=0.4, lambda_N=2.0, jump_law=JumpLaw.two_point(0.5))


def run(drift, noise, x0, spec, horizon, dt, tau=1.0, seed=0, **kw):
    fc = FunctionalCoefficients(drift, noise, kw.pop("declared", None))
    init = x0 if isinstance(x0, Segment) else Segment.constant(x0, tau)
    return integrate_sdde(fc, init, sample_levy(spec, horizon, dt, seed), SolverConfig(dt, horizon, **kw))


def zero(seg, t):
    return 0.0


# --- deterministic oracles ----------------------------------------------------------------

@pytest.mark.parametrize("dt", [0.1, 0.01, 0.001])
def test_exponential_decay_first_order(dt):
    tr = run(lambda s, t: -s(0.0), zero, 1.0, QUIET, 5.0, dt)
    t = tr.solver_times()
    err = np.max(np.abs(tr.path.value_at(t) - np.exp(-t)))
    assert err <= 2 * dt


@pytest.mark.parametrize("dt", [0.05, 0.01])
def test_pure_delay_method_of_steps(dt):
    # x' = -x(t-1), x = 1 on [-1, 0]: 1 - t on [0,1], 1 - t + (t-1)^2/2 on [1,2]
    tr = run(lambda s, t: -s(-1.0), zero, 1.0, QUIET, 2.0, dt)
    t = tr.solver_times()
    exact = np.where(t <= 1, 1 - t, 1 - t + (t - 1) ** 2 / 2)
    assert np.max(np.abs(tr.path.value_at(t) - exact)) <= 2 * dt


def euler_blowup_steps(z, dt, thr):
    """Steps until Euler for x' = x^2 crosses thr, via the reciprocal recursion
    u -> u - dt + dt^2 / (u + dt) with u = 1/x."""
    u, n = 1.0 / z, 0
    while u > 1.0 / thr:
        u = u - dt + dt * dt / (u + dt)
        n += 1
    return n


@pytest.mark.parametrize("z", [0.5, 1.0, 2.0])
@pytest.mark.parametrize("dt", [1e-2, 1e-3])
def test_quadratic_blowup_time(z, dt):
    thr = 1e8
    tr = run(lambda s, t: s(0.0) ** 2, zero, z, QUIET, 1 / z + 0.5, dt, explosion_threshold=thr)
    assert tr.exploded
    n = euler_blowup_steps(z, dt, thr)
    assert abs(tr.explosion_time - n * dt) <= dt + 1e-12
    # never early; the lag is a harmonic sum, about dt*log(1/(z*dt)), plus a
    # doubly-logarithmic number of steps once 1/x falls below dt
    assert tr.explosion_time >= 1 / z
    assert tr.explosion_time - 1 / z <= dt * (math.log(1 + 1 / (z * dt)) + math.log2(math.log(thr)) + 2)
    after = tr.path.times > tr.explosion_time
    assert after.any() and np.all(tr.path.values[after] == 0.0)


def test_explosion_to_infinity_is_recorded():
    tr = run(lambda s, t: math.exp(min(s(0.0), 700.0)) * 1e300, zero, 1.0, QUIET, 1.0, 0.1)
    assert tr.exploded and tr.explosion_time == pytest.approx(0.1)


# --- noise coupling ------------------------------------------------------------------------

def test_identity_coupling_reproduces_driver():
    noise = sample_levy(JUMPY, 3.0, 0.01, seed=5)
    fc = FunctionalCoefficients(zero, lambda s, t: 1.0)
    tr = integrate_sdde(fc, Segment.constant(0.0, 1.0), noise, SolverConfig(0.01, 3.0))
    sol = tr.path.restrict(0.0, 3.0)
    np.testing.assert_allclose(sol.values, noise.base.values, atol=1e-12)
    np.testing.assert_allclose(sol.left_values, noise.base.left_values, atol=1e-12)


@given(st.integers(0, 10_000), st.floats(-2, 2), st.floats(-2, 2), st.floats(-5, 5))
def test_additive_noise_is_exact(seed, a, b, x0):
    noise = sample_levy(JUMPY, 2.0, 0.05, seed)
    fc = FunctionalCoefficients(lambda s, t: a, lambda s, t: b)
    tr = integrate_sdde(fc, Segment.constant(x0, 0.5), noise, SolverConfig(0.05, 2.0))
    sol = tr.path.restrict(0.0, 2.0)
    expected = x0 + a * noise.base.times + b * noise.base.values
    np.testing.assert_allclose(sol.values, expected, atol=1e-10)


def test_jumps_use_pre_jump_state():
    # dX = X dL with pure point-mass jumps: X(T) = (1 + z)^N(T)
    spec = RegulatedLevySpec(sigma=0.0, lambda_N=2.0, jump_law=JumpLaw.point_mass(0.5))
    noise = sample_levy(spec, 4.0, 0.1, seed=3)
    fc = FunctionalCoefficients(zero, lambda s, t: s(0.0))
    tr = integrate_sdde(fc, Segment.constant(1.0, 1.0), noise, SolverConfig(0.1, 4.0))
    k = noise.jump_times.size
    assert k > 0
    assert tr.path.values[-1] == pytest.approx(1.5 ** k)
    for s in noise.jump_times:
        assert tr.path.value_at(s) == pytest.approx(1.5 * tr.path.left_limit_at(s))


def test_noise_sees_left_limit_at_jump():
    seen = []
    spec = RegulatedLevySpec(sigma=0.0, lambda_N=1.0, jump_law=JumpLaw.point_mass(1.0))
    noise = sample_levy(spec, 3.0, 0.5, seed=8)

    def b(seg, t):
        seen.append((t, seg(0.0)))
        return 1.0

    fc = FunctionalCoefficients(zero, b)
    tr = integrate_sdde(fc, Segment.constant(0.0, 1.0), noise, SolverConfig(0.5, 3.0))
    for s in noise.jump_times:
        vals = [v for t, v in seen if t == s]
        assert vals[0] == tr.path.left_limit_at(s)


# --- Picard iteration ------------------------------------------------------------------------

def toy():
    a = lambda s, t: -s(0.0) + 0.5 * math.sin(s(-0.5))
    b = lambda s, t: 0.3 * math.cos(s(0.0))
    return FunctionalCoefficients(a, b)


def test_picard_reaches_euler_after_one_iterate_per_step():
    noise = sample_levy(JUMPY, 0.5, 0.05, seed=2)
    init = Segment.from_function(lambda th: 1.0 + th, 0.5, 10)
    cfg = SolverConfig(0.05, 0.5)
    euler = integrate_sdde(toy(), init, noise, cfg)
    n = noise.base.times.size
    it = picard_iterate(toy(), init, noise, n, cfg)
    assert len(it) == n + 1
    assert it[0].path.values[-1] == 1.0
    np.testing.assert_allclose(it[-1].path.values, euler.path.values, atol=1e-12)
    np.testing.assert_array_equal(it[-1].path.jump_index, euler.path.jump_index)


def test_picard_contracts():
    noise = sample_levy(JUMPY, 2.0, 0.01, seed=4)
    init = Segment.constant(1.0, 0.5)
    cfg = SolverConfig(0.01, 2.0)
    it = picard_iterate(toy(), init, noise, 16, cfg)
    euler = integrate_sdde(toy(), init, noise, cfg)
    d = [np.max(np.abs(x.path.values - euler.path.values)) for x in it]
    assert d[-1] < 1e-6
    assert d[-1] < d[8] < d[1]


def test_picard_rejects_zero_iterations():
    with pytest.raises(ValueError):
        picard_iterate(toy(), Segment.constant(1.0, 0.5), sample_levy(QUIET, 1.0, 0.1, 0), 0,
                       SolverConfig(0.1, 1.0))


# --- transform and bookkeeping --------------------------------------------------------------------

def test_transform_exp_freezes_after_explosion():
    tr = run(lambda s, t: s(0.0) ** 2, zero, 1.0, QUIET, 1.5, 0.01, explosion_threshold=50.0)
    x = transform_exp(tr)
    before = tr.path.times <= tr.explosion_time
    np.testing.assert_allclose(x.path.values[before], np.exp(tr.path.values[before]))
    assert np.all(x.path.values[~before] == 0.0)


def test_runs_are_deterministic():
    a = run(toy().drift, toy().noise, 0.3, JUMPY, 3.0, 0.01, tau=0.5, seed=9)
    b = run(toy().drift, toy().noise, 0.3, JUMPY, 3.0, 0.01, tau=0.5, seed=9)
    assert a.path == b.path


def test_declared_bounds_are_logged_not_enforced():
    tr = run(lambda s, t: 2.0, lambda s, t: 0.1, 0.0, QUIET, 1.0, 0.1, declared=(1.0, 1.0, 1.0))
    assert tr.n_violations == 10
    assert tr.violations[0][1] == "drift>alpha_max"
    assert tr.path.values[-1] == pytest.approx(2.0)


# --- configuration errors ----------------------------------------------------------------------

def test_dt_larger_than_delay():
    with pytest.raises(ConfigError, match="tau"):
        run(zero, zero, 0.0, QUIET, 1.0, 0.5, tau=0.2)


def test_threshold_below_initial_data():
    with pytest.raises(ConfigError, match="explosion_threshold"):
        run(zero, zero, 10.0, QUIET, 1.0, 0.1, explosion_threshold=5.0)


@pytest.mark.parametrize("kwargs", [dict(dt=0.0, horizon=1.0), dict(dt=0.1, horizon=math.inf),
                                    dict(dt=2.0, horizon=1.0), dict(dt=0.1, horizon=1.0, explosion_threshold=0.0),
                                    dict(dt=0.1, horizon=1.0, interpolation="step")])
def test_bad_solver_config(kwargs):
    with pytest.raises(ConfigError):
        SolverConfig(**kwargs)


def test_noise_grid_mismatch():
    fc = FunctionalCoefficients(zero, zero)
    with pytest.raises(ConfigError):
        integrate_sdde(fc, Segment.constant(0.0, 1.0), sample_levy(QUIET, 1.0, 0.1, 0), SolverConfig(0.05, 1.0))
    with pytest.raises(ConfigError):
        integrate_sdde(fc, Segment.constant(0.0, 1.0), sample_levy(QUIET, 1.0, 0.1, 0), SolverConfig(0.1, 2.0))


def test_non_finite_coefficient_aborts_with_state():
    with pytest.raises(SolverError) as e:
        run(lambda s, t: math.nan if t > 0.25 else 0.0, zero, 1.0, QUIET, 1.0, 0.1)
    assert e.value.state["t"] == pytest.approx(0.3)
    assert e.value.state["x"] == 1.0


# --- vectorized ensembles ------------------------------------------------------------------------

def delay_logistic():
    return DelayCoefficients(lambda x, xd, t: x * (1 - xd), lambda x, xd, t: 0.3 * x, tau=0.5)


def test_ensemble_matches_per_path_solver():
    spec = RegulatedLevySpec.brownian(1.0)
    coeffs = delay_logistic()
    init = Segment.from_function(lambda th: 0.5 + th, 0.5, 50)
    ens = simulate_ensemble(coeffs, init, spec, 4.0, 0.01, master_seed=17, n_paths=5)
    fc = coeffs.functional()
    for i, tr in enumerate(ens):
        ref = integrate_sdde(fc, init, sample_levy(spec, 4.0, 0.01, 17, i), SolverConfig(0.01, 4.0))
        np.testing.assert_allclose(tr.path.values, ref.path.values, rtol=1e-10, atol=1e-12)


def test_ensemble_explosion_matches_per_path():
    coeffs = DelayCoefficients(lambda x, xd, t: x * x, lambda x, xd, t: 0.0 * x, tau=0.1)
    res = integrate_ensemble(coeffs, np.array([[0.5] * 11, [2.0] * 11, [-1.0] * 11]),
                             np.zeros((3, 300)), 0.01, explosion_threshold=1e6)
    for i, z in enumerate([0.5, 2.0]):
        tr = run(lambda s, t: s(0.0) ** 2, zero, z, QUIET, 3.0, 0.01, tau=0.1, explosion_threshold=1e6)
        assert res.explosion_time[i] == pytest.approx(tr.explosion_time)
    assert np.isnan(res.explosion_time[2])
    k = np.searchsorted(res.times, res.explosion_time[1])
    assert np.all(res.values[1, k + 1:] == 0.0)


def test_ensemble_of_jump_driven_paths_runs_per_path():
    coeffs = delay_logistic()
    ens = simulate_ensemble(coeffs, Segment.constant(0.5, 0.5), JUMPY, 1.0, 0.01, 3, 4)
    assert len(ens) == 4
    assert any(tr.path.jump_index.size for tr in ens)
    assert simulate_ensemble(coeffs, Segment.constant(0.5, 0.5), JUMPY, 1.0, 0.01, 3, 0) == []


def test_ensemble_needs_integral_delay_ratio():
    with pytest.raises(ConfigError):
        delay_steps(0.5, 0.3)
    with pytest.raises(ConfigError):
        history_matrix(np.zeros(3), 0.5, 0.1, 2)
    assert history_matrix(Segment.constant(2.0, 0.5), 0.5, 0.1, 3).shape == (3, 6)


def test_shared_increments_coarsen_consistently():
    # summing fine increments and integrating on the coarse grid equals driving with coarse noise
    fine = brownian_increments(4, 64, 1 / 64, 1)
    coeffs = DelayCoefficients(lambda x, xd, t: -xd, lambda x, xd, t: 1.0 + 0 * x, tau=0.25)
    a = integrate_ensemble(coeffs, np.zeros(5), fine.reshape(4, 16, 4).sum(2), 1 / 16)
    b = integrate_ensemble(coeffs, np.zeros(5), fine.reshape(4, 16, 4).sum(2).copy(), 1 / 16)
    np.testing.assert_array_equal(a.values, b.values)
    assert a.values.shape == (4, 5 + 16)
