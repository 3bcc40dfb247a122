import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats
from scipy.integrate import quad

from sddekit.measures import (SEGMENT_SUP_NORM, VALUE, EmpiricalMeasure1D, EmpiricalSegmentMeasure, MeasureError,
                              boundedness_profile, extinction_probability, mean_bound_check, segment_time_average,
                              stationarity_check, tightness_diagnostic, time_average_distribution, wasserstein1,
                              xi_curve)
from sddekit.models import FeedbackSpec, Nonlinearity, PiecewiseConstant
from sddekit.paths import CadlagPath, Segment
from sddekit.solver import Trajectory


def traj(times, values, tau=1.0, explosion=None, jumps=None):
    return Trajectory(CadlagPath(times, values, jumps or {}), tau, explosion)


def ou_path(n, dt, seed, theta=1.0, sigma=0.5, mean=0.0, trend=0.0, tau=1.0):
    rng = np.random.default_rng(seed)
    m = int(round(tau / dt))
    x = np.empty(m + n + 1)
    x[:m + 1] = mean
    for k in range(m, m + n):
        x[k + 1] = x[k] - theta * (x[k] - mean) * dt + sigma * math.sqrt(dt) * rng.standard_normal()
    t = np.arange(-m, n + 1) * dt
    return traj(t, x + trend * np.maximum(t, 0.0), tau)


# --- 1-D empirical measures --------------------------------------------------------------------

def test_measure_merges_duplicates_and_normalizes():
    mu = EmpiricalMeasure1D.from_samples([3.0, 1.0, 3.0, 2.0])
    assert mu.atoms.tolist() == [1.0, 2.0, 3.0]
    assert mu.weights.tolist() == [0.25, 0.25, 0.5]
    assert mu.mean() == 2.25
    assert mu.cdf(2.0) == 0.5 and mu.mass_below(2.0) == 0.25


@pytest.mark.parametrize("atoms, weights", [([], []), ([1.0], [-1.0]), ([math.nan], [1.0]), ([1.0, 2.0], [0, 0])])
def test_measure_validation(atoms, weights):
    with pytest.raises(MeasureError):
        EmpiricalMeasure1D(np.array(atoms, float), np.array(weights, float))


def test_merge_weights_components():
    a = EmpiricalMeasure1D.from_samples([0.0])
    b = EmpiricalMeasure1D.from_samples([1.0])
    m = EmpiricalMeasure1D.merge([a, b], [3.0, 1.0])
    assert m.weights.tolist() == [0.75, 0.25]


def test_w1_examples():
    d0 = EmpiricalMeasure1D.from_samples([0.0])
    d1 = EmpiricalMeasure1D.from_samples([1.0])
    half = EmpiricalMeasure1D.from_samples([0.0, 1.0])
    assert wasserstein1(d0, d1) == 1.0
    assert wasserstein1(d0, half) == 0.5
    assert wasserstein1(half, half) == 0.0


samples = st.lists(st.floats(-100, 100), min_size=1, max_size=30)


@given(samples, samples, samples)
def test_w1_is_a_metric(x, y, z):
    mx, my, mz = (EmpiricalMeasure1D.from_samples(v) for v in (x, y, z))
    dxy = wasserstein1(mx, my)
    assert dxy >= 0
    assert dxy == pytest.approx(wasserstein1(my, mx), abs=1e-9)
    assert dxy <= wasserstein1(mx, mz) + wasserstein1(mz, my) + 1e-9
    assert wasserstein1(mx, mx) == 0.0


@given(samples, samples, st.lists(st.floats(0.01, 10), min_size=30, max_size=30))
def test_w1_matches_scipy(x, y, w):
    wx, wy = w[:len(x)], w[-len(y):]
    mx = EmpiricalMeasure1D(np.array(x), np.array(wx))
    my = EmpiricalMeasure1D(np.array(y), np.array(wy))
    ref = stats.wasserstein_distance(x, y, wx, wy)
    assert wasserstein1(mx, my) == pytest.approx(ref, rel=1e-9, abs=1e-9)


# --- time averages and segment measures --------------------------------------------------------------

def test_time_average_of_ramp():
    t = np.linspace(-1, 10, 1101)
    mu = time_average_distribution(traj(t, t), 0.0, 10.0)
    assert mu.mean() == pytest.approx(5.0)
    assert mu.atoms.size == 1001
    with pytest.raises(MeasureError):
        time_average_distribution(traj(t, t), 0.0, 11.0)
    with pytest.raises(MeasureError, match="exploded"):
        time_average_distribution(traj(t, t, explosion=5.0), 0.0, 10.0)


def test_segment_measure_pushes_forward_to_value_measure():
    tr = ou_path(5000, 0.01, 1)
    seg_mu = segment_time_average(tr, 1.0, 1.0, 50.0, stride=7)
    val_mu = time_average_distribution(tr, 1.0, 50.0, stride=7)
    assert wasserstein1(seg_mu.pushforward_at_zero(), val_mu) < 1e-12
    s = seg_mu.segments[3]
    t = seg_mu.times[3]
    np.testing.assert_allclose(s(np.linspace(-1, 0, 11)), tr.path.value_at(t + np.linspace(-1, 0, 11)))


def test_segment_measure_validation():
    tr = ou_path(500, 0.01, 1)
    with pytest.raises(MeasureError):
        segment_time_average(tr, 1.0, 0.5, 4.0)
    with pytest.raises(MeasureError):
        EmpiricalSegmentMeasure((Segment.constant(0.0, 1.0), Segment.constant(0.0, 2.0)), np.ones(2), np.zeros(2))


def test_default_segment_sampling_is_ten_delays_apart():
    tr = ou_path(5000, 0.01, 2)
    mu = segment_time_average(tr, 1.0, 1.0, 50.0)
    assert np.allclose(np.diff(mu.times), 10.0)


# --- ensemble profiles -------------------------------------------------------------------------------

def ensemble(n=120, seed=0, horizon=10.0, dt=0.05):
    return [ou_path(int(horizon / dt), dt, seed * 1000 + i, sigma=1.0) for i in range(n)]


def test_profile_monotone_and_segment_dominates_value():
    ens = ensemble()
    R = [0.1, 0.5, 1.0, 2.0]
    t = [1.0, 5.0, 10.0]
    val = boundedness_profile(ens, VALUE, R, t)
    seg = boundedness_profile(ens, SEGMENT_SUP_NORM, R, t)
    assert np.all(np.diff(val.exceedance, axis=1) <= 0)
    assert np.all(seg.exceedance >= val.exceedance)
    assert len(list(val.rows())) == 12


def test_exploded_paths_exceed_every_level():
    ens = ensemble()
    t = np.linspace(-1, 10, 221)
    ens[0] = traj(t, np.where(t < 3, 0.0, 0.0), explosion=3.0)
    prof = boundedness_profile(ens, VALUE, [1e12], [2.0, 5.0])
    assert prof.exceedance[:, 0].tolist() == [0.0, 1 / 120]


def test_profile_validation():
    ens = ensemble()
    with pytest.raises(MeasureError, match="insufficient"):
        boundedness_profile(ens[:99], VALUE, [1.0], [1.0])
    with pytest.raises(MeasureError):
        boundedness_profile(ens, VALUE, [2.0, 1.0], [1.0])
    with pytest.raises(MeasureError):
        boundedness_profile(ens, SEGMENT_SUP_NORM, [1.0], [0.5])
    with pytest.raises(MeasureError):
        boundedness_profile(ens, "median", [1.0], [1.0])


def test_tightness_diagnostic_on_stationary_ensemble():
    rep = tightness_diagnostic(ensemble(), 1.0, [0.5, 2.0, 5.0], [0.5, 0.2, 0.05], [2.0, 6.0], eps=0.5)
    assert rep.sup_decays and rep.varpi_decays and rep.ok
    assert rep.delta_grid.tolist() == [0.5, 0.2, 0.05]
    assert rep.record()["eps"] == 0.5
    with pytest.raises(MeasureError):
        tightness_diagnostic(ensemble(), 1.0, [1.0], [1.0], [2.0])


# --- mean bound --------------------------------------------------------------------------------------

def test_xi_matches_quadrature_for_switching_rates():
    spec = FeedbackSpec(Nonlinearity.nicholson(1.0), PiecewiseConstant((1.0, 2.5), (2.0, 0.5, 1.0)),
                        PiecewiseConstant((), (3.0,)), 1.0)
    M = 1 / math.e
    for t in (0.3, 1.0, 2.0, 4.0):
        G = lambda s: spec.gamma.integral(0.0, s)
        integral = quad(lambda s: math.exp(G(s) - G(t)), 0.0, t, points=[1.0, 2.5], limit=200)[0]
        ref = math.exp(-G(t)) * 0.7 + 3.0 * M * integral
        assert xi_curve(spec, [t], 0.7)[0] == pytest.approx(ref, rel=1e-10)


def constant_feedback(M=2.0, gamma=0.5, r=1.5):
    return FeedbackSpec(Nonlinearity.custom(lambda x: M, M, M), gamma, r, 1.0, "original")


def test_xi_is_exact_for_saturated_feedback():
    spec = constant_feedback()
    t = np.linspace(0, 10, 11)
    np.testing.assert_allclose(xi_curve(spec, t, 0.0), (1.5 * 2.0 / 0.5) * (1 - np.exp(-0.5 * t)), rtol=1e-12)
    assert xi_curve(spec, [40.0], 0.0)[0] == pytest.approx(6.0, abs=1e-6)


def test_mean_bound_passes_and_fails():
    spec = constant_feedback()
    t = np.linspace(-1, 20, 2101)
    exact = 6.0 * (1 - np.exp(-0.5 * np.maximum(t, 0)))
    good = [traj(t, exact) for _ in range(3)]
    res = mean_bound_check(good, spec, [1.0, 5.0, 19.0], x0_mean=0.0)
    assert res.ok and res.negative_fraction == 0.0
    bad = [traj(t, exact + 0.5) for _ in range(3)]
    res = mean_bound_check(bad, spec, [1.0, 5.0, 19.0], x0_mean=0.0)
    assert not res.ok and not res.pointwise_ok.any()
    assert res.limit == 6.0 and res.tail_from == 9.5
    with pytest.raises(MeasureError):
        mean_bound_check([], spec, [1.0])


# --- extinction --------------------------------------------------------------------------------------

def test_extinction_fraction():
    t = np.linspace(-1, 10, 111)
    dying = traj(t, np.exp(-np.maximum(t, 0)))
    alive = traj(t, np.ones_like(t))
    gone_low = traj(t, np.where(t < 5, 1.0, 0.0), explosion=5.0)
    blown_up = traj(t, np.where(t < 5, 1.0, np.where(t == 5, 1e9, 0.0)), explosion=5.0)
    ens = [dying, alive, gone_low, blown_up]
    assert extinction_probability(ens, 1e-3, 9.0) == 0.5
    assert extinction_probability(ens, 1e-3, 1.0) == 0.0
    with pytest.raises(MeasureError):
        extinction_probability(ens, 0.0, 1.0)


# --- stationarity ------------------------------------------------------------------------------------

def test_stationary_series_passes():
    tr = ou_path(40_000, 0.01, 5)
    rep = stationarity_check(tr, [(0.0, 200.0), (200.0, 400.0)], stride=5, n_boot=100)
    assert rep.passed, rep.record()
    assert rep.block == 200


def test_trend_fails():
    tr = ou_path(40_000, 0.01, 5, trend=0.01)
    rep = stationarity_check(tr, [(0.0, 200.0), (200.0, 400.0)], stride=5, n_boot=100)
    assert not rep.passed
    assert rep.w1 == pytest.approx(2.0, rel=0.2)


def test_constant_series_passes_with_zero_tolerance():
    t = np.linspace(-1, 200, 20101)
    rep = stationarity_check(traj(t, np.zeros_like(t)), [(0.0, 100.0), (100.0, 200.0)], n_boot=10)
    assert rep.w1 == 0.0 and rep.tol == 0.0 and rep.passed


def test_overlapping_or_short_windows_rejected():
    tr = ou_path(10_000, 0.01, 1)
    with pytest.raises(MeasureError, match="overlap"):
        stationarity_check(tr, [(0.0, 60.0), (50.0, 100.0)])
    with pytest.raises(MeasureError, match="tau long"):
        stationarity_check(tr, [(0.0, 10.0), (20.0, 30.0)])


def test_stationarity_is_seeded():
    tr = ou_path(20_000, 0.01, 8)
    a = stationarity_check(tr, [(0.0, 100.0), (100.0, 200.0)], n_boot=30, seed=3)
    b = stationarity_check(tr, [(0.0, 100.0), (100.0, 200.0)], n_boot=30, seed=3)
    assert a.record() == b.record()
