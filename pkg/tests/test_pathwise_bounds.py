import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.optimize import brentq

from sddekit.models import (NO_CORRECTION, FeedbackSpec, NoiseCoupling, Nonlinearity, log_frame_functional)
from sddekit.noise import JumpLaw, RegulatedLevySpec, sample_levy
from sddekit.pathwise_bounds import (ABOVE, BELOW, BoundParams, BoundPreconditionError, crossing_time, forcing_path,
                                     lower_bound_delta, max_jump_of, verify_lower_bound, verify_mg_persistence,
                                     verify_upper_bound)
from sddekit.paths import CadlagPath, PathError, Segment
from sddekit.solver import SolverConfig, integrate_sdde

MG = FeedbackSpec(Nonlinearity.mackey_glass(2.0, 0.0), 1.0, 2.0, 1.0)


def tent():
    t = np.linspace(0, 2, 21)
    return CadlagPath(t, np.where(t <= 1, 2 * t, 4 - 2 * t))


# --- crossing times --------------------------------------------------------------------------------

@pytest.mark.parametrize("t, expected", [(0.3, 0.3), (0.5, 0.4), (1.2, 0.4), (1.7, 1.7), (0.0, 0.0)])
def test_crossing_time_below(t, expected):
    assert crossing_time(tent(), 1.0, 0.0, t) == pytest.approx(expected)


def test_crossing_time_above_and_preconditions():
    neg = tent().map(lambda x: -x)
    assert crossing_time(neg, 1.0, 0.0, 1.2, ABOVE) == pytest.approx(0.4)
    with pytest.raises(BoundPreconditionError):
        crossing_time(tent(), 1.0, 1.0, 1.5)
    with pytest.raises(PathError):
        crossing_time(tent(), 1.0, 0.0, 3.0)


def test_crossing_time_uses_left_limit_at_jump():
    # below 1 until a jump to 3 at t = 1: the left limit at 1 is still good
    p = CadlagPath([0.0, 1.0, 2.0], [0.0, 3.0, 3.0], {1: 0.5})
    assert crossing_time(p, 1.0, 0.0, 2.0) == 1.0


# --- lower-bound delta -----------------------------------------------------------------------------

def test_delta_for_hill_nonlinearity():
    # r / (1 + d^2) = gamma d with gamma=1, r=2 gives d^3 + d - 2 = 0
    assert lower_bound_delta(MG) == pytest.approx(1.0, rel=1e-6)


@pytest.mark.parametrize("gamma, r, p", [(1.0, 3.0, 4.0), (0.5, 1.0, 1.0), (2.0, 10.0, 6.0)])
def test_delta_matches_root(gamma, r, p):
    s = FeedbackSpec(Nonlinearity.mackey_glass(p, 0.0), gamma, r, 1.0)
    ref = brentq(lambda d: r / (1 + d ** p) - gamma * d, 0.0, r / gamma + 1)
    assert lower_bound_delta(s) == pytest.approx(ref, rel=1e-6)


def test_delta_needs_positive_f_at_zero():
    with pytest.raises(BoundPreconditionError):
        lower_bound_delta(FeedbackSpec(Nonlinearity.nicholson(1.0), 1.0, 2.0, 1.0))


def test_lower_bound_rejects_infeasible_level():
    z = CadlagPath([0.0, 1.0], [0.0, 0.0])
    params = BoundParams.for_lower_bound(MG, R=0.0, zeta=0.0)
    with pytest.raises(BoundPreconditionError, match="delta-infeasibility"):
        verify_lower_bound(z, z, params)


# --- deterministic and noisy trajectories ------------------------------------------------------------

def log_run(spec, c, levy, horizon, dt, seed, y0=0.0, correction="ito_brownian"):
    fc = log_frame_functional(spec, NoiseCoupling(c, correction=correction), levy)
    noise = sample_levy(levy, horizon, dt, seed)
    return integrate_sdde(fc, Segment.constant(y0, spec.tau), noise, SolverConfig(dt, horizon)), noise


@pytest.mark.parametrize("R", [1.0, 1.5, 2.5])
def test_noiseless_trajectory_respects_both_bounds(R):
    tr, _ = log_run(MG, 0.0, RegulatedLevySpec(sigma=0.0), 20.0, 1e-3, 0)
    v = forcing_path(tr, MG)
    assert np.max(np.abs(v.values)) < 1e-9
    assert verify_upper_bound(tr.path, v, BoundParams.for_model(MG, R, 0.0)).ok
    assert verify_lower_bound(tr.path, v, BoundParams.for_lower_bound(MG, R, 0.0)).ok


@pytest.mark.parametrize("seed", range(10))
def test_brownian_trajectories_respect_bounds(seed):
    tr, noise = log_run(MG, 0.3, RegulatedLevySpec.brownian(1.0), 10.0, 1e-3, seed)
    v = forcing_path(tr, MG)
    for R in (1.0, 2.0):
        up = verify_upper_bound(tr.path, v, BoundParams.for_model(MG, R, 0.0))
        lo = verify_lower_bound(tr.path, v, BoundParams.for_lower_bound(MG, R, 0.0))
        assert up.ok and lo.ok, (up.record(), lo.record())


def test_forcing_recovers_driver_without_correction():
    levy = RegulatedLevySpec(sigma=0.5, lambda_N=2.0, jump_law=JumpLaw.two_point(0.3))
    tr, noise = log_run(MG, 0.4, levy, 5.0, 1e-2, 3, correction=NO_CORRECTION)
    v = forcing_path(tr, MG)
    np.testing.assert_allclose(v.values, 0.4 * noise.base.values, atol=1e-9)
    assert max_jump_of(v) == pytest.approx(0.4 * 0.3)


def test_two_jump_path_from_hand_rolled_euler():
    # independent Euler loop for y' = -g + r e^{-y} f(e^{y(t-1)}) + c dL with two jumps of size 0.5
    dt, T, c = 1e-3, 6.0, 1.0
    n, m = int(T / dt), int(1.0 / dt)
    jumps = {2000: 0.5, 4500: -0.5}
    y = np.zeros(m + n + 1)
    left = y.copy()
    for k in range(n):
        i = m + k
        drift = -1.0 + 2.0 * math.exp(-y[i]) / (1.0 + math.exp(2 * y[i - m]))
        left[i + 1] = y[i] + drift * dt
        y[i + 1] = left[i + 1] + c * jumps.get(k + 1, 0.0)
    times = np.arange(-m, n + 1) * dt
    jidx = {m + k: float(left[m + k]) for k in jumps}
    z = CadlagPath(times, y, jidx)
    v_times = times[m:]
    lv = np.cumsum([jumps.get(k, 0.0) for k in range(n + 1)])
    v = CadlagPath(v_times, c * lv, {k: float(c * (lv[k] - jumps[k])) for k in jumps})
    from sddekit.solver import Trajectory
    recovered = forcing_path(Trajectory(z, 1.0), MG)
    np.testing.assert_allclose(recovered.values, v.values, atol=1e-9)
    for R in (0.8, 1.5):
        assert verify_upper_bound(z, v, BoundParams.for_model(MG, R, 0.5)).ok
        assert verify_lower_bound(z, v, BoundParams.for_lower_bound(MG, R, 0.5)).ok


def test_violations_are_detected():
    # a path that climbs to 3 while nothing forces it
    t = np.linspace(0, 1, 101)
    z = CadlagPath(t, 3 * t)
    v = CadlagPath(t, np.zeros_like(t))
    rep = verify_upper_bound(z, v, BoundParams(R=1.0, zeta=0.0, gamma_tilde=5.0, r_tilde=1.0, M=1.0, drift_bound=0.0))
    assert not rep.ok and rep.n_violations > 50
    assert rep.violations[0][0] > 1 / 3
    assert rep.worst_margin == pytest.approx(-2.0)
    low = verify_lower_bound(CadlagPath(t, -3 * t), v,
                             BoundParams(R=1.0, zeta=0.0, gamma_tilde=1.0, r_tilde=1.0, M=1.0, delta=1.0,
                                         drift_bound=0.0))
    assert not low.ok


def test_initial_value_precondition():
    z = CadlagPath([0.0, 1.0], [2.0, 0.0])
    with pytest.raises(BoundPreconditionError):
        verify_upper_bound(z, CadlagPath([0.0, 1.0], [0.0, 0.0]), BoundParams.for_model(MG, 1.0, 0.0))


def test_grids_must_match():
    z = CadlagPath([0.0, 0.5, 1.0], [0.0, 0.0, 0.0])
    with pytest.raises(PathError):
        verify_upper_bound(z, CadlagPath([0.0, 1.0], [0.0, 0.0]), BoundParams.for_model(MG, 1.0, 0.0))
    with pytest.raises(PathError):
        verify_upper_bound(z, z, BoundParams.for_model(MG, 1.0, 0.0), t0=0.3)


@given(st.floats(0.0, 10.0), st.floats(0.0, 2.0))
def test_alpha_increases_with_level(R, dR):
    p = BoundParams.for_model(MG, R, 0.0)
    assert BoundParams.for_model(MG, R + dR, 0.0).alpha >= p.alpha
    assert p.alpha == pytest.approx(1.0 - 2.0 * math.exp(-R))


# --- persistence ------------------------------------------------------------------------------------

@pytest.mark.parametrize("phi", [Segment.constant(1.0, 1.0), Segment.constant(0.01, 1.0),
                                 Segment.from_function(lambda th: 5 + 4 * math.sin(6 * th), 1.0, 200)])
def test_persistence_positive_and_settles(phi):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        inf_value, band = verify_mg_persistence(2.0, 1.0, 2.0, phi, 60.0, 1e-2)
    assert inf_value > 0
    assert band[0] <= 1.0 + 1e-6 and band[1] >= 1.0 - 1e-6
    assert band[1] - band[0] < 1e-3


def test_persistence_warns_on_bad_preconditions():
    with pytest.warns(UserWarning, match="p > 1"):
        verify_mg_persistence(1.0, 1.0, 2.0, Segment.constant(1.0, 1.0), 5.0, 1e-2)
    with pytest.warns(UserWarning, match="r/gamma"):
        verify_mg_persistence(2.0, 1.0, 0.5, Segment.constant(1.0, 1.0), 5.0, 1e-2)
