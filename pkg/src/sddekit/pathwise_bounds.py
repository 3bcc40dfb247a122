"""Deterministic upper and lower bounds for log-frame trajectories, checked
pathwise against the forcing v that drove them."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .models import FeedbackSpec, Nonlinearity, PiecewiseConstant, sup_f, transformed_log_drift_values
from .paths import LINEAR, CadlagPath, PathError, Segment
from .solver import DEFAULT_THRESHOLD, DelayCoefficients, Trajectory, integrate_ensemble

BELOW = "below"
ABOVE = "above"
MAX_LISTED = 100


class BoundPreconditionError(ValueError):
    pass


@dataclass(frozen=True)
class BoundParams:
    R: float
    zeta: float
    gamma_tilde: float
    r_tilde: float
    M: float
    C_F: float = 0.0
    beta_drift: float = 0.0
    delta: Optional[float] = None
    drift_bound: Optional[float] = None
    tau: float = 1.0

    def __post_init__(self):
        if self.R < 0 or self.zeta < 0 or self.C_F < 0 or self.beta_drift < 0:
            raise ValueError("R, zeta, C_F and beta_drift must be non-negative")
        if not (self.gamma_tilde > 0 and self.r_tilde > 0 and self.M > 0):
            raise ValueError("gamma_tilde, r_tilde and M must be positive")

    @property
    def alpha(self) -> float:
        return self.gamma_tilde - self.r_tilde * self.M * math.exp(-self.R)

    @staticmethod
    def for_model(spec: FeedbackSpec, R: float, zeta: float, **kw) -> "BoundParams":
        return BoundParams(R, zeta, spec.gamma_tilde, spec.r_tilde, sup_f(spec), tau=spec.tau, **kw)

    @staticmethod
    def for_lower_bound(spec: FeedbackSpec, R: float, zeta: float, **kw) -> "BoundParams":
        """F(x, y) = r f(x) / y >= 0 and beta = gamma (constant rates)."""
        if not (spec.gamma.is_constant and spec.r.is_constant):
            raise ValueError("the lower bound is implemented for constant rates")
        return BoundParams(R, zeta, spec.gamma_tilde, spec.r_tilde, sup_f(spec), C_F=0.0,
                           beta_drift=spec.gamma.values[0], delta=lower_bound_delta(spec),
                           tau=spec.tau, **kw)


@dataclass
class BoundReport:
    kind: str
    n_checks: int
    n_marginal: int
    n_violations: int
    worst_margin: float
    tol: float
    alpha: float
    params: BoundParams
    violations: List[Tuple[float, float]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.n_violations == 0

    def record(self) -> dict:
        p = self.params
        return {"kind": self.kind, "checks": self.n_checks, "marginal": self.n_marginal,
                "violations": self.n_violations, "worst_margin": self.worst_margin, "tol": self.tol,
                "alpha": self.alpha, "R": p.R, "zeta": p.zeta}


def lower_bound_delta(spec: FeedbackSpec, n_grid: int = 2000) -> float:
    """Largest delta with r inf_{0<x<delta} f(x) >= gamma delta, so that
    F(x, y) = r f(x)/y >= gamma on (0, delta)^2. Requires f(0) > 0."""
    gamma, r = spec.gamma.values[0], spec.r.values[0]
    f = spec.nonlinearity.array
    if f(np.array([0.0]))[0] <= 0:
        raise BoundPreconditionError("the lower bound needs f(0) > 0")

    def ok(d):
        xs = np.linspace(0.0, d, n_grid)
        return r * float(np.min(f(xs))) >= gamma * d

    lo, hi = 0.0, 1.0
    while ok(hi):
        lo, hi = hi, hi * 2.0
        if hi > 1e12:
            return hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-12 * hi:
            break
    return lo * (1.0 - 1e-9)


def _side_masks(z: CadlagPath, R: float, direction: str):
    if direction == BELOW:
        return z.values < R, z.left_values < R
    if direction == ABOVE:
        return z.values > -R, z.left_values > -R
    raise ValueError("direction must be 'below' or 'above'")


def _last_good_index(z: CadlagPath, R: float, direction: str, k0: int) -> np.ndarray:
    """For each index k >= k0, the largest index j in [k0, k] where z is on the
    correct side (right value at j, or the left limit when j > k0)."""
    right_ok, left_ok = _side_masks(z, R, direction)
    n = z.times.size
    good = right_ok.copy()
    good[k0 + 1:] |= left_ok[k0 + 1:]
    good[:k0] = False
    idx = np.where(good, np.arange(n), -1)
    return np.maximum.accumulate(idx)


def crossing_time(z: CadlagPath, R: float, t0: float, t: float, direction: str = BELOW) -> float:
    """Last time s in [t0, t] at which z (or its left limit) is on the correct side:
    z < R for ``below``, z > -R for ``above``. Ties count as the wrong side."""
    if not z.covers(t0, t) or t < t0:
        raise PathError("z does not cover [t0, t]")
    z0 = z.value_at(t0)
    if (direction == BELOW and not z0 < R) or (direction == ABOVE and not z0 > -R):
        raise BoundPreconditionError(f"initial-condition violation: z(t0)={z0} on the wrong side of the level")
    zt = z.value_at(t)
    if (direction == BELOW and zt < R) or (direction == ABOVE and zt > -R):
        return float(t)
    right_ok, left_ok = _side_masks(z, R, direction)
    sel = (z.times > t0) & (z.times <= t)
    cand = z.times[sel & (right_ok | left_ok)]
    return float(cand.max()) if cand.size else float(t0)


def _grid_setup(z: CadlagPath, v: CadlagPath, t0: float):
    k0 = int(np.searchsorted(z.times, t0, side="left"))
    if k0 >= z.times.size or z.times[k0] != t0:
        raise PathError("t0 must be a grid time of z")
    if not np.array_equal(z.times[k0:], v.times[np.searchsorted(v.times, t0):]):
        raise PathError("z and v must share the grid on [t0, end]")
    return k0


def _drift_magnitude(z: CadlagPath, v: CadlagPath, k0: int) -> float:
    # continuous part of each step: left limit at the next point minus current value
    dz = z.left_values[k0 + 1:] - z.values[k0:-1]
    kv = int(np.searchsorted(v.times, z.times[k0]))
    dv = v.left_values[kv + 1:] - v.values[kv:-1]
    dt = np.diff(z.times[k0:])
    return float(np.max(np.abs(dz - dv) / dt)) if dt.size else 0.0


def _report(kind, margins, times, tol, params, alpha, n_checks):
    bad = margins < -tol
    marg = (margins < 0) & ~bad
    listed = [(float(t), float(m)) for t, m in zip(times[bad], margins[bad])][:MAX_LISTED]
    return BoundReport(kind, n_checks, int(marg.sum()), int(bad.sum()),
                       float(margins.min()) if margins.size else math.inf, tol, alpha, params, listed)


def _tolerance(z, v, k0, params, alpha):
    dt = float(np.max(np.diff(z.times[k0:]))) if z.times.size > k0 + 1 else 0.0
    db = params.drift_bound if params.drift_bound is not None else _drift_magnitude(z, v, k0)
    return 5.0 * dt * (abs(alpha) + db)


def verify_upper_bound(z: CadlagPath, v: CadlagPath, params: BoundParams, t0: float = 0.0) -> BoundReport:
    """Check z(t) <= max{R, R + zeta - alpha (t - a^t) + v(t) - v(a^t)} at every grid time."""
    k0 = _grid_setup(z, v, t0)
    if not z.values[k0] < params.R:
        raise BoundPreconditionError("initial-condition violation: need z(t0) < R")
    alpha = params.alpha
    tol = _tolerance(z, v, k0, params, alpha)
    last = _last_good_index(z, params.R, BELOW, k0)[k0:]
    zt = z.values[k0:]
    times = z.times[k0:]
    vv = v.values[np.searchsorted(v.times, t0):]
    a_idx = last - k0
    bound = np.maximum(params.R, params.R + params.zeta - alpha * (times - times[a_idx]) + vv - vv[a_idx])
    return _report("upper", bound - zt, times, tol, params, alpha, times.size)


def verify_lower_bound(z: CadlagPath, v: CadlagPath, params: BoundParams, t0: float = 0.0) -> BoundReport:
    """Check z(t) >= min{-R, -R - (C_F + beta) tau - zeta + v(t) - v(a^t)} at every grid time."""
    if params.delta is None:
        raise BoundPreconditionError("the lower bound needs delta")
    if not math.exp(-params.R) < params.delta:
        raise BoundPreconditionError(f"delta-infeasibility: exp(-R)={math.exp(-params.R)} >= delta={params.delta}")
    k0 = _grid_setup(z, v, t0)
    if not z.values[k0] > -params.R:
        raise BoundPreconditionError("initial-condition violation: need z(t0) > -R")
    tol = _tolerance(z, v, k0, params, params.beta_drift + params.C_F)
    last = _last_good_index(z, params.R, ABOVE, k0)[k0:]
    zt = z.values[k0:]
    times = z.times[k0:]
    vv = v.values[np.searchsorted(v.times, t0):]
    a_idx = last - k0
    const = (params.C_F + params.beta_drift) * params.tau + params.zeta
    bound = np.minimum(-params.R, -params.R - const + vv - vv[a_idx])
    return _report("lower", zt - bound, times, tol, params, params.alpha, times.size)


def forcing_path(traj: Trajectory, spec: FeedbackSpec, t0: float = 0.0,
                 threshold: float = DEFAULT_THRESHOLD) -> CadlagPath:
    """Recover v from a log-frame trajectory: v(t) - v(t0) = z(t) - z(t0) minus the
    integrated feedback drift, on the solver grid (v(t0) = 0)."""
    z = traj.path
    k0 = int(np.searchsorted(z.times, t0))
    times = z.times[k0:]
    zr = z.values[k0:]
    zl = z.left_values[k0:]
    zd = z.value_at(times - spec.tau)
    d = transformed_log_drift_values(spec, zr, zd, times, threshold)
    # continuous increment of v over each step, then the jump at the next point
    cont = (zl[1:] - zr[:-1]) - d[:-1] * np.diff(times)
    jump = zr[1:] - zl[1:]
    v = np.concatenate(([0.0], np.cumsum(cont + jump)))
    vl = v[1:] - jump
    jidx = np.flatnonzero(jump != 0.0) + 1
    return CadlagPath._trusted(times, v, jidx, vl[jidx - 1], LINEAR)


def max_jump_of(path: CadlagPath) -> float:
    s = path.jump_sizes
    return float(np.max(np.abs(s))) if s.size else 0.0


def verify_mg_persistence(p: float, gamma, r, phi: Segment, horizon: float, dt: float):
    """Integrate x' = -gamma x + r x(t-tau)/(1 + x(t-tau)^p) and return
    (inf over [0, horizon] of x, trapping band over the second half or None)."""
    gamma = gamma if isinstance(gamma, PiecewiseConstant) else PiecewiseConstant.constant(gamma)
    r = r if isinstance(r, PiecewiseConstant) else PiecewiseConstant.constant(r)
    problems = []
    if not p > 1:
        problems.append("p > 1")
    if not np.min(phi.samples.all_values()) > 0:
        problems.append("inf phi > 0")
    if not r.values[-1] / gamma.values[-1] > 1:
        problems.append("liminf r/gamma > 1")
    if problems:
        warnings.warn("persistence preconditions violated: " + ", ".join(problems), stacklevel=2)
    spec = FeedbackSpec(Nonlinearity.mackey_glass(p, 1.0), gamma, r, phi.tau, "original")
    f = spec.nonlinearity.array
    coeffs = DelayCoefficients(lambda x, xd, t: -gamma(t) * x + r(t) * f(xd),
                               lambda x, xd, t: np.zeros_like(x), phi.tau)
    n = int(round(horizon / dt))
    res = integrate_ensemble(coeffs, phi, np.zeros((1, n)), dt)
    x = res.values[0][res.times >= 0]
    inf_value = float(x.min())
    band = None
    if gamma.is_constant and r.is_constant:
        half = x[x.size // 2:]
        band = (float(half.min()), float(half.max()))
    return inf_value, band
