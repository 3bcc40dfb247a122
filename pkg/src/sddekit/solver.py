"""Euler-Maruyama for delay equations with segment-functional coefficients.

``integrate_sdde`` runs one path on the jump-adapted grid of a ``NoisePath``.
``integrate_ensemble`` is a vectorized variant for coefficients that depend on
the segment only through X(t) and X(t - tau), driven by increment matrices on
a uniform grid. ``picard_iterate`` discretizes the fixed-point map on the same
grid as the Euler scheme and serves as an oracle for it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .noise import NoisePath, RegulatedLevySpec, brownian_increments, sample_levy
from .paths import LINEAR, CadlagPath, PathError, Segment, sup_norm

DEFAULT_THRESHOLD = 1e8
MAX_LOGGED_VIOLATIONS = 1000


class SolverError(RuntimeError):
    """Aborted integration; ``state`` holds the diagnostic context."""

    def __init__(self, msg, state=None):
        super().__init__(msg)
        self.state = state or {}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FunctionalCoefficients:
    drift: Callable[[Segment, float], float]
    noise: Callable[[Segment, float], float]
    declared_bounds: Optional[Tuple[float, float, float]] = None  # (alpha_max, alpha_min, beta)


@dataclass(frozen=True)
class DelayCoefficients:
    """Coefficients a(x, x_delayed, t), b(x, x_delayed, t), vectorized over paths."""
    drift: Callable
    noise: Callable
    tau: float
    declared_bounds: Optional[Tuple[float, float, float]] = None

    def functional(self) -> FunctionalCoefficients:
        tau = self.tau
        a, b = self.drift, self.noise
        return FunctionalCoefficients(lambda seg, t: float(a(seg(0.0), seg(-tau), t)),
                                      lambda seg, t: float(b(seg(0.0), seg(-tau), t)),
                                      self.declared_bounds)


@dataclass(frozen=True)
class SolverConfig:
    dt: float
    horizon: float
    explosion_threshold: float = DEFAULT_THRESHOLD
    interpolation: str = LINEAR

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ConfigError("dt must be a positive finite time")
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise ConfigError("horizon must be a positive finite time")
        if self.dt > self.horizon:
            raise ConfigError("dt must not exceed the horizon")
        if not self.explosion_threshold > 0:
            raise ConfigError("explosion_threshold must be positive")
        if self.interpolation != LINEAR:
            raise ConfigError("only linear interpolation between grid points is supported for delayed lookups")

    def check_model(self, tau: float, initial: Optional[Segment] = None):
        if self.dt > tau:
            raise ConfigError(f"dt={self.dt} exceeds the delay tau={tau} (need a grid point per delay window)")
        if initial is not None and not sup_norm(initial) < self.explosion_threshold:
            raise ConfigError("explosion_threshold must exceed the initial sup-norm")


@dataclass(frozen=True)
class Trajectory:
    path: CadlagPath
    tau: float
    explosion_time: Optional[float] = None
    violations: tuple = ()
    n_violations: int = 0
    explosion_threshold: float = DEFAULT_THRESHOLD

    @property
    def exploded(self) -> bool:
        return self.explosion_time is not None

    @property
    def horizon(self) -> float:
        return self.path.end

    def solver_times(self) -> np.ndarray:
        return self.path.times[self.path.times >= 0]


class _Bounds:
    def __init__(self, declared):
        self.declared = declared
        self.log = []
        self.count = 0

    def check(self, t, a, b):
        if self.declared is None:
            return
        amax, amin, beta = self.declared
        for kind, bad, val in (("drift>alpha_max", a > amax, a), ("drift<-alpha_min", a < -amin, a),
                               ("noise^2>beta^2", b * b > beta * beta, b)):
            if bad:
                self.count += 1
                if len(self.log) < MAX_LOGGED_VIOLATIONS:
                    self.log.append((float(t), kind, float(val)))


def _solver_grid(noise: NoisePath, config: SolverConfig):
    nt = noise.base.times
    k = int(np.searchsorted(nt, config.horizon - 1e-9 * config.dt, side="left"))
    if k >= nt.size or abs(nt[k] - config.horizon) > 1e-9 * config.dt:
        raise ConfigError(f"noise path (horizon {noise.horizon}) does not provide grid time {config.horizon}")
    if not math.isclose(noise.dt, config.dt, rel_tol=1e-9):
        raise ConfigError(f"noise dt={noise.dt} differs from solver dt={config.dt}")
    right = noise.base.values[:k + 1]
    left = noise.base.left_values[:k + 1]
    return nt[:k + 1], right, left


def _finite_or_abort(val, name, t, x):
    if not math.isfinite(val):
        raise SolverError(f"non-finite {name} coefficient at t={t}", {"t": t, "x": x, name: val})
    return val


def integrate_sdde(coeffs: FunctionalCoefficients, initial: Segment, noise: NoisePath,
                   config: SolverConfig) -> Trajectory:
    """Euler-Maruyama on the jump-adapted grid of ``noise``.

    At a jump time s the step is split: the continuous increment is taken first,
    then the jump is applied with b evaluated on the pre-jump segment, whose value
    at 0 is X(s-).
    """
    tau = initial.tau
    config.check_model(tau, initial)
    grid, l_right, l_left = _solver_grid(noise, config)
    hist = initial.samples
    h = hist.times.size
    n = grid.size
    total = h + n - 1
    times = np.empty(total)
    values = np.zeros(total)
    times[:h] = hist.times
    times[h:] = grid[1:]
    values[:h] = hist.values
    jidx = np.empty(total, np.int64)
    jleft = np.empty(total)
    nj = hist.jump_index.size
    jidx[:nj] = hist.jump_index
    jleft[:nj] = hist.jump_left
    thr = config.explosion_threshold
    drift, noise_fn = coeffs.drift, coeffs.noise
    bounds = _Bounds(coeffs.declared_bounds)
    explosion = None

    def view(c):
        return CadlagPath._trusted(times[:c + 1], values[:c + 1], jidx[:nj], jleft[:nj], LINEAR)

    x = values[h - 1]
    for j in range(n - 1):
        c = h - 1 + j
        t = times[c]
        seg = Segment.view(view(c), t, tau)
        a = _finite_or_abort(drift(seg, t), "drift", t, x)
        b = _finite_or_abort(noise_fn(seg, t), "noise", t, x)
        bounds.check(t, a, b)
        t1 = times[c + 1]
        x_left = x + a * (t1 - t) + b * (l_left[j + 1] - l_right[j])
        jump = l_right[j + 1] - l_left[j + 1]
        x_new = x_left
        if jump != 0.0 and math.isfinite(x_left) and abs(x_left) < thr:
            values[c + 1] = x_left
            pre = Segment.view(view(c + 1), t1, tau)
            b_pre = _finite_or_abort(noise_fn(pre, t1), "noise", t1, x_left)
            bounds.check(t1, 0.0, b_pre)
            x_new = x_left + b_pre * jump
            if x_new != x_left:
                jidx[nj] = c + 1
                jleft[nj] = x_left
                nj += 1
        values[c + 1] = x_new
        if not math.isfinite(x_new) or abs(x_new) >= thr:
            if not math.isfinite(x_new):
                values[c + 1] = math.copysign(math.inf, x_new) if not math.isnan(x_new) else math.inf
            explosion = float(t1)
            values[c + 2:] = 0.0
            break
        x = x_new

    path = CadlagPath._trusted(times, values, jidx[:nj].copy(), jleft[:nj].copy(), LINEAR)
    return Trajectory(path, tau, explosion, tuple(bounds.log), bounds.count, thr)


def picard_iterate(coeffs: FunctionalCoefficients, initial: Segment, noise: NoisePath,
                   n_iters: int, config: SolverConfig) -> List[Trajectory]:
    """Iterates X^0 = Phi(0) (constant), X^{n+1} = Phi(0) + int a(X^n_s) ds + int b(X^n_{s-}) dL,
    with both integrals discretized on the Euler grid. Returns [X^0, ..., X^n_iters]."""
    if n_iters < 1:
        raise ValueError("n_iters must be a positive integer")
    tau = initial.tau
    config.check_model(tau, initial)
    grid, l_right, l_left = _solver_grid(noise, config)
    hist = initial.samples
    h = hist.times.size
    times = np.concatenate((hist.times, grid[1:]))
    x0 = hist.values[-1]
    dt_k = np.diff(grid)
    d_cont = l_left[1:] - l_right[:-1]
    d_jump = l_right[1:] - l_left[1:]
    jump_steps = np.flatnonzero(d_jump != 0.0)

    def make(sol_right, sol_jidx, sol_jleft):
        values = np.concatenate((hist.values, sol_right[1:]))
        ji = np.concatenate((hist.jump_index, np.asarray(sol_jidx, np.int64) + h - 1))
        jl = np.concatenate((hist.jump_left, np.asarray(sol_jleft, float)))
        return CadlagPath._trusted(times, values, ji, jl, LINEAR)

    cur = make(np.full(grid.size, x0), [], [])
    out = [Trajectory(cur, tau, None, (), 0, config.explosion_threshold)]
    for _ in range(n_iters):
        a = np.empty(grid.size - 1)
        b = np.empty(grid.size - 1)
        for j in range(grid.size - 1):
            seg = Segment.view(cur, grid[j], tau)
            a[j] = _finite_or_abort(coeffs.drift(seg, grid[j]), "drift", grid[j], seg(0.0))
            b[j] = _finite_or_abort(coeffs.noise(seg, grid[j]), "noise", grid[j], seg(0.0))
        b_pre = np.zeros(grid.size - 1)
        for j in jump_steps:
            seg = Segment.view(cur, grid[j + 1], tau, left_limit=True)
            b_pre[j] = coeffs.noise(seg, grid[j + 1])
        cont = a * dt_k + b * d_cont
        jumps = b_pre * d_jump
        right = x0 + np.concatenate(([0.0], np.cumsum(cont + jumps)))
        left = right[1:] - jumps
        sel = jumps != 0.0
        cur = make(right, np.flatnonzero(sel) + 1, left[sel])
        out.append(Trajectory(cur, tau, None, (), 0, config.explosion_threshold))
    return out


def transform_exp(traj: Trajectory) -> Trajectory:
    """x = e^y pointwise; values after an explosion stay frozen at 0."""
    with np.errstate(over="ignore"):
        path = traj.path.map(np.exp)
    if traj.explosion_time is not None:
        after = path.times > traj.explosion_time
        values = np.where(after, 0.0, path.values)
        keep = ~after[path.jump_index]
        path = CadlagPath._trusted(path.times, values, path.jump_index[keep], path.jump_left[keep], path.mode)
    return Trajectory(path, traj.tau, traj.explosion_time, traj.violations, traj.n_violations,
                      traj.explosion_threshold)


# --- vectorized ensembles ---------------------------------------------------------

@dataclass
class EnsembleResult:
    """Paths on the uniform grid k*dt, k >= -m (m = tau/dt), one row per path."""
    times: np.ndarray
    values: np.ndarray
    explosion_time: np.ndarray  # nan where the path did not explode
    tau: float
    explosion_threshold: float = DEFAULT_THRESHOLD

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    def trajectory(self, i: int) -> Trajectory:
        et = self.explosion_time[i]
        return Trajectory(CadlagPath._trusted(self.times, self.values[i], np.zeros(0, np.int64), np.zeros(0)),
                          self.tau, None if np.isnan(et) else float(et), (), 0, self.explosion_threshold)

    def trajectories(self) -> List[Trajectory]:
        return [self.trajectory(i) for i in range(self.n_paths)]


def delay_steps(tau: float, dt: float) -> int:
    m = int(round(tau / dt))
    if m < 1 or abs(m * dt - tau) > 1e-9 * tau:
        raise ConfigError(f"vectorized integration needs tau/dt integral (tau={tau}, dt={dt})")
    return m


def history_matrix(initial, tau: float, dt: float, n_paths: int) -> np.ndarray:
    """Initial data on the grid -m*dt..0 as an (n_paths, m+1) array.

    ``initial`` may be a Segment, a list of Segments, or an array of grid values.
    """
    m = delay_steps(tau, dt)
    theta = np.linspace(-tau, 0.0, m + 1)
    if isinstance(initial, Segment):
        return np.tile(initial(theta), (n_paths, 1))
    if isinstance(initial, (list, tuple)) and initial and isinstance(initial[0], Segment):
        if len(initial) != n_paths:
            raise ConfigError("need one initial segment per path")
        return np.array([s(theta) for s in initial])
    arr = np.asarray(initial, float)
    if arr.ndim == 1:
        arr = np.tile(arr, (n_paths, 1))
    if arr.shape != (n_paths, m + 1):
        raise ConfigError(f"initial history must have shape ({n_paths}, {m + 1})")
    return arr


def integrate_ensemble(coeffs: DelayCoefficients, initial, increments: np.ndarray, dt: float,
                       explosion_threshold: float = DEFAULT_THRESHOLD) -> EnsembleResult:
    """Euler-Maruyama for all paths at once; ``increments[i, k]`` is the driver
    increment of path i over step k."""
    tau = coeffs.tau
    if dt > tau:
        raise ConfigError(f"dt={dt} exceeds the delay tau={tau}")
    m = delay_steps(tau, dt)
    increments = np.atleast_2d(increments)
    n_paths, n_steps = increments.shape
    hist = history_matrix(initial, tau, dt, n_paths)
    if np.any(np.abs(hist) >= explosion_threshold):
        raise ConfigError("explosion_threshold must exceed the initial sup-norm")
    values = np.empty((n_paths, m + 1 + n_steps))
    values[:, :m + 1] = hist
    times = np.arange(-m, n_steps + 1) * dt
    alive = np.ones(n_paths, bool)
    expl = np.full(n_paths, np.nan)
    a_fn, b_fn = coeffs.drift, coeffs.noise
    x = values[:, m].copy()
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n_steps):
            t = k * dt
            xd = values[:, k]
            a = a_fn(x, xd, t)
            b = b_fn(x, xd, t)
            bad = alive & ~(np.isfinite(a) & np.isfinite(b))
            if np.any(bad):
                i = int(np.flatnonzero(bad)[0])
                raise SolverError(f"non-finite coefficient at t={t} on path {i}",
                                  {"t": t, "path": i, "x": float(x[i])})
            x_new = x + a * dt + b * increments[:, k]
            blow = alive & ~(np.abs(x_new) < explosion_threshold)
            if np.any(blow):
                expl[blow] = t + dt
                alive &= ~blow
            x = np.where(alive, x_new, 0.0)
            values[:, m + 1 + k] = np.where(blow, x_new, x)
    return EnsembleResult(times, values, expl, tau, explosion_threshold)


def simulate_ensemble(coeffs: DelayCoefficients, initial, spec: RegulatedLevySpec, horizon: float,
                      dt: float, master_seed: int, n_paths: int,
                      explosion_threshold: float = DEFAULT_THRESHOLD) -> List[Trajectory]:
    """Seeded ensemble. Brownian drivers use the vectorized integrator; jump
    drivers run ``integrate_sdde`` per path on its own jump-adapted grid."""
    if n_paths == 0:
        return []
    n_steps = int(round(horizon / dt))
    if abs(n_steps * dt - horizon) > 1e-9 * horizon:
        raise ConfigError("horizon must be a multiple of dt")
    if spec.lambda_N == 0:
        incr = spec.sigma * brownian_increments(n_paths, n_steps, dt, master_seed)
        return integrate_ensemble(coeffs, initial, incr, dt, explosion_threshold).trajectories()
    fc = coeffs.functional()
    config = SolverConfig(dt, horizon, explosion_threshold)
    out = []
    for i in range(n_paths):
        seg = initial[i] if isinstance(initial, (list, tuple)) else initial
        if not isinstance(seg, Segment):
            raise ConfigError("jump-driven ensembles need Segment initial data")
        out.append(integrate_sdde(fc, seg, sample_levy(spec, horizon, dt, master_seed, i), config))
    return out
