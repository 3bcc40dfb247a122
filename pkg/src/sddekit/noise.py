"""Driving noise: Brownian motion plus bounded compound Poisson jumps.

Randomness comes from counter-based Philox streams keyed by
(master seed, path index, role), so every path can be regenerated on its own
regardless of how an ensemble is scheduled.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Optional

import numpy as np

from .paths import CadlagPath, LINEAR

ROLES = {"gaussian": 0, "poisson": 1, "jumpsize": 2, "initial": 3}
NO_CONTINUOUS_DRIFT = "no_continuous_drift"
MARTINGALE = "martingale"
DRIFT_MODES = (NO_CONTINUOUS_DRIFT, MARTINGALE)


class NoiseSpecError(ValueError):
    pass


def stream(master_seed: int, path_index: int, role: str) -> np.random.Generator:
    """Independent generator for one (seed, path, role) triple."""
    if role not in ROLES:
        raise ValueError(f"unknown stream role {role!r}")
    if master_seed < 0 or path_index < 0:
        raise ValueError("seed and path index must be non-negative")
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(path_index), ROLES[role]))
    return np.random.Generator(np.random.Philox(ss))


# module-level samplers keep the built-in laws picklable for worker processes
def _point_mass(value, rng, n):
    return np.full(n, value)


def _uniform(zeta, rng, n):
    return rng.uniform(-zeta, zeta, n)


def _two_point(zeta, rng, n):
    return np.where(rng.random(n) < 0.5, -zeta, zeta)


@dataclass(frozen=True)
class JumpLaw:
    """Jump-size distribution with declared moments and support bound ``zeta``.

    ``truncated_mean`` is E[Z 1{|Z| <= 1}].
    """
    name: str
    zeta: float
    mean: float
    second_moment: float
    truncated_mean: float
    sampler: Callable[[np.random.Generator, int], np.ndarray] = field(repr=False, compare=False)
    params: tuple = ()

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        z = np.asarray(self.sampler(rng, n), dtype=float)
        if z.shape != (n,):
            raise NoiseSpecError(f"jump sampler returned shape {z.shape}, expected ({n},)")
        if np.any(np.abs(z) > self.zeta):
            raise NoiseSpecError(f"jump law {self.name} produced a jump larger than zeta={self.zeta}")
        return z

    @staticmethod
    def point_mass(value: float) -> "JumpLaw":
        value = float(value)
        return JumpLaw("point_mass", abs(value), value, value * value,
                       value if abs(value) <= 1 else 0.0,
                       partial(_point_mass, value), (value,))

    @staticmethod
    def uniform(zeta: float) -> "JumpLaw":
        zeta = float(zeta)
        if zeta < 0:
            raise NoiseSpecError("zeta must be non-negative")
        return JumpLaw("uniform", zeta, 0.0, zeta * zeta / 3.0, 0.0,
                       partial(_uniform, zeta), (zeta,))

    @staticmethod
    def two_point(zeta: float) -> "JumpLaw":
        zeta = float(zeta)
        if zeta < 0:
            raise NoiseSpecError("zeta must be non-negative")
        return JumpLaw("two_point", zeta, 0.0, zeta * zeta, 0.0,
                       partial(_two_point, zeta), (zeta,))

    @staticmethod
    def custom(sampler, mean: float, second_moment: float, zeta: float,
               truncated_mean: Optional[float] = None, name: str = "custom") -> "JumpLaw":
        if not (math.isfinite(mean) and math.isfinite(second_moment) and math.isfinite(zeta)):
            raise NoiseSpecError("custom jump law needs finite declared moments and zeta")
        if second_moment < mean * mean - 1e-12 or second_moment > zeta * zeta + 1e-12:
            raise NoiseSpecError("declared moments inconsistent with the zeta bound")
        if truncated_mean is None:
            if zeta > 1:
                raise NoiseSpecError("custom law with zeta > 1 must declare E[Z 1{|Z|<=1}]")
            truncated_mean = mean
        return JumpLaw(name, float(zeta), float(mean), float(second_moment),
                       float(truncated_mean), sampler)


@dataclass(frozen=True)
class RegulatedLevySpec:
    sigma: float = 1.0
    lambda_N: float = 0.0
    jump_law: JumpLaw = field(default_factory=lambda: JumpLaw.point_mass(0.0))
    zeta: Optional[float] = None
    drift_mode: str = NO_CONTINUOUS_DRIFT

    def __post_init__(self):
        if self.zeta is None:
            object.__setattr__(self, "zeta", self.jump_law.zeta)
        for name in ("sigma", "lambda_N", "zeta"):
            val = getattr(self, name)
            if not (isinstance(val, (int, float)) and val >= 0):
                raise NoiseSpecError(f"{name} must be a non-negative real, got {val!r}")
        if not math.isfinite(self.lambda_N):
            raise NoiseSpecError("infinite jump intensity is not supported (finite-activity only)")
        if not math.isfinite(self.sigma) or not math.isfinite(self.zeta):
            raise NoiseSpecError("sigma and zeta must be finite")
        if self.jump_law.zeta > self.zeta:
            raise NoiseSpecError(f"jump law support bound {self.jump_law.zeta} exceeds zeta={self.zeta}")
        if self.drift_mode not in DRIFT_MODES:
            raise NoiseSpecError(f"drift_mode must be one of {DRIFT_MODES}")
        if self.drift_mode == MARTINGALE and self.lambda_N > 0 and self.jump_law.mean != 0:
            raise NoiseSpecError("martingale mode with lambda_N > 0 requires zero-mean jumps")

    @staticmethod
    def brownian(sigma: float = 1.0) -> "RegulatedLevySpec":
        return RegulatedLevySpec(sigma=sigma)

    @property
    def compensator_drift(self) -> float:
        """Deterministic drift added to the raw jump diffusion."""
        if self.drift_mode == MARTINGALE:
            return -self.lambda_N * self.jump_law.mean
        return 0.0


def compensator_rate(spec: RegulatedLevySpec) -> float:
    return spec.sigma ** 2 + spec.lambda_N * spec.jump_law.second_moment


def mean_rate(spec: RegulatedLevySpec) -> float:
    if spec.drift_mode == MARTINGALE:
        return 0.0
    return spec.lambda_N * spec.jump_law.mean


@dataclass(frozen=True)
class NoisePath:
    base: CadlagPath
    jump_times: np.ndarray
    jump_sizes: np.ndarray
    spec: RegulatedLevySpec
    dt: float

    @property
    def horizon(self) -> float:
        return self.base.end

    def jump_events(self):
        return list(zip(self.jump_times.tolist(), self.jump_sizes.tolist()))


def uniform_grid(horizon: float, dt: float) -> np.ndarray:
    if not dt > 0:
        raise NoiseSpecError("degenerate-grid: dt must be positive")
    if not horizon > 0 or dt > horizon * (1 + 1e-12):
        raise NoiseSpecError("dt must not exceed the horizon")
    n = max(1, int(math.ceil(horizon / dt - 1e-9)))
    grid = np.arange(n + 1) * dt
    grid[-1] = horizon
    return grid


def poisson_times(rng: np.random.Generator, rate: float, horizon: float) -> np.ndarray:
    """Event times of a rate-``rate`` Poisson process on (0, horizon]."""
    if rate == 0:
        return np.zeros(0)
    out = []
    t = 0.0
    batch = max(16, int(rate * horizon * 1.2) + 16)
    while True:
        arr = t + np.cumsum(rng.exponential(1.0 / rate, batch))
        inside = arr[arr <= horizon]
        out.append(inside)
        if inside.size < batch:
            break
        t = arr[-1]
    return np.concatenate(out)


def levy_grid(spec: RegulatedLevySpec, horizon: float, dt: float, seed: int, path_index: int = 0):
    """Raw arrays of a noise realization on the jump-adapted grid.

    Returns (times, right, left, jump_pos, jump_sizes): ``right``/``left`` are L
    and L(t-) at every merged grid time, ``jump_pos`` indexes the jump times.
    """
    grid = uniform_grid(horizon, dt)
    g = stream(seed, path_index, "gaussian")
    n = grid.size - 1
    if spec.sigma > 0:
        w = np.empty(n + 1)
        w[0] = 0.0
        np.cumsum(np.sqrt(np.diff(grid)) * g.standard_normal(n), out=w[1:])
    else:
        w = np.zeros(n + 1)
    if spec.lambda_N > 0:
        jt = poisson_times(stream(seed, path_index, "poisson"), spec.lambda_N, horizon)
        js = spec.jump_law.sample(stream(seed, path_index, "jumpsize"), jt.size)
    else:
        jt = js = np.zeros(0)
    if jt.size == 0:
        right = spec.sigma * w + spec.compensator_drift * grid
        return grid, right, right, np.zeros(0, np.int64), js

    # Brownian values at jump times by sequential bridging inside each cell
    cell = np.searchsorted(grid, jt, side="right") - 1
    on_grid = grid[cell] == jt
    wj = np.empty(jt.size)
    bridge_normals = g.standard_normal(jt.size) if spec.sigma > 0 else np.zeros(jt.size)
    prev_cell, a, wa = -1, 0.0, 0.0
    for k in range(jt.size):
        c = cell[k]
        if on_grid[k]:
            wj[k] = w[c]
            continue
        if c != prev_cell:
            a, wa, prev_cell = grid[c], w[c], c
        b, wb = grid[c + 1], w[c + 1]
        s = jt[k]
        mean = wa + (s - a) / (b - a) * (wb - wa)
        var = (s - a) * (b - s) / (b - a)
        wj[k] = mean + math.sqrt(max(var, 0.0)) * bridge_normals[k]
        a, wa = s, wj[k]

    extra_t = jt[~on_grid]
    times = np.concatenate((grid, extra_t))
    wall = np.concatenate((w, wj[~on_grid]))
    order = np.argsort(times, kind="stable")
    times, wall = times[order], wall[order]
    jump_pos = np.searchsorted(times, jt)
    jumps_at = np.zeros(times.size)
    np.add.at(jumps_at, jump_pos, js)
    cum = np.cumsum(jumps_at)
    right = spec.sigma * wall + spec.compensator_drift * times + cum
    left = right - jumps_at
    return times, right, left, jump_pos, js


def sample_levy(spec: RegulatedLevySpec, horizon: float, dt: float, seed: int,
                path_index: int = 0) -> NoisePath:
    """One realization of L on [0, horizon]: a uniform dt-grid merged with the
    exact jump times. Deterministic in (spec, horizon, dt, seed, path_index)."""
    times, right, left, jump_pos, js = levy_grid(spec, horizon, dt, seed, path_index)
    upos, first = np.unique(jump_pos, return_index=True)
    base = CadlagPath._trusted(times, right, upos, left[upos], LINEAR)
    jt = times[jump_pos]
    return NoisePath(base, jt, js, spec, float(dt))


def realized_quadratic_variation(path: NoisePath, t: float) -> float:
    if t < 0 or t > path.horizon:
        raise ValueError(f"t={t} outside [0, {path.horizon}]")
    sizes = path.jump_sizes[path.jump_times <= t]
    return path.spec.sigma ** 2 * t + float(np.sum(sizes ** 2))


def brownian_increments(n_paths: int, n_steps: int, dt: float, master_seed: int,
                        first_path: int = 0) -> np.ndarray:
    """Standard Brownian increments, one row per path, matching ``sample_levy``
    on a grid of exact multiples of dt."""
    out = np.empty((n_paths, n_steps))
    sd = math.sqrt(dt)
    for i in range(n_paths):
        out[i] = sd * stream(master_seed, first_path + i, "gaussian").standard_normal(n_steps)
    return out


def coarsen_increments(incr: np.ndarray, factor: int) -> np.ndarray:
    """Sum consecutive blocks of ``factor`` increments (shared-noise refinement)."""
    n_paths, n = incr.shape
    if n % factor:
        raise ValueError("number of steps must be divisible by the coarsening factor")
    return incr.reshape(n_paths, n // factor, factor).sum(axis=2)
