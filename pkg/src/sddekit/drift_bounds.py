"""Tail bounds for processes with negative drift and Monte Carlo estimators
that try to falsify them.

The processes are Y(t) = -int_0^t a(s) ds + int_0^t b(s) dL(s) with a >= alpha,
b^2 <= beta^2 and L a Brownian motion or a bounded-jump diffusion.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np
from scipy.stats import beta as beta_dist

from .noise import RegulatedLevySpec, levy_grid, stream, uniform_grid

KAPPA_SENTINEL = 1e6
DEFAULT_Q = 1.0 - 1e-3
DEFAULT_KAPPA2 = 1.0


class InfeasibleError(ValueError):
    pass


# --- closed-form bounds -------------------------------------------------------

def _positive(**kw):
    for k, v in kw.items():
        if not v > 0:
            raise ValueError(f"{k} must be positive, got {v}")


def bound_brownian_reverse_sup(alpha: float, beta: float, R: float) -> float:
    _positive(alpha=alpha, beta=beta)
    b2 = beta * beta
    return (4.0 * math.exp(-R * R / (64.0 * b2))
            + 4.0 * math.exp(-alpha * R / (64.0 * b2)) / -math.expm1(-alpha * alpha / (128.0 * b2)))


def bound_brownian_interval_sup(beta: float, T: float, R: float) -> float:
    _positive(beta=beta, T=T)
    return 2.0 * math.exp(-R * R / (16.0 * beta * beta * T))


def bound_d1_reverse_sup(alpha: float, beta1: float, R: float) -> float:
    """Reverse-supremum bound when b^2 is also bounded below by a positive constant."""
    _positive(alpha=alpha, beta1=beta1)
    b2 = beta1 * beta1
    return (2.0 * math.exp(-R * R / (8.0 * b2))
            + 2.0 * math.exp(-alpha * R / (8.0 * b2)) / -math.expm1(-alpha * alpha / (16.0 * b2)))


def kappa_function(kappa: float, beta: float, zeta: float, lambda_N: float, q: float) -> float:
    """(lambda_N / (kappa q)) q (exp(kappa zeta beta / q) - 1), the split with p = q."""
    x = kappa * zeta * beta / q
    if x > 700:
        return math.inf
    return lambda_N / kappa * math.expm1(x)


def solve_kappa1(alpha: float, beta: float, zeta: float, lambda_N: float, q: float = DEFAULT_Q,
                 sentinel: float = KAPPA_SENTINEL, rtol: float = 1e-10) -> float:
    """Largest kappa with kappa_function(kappa) <= alpha (bisection on a doubling bracket)."""
    _positive(alpha=alpha, beta=beta)
    if not 0 < q < 1:
        raise ValueError("q must lie in (0, 1)")
    if lambda_N == 0 or zeta == 0:
        return sentinel
    floor = lambda_N * zeta * beta / q
    if not alpha > floor:
        raise InfeasibleError(f"alpha={alpha} must exceed lambda_N*zeta*beta/q={floor}")
    f = lambda k: kappa_function(k, beta, zeta, lambda_N, q)
    lo, hi = 0.0, 1.0
    while f(hi) <= alpha:
        lo, hi = hi, hi * 2.0
        if hi > sentinel:
            return sentinel
    while hi - lo > rtol * hi:
        mid = 0.5 * (lo + hi)
        if f(mid) <= alpha:
            lo = mid
        else:
            hi = mid
    if lo == 0.0:  # alpha extremely close to the floor
        lo = hi
        while f(lo) > alpha:
            lo *= 0.5
    return lo


@dataclass(frozen=True)
class NegativeDriftParams:
    alpha: float
    beta: float
    sigma: float
    lambda_N: float = 0.0
    zeta: float = 0.0
    kappa1: Optional[float] = None
    kappa2: float = DEFAULT_KAPPA2
    R0: Optional[float] = None
    jump_mean: float = 0.0
    martingale: bool = False

    def __post_init__(self):
        _positive(alpha=self.alpha, beta=self.beta)
        for k in ("sigma", "lambda_N", "zeta"):
            if getattr(self, k) < 0:
                raise ValueError(f"{k} must be non-negative")
        if not self.alpha > self.lambda_N * self.zeta * self.beta:
            raise InfeasibleError("alpha must exceed lambda_N*zeta*beta")
        if self.kappa2 is not None and not self.kappa2 > 0:
            raise ValueError("kappa2 must be positive")
        if self.kappa1 is not None:
            if not self.kappa1 > 0:
                raise ValueError("kappa1 must be positive")
            if (self.kappa1 < KAPPA_SENTINEL and
                    kappa_function(self.kappa1, self.beta, self.zeta, self.lambda_N, 0.5) > self.alpha):
                raise InfeasibleError("supplied kappa1 violates its defining inequality")

    @staticmethod
    def from_spec(alpha: float, beta: float, spec: RegulatedLevySpec, **kw) -> "NegativeDriftParams":
        return NegativeDriftParams(alpha, beta, spec.sigma, spec.lambda_N, spec.zeta,
                                   jump_mean=spec.jump_law.mean,
                                   martingale=spec.drift_mode == "martingale", **kw)

    def resolved_kappa1(self) -> float:
        if self.kappa1 is not None:
            return self.kappa1
        # the half/half split of the drift between Brownian and jump parts
        return solve_kappa1(self.alpha, self.beta, self.zeta, self.lambda_N, q=0.5)

    def resolved_R0(self, T: float) -> float:
        if self.R0 is not None:
            return self.R0
        if self.martingale:
            return 0.0
        return 4.0 * self.lambda_N * abs(self.jump_mean) * self.beta * T


def _need_sigma(params: NegativeDriftParams):
    if not params.sigma > 0:
        raise ValueError("sigma = 0: the bound needs a Brownian component to carry half the drift")


def bound_levy_reverse_sup(params: NegativeDriftParams, R: float) -> float:
    _need_sigma(params)
    k1 = params.resolved_kappa1()
    s2 = params.beta ** 2 * params.sigma ** 2
    a = params.alpha
    return (4.0 * math.exp(-R * R / (256.0 * s2))
            + 4.0 * math.exp(-a * R / (256.0 * s2)) / -math.expm1(-a * a / (512.0 * s2))
            + math.exp(-k1 * R))


def interval_constant(params: NegativeDriftParams, T: float) -> float:
    k2, lam, zb = params.kappa2, params.lambda_N, params.zeta * params.beta
    return math.exp(4.0 * k2 * lam * zb * T) * math.exp(lam * T * math.expm1(4.0 * k2 * zb))


def bound_levy_interval_sup(params: NegativeDriftParams, T: float, R: float) -> float:
    _need_sigma(params)
    _positive(T=T)
    s2 = params.beta ** 2 * params.sigma ** 2
    ind = 1.0 if R < params.resolved_R0(T) else 0.0
    return (2.0 * math.exp(-R * R / (64.0 * s2 * T))
            + interval_constant(params, T) * math.exp(-params.kappa2 * R) + ind)


def solve_level(bound: Callable[[float], float], target: float, hi: float = 1.0) -> float:
    """Smallest R with bound(R) <= target, for a bound decreasing in R."""
    from scipy.optimize import brentq
    while bound(hi) > target:
        hi *= 2.0
    if bound(0.0) <= target:
        return 0.0
    return brentq(lambda r: bound(r) - target, 0.0, hi, xtol=1e-12, rtol=1e-12)


# --- Monte Carlo ----------------------------------------------------------------

def clopper_pearson_upper(k: int, n: int, level: float = 0.99) -> float:
    """One-sided upper confidence limit for a binomial proportion."""
    if n <= 0:
        raise ValueError("n must be positive")
    if k >= n:
        return 1.0
    return float(beta_dist.ppf(level, k + 1, n - k))


def _as_array(fn, t):
    v = fn(t)
    return np.broadcast_to(np.asarray(v, float), np.shape(t))


def _integral_paths(drift_fn, noise_fn, levy: RegulatedLevySpec, horizon: float, dt: float,
                    seed: int, first: int, count: int):
    """Yield (times, Y_right, Y_left) for each path of
    Y = -int a ds + int b dL, on the jump-adapted grid."""
    if levy.lambda_N == 0:
        grid = uniform_grid(horizon, dt)
        sd = np.sqrt(np.diff(grid))
        a = _as_array(drift_fn, grid[:-1]) if drift_fn is not None else np.zeros(grid.size - 1)
        b = _as_array(noise_fn, grid[:-1])
        det = -a * np.diff(grid) + b * levy.compensator_drift * np.diff(grid)
        bsd = b * sd * levy.sigma
        for block in range(first, first + count, 256):
            m = min(256, first + count - block)
            z = np.empty((m, grid.size - 1))
            if levy.sigma > 0:
                for i in range(m):
                    z[i] = stream(seed, block + i, "gaussian").standard_normal(grid.size - 1)
            else:
                z[:] = 0.0
            y = np.zeros((m, grid.size))
            np.cumsum(det + bsd * z, axis=1, out=y[:, 1:])
            for i in range(m):
                yield grid, y[i], y[i]
        return
    for i in range(first, first + count):
        times, right, left, jpos, _ = levy_grid(levy, horizon, dt, seed, i)
        a = _as_array(drift_fn, times[:-1]) if drift_fn is not None else np.zeros(times.size - 1)
        b = _as_array(noise_fn, times[:-1])
        b_next = _as_array(noise_fn, times[1:])
        jump = right[1:] - left[1:]
        dy = -a * np.diff(times) + b * (left[1:] - right[:-1]) + b_next * jump
        y = np.concatenate(([0.0], np.cumsum(dy)))
        y_left = y.copy()
        y_left[1:] -= b_next * jump
        yield times, y, y_left


def _reverse_sup_chunk(args):
    drift_fn, noise_fn, levy, l, Rs, dt, seed, first, count = args
    hits = np.zeros(len(Rs), np.int64)
    for _, y, yl in _integral_paths(drift_fn, noise_fn, levy, l, dt, seed, first, count):
        s = y[-1] - min(y.min(), yl.min())
        hits += s >= Rs
    return hits


def _interval_sup_chunk(args):
    noise_fn, levy, t0, T, Rs, dt, seed, first, count = args
    hits = np.zeros(len(Rs), np.int64)
    horizon = t0 + T
    for times, y, yl in _integral_paths(None, noise_fn, levy, horizon, dt, seed, first, count):
        k0 = int(np.searchsorted(times, t0 - 1e-9 * dt, side="left"))
        base = y[k0]
        s = max(y[k0:].max(), yl[k0 + 1:].max() if k0 + 1 < y.size else -np.inf) - base
        hits += s >= Rs
    return hits


def _run(chunk_fn, make_args, n_paths, n_workers, chunk=2000):
    starts = list(range(0, n_paths, chunk))
    jobs = [make_args(s, min(chunk, n_paths - s)) for s in starts]
    if n_workers and n_workers > 1:
        with ProcessPoolExecutor(n_workers) as ex:
            parts = list(ex.map(chunk_fn, jobs))
    else:
        parts = [chunk_fn(j) for j in jobs]
    return np.sum(parts, axis=0)  # integer counts: order-independent


def _finish(hits, n_paths, scalar):
    est = hits / n_paths
    ci = np.array([clopper_pearson_upper(int(k), n_paths) for k in hits])
    if scalar:
        return float(est[0]), float(ci[0])
    return est, ci


def _check_mc(n_paths, dt):
    if not (isinstance(n_paths, (int, np.integer)) and n_paths > 0):
        raise ValueError("n_paths must be a positive integer")
    if not dt > 0:
        raise ValueError("dt must be positive")


def estimate_reverse_sup_tail(drift_fn, noise_fn, levy: RegulatedLevySpec, l: float, R, n_paths: int,
                              dt: float, master_seed: int, n_workers: int = 1):
    """Frequency of sup_{0<=theta<=l} (Y(l) - Y(theta)) >= R and its one-sided 99%
    Clopper-Pearson upper limit. ``R`` may be a scalar or an array of levels."""
    _check_mc(n_paths, dt)
    scalar = np.ndim(R) == 0
    Rs = np.atleast_1d(np.asarray(R, float))
    if l == 0:
        hits = (Rs <= 0).astype(np.int64) * n_paths
        return _finish(hits, n_paths, scalar)
    hits = _run(_reverse_sup_chunk,
                lambda s, c: (drift_fn, noise_fn, levy, l, Rs, dt, master_seed, s, c),
                n_paths, n_workers)
    return _finish(hits, n_paths, scalar)


def estimate_interval_sup_tail(noise_fn, levy: RegulatedLevySpec, t0: float, T: float, R, n_paths: int,
                               dt: float, master_seed: int, n_workers: int = 1):
    """Frequency of sup_{t0<=t<=t0+T} int_{(t0,t]} b dL >= R with its 99% upper limit."""
    _check_mc(n_paths, dt)
    if not T > 0 or t0 < 0:
        raise ValueError("need T > 0 and t0 >= 0")
    scalar = np.ndim(R) == 0
    Rs = np.atleast_1d(np.asarray(R, float))
    hits = _run(_interval_sup_chunk,
                lambda s, c: (noise_fn, levy, t0, T, Rs, dt, master_seed, s, c),
                n_paths, n_workers)
    return _finish(hits, n_paths, scalar)


def dt_refinement_study(estimator, dt: float, n_paths: int, z_crit: float = 3.0, **kw):
    """Re-run an estimator at dt/2; flags under-resolution when the finer estimate
    exceeds the coarse one by more than ``z_crit`` pooled standard errors."""
    p1, _ = estimator(dt=dt, n_paths=n_paths, **kw)
    p2, _ = estimator(dt=dt / 2, n_paths=n_paths, **kw)
    pool = 0.5 * (p1 + p2)
    se = math.sqrt(max(pool * (1 - pool), 1e-300) * 2.0 / n_paths)
    return {"coarse": p1, "fine": p2, "z": (p2 - p1) / se if se > 0 else 0.0,
            "under_resolved": (p2 - p1) > z_crit * se}
