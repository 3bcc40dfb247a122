"""Empirical stationary distributions from time averages, plus ensemble
diagnostics: boundedness in probability, tightness, mean bounds, extinction."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .models import FeedbackSpec, PiecewiseConstant, sup_f
from .paths import CadlagPath, Segment, modulus_varpi
from .solver import Trajectory

VALUE = "value"
SEGMENT_SUP_NORM = "segment_sup_norm"
MIN_ENSEMBLE = 100


class MeasureError(ValueError):
    pass


@dataclass(frozen=True)
class EmpiricalMeasure1D:
    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.atoms, float)
        w = np.asarray(self.weights, float)
        if a.shape != w.shape or a.ndim != 1 or a.size == 0:
            raise MeasureError("atoms and weights must be equal-length non-empty 1-D arrays")
        if np.any(w < 0) or not np.all(np.isfinite(a)):
            raise MeasureError("weights must be non-negative and atoms finite")
        order = np.argsort(a, kind="stable")
        a, w = a[order], w[order]
        uniq, start = np.unique(a, return_index=True)
        w = np.add.reduceat(w, start)
        total = w.sum()
        if not total > 0:
            raise MeasureError("total weight must be positive")
        object.__setattr__(self, "atoms", uniq)
        object.__setattr__(self, "weights", w / total)

    @classmethod
    def from_samples(cls, values, weights=None) -> "EmpiricalMeasure1D":
        values = np.asarray(values, float)
        return cls(values, np.ones(values.size) if weights is None else weights)

    @classmethod
    def merge(cls, measures: Sequence["EmpiricalMeasure1D"], weights=None) -> "EmpiricalMeasure1D":
        """Mixture of measures; renormalized once at the end, so order is irrelevant."""
        weights = np.ones(len(measures)) if weights is None else np.asarray(weights, float)
        atoms = np.concatenate([m.atoms for m in measures])
        w = np.concatenate([m.weights * c for m, c in zip(measures, weights)])
        return cls(atoms, w)

    def mean(self) -> float:
        return float(np.dot(self.atoms, self.weights))

    def cdf(self, x):
        c = np.cumsum(self.weights)
        k = np.searchsorted(self.atoms, x, side="right")
        return np.where(k > 0, c[np.maximum(k - 1, 0)], 0.0)

    def mass_below(self, x: float) -> float:
        return float(self.weights[self.atoms < x].sum())

    def histogram(self, bins: int = 50, range_=None):
        return np.histogram(self.atoms, bins=bins, range=range_, weights=self.weights)


@dataclass(frozen=True)
class EmpiricalSegmentMeasure:
    segments: Tuple[Segment, ...]
    weights: np.ndarray
    times: np.ndarray

    def __post_init__(self):
        if not self.segments:
            raise MeasureError("empty segment measure")
        taus = {s.tau for s in self.segments}
        if len(taus) != 1:
            raise MeasureError("all segments must share tau")
        w = np.asarray(self.weights, float)
        if w.size != len(self.segments) or np.any(w < 0) or not w.sum() > 0:
            raise MeasureError("bad segment weights")
        object.__setattr__(self, "weights", w / w.sum())

    @property
    def tau(self) -> float:
        return self.segments[0].tau

    def pushforward_at_zero(self) -> EmpiricalMeasure1D:
        return EmpiricalMeasure1D(np.array([s(0.0) for s in self.segments]), self.weights)


@dataclass(frozen=True)
class ProbabilityProfile:
    R_grid: np.ndarray
    t_grid: np.ndarray
    exceedance: np.ndarray  # shape (len(t_grid), len(R_grid))
    ensemble_size: int
    quantity: str = VALUE

    def max_over_t(self) -> np.ndarray:
        return self.exceedance.max(axis=0)

    def rows(self):
        for i, t in enumerate(self.t_grid):
            for j, R in enumerate(self.R_grid):
                yield {"quantity": self.quantity, "t": float(t), "R": float(R),
                       "exceedance": float(self.exceedance[i, j]), "n": self.ensemble_size}


# --- time averages ---------------------------------------------------------------

def _window_indices(traj: Trajectory, t_start: float, t_end: float, stride: int) -> np.ndarray:
    if not (isinstance(stride, (int, np.integer)) and stride >= 1):
        raise MeasureError("stride must be a positive integer")
    if t_start < 0 or t_end > traj.horizon + 1e-12 or t_end < t_start:
        raise MeasureError(f"window [{t_start}, {t_end}] outside [0, {traj.horizon}]")
    if traj.explosion_time is not None and traj.explosion_time <= t_end:
        raise MeasureError(f"exploded-window: explosion at {traj.explosion_time} inside the window")
    times = traj.path.times
    k = np.flatnonzero((times >= t_start) & (times <= t_end))
    if k.size == 0:
        raise MeasureError("window contains no grid points")
    return k[::stride]


def time_average_distribution(traj: Trajectory, t_start: float, t_end: float,
                              stride: int = 1) -> EmpiricalMeasure1D:
    k = _window_indices(traj, t_start, t_end, stride)
    return EmpiricalMeasure1D.from_samples(traj.path.values[k])


def default_segment_stride(traj: Trajectory, tau: float) -> int:
    dt = float(np.median(np.diff(traj.solver_times()))) if traj.solver_times().size > 1 else tau
    return max(1, int(round(10 * tau / dt)))


def segment_time_average(traj: Trajectory, tau: float, t_start: float, t_end: float,
                         stride: Optional[int] = None) -> EmpiricalSegmentMeasure:
    if t_start < tau:
        raise MeasureError("segment sampling starts at t >= tau")
    if stride is None:
        stride = default_segment_stride(traj, tau)
    k = _window_indices(traj, t_start, t_end, stride)
    times = traj.path.times[k]
    segs = tuple(Segment(traj.path.restrict(t - tau, t).shift(-t), tau) for t in times)
    return EmpiricalSegmentMeasure(segs, np.ones(len(segs)), times)


def wasserstein1(mu: EmpiricalMeasure1D, nu: EmpiricalMeasure1D) -> float:
    """Integral of |F_mu - F_nu| over the real line, exact for atom measures."""
    x = np.union1d(mu.atoms, nu.atoms)
    if x.size < 2:
        return 0.0
    diff = np.abs(mu.cdf(x[:-1]) - nu.cdf(x[:-1]))
    return float(np.dot(diff, np.diff(x)))


# --- ensemble diagnostics --------------------------------------------------------

def _check_ensemble(ensemble: Sequence[Trajectory]):
    if len(ensemble) < MIN_ENSEMBLE:
        raise MeasureError(f"insufficient ensemble: {len(ensemble)} paths (< {MIN_ENSEMBLE})")


def _segment_sup(path: CadlagPath, t: float, tau: float) -> float:
    lo = np.searchsorted(path.times, t - tau, side="right")
    hi = np.searchsorted(path.times, t, side="right")
    vals = [abs(path.value_at(t - tau)), abs(path.value_at(t))]
    if hi > lo:
        vals.append(np.max(np.abs(path.values[lo:hi])))
        vals.append(np.max(np.abs(path.left_values[lo:hi])))
    return float(max(vals))


def _quantity(traj: Trajectory, t: float, quantity: str, tau: float) -> float:
    # an exploded path exceeds every level from its explosion time on
    if traj.explosion_time is not None and traj.explosion_time <= t:
        return math.inf
    if quantity == VALUE:
        return abs(float(traj.path.value_at(t)))
    if quantity == SEGMENT_SUP_NORM:
        return _segment_sup(traj.path, t, tau)
    raise MeasureError(f"unknown quantity {quantity!r}")


def boundedness_profile(ensemble: Sequence[Trajectory], quantity: str, R_grid, t_grid,
                        tau: Optional[float] = None) -> ProbabilityProfile:
    _check_ensemble(ensemble)
    R_grid = np.asarray(R_grid, float)
    t_grid = np.asarray(t_grid, float)
    if np.any(np.diff(R_grid) <= 0):
        raise MeasureError("R_grid must be increasing")
    tau = ensemble[0].tau if tau is None else tau
    horizon = min(tr.horizon for tr in ensemble)
    if np.any(t_grid > horizon) or np.any(t_grid < 0):
        raise MeasureError("t_grid outside the simulated horizon")
    if quantity == SEGMENT_SUP_NORM and np.any(t_grid < tau):
        raise MeasureError("segment mode needs t >= tau")
    q = np.array([[_quantity(tr, t, quantity, tau) for tr in ensemble] for t in t_grid])
    exc = (q[:, :, None] > R_grid[None, None, :]).mean(axis=1)
    return ProbabilityProfile(R_grid, t_grid, exc, len(ensemble), quantity)


@dataclass
class TightnessReport:
    sup_profile: ProbabilityProfile
    delta_grid: np.ndarray
    eps: float
    varpi_exceedance: np.ndarray  # (len(t_grid), len(delta_grid))
    sup_decays: bool
    varpi_decays: bool

    @property
    def ok(self) -> bool:
        return self.sup_decays and self.varpi_decays

    def record(self) -> dict:
        return {"sup_norm_max_over_t": self.sup_profile.max_over_t().tolist(),
                "R_grid": self.sup_profile.R_grid.tolist(), "delta_grid": self.delta_grid.tolist(),
                "eps": self.eps, "varpi_max_over_t": self.varpi_exceedance.max(axis=0).tolist(),
                "sup_decays": self.sup_decays, "varpi_decays": self.varpi_decays}


def tightness_diagnostic(ensemble: Sequence[Trajectory], tau: float, R_grid, delta_grid, t_grid,
                         eps: float = 0.1) -> TightnessReport:
    """Sup-norm exceedance over R and P(varpi(X_t, delta) >= eps) over delta.
    "Decay" means the last grid value is no larger than the first, with R
    increasing and delta decreasing along the grids."""
    t_grid = np.asarray(t_grid, float)
    if np.any(t_grid < tau):
        raise MeasureError("probe times must satisfy t >= tau")
    prof = boundedness_profile(ensemble, SEGMENT_SUP_NORM, R_grid, t_grid, tau)
    deltas = np.sort(np.asarray(delta_grid, float))[::-1]
    if np.any(deltas <= 0) or np.any(deltas >= tau):
        raise MeasureError("delta_grid must lie in (0, tau)")
    exc = np.zeros((t_grid.size, deltas.size))
    for i, t in enumerate(t_grid):
        for tr in ensemble:
            if tr.explosion_time is not None and tr.explosion_time <= t:
                exc[i] += 1.0
                continue
            seg = Segment(tr.path.restrict(t - tau, t).shift(-t), tau)
            for j, d in enumerate(deltas):
                exc[i, j] += modulus_varpi(seg, d) >= eps
    exc /= len(ensemble)
    sup_max = prof.max_over_t()
    var_max = exc.max(axis=0)
    return TightnessReport(prof, deltas, eps, exc, bool(sup_max[-1] <= sup_max[0]),
                           bool(var_max[-1] <= var_max[0]))


def xi_curve(spec: FeedbackSpec, t_grid, x0_mean: float, M: Optional[float] = None) -> np.ndarray:
    """e^{-G(t)} E X(0) + r~ M e^{-G(t)} int_0^t e^{G(s)} ds with G = int_0 gamma, exact
    for piecewise-constant gamma."""
    M = sup_f(spec) if M is None else M
    gamma = spec.gamma
    t_grid = np.atleast_1d(np.asarray(t_grid, float))
    out = np.empty(t_grid.size)
    for i, t in enumerate(t_grid):
        knots = np.concatenate(([0.0], [b for b in gamma.breaks if 0.0 < b < t], [t]))
        G_t = gamma.integral(0.0, t)
        acc = 0.0
        for a, b in zip(knots[:-1], knots[1:]):
            g = gamma(a)
            w = b - a
            # int_a^b e^{G(s) - G(t)} ds with G linear on [a, b)
            base = math.exp(gamma.integral(0.0, a) - G_t)
            acc += base * (math.expm1(g * w) / g if g != 0 else w)
        out[i] = math.exp(-G_t) * x0_mean + spec.r_tilde * M * acc
    return out


@dataclass
class MeanBoundResult:
    t_grid: np.ndarray
    means: np.ndarray
    std_errors: np.ndarray
    xi: np.ndarray
    limit: float
    n_sigma: float
    tail_from: float
    negative_fraction: float

    @property
    def pointwise_ok(self) -> np.ndarray:
        return self.means <= self.xi + self.n_sigma * self.std_errors

    @property
    def tail_ok(self) -> np.ndarray:
        sel = self.t_grid >= self.tail_from
        return self.means[sel] <= self.limit + self.n_sigma * self.std_errors[sel]

    @property
    def ok(self) -> bool:
        return bool(np.all(self.pointwise_ok) and np.all(self.tail_ok))

    def rows(self):
        for t, m, s, x in zip(self.t_grid, self.means, self.std_errors, self.xi):
            yield {"t": float(t), "mean": float(m), "se": float(s), "xi": float(x), "limit": self.limit}


def mean_bound_check(ensemble: Sequence[Trajectory], spec: FeedbackSpec, t_grid,
                     n_sigma: float = 4.0, tail_from: Optional[float] = None,
                     x0_mean: Optional[float] = None) -> MeanBoundResult:
    """Ensemble mean of X(t) against the majorant curve and its limit r~ M / gamma~."""
    if not ensemble:
        raise MeasureError("empty ensemble")
    t_grid = np.asarray(t_grid, float)
    X = np.array([[float(tr.path.value_at(t)) for t in t_grid] for tr in ensemble])
    neg = np.mean([bool(np.any(tr.path.values < 0)) for tr in ensemble])
    if x0_mean is None:
        x0_mean = float(np.mean([tr.path.value_at(0.0) for tr in ensemble]))
    n = len(ensemble)
    means = X.mean(axis=0)
    se = X.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(means)
    M = sup_f(spec)
    tail_from = float(t_grid.max()) / 2 if tail_from is None else tail_from
    return MeanBoundResult(t_grid, means, se, xi_curve(spec, t_grid, x0_mean, M),
                           spec.r_tilde * M / spec.gamma_tilde, n_sigma, tail_from, float(neg))


def extinction_probability(ensemble: Sequence[Trajectory], threshold: float, t_probe: float) -> float:
    """Fraction of paths whose sup over [t_probe - tau, t_probe] stays below ``threshold``.
    A path that hit the explosion threshold before t_probe counts as extinct only
    if it left through the bottom (a log-frame path mapped back by exp)."""
    if not threshold > 0:
        raise MeasureError("threshold must be positive")
    if not ensemble:
        return 0.0
    hits = 0
    for tr in ensemble:
        p = tr.path
        if tr.explosion_time is not None and tr.explosion_time <= t_probe:
            hits += abs(float(p.value_at(tr.explosion_time))) < threshold
            continue
        a = t_probe - tr.tau
        lo = np.searchsorted(p.times, a, side="right")
        hi = np.searchsorted(p.times, t_probe, side="right")
        sup = max(float(p.value_at(a)), float(p.value_at(t_probe)))
        if hi > lo:
            sup = max(sup, float(p.values[lo:hi].max()), float(p.left_values[lo:hi].max()))
        hits += sup < threshold
    return hits / len(ensemble)


# --- stationarity -----------------------------------------------------------------

@dataclass
class StationarityReport:
    w1: float
    tol: float
    passed: bool
    windows: Tuple[Tuple[float, float], Tuple[float, float]]
    n_boot: int
    block: int

    def record(self) -> dict:
        return {"w1": self.w1, "tol": self.tol, "pass": self.passed, "windows": [list(w) for w in self.windows],
                "n_boot": self.n_boot, "block": self.block}


def _block_resample(rng: np.random.Generator, series: np.ndarray, length: int, block: int) -> np.ndarray:
    n = series.size
    nb = -(-length // block)
    starts = rng.integers(0, n, nb)
    idx = (starts[:, None] + np.arange(block)[None, :]) % n
    return series[idx.ravel()[:length]]


def stationarity_check(traj: Trajectory, windows, stride: int = 1, n_boot: int = 200,
                       block: Optional[int] = None, seed: int = 0, tol: Optional[float] = None,
                       min_length: Optional[float] = 50.0) -> StationarityReport:
    """W1 between the time averages of two disjoint windows. The default tolerance
    is 3x the RMS W1 between pairs of circular block-bootstrap replicates of the
    pooled window samples (the no-change null)."""
    (a1, b1), (a2, b2) = sorted((tuple(map(float, w)) for w in windows))
    if a2 < b1:
        raise MeasureError(f"window overlap: [{a1}, {b1}] and [{a2}, {b2}]")
    tau = traj.tau
    if min_length is not None and min(b1 - a1, b2 - a2) < min_length * tau:
        raise MeasureError(f"each window must be at least {min_length} tau long")
    k1 = _window_indices(traj, a1, b1, stride)
    k2 = _window_indices(traj, a2, b2, stride)
    # a window boundary shared by both windows is assigned to the first
    k2 = k2[~np.isin(k2, k1)]
    x1, x2 = traj.path.values[k1], traj.path.values[k2]
    w1 = wasserstein1(EmpiricalMeasure1D.from_samples(x1), EmpiricalMeasure1D.from_samples(x2))
    if block is None:
        dt = float(np.median(np.diff(traj.path.times[k1]))) if k1.size > 1 else tau
        block = max(1, int(round(10 * tau / dt)))
    if tol is None:
        rng = np.random.default_rng(seed)
        pooled = np.concatenate((x1, x2))
        d = np.empty(n_boot)
        for i in range(n_boot):
            y1 = _block_resample(rng, pooled, x1.size, block)
            y2 = _block_resample(rng, pooled, x2.size, block)
            d[i] = wasserstein1(EmpiricalMeasure1D.from_samples(y1), EmpiricalMeasure1D.from_samples(y2))
        tol = 3.0 * float(np.sqrt(np.mean(d * d)))
    return StationarityReport(w1, float(tol), bool(w1 <= tol), ((a1, b1), (a2, b2)), n_boot, block)
