"""Cadlag paths on finite grids, delay segments, and their moduli.

A path stores right values on a strictly increasing time grid together with
explicit jump events (indices whose left limit differs from the right value).
Two interpolation modes are supported:

``step``
    piecewise constant, right-continuous. Every change of value is a jump.
``linear``
    linear between grid points; between ``t_i`` and a jump time ``t_{i+1}``
    the path runs linearly towards the left limit at ``t_{i+1}`` and then jumps.
"""
from __future__ import annotations

import csv
import math
from typing import Iterable, Optional, Sequence

import numpy as np

STEP = "step"
LINEAR = "linear"
_MODES = (STEP, LINEAR)


class PathError(ValueError):
    pass


class CadlagPath:
    """Immutable right-continuous path with explicit jump events."""

    __slots__ = ("times", "values", "jump_index", "jump_left", "mode", "_left")

    def __init__(self, times, values, jumps=None, mode: str = LINEAR):
        times = np.array(times, dtype=float)
        values = np.array(values, dtype=float)
        if times.ndim != 1 or times.shape != values.shape or times.size == 0:
            raise PathError("times and values must be non-empty 1-D arrays of equal length")
        if not np.all(np.isfinite(times)):
            raise PathError("times must be finite")
        if np.any(np.diff(times) <= 0):
            raise PathError("times must be strictly increasing")
        if mode not in _MODES:
            raise PathError(f"unknown interpolation mode {mode!r}")
        if mode == STEP:
            idx = np.flatnonzero(values[1:] != values[:-1]) + 1
            left = values[idx - 1]
            if jumps:
                for i, lv in dict(jumps).items():
                    if not (0 < i < times.size) or values[i - 1] != lv:
                        raise PathError("step-mode jump left value must equal the preceding grid value")
        else:
            items = sorted(dict(jumps or {}).items())
            idx = np.array([i for i, _ in items], dtype=np.int64)
            left = np.array([lv for _, lv in items], dtype=float)
            if idx.size and (idx[0] < 1 or idx[-1] >= times.size):
                raise PathError("jump indices must lie in 1..n-1")
            keep = left != values[idx] if idx.size else np.zeros(0, bool)
            idx, left = idx[keep], left[keep]
        if not (np.all(np.isfinite(left))):
            raise PathError("jump left values must be finite")
        self._set(times, values, idx.astype(np.int64), left.astype(float), mode)

    def _set(self, times, values, jump_index, jump_left, mode):
        for a in (times, values, jump_index, jump_left):
            a.flags.writeable = False
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "jump_index", jump_index)
        object.__setattr__(self, "jump_left", jump_left)
        object.__setattr__(self, "mode", mode)
        object.__setattr__(self, "_left", None)

    def __setattr__(self, name, value):
        raise AttributeError("CadlagPath is immutable")

    @classmethod
    def _trusted(cls, times, values, jump_index, jump_left, mode=LINEAR) -> "CadlagPath":
        # internal constructor: inputs already validated
        obj = object.__new__(cls)
        obj._set(np.asarray(times, float), np.asarray(values, float),
                 np.asarray(jump_index, np.int64), np.asarray(jump_left, float), mode)
        return obj

    # basic accessors
    def __len__(self):
        return self.times.size

    @property
    def start(self) -> float:
        return float(self.times[0])

    @property
    def end(self) -> float:
        return float(self.times[-1])

    @property
    def left_values(self) -> np.ndarray:
        """Left limit at every grid time (the right value where no jump occurs)."""
        if self._left is None:
            left = self.values.copy()
            left[self.jump_index] = self.jump_left
            left.flags.writeable = False
            object.__setattr__(self, "_left", left)
        return self._left

    @property
    def jump_times(self) -> np.ndarray:
        return self.times[self.jump_index]

    @property
    def jump_sizes(self) -> np.ndarray:
        return self.values[self.jump_index] - self.jump_left

    def covers(self, a: float, b: float) -> bool:
        return self.times[0] <= a and b <= self.times[-1]

    # evaluation
    def _left_at_index(self, j: int) -> float:
        k = int(np.searchsorted(self.jump_index, j))
        if k < self.jump_index.size and self.jump_index[k] == j:
            return float(self.jump_left[k])
        return float(self.values[j])

    def _value_scalar(self, t: float) -> float:
        times = self.times
        if t < times[0] or t > times[-1]:
            raise PathError("query time outside the path's range")
        i = int(np.searchsorted(times, t, side="right")) - 1
        v0 = float(self.values[i])
        if self.mode == STEP or i == times.size - 1:
            return v0
        t0 = times[i]
        if t == t0:
            return v0
        w = (t - t0) / (times[i + 1] - t0)
        return v0 + w * (self._left_at_index(i + 1) - v0)

    def value_at(self, t):
        """Right value at ``t`` (scalar or array)."""
        if isinstance(t, (float, int, np.floating)):
            return self._value_scalar(float(t))
        t_arr = np.asarray(t, dtype=float)
        if np.any(t_arr < self.times[0]) or np.any(t_arr > self.times[-1]):
            raise PathError("query time outside the path's range")
        i = np.searchsorted(self.times, t_arr, side="right") - 1
        if self.mode == STEP:
            out = self.values[i]
        else:
            n = self.times.size
            j = np.minimum(i + 1, n - 1)
            t0, t1 = self.times[i], self.times[j]
            span = np.where(j > i, t1 - t0, 1.0)
            w = np.where(j > i, (t_arr - t0) / span, 0.0)
            v0 = self.values[i]
            out = v0 + w * (self.left_values[j] - v0)
        return float(out) if np.ndim(out) == 0 else out

    def left_limit_at(self, t):
        """Left limit at ``t``; differs from ``value_at`` only at jump times."""
        if isinstance(t, (float, int, np.floating)):
            t = float(t)
            right = self._value_scalar(t)
            k = int(np.searchsorted(self.times, t, side="left"))
            if 0 < k < self.times.size and self.times[k] == t:
                return float(self.values[k - 1]) if self.mode == STEP else self._left_at_index(k)
            return right
        t_arr = np.asarray(t, dtype=float)
        right = np.asarray(self.value_at(t_arr), dtype=float)
        k = np.searchsorted(self.times, t_arr, side="left")
        k_c = np.minimum(k, self.times.size - 1)
        on_grid = (k < self.times.size) & (self.times[k_c] == t_arr) & (k_c > 0)
        if self.mode == STEP:
            prev = self.values[np.maximum(k_c - 1, 0)]
        else:
            prev = self.left_values[k_c]
        out = np.where(on_grid, prev, right)
        return float(out) if np.ndim(out) == 0 else out

    # transformations
    def restrict(self, a: float, b: float) -> "CadlagPath":
        """The path on [a, b]; jumps strictly after ``a`` are preserved."""
        if not self.covers(a, b) or not a < b:
            raise PathError(f"window [{a}, {b}] not covered by path on [{self.start}, {self.end}]")
        lo = np.searchsorted(self.times, a, side="right")
        hi = np.searchsorted(self.times, b, side="left")
        inner_t = self.times[lo:hi]
        inner_v = self.values[lo:hi]
        va = self.value_at(a)
        b_on_grid = hi < self.times.size and self.times[hi] == b
        vb = self.values[hi] if b_on_grid else self.value_at(b)
        times = np.concatenate(([a], inner_t, [b]))
        values = np.concatenate(([va], inner_v, [vb]))
        sel = (self.jump_index >= lo) & (self.jump_index < hi)
        jidx = list(self.jump_index[sel] - lo + 1)
        jleft = list(self.jump_left[sel])
        if b_on_grid and self.left_values[hi] != self.values[hi]:
            jidx.append(times.size - 1)
            jleft.append(self.left_values[hi])
        if self.mode == STEP:
            return CadlagPath(times, values, mode=STEP)
        return CadlagPath._trusted(times, values, np.array(jidx, np.int64), np.array(jleft, float), LINEAR)

    def shift(self, c: float) -> "CadlagPath":
        return CadlagPath._trusted(self.times + c, self.values, self.jump_index, self.jump_left, self.mode)

    def map(self, fn) -> "CadlagPath":
        """Apply ``fn`` pointwise to right values and jump left values."""
        values = np.asarray(fn(self.values), float)
        left = np.asarray(fn(self.jump_left), float)
        keep = left != values[self.jump_index]
        return CadlagPath._trusted(self.times, values, self.jump_index[keep], left[keep], self.mode)

    def with_mode(self, mode: str) -> "CadlagPath":
        return CadlagPath(self.times, self.values, dict(zip(self.jump_index.tolist(), self.jump_left.tolist())), mode)

    def all_values(self) -> np.ndarray:
        """Right values and jump left values together."""
        return np.concatenate((self.values, self.jump_left))

    def __eq__(self, other):
        if not isinstance(other, CadlagPath):
            return NotImplemented
        return (self.mode == other.mode
                and np.array_equal(self.times, other.times)
                and np.array_equal(self.values, other.values)
                and np.array_equal(self.jump_index, other.jump_index)
                and np.array_equal(self.jump_left, other.jump_left))

    __hash__ = None

    def __repr__(self):
        return (f"CadlagPath(n={self.times.size}, [{self.start}, {self.end}], "
                f"jumps={self.jump_index.size}, mode={self.mode})")


class Segment:
    """A path restricted to the delay window [-tau, 0].

    Built either from explicit samples on [-tau, 0] or as a lazy view of a longer
    path anchored at time ``t``. ``left_limit=True`` gives the pre-jump segment,
    whose value at 0 is the left limit of the source path at ``t``.
    """

    __slots__ = ("tau", "_source", "_anchor", "_left_limit", "_samples")

    def __init__(self, samples: CadlagPath, tau: Optional[float] = None):
        if tau is None:
            tau = -samples.start
        if not tau > 0:
            raise PathError("tau must be positive")
        if not (math.isclose(samples.start, -tau, rel_tol=0, abs_tol=1e-12 * max(1.0, tau))
                and samples.end == 0.0):
            raise PathError("segment samples must span exactly [-tau, 0]")
        object.__setattr__(self, "tau", float(tau))
        object.__setattr__(self, "_source", samples)
        object.__setattr__(self, "_anchor", 0.0)
        object.__setattr__(self, "_left_limit", False)
        object.__setattr__(self, "_samples", samples)

    def __setattr__(self, name, value):
        raise AttributeError("Segment is immutable")

    @classmethod
    def view(cls, path: CadlagPath, t: float, tau: float, left_limit: bool = False) -> "Segment":
        obj = object.__new__(cls)
        object.__setattr__(obj, "tau", float(tau))
        object.__setattr__(obj, "_source", path)
        object.__setattr__(obj, "_anchor", float(t))
        object.__setattr__(obj, "_left_limit", left_limit)
        object.__setattr__(obj, "_samples", None)
        return obj

    @classmethod
    def constant(cls, value: float, tau: float) -> "Segment":
        return cls(CadlagPath([-tau, 0.0], [value, value]), tau)

    @classmethod
    def from_function(cls, fn, tau: float, n: int = 100) -> "Segment":
        theta = np.linspace(-tau, 0.0, n + 1)
        return cls(CadlagPath(theta, [fn(x) for x in theta]), tau)

    def __call__(self, theta):
        if isinstance(theta, (float, int, np.floating)):
            th = float(theta)
            if th < -self.tau * (1 + 1e-12) or th > 0:
                raise PathError("segment argument outside [-tau, 0]")
            s = max(self._anchor + th, self._source.start)
            if self._left_limit and th == 0:
                return self._source.left_limit_at(s)
            return self._source._value_scalar(s)
        th = np.asarray(theta, dtype=float)
        if np.any(th < -self.tau - 1e-12 * self.tau) or np.any(th > 0):
            raise PathError("segment argument outside [-tau, 0]")
        s = np.maximum(self._anchor + th, self._source.start)
        if self._left_limit:
            out = np.where(th == 0, self._source.left_limit_at(s), self._source.value_at(s))
            return float(out) if out.ndim == 0 else out
        return self._source.value_at(s)

    @property
    def samples(self) -> CadlagPath:
        if self._samples is None:
            a = max(self._anchor - self.tau, self._source.start)
            p = self._source.restrict(a, self._anchor).shift(-self._anchor)
            if p.start != -self.tau:
                p = CadlagPath._trusted(np.concatenate(([-self.tau], p.times[1:])), p.values,
                                        p.jump_index, p.jump_left, p.mode)
            if self._left_limit and p.jump_index.size and p.jump_index[-1] == p.times.size - 1:
                values = p.values.copy()
                values[-1] = p.jump_left[-1]
                p = CadlagPath._trusted(p.times, values, p.jump_index[:-1], p.jump_left[:-1], p.mode)
            object.__setattr__(self, "_samples", p)
        return self._samples

    def __repr__(self):
        return f"Segment(tau={self.tau}, samples={self.samples!r})"


def segment_at(path: CadlagPath, t: float, tau: float, left_limit: bool = False) -> Segment:
    """The segment X_t(theta) = X(t + theta), theta in [-tau, 0]."""
    if not tau > 0:
        raise PathError("tau must be positive")
    if not path.covers(t - tau, t):
        raise PathError(f"window-out-of-range: path on [{path.start}, {path.end}] "
                        f"does not cover [{t - tau}, {t}]")
    return Segment.view(path, t, tau, left_limit)


def sup_norm(seg: Segment) -> float:
    p = seg.samples
    return float(np.max(np.abs(p.all_values())))


def max_jump(seg: Segment) -> float:
    p = seg.samples
    sizes = p.jump_sizes
    return float(np.max(np.abs(sizes))) if sizes.size else 0.0


# --- moduli -----------------------------------------------------------------

class _RangeExtrema:
    """Sparse tables for O(1) range max/min queries on a fixed array."""

    def __init__(self, a: np.ndarray):
        self.mx = [a]
        self.mn = [a]
        k = 1
        while 2 * k <= a.size:
            pm, pn = self.mx[-1], self.mn[-1]
            self.mx.append(np.maximum(pm[:-k], pm[k:]))
            self.mn.append(np.minimum(pn[:-k], pn[k:]))
            k *= 2

    def query(self, lo: np.ndarray, hi: np.ndarray):
        """Max and min over a[lo:hi] for each pair (requires hi > lo)."""
        length = hi - lo
        lvl = np.floor(np.log2(length)).astype(np.int64)
        mx = np.empty(lo.size)
        mn = np.empty(lo.size)
        for L in np.unique(lvl):
            sel = lvl == L
            w = 1 << int(L)
            a, b = lo[sel], hi[sel] - w
            mx[sel] = np.maximum(self.mx[L][a], self.mx[L][b])
            mn[sel] = np.minimum(self.mn[L][a], self.mn[L][b])
        return mx, mn


def _tol(p: CadlagPath) -> float:
    return 1e-12 * max(1.0, abs(p.start), abs(p.end))


def _check_delta(delta, lo_open, hi, closed_hi):
    if not (delta > lo_open and (delta <= hi if closed_hi else delta < hi)):
        bracket = "]" if closed_hi else ")"
        raise PathError(f"delta={delta} outside (0, {hi}{bracket}")


def oscillation_window(p: CadlagPath, delta: float) -> float:
    """sup |phi(s) - phi(t)| over |s - t| <= delta for the full path ``p``."""
    eps = _tol(p)
    t, v, lft = p.times, p.values, p.left_values
    # candidate points: grid right values, left limits at jumps, and the
    # interpolated values at grid times shifted by +-delta (polygon vertices)
    virt = np.concatenate((t + delta, t - delta))
    virt = virt[(virt >= t[0]) & (virt <= t[-1])]
    near = np.searchsorted(t, virt)
    dist = np.minimum(np.abs(virt - t[np.minimum(near, t.size - 1)]),
                      np.abs(virt - t[np.maximum(near - 1, 0)]))
    virt = np.unique(virt[dist > eps])
    ji = p.jump_index
    pt_t = np.concatenate((t, t[ji], virt))
    pt_v = np.concatenate((v, lft[ji], p.value_at(virt) if virt.size else np.zeros(0)))
    # side: 0 = left limit, 1 = right value; left sorts first at equal times
    side = np.concatenate((np.ones(t.size, int), np.zeros(ji.size, int), np.ones(virt.size, int)))
    order = np.lexsort((side, pt_t))
    pt_t, pt_v, side = pt_t[order], pt_v[order], side[order]
    n = pt_t.size
    if n < 2:
        return 0.0
    table = _RangeExtrema(pt_v)
    idx = np.arange(n)
    hi_strict = np.searchsorted(pt_t, pt_t + delta - eps, side="left")
    hi_eq = np.searchsorted(pt_t, pt_t + delta + eps, side="right")
    mx, mn = table.query(idx, np.maximum(hi_strict, idx + 1))
    best = np.maximum(mx - pt_v, pt_v - mn)
    # boundary points at distance exactly delta: a left-limit start cannot pair
    # with a right value at t + delta
    for k in np.flatnonzero(hi_eq > hi_strict):
        for q in range(hi_strict[k], hi_eq[k]):
            if side[k] == 1 or side[q] == 0:
                best[k] = max(best[k], abs(pt_v[q] - pt_v[k]))
    return float(np.max(best))


def modulus_omega(seg: Segment, delta: float) -> float:
    """Modulus of continuity sup_{|s-t|<=delta} |phi(s) - phi(t)| on [-tau, 0]."""
    _check_delta(delta, 0.0, seg.tau, True)
    return oscillation_window(seg.samples, delta)


def modulus_varpi(seg: Segment, delta: float) -> float:
    """Cadlag modulus: infimum over partitions of [-tau, 0] with spacing > delta
    of the largest oscillation on the half-open cells [t_{i-1}, t_i).

    Breakpoints are restricted to grid (and jump) times. The value at 0 never
    enters, only the left limit there.
    """
    _check_delta(delta, 0.0, seg.tau, False)
    p = seg.samples
    t, v, lft = p.times, p.values, p.left_values
    n = t.size
    eps = _tol(p)
    # cell [t_i, t_j) contains v_i, both sides of every inner point, and lft_j
    up = np.maximum(v[:-1], lft[1:])
    dn = np.minimum(v[:-1], lft[1:])
    dp = np.full(n, np.inf)
    dp[0] = 0.0
    for j in range(1, n):
        last = np.searchsorted(t, t[j] - delta - eps, side="left")  # need t_j - t_i > delta
        if last == 0:
            continue
        hi = np.maximum.accumulate(up[j - 1::-1])[::-1]
        lo = np.minimum.accumulate(dn[j - 1::-1])[::-1]
        cand = np.maximum(dp[:last], hi[:last] - lo[:last])
        dp[j] = cand.min()
    return float(dp[-1])


# --- serialization ------------------------------------------------------------

def write_path_csv(path: CadlagPath, fh) -> None:
    """Write (time, right_value, left_value_or_blank) rows with round-trip floats."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["time", "right_value", "left_value"])
    jumps = dict(zip(path.jump_index.tolist(), path.jump_left.tolist()))
    for i, (ti, vi) in enumerate(zip(path.times.tolist(), path.values.tolist())):
        w.writerow([repr(ti), repr(vi), repr(jumps[i]) if i in jumps else ""])


def read_path_csv(fh, mode: str = LINEAR) -> CadlagPath:
    r = csv.reader(fh)
    header = next(r)
    if header[:3] != ["time", "right_value", "left_value"]:
        raise PathError(f"unexpected header {header}")
    times, values, jumps = [], [], {}
    for i, row in enumerate(r):
        times.append(float(row[0]))
        values.append(float(row[1]))
        if len(row) > 2 and row[2] != "":
            jumps[i] = float(row[2])
    if mode == STEP:
        return CadlagPath(times, values, mode=STEP)
    return CadlagPath(times, values, jumps, mode)
