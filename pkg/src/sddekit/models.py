"""Negative-feedback delay models: Mackey-Glass and Nicholson nonlinearities,
time-dependent rates, the log-coordinate drift, and steady-state analysis."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .noise import RegulatedLevySpec
from .paths import Segment
from .solver import DEFAULT_THRESHOLD, DelayCoefficients, FunctionalCoefficients

ORIGINAL = "original"
LOG = "log"

ITO_BROWNIAN = "ito_brownian"
LEVY_FINITE_INTENSITY = "levy_finite_intensity"
NO_CORRECTION = "none"
CORRECTIONS = (ITO_BROWNIAN, LEVY_FINITE_INTENSITY, NO_CORRECTION)


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class PiecewiseConstant:
    """Right-continuous step function: ``values[0]`` before ``breaks[0]``,
    ``values[i]`` on [breaks[i-1], breaks[i])."""
    breaks: tuple = ()
    values: tuple = (1.0,)

    def __post_init__(self):
        object.__setattr__(self, "breaks", tuple(float(b) for b in self.breaks))
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if len(self.values) != len(self.breaks) + 1:
            raise ModelError("need exactly one more value than breakpoints")
        if any(b1 <= b0 for b0, b1 in zip(self.breaks, self.breaks[1:])):
            raise ModelError("breakpoints must be strictly increasing")
        if not all(math.isfinite(v) for v in self.values):
            raise ModelError("rate values must be finite")

    @staticmethod
    def constant(c: float) -> "PiecewiseConstant":
        return PiecewiseConstant((), (c,))

    @property
    def is_constant(self) -> bool:
        return len(set(self.values)) == 1

    @property
    def inf(self) -> float:
        return min(self.values)

    @property
    def sup(self) -> float:
        return max(self.values)

    def __call__(self, t):
        if not self.breaks:
            return self.values[0] if np.ndim(t) == 0 else np.full(np.shape(t), self.values[0])
        idx = np.searchsorted(np.asarray(self.breaks), t, side="right")
        out = np.asarray(self.values)[idx]
        return float(out) if np.ndim(out) == 0 else out

    def integral(self, a: float, b) -> np.ndarray:
        """int_a^b of the rate, exact; ``b`` may be an array with b >= a."""
        b_arr = np.atleast_1d(np.asarray(b, float))
        knots = np.concatenate(([a], [x for x in self.breaks if x > a]))
        vals = np.array([self(x) for x in knots])
        # cumulative integral at each knot
        cum = np.concatenate(([0.0], np.cumsum(vals[:-1] * np.diff(knots))))
        k = np.searchsorted(knots, b_arr, side="right") - 1
        out = cum[k] + vals[k] * (b_arr - knots[k])
        return out if np.ndim(b) else float(out[0])


@dataclass(frozen=True)
class Nonlinearity:
    kind: str
    p: float = 1.0
    q: float = 0.0
    f: Optional[Callable[[float], float]] = field(default=None, compare=False, repr=False)
    M: Optional[float] = None
    f0: Optional[float] = None
    fprime0: Optional[float] = None

    @staticmethod
    def mackey_glass(p: float, q: float) -> "Nonlinearity":
        if not p > 0:
            raise ModelError("mackey_glass needs p > 0")
        if not (0 <= q <= p):
            raise ModelError("mackey_glass needs p >= q >= 0 (bounded nonlinearity)")
        return Nonlinearity("mackey_glass", float(p), float(q))

    @staticmethod
    def nicholson(p: float) -> "Nonlinearity":
        if not p > 0:
            raise ModelError("nicholson needs p > 0")
        return Nonlinearity("nicholson", float(p))

    @staticmethod
    def custom(f, M: float, f0: float, fprime0: Optional[float] = None) -> "Nonlinearity":
        if M is None or not math.isfinite(M):
            raise ModelError("unbounded-f: custom nonlinearity must declare a finite sup M")
        return Nonlinearity("custom", f=f, M=float(M), f0=float(f0), fprime0=fprime0)

    def array(self, x: np.ndarray) -> np.ndarray:
        """Vectorized evaluation on x >= 0 (negative inputs are clipped to 0)."""
        x = np.maximum(np.asarray(x, float), 0.0)
        if self.kind == "mackey_glass":
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                if self.q == self.p:
                    out = 1.0 / (np.power(x, -self.p) + 1.0)
                else:
                    xq = np.ones_like(x) if self.q == 0 else np.power(x, self.q)
                    out = xq / (1.0 + np.power(x, self.p))
                    # large x: x^q / x^p form avoids inf/inf
                    big = ~np.isfinite(out)
                    if np.any(big):
                        out[big] = np.power(x[big], self.q - self.p)
            return out
        if self.kind == "nicholson":
            return x * np.exp(-self.p * x)
        return np.vectorize(self.f, otypes=[float])(x)


@dataclass(frozen=True)
class FeedbackSpec:
    nonlinearity: Nonlinearity
    gamma: PiecewiseConstant
    r: PiecewiseConstant
    tau: float
    frame: str = LOG

    def __post_init__(self):
        if isinstance(self.gamma, (int, float)):
            object.__setattr__(self, "gamma", PiecewiseConstant.constant(self.gamma))
        if isinstance(self.r, (int, float)):
            object.__setattr__(self, "r", PiecewiseConstant.constant(self.r))
        if not self.tau > 0:
            raise ModelError("tau must be positive")
        if not self.gamma.inf > 0:
            raise ModelError("gamma(t) must be positive (inf gamma > 0)")
        if not self.r.inf > 0:
            raise ModelError("r(t) must be positive")
        if self.frame not in (ORIGINAL, LOG):
            raise ModelError("frame must be 'original' or 'log'")

    @property
    def gamma_tilde(self) -> float:
        return self.gamma.inf

    @property
    def r_tilde(self) -> float:
        return self.r.sup


@dataclass(frozen=True)
class NoiseCoupling:
    """Noise coefficient b(phi) of the log frame; the original frame uses X(t) b(X_t).

    ``c`` is a constant or a function of the segment, bounded by ``beta_c``.
    """
    c: object = 0.0
    beta_c: Optional[float] = None
    correction: str = ITO_BROWNIAN

    def __post_init__(self):
        if self.correction not in CORRECTIONS:
            raise ModelError(f"correction must be one of {CORRECTIONS}")
        if self.beta_c is None:
            if callable(self.c):
                raise ModelError("segment-dependent coupling needs a declared bound beta_c")
            object.__setattr__(self, "beta_c", abs(float(self.c)))

    @property
    def is_constant(self) -> bool:
        return not callable(self.c)

    def value(self, seg: Segment) -> float:
        val = float(self.c(seg)) if callable(self.c) else float(self.c)
        if abs(val) > self.beta_c * (1 + 1e-12):
            raise ModelError(f"coupling value {val} exceeds its declared bound {self.beta_c}")
        return val


def eval_f(spec: FeedbackSpec, x: float) -> float:
    if x < 0:
        raise ModelError("f is only defined on x >= 0")
    return float(spec.nonlinearity.array(np.array([x]))[0])


def f_at_zero(spec: FeedbackSpec) -> float:
    nl = spec.nonlinearity
    if nl.kind == "custom":
        return nl.f0
    return eval_f(spec, 0.0)


def sup_f(spec: FeedbackSpec) -> float:
    nl = spec.nonlinearity
    if nl.kind == "nicholson":
        return 1.0 / (nl.p * math.e)
    if nl.kind == "custom":
        return nl.M
    p, q = nl.p, nl.q
    if q == 0:
        return 1.0
    if q == p:
        return 1.0  # supremum approached as x -> infinity
    # maximum of x^q / (1 + x^p) at x^p = q / (p - q)
    xp = q / (p - q)
    return xp ** (q / p) / (1.0 + xp)


def argmax_f_numeric(spec: FeedbackSpec, hi: float = 1e6):
    """Bracketed numeric maximization of f on [0, hi] (log-spaced scan + refine)."""
    nl = spec.nonlinearity
    xs = np.concatenate(([0.0], np.logspace(-8, math.log10(hi), 4000)))
    fx = nl.array(xs)
    k = int(np.argmax(fx))
    lo = xs[max(k - 1, 0)]
    up = xs[min(k + 1, xs.size - 1)]
    if up <= lo:
        return xs[k], fx[k]
    res = minimize_scalar(lambda x: -float(nl.array(np.array([x]))[0]), bounds=(lo, up),
                          method="bounded", options={"xatol": 1e-12 * max(1.0, up)})
    if -res.fun >= fx[k]:
        return float(res.x), float(-res.fun)
    return float(xs[k]), float(fx[k])


class ClampLog:
    """Counts exponent clampings in the log-frame drift."""

    def __init__(self):
        self.count = 0


def transformed_drift(spec: FeedbackSpec, seg: Segment, t: float,
                      threshold: float = DEFAULT_THRESHOLD, clamp_log: Optional[ClampLog] = None) -> float:
    """-gamma(t) + r(t) e^{-y(0)} f(e^{y(-tau)}) for the log-frame state y."""
    if spec.frame != LOG:
        raise ModelError("transformed drift is defined for the log frame")
    lim = math.log(threshold)
    y0, yd = seg(0.0), seg(-spec.tau)
    y0c, ydc = min(max(y0, -lim), lim), min(max(yd, -lim), lim)
    if clamp_log is not None and (y0c != y0 or ydc != yd):
        clamp_log.count += 1
    return -spec.gamma(t) + spec.r(t) * math.exp(-y0c) * eval_f(spec, math.exp(ydc))


def drift_correction(coupling: NoiseCoupling, b_value: float,
                     levy: Optional[RegulatedLevySpec] = None) -> float:
    """Drift added in the log frame so that e^Y solves the multiplicative equation.

    For a Brownian driver ``b_value`` multiplies a standard Wiener increment.
    For a jump-diffusion driver the Gaussian part carries the driver's sigma.
    """
    if coupling.correction == NO_CORRECTION:
        return 0.0
    if coupling.correction == ITO_BROWNIAN:
        return -0.5 * b_value * b_value
    if levy is None:
        raise ModelError("missing levy spec for the finite-intensity correction")
    return (-0.5 * b_value * b_value * levy.sigma ** 2
            + b_value * levy.lambda_N * levy.jump_law.truncated_mean)


def _constant_coupling(coupling: NoiseCoupling) -> float:
    if not coupling.is_constant:
        raise ModelError("vectorized coefficients need a constant coupling")
    return float(coupling.c)


def log_frame_coefficients(spec: FeedbackSpec, coupling: NoiseCoupling,
                           levy: Optional[RegulatedLevySpec] = None,
                           threshold: float = DEFAULT_THRESHOLD) -> DelayCoefficients:
    """Vectorized log-frame coefficients (constant coupling)."""
    b = _constant_coupling(coupling)
    corr = drift_correction(coupling, b, levy if coupling.correction == LEVY_FINITE_INTENSITY else None)
    lim = math.log(threshold)
    f = spec.nonlinearity.array
    gamma, r = spec.gamma, spec.r

    def drift(y, yd, t):
        y = np.clip(y, -lim, lim)
        yd = np.clip(yd, -lim, lim)
        return -gamma(t) + r(t) * np.exp(-y) * f(np.exp(yd)) + corr

    def noise(y, yd, t):
        return np.full_like(np.asarray(y, float), b)

    return DelayCoefficients(drift, noise, spec.tau)


def log_frame_functional(spec: FeedbackSpec, coupling: NoiseCoupling,
                         levy: Optional[RegulatedLevySpec] = None,
                         threshold: float = DEFAULT_THRESHOLD,
                         clamp_log: Optional[ClampLog] = None) -> FunctionalCoefficients:
    """Segment-functional log-frame coefficients (coupling may depend on the segment)."""
    lv = levy if coupling.correction == LEVY_FINITE_INTENSITY else None

    def drift(seg, t):
        b = coupling.value(seg)
        return transformed_drift(spec, seg, t, threshold, clamp_log) + drift_correction(coupling, b, lv)

    def noise(seg, t):
        return coupling.value(seg)

    return FunctionalCoefficients(drift, noise)


def original_frame_coefficients(spec: FeedbackSpec, coupling: NoiseCoupling) -> DelayCoefficients:
    """dX = [-gamma X + r f(X(t - tau))] dt + X b dL (vectorized, constant coupling)."""
    b = _constant_coupling(coupling)
    f = spec.nonlinearity.array
    gamma, r = spec.gamma, spec.r

    def drift(x, xd, t):
        return -gamma(t) * x + r(t) * f(xd)

    def noise(x, xd, t):
        return b * x

    return DelayCoefficients(drift, noise, spec.tau)


def transformed_log_drift_values(spec: FeedbackSpec, y: np.ndarray, yd: np.ndarray, t,
                                 threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Feedback part of the log-frame drift (no noise correction), vectorized."""
    lim = math.log(threshold)
    y = np.clip(y, -lim, lim)
    yd = np.clip(yd, -lim, lim)
    return -spec.gamma(t) + spec.r(t) * np.exp(-y) * spec.nonlinearity.array(np.exp(yd))


def _require_constant_rates(spec: FeedbackSpec):
    if not (spec.gamma.is_constant and spec.r.is_constant):
        raise ModelError("constant gamma and r required")
    return spec.gamma.values[0], spec.r.values[0]


def steady_states(spec: FeedbackSpec, lo: float = 1e-12, hi: float = 1e12) -> List[float]:
    """Non-negative roots of gamma x = r f(x)."""
    gamma, r = _require_constant_rates(spec)
    nl = spec.nonlinearity
    roots = []
    if f_at_zero(spec) == 0.0:
        roots.append(0.0)
    if nl.kind == "mackey_glass" and nl.q == 1.0:
        if r > gamma:
            roots.append(((r - gamma) / gamma) ** (1.0 / nl.p))
        return roots
    g = lambda x: r * float(nl.array(np.array([x]))[0]) - gamma * x
    xs = np.logspace(math.log10(lo), math.log10(hi), 2401)
    gx = np.array([g(x) for x in xs])
    for i in np.flatnonzero(np.sign(gx[:-1]) * np.sign(gx[1:]) < 0):
        roots.append(brentq(g, xs[i], xs[i + 1], xtol=1e-14, rtol=1e-13, maxiter=500))
    roots.extend(float(x) for x in xs[gx == 0.0])
    return sorted(roots)


def fprime_at_zero(spec: FeedbackSpec) -> float:
    nl = spec.nonlinearity
    if nl.kind == "nicholson":
        return 1.0
    if nl.kind == "custom":
        if nl.fprime0 is None:
            raise ModelError("f'(0) unavailable for this custom nonlinearity")
        return float(nl.fprime0)
    p, q = nl.p, nl.q
    if q == 0:
        return 0.0 if p > 1 else (-1.0 if p == 1 else -math.inf)
    if q < 1:
        return math.inf
    return 1.0 if q == 1 else 0.0


def zero_stability(spec: FeedbackSpec) -> str:
    """Classify the zero equilibrium by the sign of theta = r f'(0) - gamma."""
    gamma, r = _require_constant_rates(spec)
    if f_at_zero(spec) != 0.0:
        raise ModelError("x = 0 is not an equilibrium when f(0) != 0")
    theta = r * fprime_at_zero(spec) - gamma
    if theta < 0:
        return "stable"
    if theta > 0:
        return "unstable"
    return "marginal"


def leading_real_root(spec: FeedbackSpec) -> float:
    """Real root of lambda + gamma = r f'(0) e^{-lambda tau} (for r f'(0) >= 0)."""
    gamma, r = _require_constant_rates(spec)
    if f_at_zero(spec) != 0.0:
        raise ModelError("x = 0 is not an equilibrium when f(0) != 0")
    c = r * fprime_at_zero(spec)
    if not (c >= 0 and math.isfinite(c)):
        raise ModelError("real-root cross-check needs 0 <= r f'(0) < inf")
    tau = spec.tau
    h = lambda lam: lam + gamma - c * math.exp(-lam * tau)
    lo, hi = -gamma - 1.0, max(c, 1.0)
    while h(lo) > 0:
        lo *= 2
    while h(hi) < 0:
        hi *= 2
    return brentq(h, lo, hi, xtol=1e-14, rtol=1e-13)
