"""Scalar special functions and truncated-Gaussian statistics.

Conventions used throughout this package:

* ``q(x)`` is the standard normal density and ``Q(x)`` the standard normal
  CDF. All public names spell out ``cdf`` to avoid any collision with the
  communications convention where Q denotes the upper tail.
* Likelihood code must stay in the log domain. ``log_std_normal_cdf`` and
  ``log_interval_prob`` are accurate far into the tails (relative error
  below 1e-10 on [-38, 38], asymptotic series beyond) and never return
  ``-inf`` for finite scalar arguments.
* The truncated-Gaussian mean uses the correction term
  ``+ stdev * (q(alpha) - q(beta)) / Z`` with ``Z = Q(beta) - Q(alpha)``.
  The sign convention was fixed against a rejection-sampling Monte Carlo
  oracle before freezing (see tests).

All functions accept scalars or numpy arrays and are pure; they are safe to
call concurrently from any number of threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri

from .errors import DegenerateIntervalError, DomainError

__all__ = [
    "LOG_PROB_FLOOR",
    "GaussianTail",
    "std_normal_pdf",
    "std_normal_cdf",
    "log_std_normal_cdf",
    "log_std_normal_pdf",
    "inv_std_normal_cdf",
    "gaussian_tail",
    "cdf_ratio",
    "log_interval_prob",
    "truncated_gaussian_mean",
    "truncated_gaussian_variance",
]

# Probability floor used by likelihood code: intervals whose mass underflows
# below 1e-300 are treated as carrying this log-mass instead of -inf.
LOG_PROB_FLOOR = float(np.log(1e-300))

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


def _as_finite_array(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} must be finite, got {x!r}")
    return arr


def _scalar_or_array(result: np.ndarray, like) -> float | np.ndarray:
    if np.isscalar(like) or (isinstance(like, np.ndarray) and like.ndim == 0):
        return float(result)
    return result


@dataclass(frozen=True)
class GaussianTail:
    """Log CDF, log density and their ratio at a single point.

    ``mills_ratio`` is the density-to-CDF ratio q(x)/Q(x); it is strictly
    positive and strictly decreasing in x.
    """

    log_cdf: float
    log_pdf: float
    mills_ratio: float


def std_normal_pdf(x) -> float | np.ndarray:
    """Standard normal density q(x) = exp(-x^2/2)/sqrt(2*pi)."""
    arr = _as_finite_array(x, "x")
    return _scalar_or_array(np.exp(-0.5 * arr * arr - _LOG_SQRT_2PI), x)


def log_std_normal_pdf(x) -> float | np.ndarray:
    """Natural log of the standard normal density."""
    arr = _as_finite_array(x, "x")
    return _scalar_or_array(-0.5 * arr * arr - _LOG_SQRT_2PI, x)


def std_normal_cdf(x) -> float | np.ndarray:
    """Standard normal CDF Q(x); satisfies Q(x) + Q(-x) = 1.

    Below x = -37 the value is subnormal in float64; that branch is routed
    through the log-domain implementation so cdf and exp(log_cdf) agree to
    the last representable bit.
    """
    arr = _as_finite_array(x, "x")
    out = np.asarray(ndtr(arr))
    deep = arr < -37.0
    if np.any(deep):
        out = np.where(deep, np.exp(log_ndtr(arr)), out)
    return _scalar_or_array(out, x)


def log_std_normal_cdf(x) -> float | np.ndarray:
    """ln Q(x), evaluated without underflow for any finite x."""
    arr = _as_finite_array(x, "x")
    return _scalar_or_array(log_ndtr(arr), x)


def inv_std_normal_cdf(p) -> float | np.ndarray:
    """Inverse CDF: the x with Q(x) = p, for p strictly inside (0, 1).

    Callers holding empirical frequencies must clamp them away from
    {0, 1} before calling (see the closed-form ML estimator).
    """
    arr = _as_finite_array(p, "p")
    if np.any(arr <= 0.0) or np.any(arr >= 1.0):
        raise DomainError(f"p must lie in the open interval (0,1), got {p!r}")
    return _scalar_or_array(ndtri(arr), p)


def gaussian_tail(x: float) -> GaussianTail:
    """Bundle ln Q(x), ln q(x) and q(x)/Q(x) for one argument."""
    arr = _as_finite_array(x, "x")
    if arr.ndim != 0:
        raise DomainError("gaussian_tail takes a scalar argument")
    log_cdf = float(log_ndtr(arr))
    log_pdf = float(-0.5 * arr * arr - _LOG_SQRT_2PI)
    return GaussianTail(
        log_cdf=log_cdf,
        log_pdf=log_pdf,
        mills_ratio=float(np.exp(log_pdf - log_cdf)),
    )


def cdf_ratio(x) -> float | np.ndarray:
    """q(x)/Q(x), the derivative of ln Q(x). Stable for very negative x,
    where it approaches -x."""
    arr = _as_finite_array(x, "x")
    flat = np.atleast_1d(arr).astype(float)
    out = np.empty_like(flat)
    # below -30 the log-domain subtraction cancels catastrophically once
    # 0.5 x^2 dwarfs the log terms; the inverse Mills expansion
    # t + 1/t - 2/t^3 is accurate to ~1e-8 relative there
    deep = flat < -30.0
    a = flat[~deep]
    out[~deep] = np.exp(-0.5 * a * a - _LOG_SQRT_2PI - log_ndtr(a))
    t = -flat[deep]
    with np.errstate(over="ignore"):
        out[deep] = t + 1.0 / t - 2.0 / t**3
    return _scalar_or_array(out.reshape(arr.shape), x)


def log_interval_prob(a, b, floor: float | None = None) -> float | np.ndarray:
    """ln(Q(b) - Q(a)) for b > a elementwise, computed stably.

    When both endpoints sit in the right tail the difference is evaluated
    through the reflected pair (Q(-a) - Q(-b)) so that no catastrophic
    cancellation occurs. ``floor`` (a log value, e.g. LOG_PROB_FLOOR) caps
    the result from below; without it an underflowing interval yields -inf.
    """
    a_arr = np.asarray(a, dtype=float)
    b_arr = np.asarray(b, dtype=float)
    # Infinite endpoints are legal here (half-lines); NaN is not.
    if np.any(np.isnan(a_arr)) or np.any(np.isnan(b_arr)):
        raise DomainError("interval endpoints must not be NaN")
    if np.any(b_arr <= a_arr):
        raise DomainError("log_interval_prob requires b > a elementwise")

    a_b, b_b = np.broadcast_arrays(a_arr, b_arr)
    # Reflect whenever the interval lies mostly in the right tail.
    # (-inf, inf) makes the sum NaN; comparison False, so no reflection.
    with np.errstate(invalid="ignore"):
        swap = (a_b + b_b) > 0.0
    lo = np.where(swap, -b_b, a_b)
    hi = np.where(swap, -a_b, b_b)
    log_hi = log_ndtr(hi)
    log_lo = log_ndtr(lo)
    with np.errstate(divide="ignore", invalid="ignore"):
        diff = log_lo - log_hi  # <= 0
        out = log_hi + np.log1p(-np.exp(diff))
    # diff == 0 (identical masses after rounding) gives log1p(-1) = -inf,
    # which is the honest underflow answer.
    out = np.where(np.isnan(out), -np.inf, out)
    if floor is not None:
        out = np.maximum(out, floor)
    if np.isscalar(a) and np.isscalar(b):
        return float(out)
    return out


def _standardize_interval(center, stdev, lower, upper):
    c = np.asarray(center, dtype=float)
    s = np.asarray(stdev, dtype=float)
    if not np.all(np.isfinite(c)):
        raise DomainError("center must be finite")
    if not np.all(np.isfinite(s)) or np.any(s <= 0.0):
        raise DomainError("stdev must be finite and > 0")
    lo = np.asarray(lower, dtype=float)
    up = np.asarray(upper, dtype=float)
    if np.any(np.isnan(lo)) or np.any(np.isnan(up)):
        raise DomainError("interval bounds must not be NaN")
    if np.any(~(lo < up)):
        raise DomainError("lower < upper required")
    with np.errstate(invalid="ignore"):
        alpha = (lo - c) / s  # -inf allowed
        beta = (up - c) / s
    return c, s, alpha, beta, lo, up


def _pdf_over_mass(x: np.ndarray, log_mass: np.ndarray) -> np.ndarray:
    """q(x) / Z with Z given in log domain; x may be +-inf (limit 0)."""
    out = np.zeros_like(log_mass, dtype=float)
    finite = np.isfinite(x)
    xf = np.where(finite, x, 0.0)
    out = np.where(
        finite, np.exp(-0.5 * xf * xf - _LOG_SQRT_2PI - log_mass), 0.0
    )
    return out


def truncated_gaussian_mean(center, stdev, lower, upper) -> float | np.ndarray:
    """Mean of N(center, stdev^2) truncated to [lower, upper].

    Either bound may be infinite. The result lies strictly inside the open
    interval. Raises DegenerateIntervalError when the interval mass
    underflows (below 1e-300); the error carries a midpoint clamp
    suggestion for callers that prefer to continue.
    """
    c, s, alpha, beta, lo, up = _standardize_interval(center, stdev, lower, upper)
    log_mass = log_interval_prob(alpha, beta)
    log_mass_arr = np.asarray(log_mass, dtype=float)
    if np.any(log_mass_arr < LOG_PROB_FLOOR):
        mid_lo = np.maximum(lo, c - 40.0 * s)
        mid_up = np.minimum(up, c + 40.0 * s)
        midpoint = 0.5 * (mid_lo + mid_up)
        raise DegenerateIntervalError(
            "truncation interval carries no numerical probability mass",
            midpoint=float(np.atleast_1d(midpoint).flat[0]),
        )
    correction = _pdf_over_mass(alpha, log_mass_arr) - _pdf_over_mass(
        beta, log_mass_arr
    )
    res = c + s * correction
    # Keep the result strictly interior; extreme-tail rounding can hit a bound.
    lo_open = np.where(np.isfinite(lo), np.nextafter(lo, np.inf), lo)
    up_open = np.where(np.isfinite(up), np.nextafter(up, -np.inf), up)
    res = np.clip(res, lo_open, up_open)
    if np.isscalar(center) and np.isscalar(lower) and np.isscalar(upper):
        return float(res)
    return res


def truncated_gaussian_variance(center, stdev, lower, upper) -> float | np.ndarray:
    """Variance of N(center, stdev^2) truncated to [lower, upper].

    Same domain rules as truncated_gaussian_mean. Used by the variational
    noise update; the identity is
    var = s^2 * (1 + (alpha q(alpha) - beta q(beta))/Z - ((q(alpha)-q(beta))/Z)^2).
    """
    c, s, alpha, beta, lo, up = _standardize_interval(center, stdev, lower, upper)
    log_mass = np.asarray(log_interval_prob(alpha, beta), dtype=float)
    if np.any(log_mass < LOG_PROB_FLOOR):
        raise DegenerateIntervalError(
            "truncation interval carries no numerical probability mass"
        )
    ra = _pdf_over_mass(alpha, log_mass)
    rb = _pdf_over_mass(beta, log_mass)
    # x*q(x)/Z with the convention inf * 0 -> 0 at infinite bounds.
    a_term = np.where(np.isfinite(alpha), np.where(ra > 0, alpha, 0.0) * ra, 0.0)
    b_term = np.where(np.isfinite(beta), np.where(rb > 0, beta, 0.0) * rb, 0.0)
    var = s * s * (1.0 + a_term - b_term - (ra - rb) ** 2)
    var = np.maximum(var, 0.0)
    if np.isscalar(center) and np.isscalar(lower) and np.isscalar(upper):
        return float(var)
    return var
