"""Natural cubic splines over unit-spaced measurement knots.

A window of l measurements per location becomes a piecewise-cubic path
X(t) on t in [0, l-1] after normalizing each measurement interval to one
time unit.  Missing entries (NaN) are bridged: a natural spline is fitted
over the observed knots only and missing knots take its value; leading and
trailing gaps use the nearest segment's polynomial extension clamped to the
observed min/max.  The completed rows are then fitted on the full unit grid,
so every returned path interpolates all observed measurements exactly, is
C2-continuous at interior knots, and has zero second derivative at the two
global endpoints.

Coefficients are stored per segment j as (a, b, c, d) with
X(t) = a + b*u + c*u^2 + d*u^3,  u = t - j.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence, Union

import numpy as np

from .errors import DataError, ShapeError

Array = np.ndarray
RationalStep = Union[Fraction, int, float]


@dataclass(frozen=True)
class ControlPath:
    """Piecewise-cubic interpolant; coeffs has shape (..., knots-1, 4)."""

    coeffs: Array
    knots: int

    @property
    def leading_shape(self) -> tuple:
        return self.coeffs.shape[:-2]


def _thomas(sub: Array, diag: Array, sup: Array, rhs: Array) -> Array:
    """Solve a tridiagonal system in O(m); sub/sup have length m-1."""
    m = diag.size
    cp = np.empty(m - 1) if m > 1 else np.empty(0)
    dp = np.empty(m)
    beta = diag[0]
    dp[0] = rhs[0] / beta
    for i in range(1, m):
        cp[i - 1] = sup[i - 1] / beta
        beta = diag[i] - sub[i - 1] * cp[i - 1]
        dp[i] = (rhs[i] - sub[i - 1] * dp[i - 1]) / beta
    x = np.empty(m)
    x[-1] = dp[-1]
    for i in range(m - 2, -1, -1):
        x[i] = dp[i] - cp[i] * x[i + 1]
    return x


def _second_derivatives_uniform(y: Array) -> Array:
    """Natural-spline knot second derivatives for rows on the unit grid."""
    rows, l = y.shape
    m2 = np.zeros((rows, l))
    m = l - 2
    if m <= 0:
        return m2
    rhs = 6.0 * (y[:, 2:] - 2.0 * y[:, 1:-1] + y[:, :-2])
    # forward elimination; the pivot pattern is data-independent on a
    # uniform grid, so it is computed once for all rows
    cp = np.empty(m)
    dp = np.empty((rows, m))
    cp[0] = 0.25
    dp[:, 0] = rhs[:, 0] * 0.25
    for i in range(1, m):
        denom = 4.0 - cp[i - 1]
        cp[i] = 1.0 / denom
        dp[:, i] = (rhs[:, i] - dp[:, i - 1]) / denom
    m2[:, m] = dp[:, m - 1]
    for i in range(m - 2, -1, -1):
        m2[:, i + 1] = dp[:, i] - cp[i] * m2[:, i + 2]
    return m2


def _coeffs_from_values(y: Array) -> Array:
    """Fit rows on the unit grid; returns (rows, l-1, 4)."""
    m2 = _second_derivatives_uniform(y)
    a = y[:, :-1]
    b = (y[:, 1:] - y[:, :-1]) - (2.0 * m2[:, :-1] + m2[:, 1:]) / 6.0
    c = m2[:, :-1] / 2.0
    d = (m2[:, 1:] - m2[:, :-1]) / 6.0
    return np.stack([a, b, c, d], axis=-1)


def _fit_observed(x: Array, y: Array) -> Array:
    """Natural spline over observed knots x (strictly increasing floats).

    Returns per-segment (a, b, c, d) with local coordinate u = t - x[i].
    """
    m = x.size
    h = np.diff(x)
    m2 = np.zeros(m)
    if m > 2:
        sub = h[:-2]
        sup = h[1:-1]
        diag = 2.0 * (h[:-1] + h[1:])
        rhs = 6.0 * ((y[2:] - y[1:-1]) / h[1:] - (y[1:-1] - y[:-2]) / h[:-1])
        m2[1:-1] = _thomas(sub, diag, sup, rhs)
    a = y[:-1]
    b = (y[1:] - y[:-1]) / h - h * (2.0 * m2[:-1] + m2[1:]) / 6.0
    c = m2[:-1] / 2.0
    d = (m2[1:] - m2[:-1]) / (6.0 * h)
    return np.stack([a, b, c, d], axis=-1)


def _fill_row(y: Array) -> Array:
    """Replace NaNs in one row by bridging-spline values."""
    obs = np.flatnonzero(np.isfinite(y))
    if obs.size < 2:
        raise DataError(f"need at least 2 observed values per location, got {obs.size}")
    if obs.size == y.size:
        return y
    x = obs.astype(np.float64)
    yo = y[obs]
    seg = _fit_observed(x, yo)
    lo, hi = yo.min(), yo.max()
    out = y.copy()
    for j in np.flatnonzero(~np.isfinite(y)):
        if j < obs[0]:
            k, clamp = 0, True
        elif j > obs[-1]:
            k, clamp = obs.size - 2, True
        else:
            k, clamp = int(np.searchsorted(x, j) - 1), False
        u = float(j) - x[k]
        a, b, c, d = seg[k]
        val = ((d * u + c) * u + b) * u + a
        out[j] = min(max(val, lo), hi) if clamp else val
    return out


def fill_missing(values: Array) -> Array:
    """Complete a (..., l) array, bridging NaN entries per row."""
    arr = np.asarray(values, dtype=np.float64)
    if np.isinf(arr).any():
        raise DataError("measurements must be finite or NaN")
    if not np.isnan(arr).any():
        return arr
    flat = arr.reshape(-1, arr.shape[-1]).copy()
    for i in range(flat.shape[0]):
        if np.isnan(flat[i]).any():
            flat[i] = _fill_row(flat[i])
    return flat.reshape(arr.shape)


def fit_natural_cubic(values, times: Optional[Sequence[float]] = None) -> ControlPath:
    """Fit natural cubic interpolants along the last axis of `values`.

    `times`, when given, must be uniformly spaced and strictly increasing;
    intervals are normalized to unit length so knots sit at 0 .. l-1.
    NaN entries are bridged (see module docstring).
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim < 1 or arr.shape[-1] < 2:
        raise ShapeError(f"need at least 2 knots per location, got shape {arr.shape}")
    l = arr.shape[-1]
    if times is not None:
        t = np.asarray(times, dtype=np.float64)
        if t.shape != (l,):
            raise ShapeError(f"times has shape {t.shape}, expected ({l},)")
        steps = np.diff(t)
        if np.any(steps <= 0) or not np.allclose(steps, steps[0], rtol=1e-9, atol=0.0):
            raise DataError("times must be strictly increasing and uniformly spaced")
    filled = fill_missing(arr)
    flat = filled.reshape(-1, l)
    coeffs = _coeffs_from_values(flat)
    return ControlPath(coeffs.reshape(arr.shape[:-1] + (l - 1, 4)), l)


def _eval_path(path: ControlPath, t: float, derivative: bool, extrapolate: bool) -> Array:
    tmax = path.knots - 1
    if not extrapolate and not (-1e-9 <= t <= tmax + 1e-9):
        raise ShapeError(f"t={t} outside path domain [0, {tmax}]")
    seg = min(max(int(np.floor(t)), 0), path.knots - 2)
    u = t - seg
    a = path.coeffs[..., seg, 0]
    b = path.coeffs[..., seg, 1]
    c = path.coeffs[..., seg, 2]
    d = path.coeffs[..., seg, 3]
    if derivative:
        return (3.0 * d * u + 2.0 * c) * u + b
    return ((d * u + c) * u + b) * u + a


def eval_path(path: ControlPath, t: float) -> Array:
    """Path value at time t in [0, knots-1]; shape = leading shape."""
    return _eval_path(path, float(t), derivative=False, extrapolate=False)


def eval_derivative(path: ControlPath, t: float) -> Array:
    """Path time-derivative at t in [0, knots-1]."""
    return _eval_path(path, float(t), derivative=True, extrapolate=False)


def dense_sample(path: ControlPath, r: RationalStep) -> tuple[Array, Array]:
    """Sample values and derivatives at t = k*r for k = 0 .. knots/r - 1.

    r must divide the knot count exactly in rational arithmetic.  The last
    samples of the grid can fall up to one knot past the final measurement;
    there the last segment's polynomial extension is used.
    """
    r = Fraction(r)
    if r <= 0:
        raise ShapeError(f"sampling step must be positive, got {r}")
    count = Fraction(path.knots) / r
    if count.denominator != 1:
        raise ShapeError(f"step {r} does not divide knot count {path.knots}")
    count = int(count)
    values = np.empty(path.leading_shape + (count,))
    derivs = np.empty(path.leading_shape + (count,))
    for k in range(count):
        t = float(k * r)
        values[..., k] = _eval_path(path, t, derivative=False, extrapolate=True)
        derivs[..., k] = _eval_path(path, t, derivative=True, extrapolate=True)
    return values, derivs
