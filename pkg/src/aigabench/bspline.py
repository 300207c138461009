"""Univariate B-spline / Bernstein kernels and knot insertion.

Everything here operates on a *single* B-spline given by its local knot
vector (p+2 knots for degree p), which is the shape both the hierarchical
and the T-spline bases need.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from .dyadic import DyadicValue


class InvalidKnotVector(ValueError):
    pass


class NotARefinement(ValueError):
    pass


def _as_float_knots(knots) -> np.ndarray:
    out = np.array([float(k) for k in knots], dtype=float)
    if np.any(np.diff(out) < 0):
        raise InvalidKnotVector(f"knot vector is decreasing: {list(out)}")
    if out[0] == out[-1]:
        raise InvalidKnotVector("knot vector needs two distinct values")
    return out


def bspline_eval(knots, x, deriv_order: int = 0):
    """Evaluate one B-spline of degree len(knots)-2 over its local knots.

    `x` may be a scalar or an array. The function is zero outside
    [knots[0], knots[-1]]; the value at knots[-1] is the limit from the
    left so that clamped bases are interpolatory at the right boundary.
    Zero-length spans (repeated knots) follow the 0/0 -> 0 convention.
    """
    t = _as_float_knots(knots)
    if deriv_order not in (0, 1, 2):
        raise ValueError(f"deriv_order must be 0, 1 or 2, got {deriv_order}")
    xs = np.atleast_1d(np.asarray(x, dtype=float))
    out = _eval_window(t, xs, deriv_order, right=t[-1])
    return out if np.ndim(x) else float(out[0])


def _eval_window(t: np.ndarray, xs: np.ndarray, order: int,
                 right: float) -> np.ndarray:
    p = len(t) - 2
    if order > 0:
        left = _safe_inv(t[p] - t[0]) * _eval_window(t[:-1], xs, order - 1, right)
        rgt = _safe_inv(t[p + 1] - t[1]) * _eval_window(t[1:], xs, order - 1, right)
        return p * (left - rgt)
    # Cox-de Boor triangle, vectorized over xs.
    n_spans = p + 1
    N = np.zeros((n_spans, len(xs)))
    for j in range(n_spans):
        if t[j] < t[j + 1]:
            inside = (xs >= t[j]) & (xs < t[j + 1])
            if t[j + 1] == right:
                inside |= xs == right
            N[j, inside] = 1.0
    for k in range(1, p + 1):
        for j in range(p + 1 - k):
            a = _safe_inv(t[j + k] - t[j])
            b = _safe_inv(t[j + k + 1] - t[j + 1])
            N[j] = a * (xs - t[j]) * N[j] + b * (t[j + k + 1] - xs) * N[j + 1]
    return N[0]


def _safe_inv(d: float) -> float:
    return 0.0 if d == 0.0 else 1.0 / d


def bernstein_row(p: int, t) -> np.ndarray:
    """Values of the p+1 Bernstein polynomials on [0,1] at t.

    Returns shape (..., p+1) for array input, (p+1,) for a scalar.
    """
    from math import comb

    ts = np.asarray(t, dtype=float)[..., None]
    k = np.arange(p + 1)
    coeff = np.array([comb(p, i) for i in range(p + 1)], dtype=float)
    row = coeff * ts ** k * (1.0 - ts) ** (p - k)
    row = np.where(np.isfinite(row), row, 0.0)
    # fix 0**0 at the endpoints explicitly
    row[..., 0] = np.where(np.squeeze(ts, -1) == 0.0, 1.0, row[..., 0])
    row[..., p] = np.where(np.squeeze(ts, -1) == 1.0, 1.0, row[..., p])
    return row if np.ndim(t) else row.reshape(p + 1)


def bernstein_deriv_row(p: int, t, order: int = 1) -> np.ndarray:
    """Order-th derivative of the Bernstein row; shapes as bernstein_row."""
    if order == 0:
        return bernstein_row(p, t)
    low = bernstein_deriv_row(p - 1, t, order - 1)
    out = np.zeros(low.shape[:-1] + (p + 1,))
    out[..., :-1] -= p * low
    out[..., 1:] += p * low
    return out


def _to_fraction(v) -> Fraction:
    if isinstance(v, DyadicValue):
        return Fraction(v.numerator, 1 << v.scale)
    if isinstance(v, (int, Fraction)):
        return Fraction(v)
    f = Fraction(v).limit_denominator(1 << 60)
    if float(f) != float(v):
        raise InvalidKnotVector(f"knot {v} is not an exact binary rational")
    return f


def _single_insertion(windows: dict, x: Fraction, p: int) -> dict:
    """Expand every (window -> coeff) entry across one knot insertion at x."""
    new: dict = {}

    def add(win, c):
        new[win] = new.get(win, Fraction(0)) + c

    for win, c in windows.items():
        t = win  # tuple of p+2 Fractions
        if x <= t[0] or x >= t[p + 1]:
            add(win, c)
            continue
        merged = sorted(t + (x,))
        left = tuple(merged[: p + 2])
        rightw = tuple(merged[1: p + 3])
        a = Fraction(1) if x >= t[p] else (x - t[0]) / (t[p] - t[0])
        b = Fraction(1) if x <= t[1] else (t[p + 1] - x) / (t[p + 1] - t[1])
        if a:
            add(left, c * a)
        if b:
            add(rightw, c * b)
    return new


def single_function_refine(coarse_knots, fine_knots) -> list[Fraction]:
    """Coefficients of one coarse B-spline in the basis of all consecutive
    (p+2)-windows of `fine_knots`.

    `fine_knots` must contain `coarse_knots` as a sub-multiset; insertion is
    performed one knot at a time (exact rational arithmetic).
    """
    coarse = [_to_fraction(k) for k in coarse_knots]
    fine = [_to_fraction(k) for k in fine_knots]
    if any(coarse[i] > coarse[i + 1] for i in range(len(coarse) - 1)):
        raise InvalidKnotVector("coarse knots decreasing")
    if any(fine[i] > fine[i + 1] for i in range(len(fine) - 1)):
        raise InvalidKnotVector("fine knots decreasing")
    p = len(coarse) - 2
    remaining = list(fine)
    for k in coarse:
        if k in remaining:
            remaining.remove(k)
        else:
            raise NotARefinement(f"fine grid misses coarse knot {k}")
    windows = {tuple(coarse): Fraction(1)}
    for x in remaining:
        windows = _single_insertion(windows, x, p)
    out = []
    for s in range(len(fine) - p - 1):
        win = tuple(fine[s: s + p + 2])
        out.append(windows.get(win, Fraction(0)))
    return out


def knot_insertion_row(coarse_knots, fine_knot_grid) -> list[float]:
    """Float coefficients of the coarse B-spline over the fine-grid windows."""
    return [float(c) for c in single_function_refine(coarse_knots,
                                                     fine_knot_grid)]


def greville_points(knots: np.ndarray, p: int) -> np.ndarray:
    """Greville abscissae of the basis over a full knot vector."""
    n = len(knots) - p - 1
    return np.array([np.mean(knots[i + 1: i + p + 1]) for i in range(n)])
