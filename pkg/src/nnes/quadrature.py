"""Composite Simpson quadrature on uniform time grids.

All time integrals in the package are taken on grids produced by
:func:`time_grid`, so that propagators, integrands and weights share the
same nodes.  The number of intervals is a multiple of four whenever the
interval is non-degenerate, which lets :class:`StreamingSimpson` report a
Richardson error estimate from the embedded coarse rule.
"""

import math

import numpy as np


def n_intervals(a, b, dt):
    """Number of grid intervals used to cover ``[a, b]`` with step <= ``dt``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    length = abs(b - a)
    if length == 0:
        return 0
    n = max(1, math.ceil(length / dt - 1e-9))
    return 4 * math.ceil(n / 4)


def time_grid(a, b, dt):
    """Uniform nodes from ``a`` to ``b`` (direction preserved), step <= dt."""
    n = n_intervals(a, b, dt)
    if n == 0:
        return np.array([float(a)])
    return np.linspace(a, b, n + 1)


def simpson_weights(n, h):
    """Weights of the composite Simpson rule on ``n`` intervals of width ``h``.

    Even ``n`` gives the classic 1-4-2-...-4-1 pattern.  Odd ``n >= 3``
    closes with a Simpson 3/8 panel on the last three intervals; ``n = 1``
    falls back to the trapezoid.
    """
    w = np.zeros(n + 1)
    if n == 0:
        return w
    if n == 1:
        w[:] = h / 2
        return w
    m = n if n % 2 == 0 else n - 3
    if m:
        w[:m + 1:2] = 2.0
        w[1:m:2] = 4.0
        w[0] = w[m] = 1.0
        w[:m + 1] *= h / 3
    if m != n:
        w[m:] += 3 * h / 8 * np.array([1.0, 3.0, 3.0, 1.0])
    return w


def simpson(values, h):
    """Composite Simpson integral of samples along the first axis."""
    values = np.asarray(values)
    w = simpson_weights(values.shape[0] - 1, h)
    return np.tensordot(w, values, axes=(0, 0))


class StreamingSimpson:
    """Accumulate a Simpson integral node by node without storing samples.

    Parameters
    ----------
    n : int
        Number of intervals.
    h : float
        Signed step; a negative step integrates "backwards" and flips the sign.

    Notes
    -----
    When ``n`` is a multiple of four, a second Simpson sum with step ``2h`` is
    carried along and ``error_estimate`` returns ``|S_h - S_2h| / 15``.
    """

    def __init__(self, n, h):
        self.n = n
        self.h = h
        self._w = simpson_weights(n, h)
        self._wc = simpson_weights(n // 2, 2 * h) if n % 4 == 0 and n else None
        self.total = 0.0
        self._coarse = 0.0
        self._seen = 0

    def add(self, j, value):
        self.total = _accumulate(self.total, self._w[j], value)
        if self._wc is not None and j % 2 == 0:
            self._coarse = _accumulate(self._coarse, self._wc[j // 2], value)
        self._seen += 1

    @property
    def complete(self):
        return self._seen == self.n + 1

    @property
    def error_estimate(self):
        if self._wc is None:
            return 0.0
        diff = np.asarray(self.total - self._coarse)
        return float(np.max(np.abs(diff))) / 15 if diff.size else 0.0


def _accumulate(total, w, value):
    if (isinstance(total, np.ndarray) and total.shape == np.shape(value)
            and np.can_cast(np.result_type(value), total.dtype)):
        total += w * value
        return total
    return total + w * value


def cumulative_pair(f0, f1, f2, h):
    """Integrals over the first interval and over both intervals of a pair.

    Uses the quadratic through three equally spaced samples.  Summed over
    consecutive pairs, the second value reproduces composite Simpson exactly.
    """
    half = h / 12 * (5 * f0 + 8 * f1 - f2)
    full = h / 3 * (f0 + 4 * f1 + f2)
    return half, full
