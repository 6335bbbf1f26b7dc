"""Small high-precision helpers for the closed-form weights.

The equilibrium formulas cancel terms of order ``|Pi| * S`` (about 1e7 on
the reference parameters) down to positions of order 1e2.  The weights that
multiply scenario increments are therefore formed once per parameter set in
double-double arithmetic (error-free transformations, about 32 digits), the
3x3 inverses with mpmath, and the results are rounded to ``np.longdouble``.
"""

from __future__ import annotations

import mpmath
import numpy as np

EXT = np.longdouble
_SPLIT = 134217729.0  # 2**27 + 1


def _two_sum(a, b):
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


def _split(a):
    c = _SPLIT * a
    hi = c - (c - a)
    return hi, a - hi


def _two_prod(a, b):
    p = a * b
    ah, al = _split(a)
    bh, bl = _split(b)
    return p, ((ah * bh - p) + ah * bl + al * bh) + al * bl


def dd_from_ext(x):
    x = np.asarray(x, dtype=EXT)
    hi = x.astype(float)
    return hi, (x - hi).astype(float)


def dd_to_ext(x):
    return x[0].astype(EXT) + x[1].astype(EXT)


def dd_matmul(x, y):
    """Stacked 3x3 (or n x n) product of double-double arrays ``(hi, lo)``."""
    xh, xl = np.broadcast_arrays(*x)
    yh, yl = np.broadcast_arrays(*y)
    k = xh.shape[-1]
    shape = np.broadcast_shapes(xh.shape[:-1] + (1,), yh.shape[:-2] + (1, yh.shape[-1]))
    sh = np.zeros(shape)
    sl = np.zeros(shape)
    for b in range(k):
        ah, al = xh[..., :, b : b + 1], xl[..., :, b : b + 1]
        bh, bl = yh[..., b : b + 1, :], yl[..., b : b + 1, :]
        p, e = _two_prod(ah, bh)
        e = e + (ah * bl + al * bh)
        s, f = _two_sum(sh, p)
        f = f + sl + e
        sh, sl = _two_sum(s, f)
    return sh, sl


def _to_mp(x):
    hi = float(x)
    return mpmath.mpf(hi) + mpmath.mpf(float(x - EXT(hi)))


def exact_inverse(m_ext: np.ndarray):
    """Inverses of stacked 3x3 longdouble matrices as double-double pairs."""
    hi = np.empty(m_ext.shape)
    lo = np.empty(m_ext.shape)
    with mpmath.workdps(40):
        for idx in np.ndindex(m_ext.shape[:-2]):
            inv = mpmath.matrix([[_to_mp(v) for v in row] for row in m_ext[idx]]) ** -1
            for i in range(3):
                for j in range(3):
                    h = float(inv[i, j])
                    hi[idx + (i, j)] = h
                    lo[idx + (i, j)] = float(inv[i, j] - h)
    return hi, lo
