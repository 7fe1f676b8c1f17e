"""Differentiable soft alignment cost over a frame-pair cost matrix.

A monotone path starts at cell (1,1), ends at (I,J), and moves down, right,
or diagonally.  Path cost = sum of visited cell costs + a warp penalty for
every non-diagonal step.  The returned value is the soft minimum (temperature
``gamma``) over all such paths, computed by dynamic programming:

    r[i,j] = C[i,j] + softmin(r[i-1,j] + warp, r[i,j-1] + warp, r[i-1,j-1])

with r[0,0] = 0 and +inf borders.  The gradient with respect to each cell is
the expected path-occupancy matrix, by the standard reverse recursion.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


def soft_min(values, gamma):
    """Smoothed minimum -gamma * log(sum(exp(-v/gamma))), shift-stabilized."""
    if gamma <= 0.0:
        raise ValueError("gamma must be positive")
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("soft_min of an empty collection")
    m = v.min()
    if not np.isfinite(m):
        return float(m)
    with np.errstate(over="ignore"):
        return float(m - gamma * np.log(np.sum(np.exp(-(v - m) / gamma))))


def _forward(C, gamma, warp):
    I, J = C.shape
    R = np.full((I + 1, J + 1), np.inf)
    R[0, 0] = 0.0
    for d in range(2, I + J + 2):
        ilo = max(1, d - J)
        ihi = min(I, d - 1)
        if ilo > ihi:
            continue
        ii = np.arange(ilo, ihi + 1)
        jj = d - ii
        a = R[ii - 1, jj] + warp
        b = R[ii, jj - 1] + warp
        c = R[ii - 1, jj - 1]
        m = np.minimum(np.minimum(a, b), c)
        with np.errstate(invalid="ignore"):
            z = (np.exp(-(a - m) / gamma) + np.exp(-(b - m) / gamma)
                 + np.exp(-(c - m) / gamma))
        R[ii, jj] = C[ii - 1, jj - 1] + m - gamma * np.log(z)
    return R


def _occupancy(C, R, gamma, warp):
    """E[i,j] = d r[I,J] / d r[i,j]; the gradient wrt C is E over cells."""
    I, J = C.shape
    S = R[1:, 1:] - C  # softmin value at each cell
    E = np.zeros((I + 2, J + 2))
    E[I, J] = 1.0

    def alpha(pred_val, p, q, pen):
        # weight of predecessor value pred_val inside cell (p,q)'s softmin
        with np.errstate(invalid="ignore"):
            return np.exp(-(pred_val + pen - S[p - 1, q - 1]) / gamma)

    # the corner's own anti-diagonal holds no other cell, so start one in
    for d in range(I + J - 1, 1, -1):
        ilo = max(1, d - J)
        ihi = min(I, d - 1)
        if ilo > ihi:
            continue
        ii = np.arange(ilo, ihi + 1)
        jj = d - ii
        acc = np.zeros(len(ii))
        # vertical successor (i+1, j): this cell entered it via R[i,j] + warp
        p, q = ii + 1, jj
        valid = p <= I
        if valid.any():
            pv, qv = p[valid], q[valid]
            acc[valid] += E[pv, qv] * alpha(R[pv - 1, qv], pv, qv, warp)
        # horizontal successor (i, j+1)
        p, q = ii, jj + 1
        valid = q <= J
        if valid.any():
            pv, qv = p[valid], q[valid]
            acc[valid] += E[pv, qv] * alpha(R[pv, qv - 1], pv, qv, warp)
        # diagonal successor (i+1, j+1)
        p, q = ii + 1, jj + 1
        valid = (p <= I) & (q <= J)
        if valid.any():
            pv, qv = p[valid], q[valid]
            acc[valid] += E[pv, qv] * alpha(R[pv - 1, qv - 1], pv, qv, 0.0)
        E[ii, jj] = acc
    return E[1:I + 1, 1:J + 1]


def soft_dtw_cost(cost, gamma=0.01, warp=0.07):
    """Soft path cost of a (I, J) matrix; differentiable in the matrix.

    Returns a scalar autodiff tensor.  Normalization by path length is the
    caller's business.
    """
    if gamma <= 0.0:
        raise ValueError("gamma must be positive")
    if warp < 0.0:
        raise ValueError("warp penalty must be non-negative")
    c = ad.astensor(cost)
    C = c.data
    if C.ndim != 2 or C.size == 0:
        raise ValueError(f"cost matrix must be 2-D and non-empty, got {C.shape}")
    if not np.all(np.isfinite(C)):
        raise ad.NonFiniteError("non-finite entries in soft alignment cost matrix")
    R = _forward(C, gamma, warp)
    out = np.array(R[C.shape[0], C.shape[1]])

    def vjp(g):
        return (g * _occupancy(C, R, gamma, warp),)

    return ad.custom(out, (c,), vjp, "soft_dtw")
