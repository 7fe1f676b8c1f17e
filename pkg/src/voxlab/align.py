"""Monotone frame-to-phoneme alignment by dynamic programming.

Frames may repeat a phoneme or advance to the next one, never skip; the first
frame sits on the first phoneme and the last frame on the last.  Equivalently
the alignment is a composition of m frames into n positive runs.  The search
returns the composition maximizing the summed per-frame log-likelihood:

    Q[i,j] = max(Q[i-1,j-1], Q[i-1,j]) + L[i,j]

backtracked from Q[m,n].  Ties prefer the diagonal step, which makes the
result deterministic (it is the optimum with lexicographically smallest
durations read from the last phoneme backwards).
"""

from __future__ import annotations

import itertools

import numpy as np


def gaussian_loglik(frames, mu, sigma):
    """Per-frame, per-phoneme diagonal-Gaussian log density matrix (m, n).

    ``frames`` is (m, h); ``mu`` and ``sigma`` are (n, h) with sigma > 0.
    Channel log densities are summed.
    """
    z = np.asarray(frames, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if z.ndim != 2 or mu.shape != sigma.shape or mu.ndim != 2:
        raise ValueError("frames must be (m, h); mu and sigma (n, h)")
    if z.shape[1] != mu.shape[1]:
        raise ValueError(
            f"channel mismatch: frames h={z.shape[1]}, prior h={mu.shape[1]}")
    if np.any(sigma <= 0.0):
        raise ValueError("sigma must be positive")
    d = (z[:, None, :] - mu[None, :, :]) / sigma[None, :, :]
    per = -0.5 * d * d - np.log(sigma)[None, :, :] - 0.5 * np.log(2.0 * np.pi)
    return per.sum(axis=2)


def _check_loglik(loglik):
    L = np.asarray(loglik, dtype=np.float64)
    if L.ndim != 2 or L.size == 0:
        raise ValueError(f"log-likelihood matrix must be 2-D, got {L.shape}")
    if not np.all(np.isfinite(L)):
        raise ValueError("non-finite log-likelihoods")
    m, n = L.shape
    if m < n:
        raise ValueError(f"no non-skipping alignment of {m} frames to {n} phonemes")
    return L, m, n


def search_alignment(loglik):
    """Best-path durations (n,) for an (m, n) log-likelihood matrix."""
    L, m, n = _check_loglik(loglik)
    Q = np.full((m, n), -np.inf)
    Q[0, 0] = L[0, 0]
    for i in range(1, m):
        prev = Q[i - 1]
        diag = np.concatenate(([-np.inf], prev[:-1]))
        Q[i] = np.maximum(prev, diag) + L[i]

    durations = np.zeros(n, dtype=np.int64)
    j = n - 1
    for i in range(m - 1, 0, -1):
        durations[j] += 1
        if j > 0 and Q[i - 1, j - 1] >= Q[i - 1, j]:
            j -= 1
    if j != 0:
        raise AssertionError("backtrack failed to reach the first phoneme")
    durations[0] += 1
    return durations


def _compositions(m, n):
    # all ways to split m frames into n positive runs, as duration tuples
    for cuts in itertools.combinations(range(1, m), n - 1):
        yield np.diff(np.concatenate(([0], cuts, [m])))


def brute_force_align(loglik, max_frames=10, max_phonemes=6):
    """Exhaustive reference search; small instances only.

    Same objective and tie-break as :func:`search_alignment`: among equal
    scores, the durations that are lexicographically smallest when read from
    the last phoneme backwards win.
    """
    L, m, n = _check_loglik(loglik)
    if m > max_frames or n > max_phonemes:
        raise ValueError(f"instance ({m}, {n}) exceeds brute-force limits")
    best_score = None
    best = None
    for durations in _compositions(m, n):
        total = 0.0
        i = 0
        for j, d in enumerate(durations):
            for _ in range(int(d)):
                total = total + L[i, j]
                i += 1
        key = tuple(durations[::-1])
        if (best_score is None or total > best_score
                or (total == best_score and key < best)):
            best_score = total
            best = key
    return np.array(best[::-1], dtype=np.int64)


def align(frames, mu, sigma):
    """Durations aligning ``frames`` to the per-phoneme Gaussians."""
    return search_alignment(gaussian_loglik(frames, mu, sigma))
