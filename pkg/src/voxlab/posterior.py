"""Posterior encoder over linear spectrograms, the memory attention block,
and K-means initialization of the memory bank.

The encoder is a dilated-conv stack reading log1p-compressed magnitudes and
emitting per-frame mean and scale for the reparameterized sample
z = mu + sigma * eps.  The memory block replaces raw samples in the decoder
input with an attention read over a learned table M:

    Attention(Q, K, V) = [softmax(Q Wq (K Wk)^T / sqrt(d)) V Wv] Wo

with Q = z and K = V = M, split over heads (d is the per-head width; one
head reproduces the plain formula).  M starts from K-means centers of
posterior samples collected at the end of warmup.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .duration import VARIANCE_FLOOR


@dataclass
class PosteriorParams:
    mu: ad.Tensor
    sigma: ad.Tensor

    @property
    def frames(self):
        return self.mu.shape[0]


class PosteriorEncoder(nn.Module):
    """Dilated convs over spectrogram frames; heads for mu and raw scale."""

    def __init__(self, n_bins, dim, rng, layers=3, filt=64, kernel=5,
                 dilation=1):
        super().__init__()
        self.pre = nn.Conv1d(n_bins, filt, 1, rng)
        convs = []
        norms = []
        for _ in range(layers):
            convs.append(nn.Conv1d(filt, filt, kernel, rng,
                                   dilation=dilation))
            norms.append(nn.LayerNorm(filt))
        self.convs = nn.ModuleList(convs)
        self.norms = nn.ModuleList(norms)
        self.out = nn.Conv1d(filt, 2 * dim, 1, rng)
        self.dim = dim

    def __call__(self, spec):
        if spec.shape[0] == 0:
            raise ValueError("empty spectrogram")
        x = np.log1p(np.asarray(spec, dtype=np.float64))
        h = ad.Tensor(x.T[None, :, :])
        h = self.pre(h)
        for conv, norm in zip(self.convs, self.norms):
            y = ad.transpose(ad.reshape(conv(ad.relu(h)), h.shape[1], -1))
            y = ad.reshape(ad.transpose(norm(y)), 1, h.shape[1], -1)
            h = h + y
        out = ad.transpose(ad.reshape(self.out(h), 2 * self.dim, -1))
        mu = ad.index(out, (slice(None), slice(0, self.dim)))
        raw = ad.index(out, (slice(None), slice(self.dim, None)))
        sigma = ad.softplus(raw) + VARIANCE_FLOOR
        return PosteriorParams(mu=mu, sigma=sigma)


def sample_posterior(params, rng=None, eps=None):
    """z = mu + sigma * eps; pass eps explicitly to pin the noise."""
    if eps is None:
        if rng is None:
            raise ValueError("need an rng or explicit eps")
        eps = rng.standard_normal(size=params.mu.shape)
    eps = np.broadcast_to(np.asarray(eps, dtype=np.float64),
                          params.mu.shape)
    return params.mu + params.sigma * ad.Tensor(eps.copy())


class MemoryBank(nn.Module):
    """Learned memory rows M plus the four square projections of Eq. 3."""

    def __init__(self, size, dim, rng, heads=2, init_m=None):
        super().__init__()
        if size < 1:
            raise ValueError("memory needs at least one row")
        if dim % heads != 0:
            raise ValueError("head count must divide the model width")
        if init_m is None:
            init_m = 0.5 * rng.standard_normal((size, dim))
        else:
            init_m = np.array(init_m, dtype=np.float64)
            if init_m.shape != (size, dim):
                raise ValueError("memory init has the wrong shape")
        self.m = nn.Parameter(init_m)
        noise = 0.01
        self.wq = nn.Parameter(np.eye(dim) + noise * rng.standard_normal((dim, dim)))
        self.wk = nn.Parameter(np.eye(dim) + noise * rng.standard_normal((dim, dim)))
        self.wv = nn.Parameter(np.eye(dim) + noise * rng.standard_normal((dim, dim)))
        self.wo = nn.Parameter(np.eye(dim) + noise * rng.standard_normal((dim, dim)))
        self.heads = heads
        self.size = size
        self.dim = dim


def _split_heads(x, heads):
    n, d = x.shape
    return ad.transpose(ad.reshape(x, n, heads, d // heads), (1, 0, 2))


def memory_attend(z, bank, return_weights=False):
    """Attention read of the memory bank; rows of z are the queries."""
    if bank.size == 0:
        raise ValueError("empty memory bank")
    heads = bank.heads
    hd = bank.dim // heads
    q = _split_heads(ad.matmul(z, bank.wq), heads)
    k = _split_heads(ad.matmul(bank.m, bank.wk), heads)
    v = _split_heads(ad.matmul(bank.m, bank.wv), heads)
    scores = ad.matmul(q, ad.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(hd))
    weights = ad.softmax(scores, axis=-1)
    mixed = ad.matmul(weights, v)
    m = z.shape[0]
    merged = ad.reshape(ad.transpose(mixed, (1, 0, 2)), m, bank.dim)
    out = ad.matmul(merged, bank.wo)
    if return_weights:
        return out, weights
    return out


def kmeans(points, k, seed, tol=1e-6, max_iter=100):
    """Plain Lloyd iterations; returns (centers, inertia trace).

    Seeded start from k distinct points; a cluster that empties is reseeded
    at the point farthest from its assigned center.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError("points must be (count, dim)")
    distinct = np.unique(pts, axis=0)
    if distinct.shape[0] < k:
        raise ValueError("fewer distinct points than clusters")
    rng = np.random.default_rng(seed)
    centers = distinct[rng.choice(distinct.shape[0], size=k, replace=False)]
    trace = []
    for _ in range(max_iter):
        d2 = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = np.argmin(d2, axis=1)
        nearest = d2[np.arange(len(pts)), assign]
        trace.append(float(nearest.sum()))
        new_centers = centers.copy()
        for c in range(k):
            mask = assign == c
            if np.any(mask):
                new_centers[c] = pts[mask].mean(axis=0)
            else:
                far = int(np.argmax(nearest))
                new_centers[c] = pts[far]
                nearest[far] = 0.0
        move = float(np.max(np.abs(new_centers - centers)))
        centers = new_centers
        if move < tol:
            break
    return centers, trace


def kmeans_init(samples, size, dim, seed, heads=2):
    """Cluster posterior samples and build the memory bank around them."""
    centers, _ = kmeans(samples, size, seed)
    if centers.shape[1] != dim:
        raise ValueError("sample width does not match the model width")
    rng = np.random.default_rng(seed + 1)
    return MemoryBank(size, dim, rng, heads=heads, init_m=centers)
