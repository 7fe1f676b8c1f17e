"""Differentiable durator: duration prediction, learnable upsampling, prior.

The predictor reads the phoneme hiddens (behind a gradient stop) and emits
log-durations.  The upsampler turns durations into per-frame/per-phoneme
boundary features S and E, mixes them with projected hidden features, and
produces a frame-level hidden sequence O as softmax-attention over phonemes;
everything stays differentiable in the durations.  Two linear maps on O give
the frame-level prior mean and variance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn

VARIANCE_FLOOR = 1e-4


class DurationPredictor(nn.Module):
    """Three conv layers with ReLU, layer norm, dropout; linear to log-d."""

    def __init__(self, dim, filt, kernel, rng, dropout=0.5):
        super().__init__()
        self.dropout = dropout
        self.convs = nn.ModuleList([
            nn.Conv1d(dim if i == 0 else filt, filt, kernel, rng)
            for i in range(3)])
        self.norms = nn.ModuleList([nn.LayerNorm(filt) for _ in range(3)])
        self.out = nn.Linear(filt, 1, rng)

    def __call__(self, H, train=False, rng=None):
        x = ad.stop_gradient(H)
        n = x.shape[0]
        rate = self.dropout if train else 0.0
        for conv, norm in zip(self.convs, self.norms):
            y = ad.reshape(ad.transpose(x), 1, x.shape[1], n)
            y = ad.relu(conv(y))
            x = norm(ad.transpose(ad.reshape(y, y.shape[1], n)))
            x = ad.dropout(x, rate, rng)
        return ad.reshape(self.out(x), n)


def predict_durations(predictor, H, train=False, rng=None):
    """Positive durations: exp of the predictor's log-duration output."""
    return ad.exp(predictor(H, train, rng))


def build_boundary_matrices(d, m):
    """S, E of shape (m, n): distances from each 1-indexed frame to each
    phoneme's start and end boundary.  E is derived as d - S so the algebraic
    identity S + E = d holds bitwise."""
    d = ad.astensor(d)
    n = d.shape[0]
    if m < 1 or n < 1:
        raise ValueError("need at least one frame and one phoneme")
    tri_excl = np.tril(np.ones((n, n)), -1)
    prefix = ad.matmul(ad.Tensor(tri_excl), d)            # sum_{k<j} d_k
    frames = ad.Tensor(np.arange(1.0, m + 1.0).reshape(m, 1))
    S = frames - ad.reshape(prefix, 1, n)
    E = ad.reshape(d, 1, n) - S
    return S, E


def einsum_qmn_mnp(w, c):
    """einsum('qmn,mnp->qmp') via a broadcast batched matmul."""
    q, m, n = w.shape
    mm, nn_, p = c.shape
    if (m, n) != (mm, nn_):
        raise ValueError(f"einsum shape mismatch {w.shape} vs {c.shape}")
    out = ad.matmul(ad.reshape(w, q, m, 1, n), c)
    return ad.reshape(out, q, m, p)


@dataclass
class UpsampleResult:
    O: object    # (m, h) frame hiddens
    W: object    # (m, n, q) attention
    C: object    # (m, n, p) context
    S: object    # (m, n)
    E: object    # (m, n)


class Mlp(nn.Module):
    """Two dense layers, Swish after each."""

    def __init__(self, d_in, d_hidden, d_out, rng):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_hidden, rng)
        self.fc2 = nn.Linear(d_hidden, d_out, rng)

    def __call__(self, x):
        return ad.swish(self.fc2(ad.swish(self.fc1(x))))


class LearnableUpsampler(nn.Module):
    def __init__(self, dim, rng, p=2, q=4, conv_dim=8, conv_kernel=3,
                 mlp_hidden=16):
        super().__init__()
        self.p, self.q = p, q
        self.proj = nn.Linear(dim, dim, rng)
        self.conv = nn.Conv1d(dim, conv_dim, conv_kernel, rng)
        self.conv_norm = nn.LayerNorm(conv_dim)
        feat = 2 + conv_dim
        self.mlp_w = Mlp(feat, mlp_hidden, q, rng)
        self.mlp_c = Mlp(feat, mlp_hidden, p, rng)
        self.out_w = nn.Linear(q * dim, dim, rng)
        self.out_c = nn.Linear(q * p, dim, rng)

    def __call__(self, H, d, m):
        n, dim = H.shape
        if m < 1 or n < 1:
            raise ValueError("need at least one frame and one phoneme")
        S, E = build_boundary_matrices(d, m)

        g = ad.reshape(ad.transpose(self.proj(H)), 1, dim, n)
        g = ad.swish(self.conv_norm(ad.transpose(ad.reshape(self.conv(g),
                                                            -1, n))))
        feats = ad.concat([
            ad.reshape(S, m, n, 1),
            ad.reshape(E, m, n, 1),
            ad.reshape(g, 1, n, g.shape[1]) + ad.Tensor(np.zeros((m, 1, 1))),
        ], axis=2)                                        # (m, n, 10)

        W = ad.softmax(self.mlp_w(feats), axis=1)         # phoneme axis
        C = self.mlp_c(feats)

        w_perm = ad.transpose(W, (2, 0, 1))               # (q, m, n)
        wh = ad.matmul(w_perm, H)                         # (q, m, h)
        wc = einsum_qmn_mnp(w_perm, C)                    # (q, m, p)
        wh = ad.reshape(ad.transpose(wh, (1, 0, 2)), m, self.q * dim)
        wc = ad.reshape(ad.transpose(wc, (1, 0, 2)), m, self.q * self.p)
        O = self.out_w(wh) + self.out_c(wc)
        return UpsampleResult(O=O, W=W, C=C, S=S, E=E)


class PriorProjection(nn.Module):
    """Frame hiddens to diagonal-Gaussian mean and floored std-dev."""

    def __init__(self, dim, rng):
        super().__init__()
        self.mean = nn.Linear(dim, dim, rng)
        self.scale = nn.Linear(dim, dim, rng)

    def __call__(self, O):
        mu = self.mean(O)
        sigma = ad.softplus(self.scale(O)) + VARIANCE_FLOOR
        return mu, sigma


@dataclass
class DuratorOutput:
    log_d: object      # (n,) predicted log-durations
    d: object          # (n,) durations that drove the upsampler
    upsample: UpsampleResult
    mu: object         # (m, h)
    sigma: object      # (m, h)
    m: int


class Durator(nn.Module):
    """Predictor + upsampler + prior projection, end to end."""

    def __init__(self, dim, filt, kernel, rng, p=2, q=4, dropout=0.5,
                 conv_dim=8, conv_kernel=3, mlp_hidden=16):
        super().__init__()
        self.predictor = DurationPredictor(dim, filt, kernel, rng, dropout)
        self.upsampler = LearnableUpsampler(dim, rng, p=p, q=q,
                                            conv_dim=conv_dim,
                                            conv_kernel=conv_kernel,
                                            mlp_hidden=mlp_hidden)
        self.prior = PriorProjection(dim, rng)

    def __call__(self, H, m=None, train=False, rng=None, durations=None):
        """Run the stack.  ``durations`` swaps externally supplied labels in
        for the predicted ones on the upsampler path (the predictor still
        runs, so its supervision loss stays available)."""
        log_d = self.predictor(H, train, rng)
        d = ad.exp(log_d)
        if durations is not None:
            labels = np.asarray(durations, dtype=np.float64)
            if labels.shape != (H.shape[0],) or np.any(labels <= 0.0):
                raise ValueError("need one positive duration per phoneme")
            d = ad.Tensor(labels)
        if m is None:
            m = max(1, int(round(float(d.data.sum()))))
        ups = self.upsampler(H, d, m)
        mu, sigma = self.prior(ups.O)
        return DuratorOutput(log_d=log_d, d=d, upsample=ups, mu=mu,
                             sigma=sigma, m=m)


def duration_supervision_loss(log_d, duration_labels):
    """Mean squared error between predicted and label log-durations."""
    labels = np.asarray(duration_labels, dtype=np.float64)
    if np.any(labels <= 0):
        raise ValueError("duration labels must be positive")
    target = ad.Tensor(np.log(labels))
    diff = log_d - target
    return (diff * diff).mean()
