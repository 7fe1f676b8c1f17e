"""Shift-only coupling flow between the simplified posterior and the prior,
with the two KL losses that train it from both directions.

Each coupling keeps one half of the channels (even or odd positions,
alternating per layer) and adds a learned shift to the other half; with no
scaling the Jacobian log-determinant is exactly zero, which the code asserts
by constructing it as a constant.  A scale-carrying variant exists behind a
flag purely so the logdet path has test coverage.

The losses are Monte Carlo estimates with a single reparameterized sample:
    backward: E_{z~q}  [ log q(z|x) - log( p(f^-1(z)|y) |det df^-1/dz| ) ]
    forward:  E_{z'~p} [ log p(z'|y) - log( q(f(z')|x) |det df/dz'| ) ]
averaged per frame and channel.  Each loss also exists in an equivalent
alternative formulation that regroups the same terms (own density corrected
by the change of variables, then compared against the other distribution);
the two routes are kept as separate code paths and must agree to 1e-9.

When the two sequences disagree in length the per-frame-pair integrands form
a cost matrix aggregated by soft alignment instead of framewise mean; the
result is normalized by (I+J)/2.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from . import softdtw
from .duration import VARIANCE_FLOOR

LOG_2PI = float(np.log(2.0 * np.pi))


def gaussian_logpdf(z, mu, sigma):
    """Elementwise log N(z; mu, sigma); shapes broadcast."""
    d = (z - mu) / sigma
    return -0.5 * d * d - ad.log(sigma) - 0.5 * LOG_2PI


def _check_sigma(sigma):
    if np.any(sigma.data < VARIANCE_FLOOR * (1.0 - 1e-12)):
        raise ValueError("sigma below the variance floor")


class ShiftNet(nn.Module):
    """Dilation-1 conv stack producing the coupling shift (and scale)."""

    def __init__(self, c_in, c_out, filt, kernel, layers, rng):
        super().__init__()
        convs = []
        for i in range(layers - 1):
            convs.append(nn.Conv1d(c_in if i == 0 else filt, filt, kernel, rng))
        self.convs = nn.ModuleList(convs)
        # zero-initialized end conv: every coupling starts as the identity
        self.out = nn.Conv1d(filt if layers > 1 else c_in, c_out, kernel, rng,
                             zero_init=True)

    def __call__(self, x):
        for conv in self.convs:
            x = ad.relu(conv(x))
        return self.out(x)


class CouplingLayer(nn.Module):
    """y_keep = x_keep; y_move = x_move + shift(x_keep, cond)."""

    def __init__(self, dim, filt, kernel, layers, rng, parity, cond_dim=0,
                 scale=False):
        super().__init__()
        if dim % 2 != 0:
            raise ValueError("coupling needs an even channel count")
        self.scale = scale
        half = dim // 2
        keep = np.arange(0, dim, 2) if parity == 0 else np.arange(1, dim, 2)
        move = np.arange(1, dim, 2) if parity == 0 else np.arange(0, dim, 2)
        self._keep, self._move = keep, move
        inv = np.empty(dim, dtype=np.int64)
        inv[np.concatenate([keep, move])] = np.arange(dim)
        self._inv = inv
        out_mult = 2 if scale else 1
        self.net = ShiftNet(half + cond_dim, out_mult * half, filt, kernel,
                            layers, rng)

    def _shift_scale(self, keep, cond):
        m = keep.shape[0]
        x = keep if cond is None else ad.concat([keep, cond], axis=1)
        y = ad.reshape(ad.transpose(x), 1, x.shape[1], m)
        y = ad.transpose(ad.reshape(self.net(y), -1, m))
        if self.scale:
            half = y.shape[1] // 2
            return (ad.index(y, (slice(None), slice(0, half))),
                    ad.index(y, (slice(None), slice(half, None))))
        return y, None

    def forward(self, x, cond):
        keep = ad.index(x, (slice(None), self._keep))
        move = ad.index(x, (slice(None), self._move))
        shift, log_s = self._shift_scale(keep, cond)
        if log_s is None:
            moved = move + shift
            logdet = ad.Tensor(np.zeros(x.shape[0]))
        else:
            moved = move * ad.exp(log_s) + shift
            logdet = log_s.sum(axis=1)
        merged = ad.concat([keep, moved], axis=1)
        return ad.index(merged, (slice(None), self._inv)), logdet

    def inverse(self, y, cond):
        keep = ad.index(y, (slice(None), self._keep))
        moved = ad.index(y, (slice(None), self._move))
        shift, log_s = self._shift_scale(keep, cond)
        if log_s is None:
            move = moved - shift
            logdet = ad.Tensor(np.zeros(y.shape[0]))
        else:
            move = (moved - shift) * ad.exp(-1.0 * log_s)
            logdet = -1.0 * log_s.sum(axis=1)
        merged = ad.concat([keep, move], axis=1)
        return ad.index(merged, (slice(None), self._inv)), logdet


class FlowStack(nn.Module):
    """Couplings with alternating channel parity; f and f^-1.

    ``forward`` maps prior samples z' toward the posterior side, ``inverse``
    goes back.  Both return (mapped, per-frame logdet); with shift-only
    couplings the logdet is a genuine constant zero.
    """

    def __init__(self, dim, rng, n_layers=4, filt=48, kernel=5, net_layers=4,
                 cond_dim=0, scale=False):
        super().__init__()
        self.cond_dim = cond_dim
        self.layers = nn.ModuleList([
            CouplingLayer(dim, filt, kernel, net_layers, rng, parity=i % 2,
                          cond_dim=cond_dim, scale=scale)
            for i in range(n_layers)])

    def forward(self, z_prime, cond=None):
        x = ad.astensor(z_prime)
        total = ad.Tensor(np.zeros(x.shape[0]))
        for layer in self.layers:
            x, logdet = layer.forward(x, cond)
            total = total + logdet
        return x, total

    def inverse(self, z, cond=None):
        x = ad.astensor(z)
        total = ad.Tensor(np.zeros(x.shape[0]))
        for layer in reversed(list(self.layers)):
            x, logdet = layer.inverse(x, cond)
            total = total + logdet
        return x, total


def align_condition(cond, m):
    """Linearly resample an (mc, h) conditioning sequence to m rows."""
    cond = ad.astensor(cond)
    mc = cond.shape[0]
    if mc == m:
        return cond
    if m == 1:
        pos = np.array([0.5 * (mc - 1)])
    else:
        pos = np.arange(m) * (mc - 1) / (m - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, mc - 1)
    w = pos - lo
    weights = np.zeros((m, mc))
    weights[np.arange(m), lo] += 1.0 - w
    weights[np.arange(m), hi] += w
    return ad.matmul(ad.Tensor(weights), cond)


def _sample(mu, sigma, seed):
    eps = np.random.default_rng(seed).standard_normal(size=mu.shape)
    return mu + sigma * ad.Tensor(eps)


def _cross_logpdf(z, mu, sigma):
    """(I, J): channel-summed log density of frame i's sample under frame j."""
    zi = ad.reshape(z, z.shape[0], 1, z.shape[1])
    mu_j = ad.reshape(mu, 1, mu.shape[0], mu.shape[1])
    sigma_j = ad.reshape(sigma, 1, sigma.shape[0], sigma.shape[1])
    return gaussian_logpdf(zi, mu_j, sigma_j).sum(axis=2)


def _soft_aligned(cost, I, J):
    return softdtw.soft_dtw_cost(cost) * (2.0 / (I + J))


def loss_bwd(flow_stack, post_mu, post_sigma, prior_mu, prior_sigma, seed,
             cond=None):
    """KL from the simplified posterior to the prior, one-sample estimate.

    Groups the integrand as log q(z) - [log p(f^-1(z)) + logdet].
    """
    _check_sigma(post_sigma)
    _check_sigma(prior_sigma)
    h = post_mu.shape[1]
    z = _sample(post_mu, post_sigma, seed)
    z_prime, logdet = flow_stack.inverse(z, cond)
    log_q = gaussian_logpdf(z, post_mu, post_sigma).sum(axis=1)
    I, J = z.shape[0], prior_mu.shape[0]
    if I == J:
        log_p_det = gaussian_logpdf(z_prime, prior_mu,
                                    prior_sigma).sum(axis=1) + logdet
        return ((log_q - log_p_det) * (1.0 / h)).mean()
    cross = _cross_logpdf(z_prime, prior_mu, prior_sigma) \
        + ad.reshape(logdet, -1, 1)
    cost = (ad.reshape(log_q, -1, 1) - cross) * (1.0 / h)
    return _soft_aligned(cost, I, J)


def loss_bwd_alt(flow_stack, post_mu, post_sigma, prior_mu, prior_sigma, seed,
                 cond=None):
    """Alternative grouping: the sample's own density is first corrected by
    the change of variables, then compared against the prior."""
    _check_sigma(post_sigma)
    _check_sigma(prior_sigma)
    h = post_mu.shape[1]
    z = _sample(post_mu, post_sigma, seed)
    z_prime, logdet = flow_stack.inverse(z, cond)
    log_q_mapped = gaussian_logpdf(z, post_mu, post_sigma).sum(axis=1) - logdet
    I, J = z.shape[0], prior_mu.shape[0]
    if I == J:
        log_p = gaussian_logpdf(z_prime, prior_mu, prior_sigma).sum(axis=1)
        return ((log_q_mapped - log_p) * (1.0 / h)).mean()
    cross = _cross_logpdf(z_prime, prior_mu, prior_sigma)
    cost = (ad.reshape(log_q_mapped, -1, 1) - cross) * (1.0 / h)
    return _soft_aligned(cost, I, J)


def loss_fwd(flow_stack, prior_mu, prior_sigma, post_mu, post_sigma, seed,
             cond=None):
    """KL from the flow-enhanced prior to the posterior, one-sample estimate.

    Groups the integrand as log p(z') - [log q(f(z')) + logdet].
    """
    _check_sigma(post_sigma)
    _check_sigma(prior_sigma)
    h = prior_mu.shape[1]
    z_prime = _sample(prior_mu, prior_sigma, seed)
    z, logdet = flow_stack.forward(z_prime, cond)
    log_p = gaussian_logpdf(z_prime, prior_mu, prior_sigma).sum(axis=1)
    I, J = z_prime.shape[0], post_mu.shape[0]
    if I == J:
        log_q_det = gaussian_logpdf(z, post_mu,
                                    post_sigma).sum(axis=1) + logdet
        return ((log_p - log_q_det) * (1.0 / h)).mean()
    cross = _cross_logpdf(z, post_mu, post_sigma) + ad.reshape(logdet, -1, 1)
    cost = (ad.reshape(log_p, -1, 1) - cross) * (1.0 / h)
    return _soft_aligned(cost, I, J)


def loss_fwd_alt(flow_stack, prior_mu, prior_sigma, post_mu, post_sigma, seed,
                 cond=None):
    """Alternative grouping of the forward loss."""
    _check_sigma(post_sigma)
    _check_sigma(prior_sigma)
    h = prior_mu.shape[1]
    z_prime = _sample(prior_mu, prior_sigma, seed)
    z, logdet = flow_stack.forward(z_prime, cond)
    log_p_mapped = gaussian_logpdf(z_prime, prior_mu,
                                   prior_sigma).sum(axis=1) - logdet
    I, J = z_prime.shape[0], post_mu.shape[0]
    if I == J:
        log_q = gaussian_logpdf(z, post_mu, post_sigma).sum(axis=1)
        return ((log_p_mapped - log_q) * (1.0 / h)).mean()
    cross = _cross_logpdf(z, post_mu, post_sigma)
    cost = (ad.reshape(log_p_mapped, -1, 1) - cross) * (1.0 / h)
    return _soft_aligned(cost, I, J)
