"""Waveform decoder and the adversarial training apparatus.

The decoder is a transposed-conv upsampling stack: each block doubles as an
upsampler (kernel 2r, stride r, pad r/2, so the length multiplies exactly by
r) followed by residual convs with growing dilation, tanh at the end.  The
product of the upsampling ratios must equal the spectrogram hop so one prior
frame becomes exactly one hop of audio.

Discriminators are multi-period: the signal is folded into p phase columns
(column c holds samples c, c+p, c+2p, ...) which share one conv stack, so
period 1 degenerates to a plain 1-D discriminator.  Losses follow LS-GAN,
plus feature matching (per-layer L1, normalized by element count) and an L1
log-mel loss computed through the differentiable STFT so it can train the
generator.

Loss weights used by the trainer (GAN 1.0, feature matching 2.0, mel 45.0)
are conventional vocoder defaults, not derived quantities; they live in the
config and can be overridden.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import dsp
from . import nn


class ResUnit(nn.Module):
    """Residual conv pair set: x + conv(leaky_relu(x)) per (kernel, dilation)."""

    def __init__(self, channels, kernels, dilations, rng):
        super().__init__()
        self.convs = nn.ModuleList([
            nn.Conv1d(channels, channels, k, rng, dilation=d)
            for k, d in zip(kernels, dilations)])

    def __call__(self, x):
        for conv in self.convs:
            x = x + conv(ad.leaky_relu(x))
        return x


class Decoder(nn.Module):
    """z frames (m, h) -> waveform (m * hop,), bounded by tanh."""

    def __init__(self, dim, hop, rng, ratios=(8, 8, 2, 2),
                 channels=(256, 128, 64, 32), kernels=(3, 7, 11),
                 dilations=(1, 3, 5)):
        super().__init__()
        if len(ratios) != len(channels):
            raise ValueError("need one channel width per upsampling block")
        if int(np.prod(ratios)) != hop:
            raise ValueError("upsampling ratios must multiply to the hop")
        for r in ratios:
            if r % 2 != 0:
                raise ValueError("upsampling ratios must be even")
        self.hop = hop
        self.pre = nn.Conv1d(dim, channels[0], 7, rng)
        ups = []
        blocks = []
        prev = channels[0]
        for r, ch in zip(ratios, channels):
            ups.append(nn.ConvTranspose1d(prev, ch, 2 * r, rng, stride=r,
                                          pad=r // 2))
            blocks.append(ResUnit(ch, kernels, dilations, rng))
            prev = ch
        self.ups = nn.ModuleList(ups)
        self.blocks = nn.ModuleList(blocks)
        self.post = nn.Conv1d(channels[-1], 1, 7, rng)

    def __call__(self, z):
        z = ad.astensor(z)
        m = z.shape[0]
        x = ad.reshape(ad.transpose(z), 1, z.shape[1], m)
        x = self.pre(x)
        for up, block in zip(self.ups, self.blocks):
            x = block(up(ad.leaky_relu(x)))
        x = ad.tanh(self.post(ad.leaky_relu(x)))
        return ad.reshape(x, m * self.hop)


def decode(decoder, z_mem):
    return decoder(z_mem)


class PeriodDiscriminator(nn.Module):
    """Strided conv stack over one phase folding of the waveform."""

    def __init__(self, period, rng, channels=(8, 16, 32), kernel=5, stride=3):
        super().__init__()
        if period < 1:
            raise ValueError("period must be positive")
        self.period = period
        convs = []
        prev = 1
        for ch in channels:
            convs.append(nn.Conv1d(prev, ch, kernel, rng, stride=stride,
                                   pad=kernel // 2))
            prev = ch
        self.convs = nn.ModuleList(convs)
        self.post = nn.Conv1d(prev, 1, 3, rng)

    def _fold(self, wave):
        t = wave.shape[0]
        p = self.period
        rem = (-t) % p
        if rem:
            wave = ad.pad_constant(wave, ((0, rem),))
        cols = (t + rem) // p
        return ad.reshape(ad.transpose(ad.reshape(wave, cols, p)), p, 1, cols)

    def __call__(self, wave):
        x = self._fold(ad.astensor(wave))
        feats = []
        for conv in self.convs:
            x = ad.leaky_relu(conv(x))
            feats.append(x)
        score_map = self.post(x)
        feats.append(score_map)
        return feats, ad.reshape(score_map, -1)


class MultiPeriodDiscriminator(nn.Module):
    def __init__(self, rng, periods=(1, 2, 3, 5, 7, 11), channels=(8, 16, 32),
                 kernel=5, stride=3):
        super().__init__()
        self.discs = nn.ModuleList([
            PeriodDiscriminator(p, rng, channels, kernel, stride)
            for p in periods])

    def __call__(self, wave):
        return [disc(wave) for disc in self.discs]


def generator_adversarial_loss(fake_scores):
    """Sum over discriminators of E[(D(G(z)) - 1)^2]."""
    total = None
    for s in fake_scores:
        term = ((s - 1.0) * (s - 1.0)).mean()
        total = term if total is None else total + term
    return total


def discriminator_adversarial_loss(real_scores, fake_scores):
    """Sum over discriminators of E[(D(x) - 1)^2] + E[D(G(z))^2]."""
    if len(real_scores) != len(fake_scores):
        raise ValueError("discriminator count mismatch")
    total = None
    for r, f in zip(real_scores, fake_scores):
        term = ((r - 1.0) * (r - 1.0)).mean() + (f * f).mean()
        total = term if total is None else total + term
    return total


def lsgan_losses(real_scores, fake_scores):
    """(generator loss, discriminator loss) from score lists."""
    return (generator_adversarial_loss(fake_scores),
            discriminator_adversarial_loss(real_scores, fake_scores))


def feature_matching_loss(real_features, fake_features):
    """Sum over discriminators and layers of mean |D_l(x) - D_l(G(z))|."""
    if len(real_features) != len(fake_features):
        raise ValueError("discriminator count mismatch")
    total = None
    for real_list, fake_list in zip(real_features, fake_features):
        if len(real_list) != len(fake_list):
            raise ValueError("layer count mismatch")
        for r, f in zip(real_list, fake_list):
            if r.shape != f.shape:
                raise ValueError("feature shape mismatch")
            term = ad.abs_(r - f).mean()
            total = term if total is None else total + term
    return total


def mel_spectrogram_graph(wave, sr, fft_size, win_size, hop, n_mels,
                          floor=dsp.LOG_FLOOR, filterbank=None):
    """Differentiable log-mel, matching dsp.mel_spectrogram sample-for-sample
    (up to a 1e-12 magnitude epsilon that keeps sqrt finite at silence)."""
    wave = ad.astensor(wave)
    t = wave.shape[0]
    if t == 0:
        raise ValueError("empty waveform")
    if filterbank is None:
        filterbank = dsp.mel_filterbank(sr, fft_size, n_mels)
    idx = dsp.frame_indices(t, win_size, hop)
    frames = ad.take1d(wave, idx) * ad.Tensor(dsp.hann_window(win_size))
    cos_m, sin_m = dsp.dft_matrices(fft_size, win_size)
    re = ad.matmul(frames, ad.Tensor(cos_m))
    im = ad.matmul(frames, ad.Tensor(sin_m))
    mag = ad.sqrt(re * re + im * im + 1e-12)
    mel = ad.matmul(mag, ad.Tensor(filterbank.T))
    return ad.log(ad.relu(mel - floor) + floor)


def mel_loss(x, x_hat, sr, fft_size, win_size, hop, n_mels, filterbank=None):
    """L1 between log-mel spectrograms; inputs truncate to the shorter."""
    x = ad.astensor(x)
    x_hat = ad.astensor(x_hat)
    n = min(x.shape[0], x_hat.shape[0])
    if n == 0:
        raise ValueError("empty waveform")
    if x.shape[0] != n:
        x = ad.index(x, slice(0, n))
    if x_hat.shape[0] != n:
        x_hat = ad.index(x_hat, slice(0, n))
    a = mel_spectrogram_graph(x, sr, fft_size, win_size, hop, n_mels,
                              filterbank=filterbank)
    b = mel_spectrogram_graph(x_hat, sr, fft_size, win_size, hop, n_mels,
                              filterbank=filterbank)
    return ad.abs_(a - b).mean()
