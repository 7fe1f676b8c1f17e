"""Signal features: STFT magnitudes, mel filterbanks, WAV I/O.

This is the plain-numpy reference path (no gradients).  The differentiable
mel pipeline used by the waveform losses lives in :mod:`voxlab.vocoder` and
is pinned to this one by tests; both share the constants defined here
(window, framing indices, DFT matrices, filterbank).
"""

from __future__ import annotations

import wave as _wave

import numpy as np

LOG_FLOOR = 1e-5


def hann_window(n):
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_count(length, hop):
    """ceil(length / hop)."""
    return -(-length // hop)


def frame_indices(length, win_size, hop):
    """Index map (frames, win_size) into the raw signal implementing reflect
    padding by win_size//2 on both ends.  Shared by the reference STFT and the
    differentiable one so the two agree sample-for-sample."""
    pad = win_size // 2
    pos = np.arange(-pad, length + pad)
    # reflect without repeating the edge sample (numpy 'reflect')
    pos = np.abs(pos)
    pos = np.where(pos >= length, 2 * length - 2 - pos, pos)
    if np.any(pos < 0) or np.any(pos >= length):
        raise ValueError(f"signal of length {length} too short to reflect-pad by {pad}")
    n_frames = frame_count(length, hop)
    starts = np.arange(n_frames) * hop
    idx = starts[:, None] + np.arange(win_size)[None, :]
    return pos[idx]


def stft_magnitude(wave_data, fft_size, win_size, hop, window="hann"):
    """Magnitude spectrogram (frames, fft_size//2+1).

    Reflect-pads by win_size//2 on both ends; frame count is exactly
    ceil(len/hop).  ``window`` may be "hann" (default) or "rect".
    """
    wave_data = np.asarray(wave_data, dtype=np.float64)
    if wave_data.ndim != 1:
        raise ValueError("stft_magnitude expects a mono 1-D signal")
    if win_size > fft_size:
        raise ValueError("win_size must not exceed fft_size")
    if window == "hann":
        w = hann_window(win_size)
    elif window == "rect":
        w = np.ones(win_size)
    else:
        raise ValueError(f"unknown window {window!r}")
    frames = wave_data[frame_indices(len(wave_data), win_size, hop)] * w
    return np.abs(np.fft.rfft(frames, n=fft_size, axis=-1))


def mel_points_hz(sr, n_mels, fmin=0.0, fmax=None):
    """n_mels + 2 triangle corner frequencies, equally spaced on the HTK mel
    scale between fmin and fmax (default Nyquist)."""
    if fmax is None:
        fmax = sr / 2.0
    mel = lambda f: 2595.0 * np.log10(1.0 + f / 700.0)
    imel = lambda m: 700.0 * (10.0 ** (m / 2595.0) - 1.0)
    return imel(np.linspace(mel(fmin), mel(fmax), n_mels + 2))


def mel_filterbank(sr, fft_size, n_mels, fmin=0.0, fmax=None):
    """(n_mels, fft_size//2+1) triangular filterbank, each row summing to 1."""
    bins = fft_size // 2 + 1
    freqs = np.arange(bins) * sr / fft_size
    pts = mel_points_hz(sr, n_mels, fmin, fmax)
    fb = np.zeros((n_mels, bins))
    for m in range(n_mels):
        left, center, right = pts[m], pts[m + 1], pts[m + 2]
        up = (freqs - left) / (center - left)
        down = (right - freqs) / (right - center)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
        s = fb[m].sum()
        if s <= 0.0:
            raise ValueError(f"mel filter {m} covers no FFT bin "
                             f"(n_mels={n_mels} too large for fft_size={fft_size})")
        fb[m] /= s
    return fb


def mel_spectrogram(wave_data, sr, fft_size, win_size, hop, n_mels,
                    floor=LOG_FLOOR, filterbank=None):
    """Log-compressed mel spectrogram (frames, n_mels) with floor clamp."""
    if filterbank is None:
        filterbank = mel_filterbank(sr, fft_size, n_mels)
    spec = stft_magnitude(wave_data, fft_size, win_size, hop)
    return np.log(np.maximum(spec @ filterbank.T, floor))


def dft_matrices(fft_size, win_size):
    """Real/imag DFT analysis matrices (win_size, bins) for the graph-side
    STFT: magnitudes arise as a matmul against these fixed constants."""
    bins = fft_size // 2 + 1
    n = np.arange(win_size)[:, None]
    k = np.arange(bins)[None, :]
    ang = 2.0 * np.pi * n * k / fft_size
    return np.cos(ang), -np.sin(ang)


def save_wav(path, wave_data, sr):
    """Write mono PCM16."""
    pcm = np.round(np.clip(wave_data, -1.0, 1.0) * 32767.0).astype("<i2")
    with _wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sr)
        fh.writeframes(pcm.tobytes())


def load_wav(path):
    """Read mono PCM16; returns (float64 signal in [-1, 1], sample_rate)."""
    with _wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise ValueError(f"{path}: expected mono 16-bit PCM")
        sr = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0, sr


def dominant_frequency(segment, sr, pad_factor=8):
    """Peak frequency of a short segment via zero-padded Hann-windowed FFT."""
    segment = np.asarray(segment, dtype=np.float64)
    n = len(segment)
    if n < 4:
        raise ValueError("segment too short for a frequency estimate")
    w = hann_window(n)
    nfft = 1
    while nfft < n * pad_factor:
        nfft *= 2
    mags = np.abs(np.fft.rfft(segment * w, n=nfft))
    return np.argmax(mags) * sr / nfft
