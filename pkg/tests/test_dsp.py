"""Feature-extraction tests with independently coded oracles."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxlab import dsp

SR, FFT, WIN, HOP = 8000, 256, 256, 64


def _oracle_frames(x, win, hop):
    """Independent framing: explicit reflect pad + python slicing."""
    pad = win // 2
    xp = np.pad(x, pad, mode="reflect")
    n_frames = -(-len(x) // hop)
    return np.stack([xp[i * hop:i * hop + win] for i in range(n_frames)])


class TestStft:
    def test_zero_signal_zero_spec(self):
        spec = dsp.stft_magnitude(np.zeros(512), FFT, WIN, HOP)
        assert spec.shape == (8, 129)
        assert np.all(spec == 0.0)

    def test_frame_count_is_ceil(self):
        for n in (512, 513, 575, 576, 577, 1000):
            spec = dsp.stft_magnitude(np.zeros(max(n, 257)), FFT, WIN, HOP)
            assert spec.shape[0] == -(-max(n, 257) // HOP)

    def test_bin_center_sinusoid_rect_window(self):
        # bin-k sinusoid with a rectangular window puts all energy at bin k
        k = 10
        t = np.arange(WIN * 4)
        x = np.sin(2 * np.pi * k * t / FFT)
        spec = dsp.stft_magnitude(x, FFT, WIN, HOP, window="rect")
        interior = spec[2:-2]  # frames unaffected by edge reflection
        peak = np.argmax(interior, axis=1)
        assert np.all(peak == k)
        others = interior.copy()
        others[:, k] = 0.0
        assert np.all(others.max(axis=1) < 1e-8 * interior[:, k])

    def test_framing_matches_oracle(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=777)
        got = x[dsp.frame_indices(len(x), WIN, HOP)]
        want = _oracle_frames(x, WIN, HOP)
        assert np.array_equal(got, want)

    def test_parseval_per_frame(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=1024)
        spec = dsp.stft_magnitude(x, FFT, WIN, HOP)
        frames = _oracle_frames(x, WIN, HOP) * dsp.hann_window(WIN)
        # sum over full FFT bins of |X|^2 == N * sum(x^2), via rfft symmetry
        power = spec[:, 0] ** 2 + spec[:, -1] ** 2 + 2 * (spec[:, 1:-1] ** 2).sum(axis=1)
        want = FFT * (frames ** 2).sum(axis=1)
        assert np.allclose(power, want, rtol=1e-6)

    def test_rejects_stereo_and_bad_window(self):
        with pytest.raises(ValueError, match="mono"):
            dsp.stft_magnitude(np.zeros((2, 400)), FFT, WIN, HOP)
        with pytest.raises(ValueError, match="window"):
            dsp.stft_magnitude(np.zeros(400), FFT, WIN, HOP, window="hamming")


class TestMel:
    def test_row_sums_one(self):
        fb = dsp.mel_filterbank(SR, FFT, 40)
        assert fb.shape == (40, 129)
        assert np.allclose(fb.sum(axis=1), 1.0, atol=1e-9)

    def test_zero_signal_hits_floor(self):
        m = dsp.mel_spectrogram(np.zeros(512), SR, FFT, WIN, HOP, 40)
        assert np.allclose(m, np.log(dsp.LOG_FLOOR))

    def test_impulse_spreads_over_filters(self):
        x = np.zeros(512)
        x[256] = 1.0
        m = dsp.mel_spectrogram(x, SR, FFT, WIN, HOP, 40)
        assert (m > np.log(dsp.LOG_FLOOR)).any(axis=1).all() or \
               (m[4] > np.log(dsp.LOG_FLOOR)).all()

    def test_filter_centers_increase(self):
        pts = dsp.mel_points_hz(SR, 40)
        assert np.all(np.diff(pts) > 0)
        assert pts[0] == 0.0 and abs(pts[-1] - SR / 2) < 1e-9

    def test_too_many_filters_rejected(self):
        with pytest.raises(ValueError, match="covers no FFT bin"):
            dsp.mel_filterbank(SR, 64, 60)

    @settings(max_examples=15, deadline=None)
    @given(st.floats(0.5, 2.0), st.integers(0, 5))
    def test_scale_monotonicity(self, gain, seed):
        # scaling a signal up never lowers any log-mel entry
        rng = np.random.default_rng(seed)
        x = rng.normal(size=512) * 0.1
        a = dsp.mel_spectrogram(x, SR, FFT, WIN, HOP, 40)
        b = dsp.mel_spectrogram(x * (1.0 + gain), SR, FFT, WIN, HOP, 40)
        assert np.all(b >= a - 1e-12)


class TestWav:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(2)
        x = np.clip(rng.normal(0, 0.2, size=2000), -1, 1)
        p = tmp_path / "a.wav"
        dsp.save_wav(p, x, SR)
        y, sr = dsp.load_wav(p)
        assert sr == SR and len(y) == len(x)
        assert np.max(np.abs(y - x)) < 1.0 / 32767

    def test_rejects_stereo_file(self, tmp_path):
        import wave as wv
        p = tmp_path / "s.wav"
        with wv.open(str(p), "wb") as fh:
            fh.setnchannels(2)
            fh.setsampwidth(2)
            fh.setframerate(SR)
            fh.writeframes(b"\x00\x00" * 64)
        with pytest.raises(ValueError, match="mono"):
            dsp.load_wav(p)


class TestDominantFrequency:
    @pytest.mark.parametrize("freq", [300.0, 1010.0, 2500.0, 3600.0])
    def test_pure_tone(self, freq):
        t = np.arange(512) / SR
        x = 0.5 * np.sin(2 * np.pi * freq * t)
        got = dsp.dominant_frequency(x, SR)
        assert abs(got - freq) < 16.0

    def test_short_tone(self):
        t = np.arange(128) / SR
        x = np.sin(2 * np.pi * 1500.0 * t)
        assert abs(dsp.dominant_frequency(x, SR) - 1500.0) < 40.0


class TestGraphStftAgreement:
    def test_dft_matmul_matches_rfft(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=700)
        frames = x[dsp.frame_indices(len(x), WIN, HOP)] * dsp.hann_window(WIN)
        cos_m, sin_m = dsp.dft_matrices(FFT, WIN)
        re = frames @ cos_m
        im = frames @ sin_m
        mags = np.sqrt(re ** 2 + im ** 2)
        want = dsp.stft_magnitude(x, FFT, WIN, HOP)
        assert np.allclose(mags, want, atol=1e-9)
