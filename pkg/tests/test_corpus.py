import json
import os

import numpy as np
import pytest

from voxlab import corpus, dsp


def small_spec(**kw):
    base = dict(vocab_size=10, n_utterances=6, seed=5)
    base.update(kw)
    return corpus.SynthSpec(**base)


def test_spec_validation():
    with pytest.raises(ValueError):
        corpus.SynthSpec(vocab_size=60)  # top carrier past Nyquist at 8 kHz
    with pytest.raises(ValueError):
        corpus.SynthSpec(min_duration=0)
    with pytest.raises(ValueError):
        corpus.SynthSpec(min_len=9, max_len=4)


def test_utterance_shape_identity():
    spec = small_spec()
    rng = np.random.default_rng(1)
    for _ in range(20):
        utt = corpus.synth_utterance(spec, rng)
        assert len(utt.wave) == sum(utt.durations) * spec.hop
        assert len(utt.ids) == len(utt.durations)
        assert spec.min_len <= len(utt.ids) <= spec.max_len
        assert all(spec.min_duration <= d <= spec.max_duration
                   for d in utt.durations)
        assert all(0 <= p < spec.vocab_size for p in utt.ids)
        assert all(a != b for a, b in zip(utt.ids, utt.ids[1:]))
        assert np.max(np.abs(utt.wave)) <= spec.amplitude + 1e-12


def test_segment_dominant_frequency_matches_carrier():
    spec = small_spec()
    rng = np.random.default_rng(2)
    carriers = np.array([spec.carrier_hz(k) for k in range(spec.vocab_size)])
    for _ in range(10):
        utt = corpus.synth_utterance(spec, rng)
        pos = 0
        for p, d in zip(utt.ids, utt.durations):
            seg = utt.wave[pos:pos + d * spec.hop]
            pos += d * spec.hop
            dom = dsp.dominant_frequency(seg, spec.sample_rate)
            assert abs(dom - spec.carrier_hz(p)) < 30.0
            assert int(np.argmin(np.abs(carriers - dom))) == p


def test_generate_deterministic_checksums(tmp_path):
    spec = small_spec()
    m1 = corpus.generate_corpus(spec, tmp_path / "a")
    m2 = corpus.generate_corpus(spec, tmp_path / "b")
    assert m1["files"] == m2["files"]
    m3 = corpus.generate_corpus(small_spec(seed=6), tmp_path / "c")
    assert m1["files"] != m3["files"]


def test_corpus_round_trip(tmp_path):
    spec = small_spec()
    corpus.generate_corpus(spec, tmp_path / "d")
    spec2, utts = corpus.load_synth_corpus(tmp_path / "d")
    assert spec2 == spec
    assert len(utts) == spec.n_utterances
    rng_check = np.random.default_rng(
        np.random.SeedSequence(spec.seed).spawn(spec.n_utterances)[0])
    first = corpus.synth_utterance(spec, rng_check)
    assert utts[0].ids == first.ids
    assert utts[0].durations == first.durations
    # PCM16 round trip quantizes but only just
    assert np.max(np.abs(utts[0].wave - first.wave)) < 2.0 / 32767.0


def test_checksum_verification_catches_tampering(tmp_path):
    spec = small_spec(n_utterances=2)
    corpus.generate_corpus(spec, tmp_path / "e")
    victim = tmp_path / "e" / "utt_0001.durations"
    victim.write_text("2 2 2 2\n")
    with pytest.raises(ValueError):
        corpus.load_synth_corpus(tmp_path / "e")
    spec2, _ = corpus.load_synth_corpus(tmp_path / "e", verify=False)
    assert spec2 == spec


def test_manifest_is_stable_json(tmp_path):
    spec = small_spec(n_utterances=2)
    corpus.generate_corpus(spec, tmp_path / "f")
    raw = (tmp_path / "f" / "manifest.json").read_text()
    data = json.loads(raw)
    assert set(data) == {"spec", "files"}
    assert len(data["files"]) == 3 * 2 + 0
    assert os.path.exists(tmp_path / "f" / "utt_0001.wav")
