"""Synthetic corpora: phoneme-id sentences for pre-training, and a paired
text/waveform corpus for the TTS system itself.

The pre-training corpus is a first-order Markov chain over phoneme ids whose
per-state successor distributions are Zipf-shaped, so frequent adjacent pairs
exist for the pair-merge vocabulary to find.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import dsp


def save_corpus(path, sequences):
    """One space-separated id sequence per line."""
    with open(path, "w") as fh:
        for seq in sequences:
            fh.write(" ".join(str(int(t)) for t in seq) + "\n")


def load_corpus(path):
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append([int(t) for t in line.split()])
    return out


def pretrain_corpus(n_sentences, seed, vocab_size=40, min_len=6, max_len=14,
                    exponent=2.0):
    """Markov sentences with Zipf-shaped successor distributions.

    ``exponent`` sharpens the per-state distribution; at 2.0 the favourite
    successor carries ~60% of the mass, which gives context-based masked
    prediction something to find.
    """
    if n_sentences < 1 or vocab_size < 2:
        raise ValueError("need at least one sentence over two phonemes")
    rng = np.random.default_rng(seed)
    zipf = 1.0 / np.arange(1.0, vocab_size + 1.0) ** exponent
    zipf /= zipf.sum()
    # a fixed random successor ordering per state makes the chain non-trivial
    transition = np.stack([zipf[np.argsort(rng.permutation(vocab_size))]
                           for _ in range(vocab_size)])
    start = zipf[np.argsort(rng.permutation(vocab_size))]
    sentences = []
    for _ in range(n_sentences):
        length = int(rng.integers(min_len, max_len + 1))
        tok = int(rng.choice(vocab_size, p=start))
        seq = [tok]
        for _ in range(length - 1):
            tok = int(rng.choice(vocab_size, p=transition[tok]))
            seq.append(tok)
        sentences.append(seq)
    return sentences


# --------------------------------------------------------------------------
# paired text/waveform corpus
#
# Every phoneme id owns one carrier frequency; an utterance is a sequence of
# enveloped sinusoid segments, one per phoneme, each an integer number of
# hops long.  Ground truth durations are therefore exact, which is what lets
# alignment and duration accuracy be scored without human labels.

@dataclass(frozen=True)
class SynthSpec:
    vocab_size: int = 40
    sample_rate: int = 8000
    hop: int = 64
    n_utterances: int = 300
    seed: int = 0
    min_duration: int = 2
    max_duration: int = 12
    min_len: int = 4
    max_len: int = 10
    amplitude: float = 0.55
    base_hz: float = 300.0
    step_hz: float = 85.0
    fade: float = 0.10

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("need at least two phonemes")
        if not (0 < self.min_duration <= self.max_duration):
            raise ValueError("bad duration range")
        if not (0 < self.min_len <= self.max_len):
            raise ValueError("bad sentence length range")
        top = self.carrier_hz(self.vocab_size - 1)
        if top >= self.sample_rate / 2.0:
            raise ValueError(f"top carrier {top} Hz is not below Nyquist")

    def carrier_hz(self, phoneme_id):
        return self.base_hz + self.step_hz * phoneme_id


@dataclass
class Utterance:
    ids: list
    durations: list
    wave: np.ndarray = field(repr=False)


def _segment(spec, phoneme_id, frames):
    n = frames * spec.hop
    t = np.arange(n) / spec.sample_rate
    tone = spec.amplitude * np.sin(2.0 * np.pi * spec.carrier_hz(phoneme_id) * t)
    fade_n = max(1, int(round(spec.fade * n)))
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade_n) / fade_n)
    env = np.ones(n)
    env[:fade_n] = ramp
    env[-fade_n:] = ramp[::-1]
    return tone * env


def synth_utterance(spec, rng):
    length = int(rng.integers(spec.min_len, spec.max_len + 1))
    ids = [int(rng.integers(spec.vocab_size))]
    for _ in range(length - 1):
        # uniform over everything except the previous id
        r = int(rng.integers(spec.vocab_size - 1))
        ids.append(r + (r >= ids[-1]))
    durations = [int(d) for d in rng.integers(spec.min_duration,
                                              spec.max_duration + 1,
                                              size=length)]
    wave = np.concatenate([_segment(spec, p, d)
                           for p, d in zip(ids, durations)])
    return Utterance(ids=ids, durations=durations, wave=wave)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


def generate_corpus(spec, out_dir):
    """Write WAVs, phoneme-id files, duration files, and a checksum manifest.

    Per-utterance seeds are spawned from the corpus seed, so any utterance
    can be regenerated independently of the others.
    """
    os.makedirs(out_dir, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise ValueError(f"{out_dir} is not writable")
    children = np.random.SeedSequence(spec.seed).spawn(spec.n_utterances)
    files = {}
    for i, child in enumerate(children):
        utt = synth_utterance(spec, np.random.default_rng(child))
        stem = f"utt_{i:04d}"
        wav = os.path.join(out_dir, stem + ".wav")
        dsp.save_wav(wav, utt.wave, spec.sample_rate)
        pho = os.path.join(out_dir, stem + ".phonemes")
        with open(pho, "w") as fh:
            fh.write(" ".join(str(p) for p in utt.ids) + "\n")
        dur = os.path.join(out_dir, stem + ".durations")
        with open(dur, "w") as fh:
            fh.write(" ".join(str(d) for d in utt.durations) + "\n")
        for path in (wav, pho, dur):
            files[os.path.basename(path)] = _sha256(path)
    manifest = {"spec": asdict(spec), "files": files}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def load_synth_corpus(out_dir, verify=True):
    """Read a generated corpus back; returns (SynthSpec, [Utterance])."""
    with open(os.path.join(out_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    spec = SynthSpec(**manifest["spec"])
    if verify:
        for name, want in manifest["files"].items():
            got = _sha256(os.path.join(out_dir, name))
            if got != want:
                raise ValueError(f"checksum mismatch for {name}")
    utterances = []
    for i in range(spec.n_utterances):
        stem = os.path.join(out_dir, f"utt_{i:04d}")
        wave, sr = dsp.load_wav(stem + ".wav")
        if sr != spec.sample_rate:
            raise ValueError(f"{stem}.wav has sample rate {sr}")
        with open(stem + ".phonemes") as fh:
            ids = [int(t) for t in fh.read().split()]
        with open(stem + ".durations") as fh:
            durations = [int(t) for t in fh.read().split()]
        utterances.append(Utterance(ids=ids, durations=durations, wave=wave))
    return spec, utterances
