"""Staged training of the complete text-to-waveform model.

Three stages run back to back.  Warmup trains the posterior, the decoder and
the backward KL against alignment-search duration labels that are refreshed
at the end of every warmup epoch; the memory bank sits out.  The main stage
switches the upsampler over to predicted durations, adds the forward KL and
the end-to-end GAN loss, initializes the memory bank by k-means over
posterior means and reads the decoder input through it.  Tuning keeps only
the end-to-end loss and updates just the durator; the adversary keeps
training so that loss stays live.

The waveform losses run on short random segments of each utterance, the KL
losses on the whole sequence.  Every random draw is derived from the config
seed, the epoch and the utterance index, so a rerun with the same seed
reproduces the metric log bit for bit.
"""

from __future__ import annotations

import os
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import align
from . import autodiff as ad
from . import checkpoint
from . import config as config_mod
from . import dsp
from . import duration
from . import flow
from . import nn
from . import optim
from . import phonemes
from . import posterior
from . import vocoder

STAGES = ("warmup", "main", "tuning")

METRIC_COLUMNS = ("epoch", "stage", "lr", "bwd", "fwd", "rec", "e2e", "dur",
                  "total", "disc", "mas_acc", "heldout_mel")

# generator-side parameter groups; the adversary is bookkept separately
GEN_GROUPS = ("phi", "pho", "dur", "bpp", "dec")

CHECKPOINT_FILE = "model.ckpt"
VOCAB_FILE = "sup_vocab.txt"
CONFIG_FILE = "config.txt"
METRICS_FILE = "metrics.csv"


class TrainingDiverged(RuntimeError):
    """A loss component stopped being finite; the message names it."""


class AuditError(ValueError):
    """The observed gradient topology differs from the declared one."""


def stage_of_epoch(cfg, epoch):
    """Stage name for a 0-based epoch index."""
    if not 0 <= epoch < cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside schedule of {cfg.total_epochs}")
    if epoch < cfg.warmup_epochs:
        return "warmup"
    if epoch < cfg.warmup_epochs + cfg.main_epochs:
        return "main"
    return "tuning"


def _seed(cfg, *parts):
    entropy = [int(cfg.seed) & 0xFFFFFFFF] + [int(p) for p in parts]
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


class TtsModel(nn.Module):
    """Every trainable piece of the system under one namespace."""

    def __init__(self, cfg, sup_vocab, rng):
        super().__init__()
        self.encoder = phonemes.PhonemeEncoder(
            sup_vocab.base_size, sup_vocab.total_size, cfg.hidden,
            cfg.enc_heads, cfg.enc_blocks, cfg.enc_kernel, cfg.enc_filter,
            cfg.max_phonemes, rng)
        self.durator = duration.Durator(
            cfg.hidden, cfg.dur_filter, cfg.dur_kernel, rng,
            p=cfg.up_p, q=cfg.up_q, dropout=cfg.dur_dropout,
            conv_dim=cfg.up_filter, conv_kernel=cfg.up_kernel,
            mlp_hidden=cfg.up_mlp_hidden)
        self.flow = flow.FlowStack(
            cfg.hidden, rng, n_layers=cfg.flow_layers, filt=cfg.flow_filter,
            kernel=cfg.flow_kernel, net_layers=cfg.flow_net_layers)
        self.post_enc = posterior.PosteriorEncoder(
            cfg.n_bins, cfg.hidden, rng, layers=cfg.post_layers,
            filt=cfg.post_filter, kernel=cfg.post_kernel,
            dilation=cfg.post_dilation)
        self.decoder = vocoder.Decoder(
            cfg.hidden, cfg.hop, rng, ratios=cfg.dec_ratios,
            channels=cfg.dec_channels, kernels=cfg.dec_kernels,
            dilations=cfg.dec_dilations)
        # built up front so the optimizer owns its parameters from epoch one;
        # it stays out of every loss path until activated after warmup
        self.memory = posterior.MemoryBank(cfg.memory_size, cfg.hidden, rng,
                                           heads=cfg.memory_heads)
        self.disc = vocoder.MultiPeriodDiscriminator(
            rng, periods=cfg.disc_periods, channels=cfg.disc_channels,
            kernel=cfg.disc_kernel, stride=cfg.disc_stride)

    def groups(self):
        """Parameter lists by role; the memory bank counts as decoder side."""
        return {
            "phi": list(self.post_enc.parameters()),
            "pho": list(self.encoder.parameters()),
            "dur": list(self.durator.parameters()),
            "bpp": list(self.flow.parameters()),
            "dec": list(self.decoder.parameters()) + list(self.memory.parameters()),
            "disc": list(self.disc.parameters()),
        }


@dataclass
class Item:
    """One utterance with everything precomputed that training reuses."""

    ids: np.ndarray        # (n,) phoneme ids
    sups: np.ndarray       # (n,) per-position sup-phoneme ids
    wave: np.ndarray       # (T,) float samples
    spec: np.ndarray       # (m, bins) magnitude spectrogram frames
    af: np.ndarray         # (m, n_mels) hop-window mel frames for alignment
    d_gt: np.ndarray       # (n,) ground-truth frame counts, or None
    mas: np.ndarray        # (n,) current alignment duration labels

    @property
    def frames(self):
        return self.spec.shape[0]


@dataclass
class ModelState:
    """Model plus the bookkeeping the stages need around it.

    Inference reads only the encoder, durator, flow, decoder and memory
    bank; the posterior encoder and the discriminators exist for training.
    """

    cfg: object
    model: TtsModel
    sup_vocab: object
    epoch: int = 0
    memory_active: bool = False
    mas_accuracy: float = float("nan")
    opt_gen: object = None
    opt_disc: object = None
    items: list = None
    train_ids: list = None
    heldout_ids: list = None
    filterbank: np.ndarray = None
    metrics: list = field(default_factory=list)


def uniform_durations(m, n):
    """Split m frames over n phonemes as evenly as integers allow."""
    if n < 1 or m < n:
        raise ValueError(f"cannot spread {m} frames over {n} phonemes")
    d = np.full(n, m // n, dtype=np.int64)
    d[: m % n] += 1
    return d


def prepare_item(cfg, utt, sup_vocab):
    ids = np.asarray(utt.ids, dtype=np.int64)
    spec = dsp.stft_magnitude(utt.wave, cfg.fft_size, cfg.win_size, cfg.hop)
    # Alignment features use a window of one hop.  The training window spans
    # several hops, so its frames near a phoneme change mix both neighbours
    # and every boundary drifts a frame or two when labels are re-estimated;
    # hop-sized frames keep each one inside a single phoneme.
    af = dsp.mel_spectrogram(utt.wave, cfg.sample_rate, cfg.fft_size,
                             cfg.hop, cfg.hop, cfg.n_mels)
    d_gt = None if utt.durations is None else np.asarray(utt.durations,
                                                        dtype=np.int64)
    sups = np.asarray(phonemes.per_position_sups(ids, sup_vocab),
                      dtype=np.int64)
    return Item(ids=ids, sups=sups,
                wave=np.asarray(utt.wave, dtype=np.float64), spec=spec,
                af=af, d_gt=d_gt,
                mas=uniform_durations(spec.shape[0], len(ids)))


def init_state(cfg, utterances):
    """Build the model, features, split and optimizers for a fresh run."""
    if len(utterances) <= cfg.heldout:
        raise ValueError("corpus smaller than the held-out slice")
    perm = np.random.default_rng(_seed(cfg, 0)).permutation(len(utterances))
    heldout_ids = sorted(int(i) for i in perm[: cfg.heldout])
    train_ids = sorted(int(i) for i in perm[cfg.heldout:])
    sup_vocab = phonemes.learn_sup_phonemes(
        [utterances[i].ids for i in train_ids], cfg.sup_vocab)
    model = TtsModel(cfg, sup_vocab,
                     np.random.default_rng(_seed(cfg, 1)))
    items = [prepare_item(cfg, u, sup_vocab) for u in utterances]
    groups = model.groups()
    gen_params = [p for g in GEN_GROUPS for p in groups[g]]
    state = ModelState(
        cfg=cfg, model=model, sup_vocab=sup_vocab,
        opt_gen=optim.AdamW(gen_params, lr=cfg.learning_rate,
                            betas=(cfg.adam_beta1, cfg.adam_beta2),
                            weight_decay=cfg.weight_decay),
        opt_disc=optim.AdamW(groups["disc"], lr=cfg.learning_rate,
                             betas=(cfg.adam_beta1, cfg.adam_beta2),
                             weight_decay=cfg.weight_decay),
        items=items, train_ids=train_ids, heldout_ids=heldout_ids,
        filterbank=dsp.mel_filterbank(cfg.sample_rate, cfg.fft_size,
                                      cfg.n_mels))
    return state


# -- loss assembly ------------------------------------------------------------


@contextmanager
def _component(name, epoch):
    """Attribute any non-finite blowup inside the block to one loss name."""
    try:
        yield
    except ad.NonFiniteError as err:
        raise TrainingDiverged(
            f"loss {name} diverged at epoch {epoch}: {err}") from err


def _check(name, value, epoch):
    data = value.data if isinstance(value, ad.Tensor) else value
    if not np.all(np.isfinite(data)):
        raise TrainingDiverged(f"loss {name} is non-finite at epoch {epoch}")
    return value


@dataclass
class _Prep:
    """Per-utterance graph pieces shared by the adversary and generator steps."""

    bwd: object = 0.0
    fwd: object = 0.0
    dur: object = 0.0
    rec_real: np.ndarray = None     # waveform segment, constant
    rec_fake: object = None         # reconstruction, graph alive
    e2e_real: np.ndarray = None
    e2e_fake: object = None


def _segment_bounds(rng, frames, seg):
    s = min(seg, frames)
    start = int(rng.integers(frames - s + 1))
    return start, s


def _forward_generator(state, item, idx, stage, train=True):
    """Build every generator-side graph for one utterance.

    The discriminator is not consulted here, so the adversary can step on
    the detached fakes before the generator losses are finished off.
    """
    cfg, model, epoch = state.cfg, state.model, state.epoch
    prep = _Prep()
    drop_rng = np.random.default_rng(_seed(cfg, 11, epoch, idx))
    enc_drop = cfg.enc_dropout if train else 0.0

    with _component("phoneme encoding", epoch):
        H = model.encoder(item.ids, item.sups, dropout=enc_drop, rng=drop_rng)
    with _component("durator", epoch):
        if stage == "warmup":
            dur_out = model.durator(H, m=item.frames, train=train,
                                    rng=drop_rng, durations=item.mas)
        else:
            dur_out = model.durator(H, train=train, rng=drop_rng)

    if stage in ("warmup", "main"):
        with _component("posterior", epoch):
            post = model.post_enc(item.spec)
        with _component("dur", epoch):
            prep.dur = _check("dur", duration.duration_supervision_loss(
                dur_out.log_d, item.mas), epoch)
        with _component("bwd", epoch):
            prep.bwd = _check("bwd", flow.loss_bwd(
                model.flow, post.mu, post.sigma, dur_out.mu, dur_out.sigma,
                seed=_seed(cfg, 12, epoch, idx)), epoch)
        if stage == "main":
            with _component("fwd", epoch):
                prep.fwd = _check("fwd", flow.loss_fwd(
                    model.flow, dur_out.mu, dur_out.sigma, post.mu,
                    post.sigma, seed=_seed(cfg, 13, epoch, idx)), epoch)
        with _component("rec", epoch):
            seg_rng = np.random.default_rng(_seed(cfg, 14, epoch, idx))
            start, s = _segment_bounds(seg_rng, item.frames,
                                       cfg.segment_frames)
            z = posterior.sample_posterior(
                post, rng=np.random.default_rng(_seed(cfg, 15, epoch, idx)))
            z_seg = ad.index(z, (slice(start, start + s), slice(None)))
            if state.memory_active:
                z_seg = posterior.memory_attend(z_seg, model.memory)
            prep.rec_fake = model.decoder(z_seg)
            prep.rec_real = item.wave[start * cfg.hop:(start + s) * cfg.hop]

    if stage in ("main", "tuning"):
        with _component("e2e", epoch):
            eps = np.random.default_rng(
                _seed(cfg, 16, epoch, idx)).standard_normal(dur_out.mu.shape)
            z_prime = dur_out.mu + dur_out.sigma * ad.Tensor(eps)
            z2, _ = model.flow.forward(z_prime)
            seg_rng = np.random.default_rng(_seed(cfg, 17, epoch, idx))
            s = min(cfg.segment_frames, dur_out.m, item.frames)
            fake_at = int(seg_rng.integers(dur_out.m - s + 1))
            real_at = int(seg_rng.integers(item.frames - s + 1))
            z2_seg = ad.index(z2, (slice(fake_at, fake_at + s), slice(None)))
            if state.memory_active:
                z2_seg = posterior.memory_attend(z2_seg, model.memory)
            prep.e2e_fake = model.decoder(z2_seg)
            prep.e2e_real = item.wave[real_at * cfg.hop:
                                      (real_at + s) * cfg.hop]
    return prep


def _disc_scores(model, wave):
    return [s for _, s in model.disc(wave)]


def _finish_generator(state, prep):
    """Turn a prep into the four loss components plus the optimizer target.

    Call with the adversary frozen; its parameters must read as constants so
    the generator record stays clean.
    """
    cfg, epoch = state.cfg, state.epoch
    losses = {"bwd": prep.bwd, "fwd": prep.fwd, "rec": 0.0, "e2e": 0.0,
              "dur": prep.dur}
    if prep.rec_fake is not None:
        with _component("rec", epoch):
            real = ad.Tensor(prep.rec_real)
            real_out = state.model.disc(real)
            fake_out = state.model.disc(prep.rec_fake)
            gan = vocoder.generator_adversarial_loss(
                [s for _, s in fake_out])
            fm = vocoder.feature_matching_loss(
                [f for f, _ in real_out], [f for f, _ in fake_out])
            mel = vocoder.mel_loss(real, prep.rec_fake, cfg.sample_rate,
                                   cfg.fft_size, cfg.win_size, cfg.hop,
                                   cfg.n_mels, filterbank=state.filterbank)
            losses["rec"] = _check(
                "rec", cfg.gan_weight * gan + cfg.fm_weight * fm
                + cfg.mel_weight * mel, epoch)
    if prep.e2e_fake is not None:
        with _component("e2e", epoch):
            losses["e2e"] = _check("e2e", cfg.gan_weight
                                   * vocoder.generator_adversarial_loss(
                                       _disc_scores(state.model,
                                                    prep.e2e_fake)), epoch)
    # fixed association order; the logged total is recomputed the same way
    losses["total"] = ((losses["bwd"] + losses["fwd"]) + losses["rec"]) \
        + losses["e2e"]
    if isinstance(losses["dur"], ad.Tensor):
        losses["objective"] = losses["total"] + cfg.dur_weight * losses["dur"]
    else:
        losses["objective"] = losses["total"]
    return losses


def _disc_loss(state, prep):
    """LS-GAN adversary loss over the prepped segment pairs, fakes detached."""
    model, epoch = state.model, state.epoch
    total = 0.0
    with _component("disc", epoch):
        for real, fake in ((prep.rec_real, prep.rec_fake),
                          (prep.e2e_real, prep.e2e_fake)):
            if fake is None:
                continue
            part = vocoder.discriminator_adversarial_loss(
                _disc_scores(model, ad.Tensor(real)),
                _disc_scores(model, ad.Tensor(fake.data.copy())))
            total = part if isinstance(total, float) else total + part
    return _check("disc", total, epoch)


def total_loss(batch, state, stage):
    """Batch-mean loss components under the declared stage gating.

    warmup: bwd + rec (memory bypassed); main: all four; tuning: e2e only.
    ``total`` is the exact ordered sum of the four components; ``objective``
    additionally carries the duration supervision term where enabled.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    expected = stage_of_epoch(state.cfg, state.epoch)
    if stage != expected:
        raise ValueError(
            f"stage {stage!r} inconsistent with epoch {state.epoch}"
            f" (schedule says {expected!r})")
    if len(batch) == 0:
        raise ValueError("empty batch")
    with _frozen(state.model.disc):
        per_item = []
        for k, item in enumerate(batch):
            prep = _forward_generator(state, item, k, stage)
            per_item.append(_finish_generator(state, prep))
    inv = 1.0 / len(batch)
    out = {}
    for key in ("bwd", "fwd", "rec", "e2e", "dur"):
        acc = per_item[0][key]
        for other in per_item[1:]:
            acc = acc + other[key]
        out[key] = acc * inv
    out["total"] = ((out["bwd"] + out["fwd"]) + out["rec"]) + out["e2e"]
    if isinstance(out["dur"], ad.Tensor):
        out["objective"] = out["total"] + state.cfg.dur_weight * out["dur"]
    else:
        out["objective"] = out["total"]
    return out


@contextmanager
def _frozen(module):
    module.set_requires_grad(False)
    try:
        yield
    finally:
        module.set_requires_grad(True)


# -- gradient topology audit --------------------------------------------------

AUDIT_EXPECTED = {
    "rec": frozenset({"dec", "phi"}),
    "bwd": frozenset({"dur", "pho", "bpp", "phi"}),
    "fwd": frozenset({"bpp", "dur", "pho", "phi"}),
    "e2e": frozenset({"dec", "bpp", "dur", "pho"}),
    # supervision on the predictor; its input gradient stop keeps the
    # encoder out even though the predictor reads encoder hiddens
    "dur": frozenset({"dur"}),
}


def gradient_flow_audit(state, item=None):
    """Backpropagate each loss alone and compare reached parameter groups.

    Runs the full main-stage topology (memory included) regardless of where
    the schedule currently stands; raises AuditError on any extra or missing
    loss-to-group path.
    """
    if item is None:
        if not state.items:
            raise ValueError("no items to audit with")
        item = state.items[state.train_ids[0] if state.train_ids else 0]
    groups = state.model.groups()
    was_active = state.memory_active
    state.memory_active = True
    try:
        with _frozen(state.model.disc):
            prep = _forward_generator(state, item, 0, "main", train=False)
            losses = _finish_generator(state, prep)
    finally:
        state.memory_active = was_active
    report = {}
    problems = []
    for name, expected in AUDIT_EXPECTED.items():
        record = ad.backward(losses[name])
        reached = frozenset(
            g for g in groups if any(p in record for p in groups[g]))
        report[name] = reached
        if reached != expected:
            extra = sorted(reached - expected)
            missing = sorted(expected - reached)
            problems.append(f"{name}: extra={extra} missing={missing}")
    if problems:
        raise AuditError("gradient topology mismatch: " + "; ".join(problems))
    return report


# -- alignment labels ---------------------------------------------------------


def refresh_alignment_labels(state):
    """Realign every training utterance and return the label accuracy.

    Flat-start estimation on the hop-window mel frames: pool frames by
    phoneme identity under the current labels, fit a diagonal Gaussian per
    phoneme, re-run the monotone alignment search of every utterance
    against those Gaussians, and repeat until the labels stop moving.
    Warm-started from the current labels this converges in a few rounds
    and is idempotent once they have locked on.  Accuracy counts labels
    within one frame of the synthetic ground truth.
    """
    n_ids = int(max(int(state.items[i].ids.max())
                    for i in state.train_ids)) + 1
    h = state.cfg.n_mels

    for _ in range(10):
        count = np.zeros(n_ids)
        mean = np.zeros((n_ids, h))
        sq = np.zeros((n_ids, h))
        for idx in state.train_ids:
            item = state.items[idx]
            frame_ids = np.repeat(item.ids, item.mas)
            np.add.at(count, frame_ids, 1.0)
            np.add.at(mean, frame_ids, item.af)
            np.add.at(sq, frame_ids, item.af ** 2)
        seen = count > 0
        mean[seen] /= count[seen][:, None]
        var = np.full((n_ids, h), 1.0)
        var[seen] = sq[seen] / count[seen][:, None] - mean[seen] ** 2
        # a phoneme no utterance contains gets a unit Gaussian at the mean
        if not seen.all():
            mean[~seen] = mean[seen].mean(axis=0)
        sigma = np.sqrt(np.maximum(var, 1e-6))
        moved = False
        for idx in state.train_ids:
            item = state.items[idx]
            d = align.align(item.af, mean[item.ids], sigma[item.ids])
            if not np.array_equal(d, item.mas):
                moved = True
            item.mas = d
        if not moved:
            break

    hits = 0
    total = 0
    for idx in state.train_ids:
        item = state.items[idx]
        if item.d_gt is not None:
            hits += int(np.sum(np.abs(item.mas - item.d_gt) <= 1))
            total += len(item.d_gt)
    state.mas_accuracy = hits / total if total else float("nan")
    return state.mas_accuracy


def label_accuracy(state):
    """Accuracy of the current labels without refreshing them."""
    hits = 0
    total = 0
    for idx in state.train_ids:
        item = state.items[idx]
        if item.d_gt is not None:
            hits += int(np.sum(np.abs(item.mas - item.d_gt) <= 1))
            total += len(item.d_gt)
    return hits / total if total else float("nan")


def align_corpus(cfg, utterances):
    """Standalone labelling pass over a whole corpus, no model involved.

    Returns (accuracy, labels): accuracy against bundled ground truth when
    the utterances carry it (nan otherwise), and one duration array per
    utterance in corpus order.
    """
    sup_vocab = phonemes.learn_sup_phonemes([u.ids for u in utterances],
                                            cfg.sup_vocab)
    items = [prepare_item(cfg, u, sup_vocab) for u in utterances]
    state = ModelState(cfg=cfg, model=None, sup_vocab=sup_vocab,
                       items=items, train_ids=list(range(len(items))))
    accuracy = refresh_alignment_labels(state)
    return accuracy, [item.mas for item in items]


# -- memory initialization ----------------------------------------------------


def install_memory(state):
    """K-means over training posterior means seeds the memory rows."""
    cfg, model = state.cfg, state.model
    frames = []
    with ad.no_grad():
        for idx in state.train_ids:
            frames.append(model.post_enc(state.items[idx].spec).mu.data)
    points = np.concatenate(frames, axis=0)
    centers, _ = posterior.kmeans(points, cfg.memory_size, _seed(cfg, 3))
    model.memory.m.data[...] = centers
    state.memory_active = True


# -- inference ----------------------------------------------------------------


@dataclass
class InferResult:
    wave: np.ndarray       # (frames * hop,) synthesized samples
    durations: np.ndarray  # (n,) predicted per-phoneme durations
    frames: int


def infer(phoneme_ids, state, temperature=None, seed=0):
    """Text to waveform along the deployment path.

    Samples the prior at the given std-dev scale (config default; zero makes
    the output deterministic), maps it through the flow, reads the memory
    and decodes.  Output length is the rounded duration total times hop.
    """
    ids = np.asarray(phoneme_ids, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("empty phoneme input")
    cfg, model = state.cfg, state.model
    temp = cfg.infer_temperature if temperature is None else float(temperature)
    sups = np.asarray(phonemes.per_position_sups(ids, state.sup_vocab),
                      dtype=np.int64)
    with ad.no_grad():
        H = model.encoder(ids, sups)
        out = model.durator(H)
        eps = np.random.default_rng(seed).standard_normal(out.mu.shape)
        z_prime = ad.Tensor(out.mu.data + temp * out.sigma.data * eps)
        z, _ = model.flow.forward(z_prime)
        if state.memory_active:
            z = posterior.memory_attend(z, model.memory)
        wave = model.decoder(z).data
    return InferResult(wave=wave, durations=out.d.data.copy(), frames=out.m)


def heldout_mel_metric(state):
    """Mean log-mel L1 between held-out recordings and rendered audio.

    Rendering walks the deployment path but pins the two nuisance sources
    that would otherwise swamp the number: the upsampler runs on the true
    durations (the corpus draws durations at random, so no predictor can
    recover them and a predicted-length render measures mostly length
    error), and the prior is taken at its mean.  What remains tracks how
    well the prior-to-waveform chain actually renders the content, and it
    is deterministic, so the column is comparable across epochs.
    """
    cfg, model = state.cfg, state.model
    vals = []
    for idx in state.heldout_ids:
        item = state.items[idx]
        if item.d_gt is None:
            continue
        with ad.no_grad():
            H = model.encoder(item.ids, item.sups)
            out = model.durator(H, m=item.frames, durations=item.d_gt)
            z, _ = model.flow.forward(out.mu)
            if state.memory_active:
                z = posterior.memory_attend(z, model.memory)
            wave = model.decoder(z).data
        loss = vocoder.mel_loss(item.wave, wave, cfg.sample_rate,
                                cfg.fft_size, cfg.win_size, cfg.hop,
                                cfg.n_mels, filterbank=state.filterbank)
        vals.append(float(loss.data))
    if not vals:
        return float("nan")
    acc = 0.0
    for v in vals:
        acc += v
    return acc / len(vals)


# -- the training loop --------------------------------------------------------


def _accumulate(acc, record, params):
    for p in params:
        g = record.get(p)
        if g is None:
            continue
        if p in acc:
            acc[p] = acc[p] + g
        else:
            acc[p] = g


def _scaled(acc, inv):
    return {p: g * inv for p, g in acc.items()}


def _train_batch(state, batch_ids, stage, sums):
    """One adversary step then one generator step over a batch."""
    model = state.model
    groups = model.groups()
    gen_params = [p for g in GEN_GROUPS for p in groups[g]]
    inv = 1.0 / len(batch_ids)

    preps = [_forward_generator(state, state.items[i], i, stage)
             for i in batch_ids]

    if any(p.rec_fake is not None or p.e2e_fake is not None for p in preps):
        disc_acc = {}
        for prep in preps:
            loss = _disc_loss(state, prep)
            sums["disc"] += float(loss.data) * inv
            _accumulate(disc_acc, ad.backward(loss), groups["disc"])
        state.opt_disc.step(_scaled(disc_acc, inv))

    gen_acc = {}
    with _frozen(model.disc):
        for prep in preps:
            losses = _finish_generator(state, prep)
            for key in ("bwd", "fwd", "rec", "e2e", "dur"):
                v = losses[key]
                sums[key] += float(v.data if isinstance(v, ad.Tensor)
                                   else v) * inv
            _accumulate(gen_acc, ad.backward(losses["objective"]), gen_params)
    state.opt_gen.step(_scaled(gen_acc, inv))
    sums["batches"] += 1


def _freeze_for_tuning(model):
    """Only the durator keeps updating; the adversary is handled elsewhere."""
    model.post_enc.set_requires_grad(False)
    model.encoder.set_requires_grad(False)
    model.flow.set_requires_grad(False)
    model.decoder.set_requires_grad(False)
    model.memory.set_requires_grad(False)


def _unfreeze_all(model):
    model.set_requires_grad(True)


def format_row(row):
    parts = []
    for col in METRIC_COLUMNS:
        v = row[col]
        parts.append(repr(v) if isinstance(v, float) else str(v))
    return ",".join(parts)


def parse_metrics(text):
    """Rows of a metrics CSV back into typed dicts."""
    lines = [ln for ln in text.strip().splitlines() if ln]
    if not lines or lines[0] != ",".join(METRIC_COLUMNS):
        raise ValueError("metrics file missing the expected header")
    rows = []
    for ln in lines[1:]:
        cells = ln.split(",")
        if len(cells) != len(METRIC_COLUMNS):
            raise ValueError(f"bad metrics row: {ln!r}")
        row = {}
        for col, cell in zip(METRIC_COLUMNS, cells):
            if col == "epoch":
                row[col] = int(cell)
            elif col == "stage":
                row[col] = cell
            else:
                row[col] = float(cell)
        rows.append(row)
    return rows


def train(cfg, utterances, out_dir=None, progress=None):
    """Run the full staged schedule and return (state, metric rows).

    ``progress`` is called with each finished row when given.  With
    ``out_dir`` the metrics stream to disk as they happen and the final
    model, vocabulary and config land there too.
    """
    state = init_state(cfg, utterances)
    log_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, METRICS_FILE), "w")
        log_fh.write(",".join(METRIC_COLUMNS) + "\n")
    try:
        for epoch in range(cfg.total_epochs):
            state.epoch = epoch
            stage = stage_of_epoch(cfg, epoch)
            if stage != "warmup" and not state.memory_active:
                install_memory(state)
            if stage == "tuning" and epoch == cfg.warmup_epochs + cfg.main_epochs:
                _freeze_for_tuning(state.model)
            lr = optim.lr_at_epoch(cfg.learning_rate, cfg.lr_decay, epoch)
            state.opt_gen.lr = lr
            state.opt_disc.lr = lr
            if stage == "warmup":
                mas_acc = refresh_alignment_labels(state)
            else:
                mas_acc = state.mas_accuracy

            sums = {k: 0.0 for k in
                    ("bwd", "fwd", "rec", "e2e", "dur", "disc")}
            sums["batches"] = 0
            order = np.random.default_rng(
                _seed(cfg, 2, epoch)).permutation(state.train_ids)
            for at in range(0, len(order), cfg.batch_size):
                _train_batch(state, [int(i) for i in order[at:at
                                                          + cfg.batch_size]],
                             stage, sums)
            inv_b = 1.0 / sums["batches"]
            row = {"epoch": epoch, "stage": stage, "lr": lr,
                   "mas_acc": mas_acc,
                   "heldout_mel": heldout_mel_metric(state)}
            for key in ("bwd", "fwd", "rec", "e2e", "dur", "disc"):
                row[key] = sums[key] * inv_b
            row["total"] = ((row["bwd"] + row["fwd"]) + row["rec"]) \
                + row["e2e"]
            state.metrics.append(row)
            if log_fh is not None:
                log_fh.write(format_row(row) + "\n")
                log_fh.flush()
            if progress is not None:
                progress(row)
    finally:
        if log_fh is not None:
            log_fh.close()
    _unfreeze_all(state.model)
    state.epoch = cfg.total_epochs - 1
    if out_dir is not None:
        save_state(state, out_dir)
    return state, state.metrics


# -- persistence --------------------------------------------------------------


def save_state(state, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    checkpoint.save_checkpoint(state.model,
                               os.path.join(out_dir, CHECKPOINT_FILE))
    state.sup_vocab.save(os.path.join(out_dir, VOCAB_FILE))
    config_mod.save_config(state.cfg, os.path.join(out_dir, CONFIG_FILE))


def load_state(out_dir):
    """Rebuild a trained state from the files ``train`` leaves behind."""
    ckpt = os.path.join(out_dir, CHECKPOINT_FILE)
    if not os.path.exists(ckpt):
        raise FileNotFoundError(f"no checkpoint at {ckpt}")
    cfg = config_mod.load_config(os.path.join(out_dir, CONFIG_FILE))
    sup_vocab = phonemes.SupPhonemeVocab.load(os.path.join(out_dir,
                                                           VOCAB_FILE))
    model = TtsModel(cfg, sup_vocab, np.random.default_rng(0))
    checkpoint.load_into(model, ckpt)
    return ModelState(cfg=cfg, model=model, sup_vocab=sup_vocab,
                      epoch=cfg.total_epochs - 1, memory_active=True,
                      filterbank=dsp.mel_filterbank(cfg.sample_rate,
                                                    cfg.fft_size,
                                                    cfg.n_mels))
