"""Phoneme frontend: pair-merge vocabulary, masked pre-training, encoder.

Sup-phonemes are runs of adjacent phonemes produced by greedy pair merging
(highest adjacent-pair frequency first, lexicographic tie-break, stop when no
pair repeats).  The encoder consumes the phoneme stream and the sup-phoneme
stream together: per position, phoneme embedding + covering sup-phoneme
embedding + learned position embedding, refined by a stack of pre-norm blocks
of self-attention and kernel-3 convolution feed-forward.  Masked pre-training
hides whole sup-phonemes (and their member phonemes) and predicts both.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from . import optim


def _merge_once(tokens, pair, new_id):
    a, b = pair
    out = []
    i = 0
    while i < len(tokens):
        if i + 1 < len(tokens) and tokens[i] == a and tokens[i + 1] == b:
            out.append(new_id)
            i += 2
        else:
            out.append(tokens[i])
            i += 1
    return out


@dataclass
class SupPhonemeVocab:
    """Ordered merge rules over a base phoneme vocabulary.

    ``merges`` is a list of (left, right, new_id) applied in order; replaying
    them on any sequence is deterministic.  ``learned_segmentation`` keeps the
    training corpus as segmented at the end of learning, for replay checks.
    """

    base_size: int
    merges: list
    learned_segmentation: list = field(default=None, repr=False, compare=False)

    @property
    def total_size(self):
        return self.base_size + len(self.merges)

    # reserved mask slots sit one past each id range
    @property
    def phoneme_mask_id(self):
        return self.base_size

    @property
    def sup_mask_id(self):
        return self.total_size

    def segment(self, seq):
        """(sup_ids, spans): merged token ids and their phoneme index ranges."""
        tokens = [int(t) for t in seq]
        for t in tokens:
            if not 0 <= t < self.base_size:
                raise ValueError(f"phoneme id {t} outside base vocabulary")
        spans = [(i, i + 1) for i in range(len(tokens))]
        for a, b, new_id in self.merges:
            out_t, out_s = [], []
            i = 0
            while i < len(tokens):
                if i + 1 < len(tokens) and tokens[i] == a and tokens[i + 1] == b:
                    out_t.append(new_id)
                    out_s.append((spans[i][0], spans[i + 1][1]))
                    i += 2
                else:
                    out_t.append(tokens[i])
                    out_s.append(spans[i])
                    i += 1
            tokens, spans = out_t, out_s
        return tokens, spans

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(f"base {self.base_size}\n")
            for a, b, new_id in self.merges:
                fh.write(f"{a} {b} {new_id}\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            head = fh.readline().split()
            if len(head) != 2 or head[0] != "base":
                raise ValueError("vocabulary file must start with 'base <size>'")
            base = int(head[1])
            merges = []
            for line in fh:
                parts = line.split()
                if parts:
                    merges.append((int(parts[0]), int(parts[1]), int(parts[2])))
        return cls(base, merges)


def learn_sup_phonemes(corpus, target_vocab):
    """Greedy highest-frequency pair merging up to ``target_vocab`` ids."""
    seqs = [[int(t) for t in s] for s in corpus]
    if not seqs or all(len(s) == 0 for s in seqs):
        raise ValueError("empty corpus")
    base = max(max(s) for s in seqs if s) + 1
    if target_vocab < base:
        raise ValueError(
            f"target vocabulary {target_vocab} below base size {base}")
    merges = []
    next_id = base
    while next_id < target_vocab:
        counts = Counter()
        for s in seqs:
            counts.update(zip(s, s[1:]))
        if not counts:
            break
        best_count = max(counts.values())
        if best_count < 2:
            break
        pair = min(p for p, c in counts.items() if c == best_count)
        merges.append((pair[0], pair[1], next_id))
        seqs = [_merge_once(s, pair, next_id) for s in seqs]
        next_id += 1
    return SupPhonemeVocab(base, merges, learned_segmentation=seqs)


# -- masking ------------------------------------------------------------------


@dataclass
class MaskedBatch:
    phoneme_ids: np.ndarray        # (n,) original
    sup_ids: np.ndarray            # (k,) original merged stream
    spans: list                    # per sup token, (start, end) phoneme range
    input_phonemes: np.ndarray     # (n,) with masked positions replaced
    input_sups: np.ndarray         # (n,) per-position sup id, mask replaced
    sup_mask: np.ndarray           # (k,) bool
    position_mask: np.ndarray      # (n,) bool, phoneme covered by masked sup


def mask_batch(seq, vocab, ratio, seed):
    """Hide round(ratio * k) whole sup-phonemes, deterministically by seed."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("mask ratio must lie in [0, 1]")
    phoneme_ids = np.asarray([int(t) for t in seq], dtype=np.int64)
    sup_ids_list, spans = vocab.segment(phoneme_ids)
    sup_ids = np.asarray(sup_ids_list, dtype=np.int64)
    k = len(sup_ids)
    n_mask = int(round(ratio * k))
    rng = np.random.default_rng(seed)
    chosen = rng.choice(k, size=n_mask, replace=False) if n_mask else []
    sup_mask = np.zeros(k, dtype=bool)
    sup_mask[chosen] = True

    input_phonemes = phoneme_ids.copy()
    input_sups = np.empty(len(phoneme_ids), dtype=np.int64)
    position_mask = np.zeros(len(phoneme_ids), dtype=bool)
    for t, (lo, hi) in enumerate(spans):
        if sup_mask[t]:
            input_sups[lo:hi] = vocab.sup_mask_id
            input_phonemes[lo:hi] = vocab.phoneme_mask_id
            position_mask[lo:hi] = True
        else:
            input_sups[lo:hi] = sup_ids[t]
    return MaskedBatch(phoneme_ids, sup_ids, spans, input_phonemes,
                       input_sups, sup_mask, position_mask)


def per_position_sups(seq, vocab):
    """Unmasked per-position sup-phoneme ids for ordinary encoding."""
    batch = mask_batch(seq, vocab, 0.0, 0)
    return batch.input_sups


# -- encoder ------------------------------------------------------------------


class FFTBlock(nn.Module):
    """Pre-norm self-attention + two kernel-size convolutions with a residual."""

    def __init__(self, dim, heads, kernel, filt, rng):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = nn.SelfAttention(dim, heads, rng)
        self.ln2 = nn.LayerNorm(dim)
        self.conv1 = nn.Conv1d(dim, filt, kernel, rng)
        self.conv2 = nn.Conv1d(filt, dim, kernel, rng)

    def __call__(self, x, dropout=0.0, rng=None):
        n, dim = x.shape
        x = x + ad.dropout(self.attn(self.ln1(x)), dropout, rng)
        y = ad.reshape(ad.transpose(self.ln2(x)), 1, dim, n)
        y = self.conv2(ad.relu(self.conv1(y)))
        y = ad.transpose(ad.reshape(y, y.shape[1], n))
        return x + ad.dropout(y, dropout, rng)


class PhonemeEncoder(nn.Module):
    """Mixed phoneme/sup-phoneme encoder producing an (n, h) hidden sequence."""

    def __init__(self, phoneme_vocab, sup_vocab, dim, heads, n_blocks,
                 kernel, filt, max_len, rng):
        super().__init__()
        self.dim = dim
        self.max_len = max_len
        # one extra row in each table is the reserved mask slot
        self.emb_phoneme = nn.Embedding(phoneme_vocab + 1, dim, rng)
        self.emb_sup = nn.Embedding(sup_vocab + 1, dim, rng)
        self.emb_pos = nn.Embedding(max_len, dim, rng)
        self.blocks = nn.ModuleList(
            [FFTBlock(dim, heads, kernel, filt, rng) for _ in range(n_blocks)])

    def __call__(self, phoneme_ids, sup_ids, dropout=0.0, rng=None):
        phoneme_ids = np.asarray(phoneme_ids, dtype=np.int64)
        n = len(phoneme_ids)
        if n == 0:
            raise ValueError("empty phoneme sequence")
        if n > self.max_len:
            raise ValueError(f"sequence length {n} exceeds max {self.max_len}")
        x = (self.emb_phoneme(phoneme_ids) + self.emb_sup(sup_ids)
             + self.emb_pos(np.arange(n)))
        for block in self.blocks:
            x = block(x, dropout, rng)
        return x


# -- masked-prediction loss and the pre-training loop -------------------------


def cross_entropy(logits, targets):
    """Mean CE of an (k, V) logit block against integer targets."""
    targets = np.asarray(targets, dtype=np.int64)
    picked = ad.index(logits, (np.arange(len(targets)), targets))
    return (ad.logsumexp(logits, axis=-1) - picked).mean()


def mlm_loss(hidden, head_phoneme, head_sup, batch):
    """(loss, degenerate) for one masked batch.

    Phoneme identities are predicted at every masked position; the hidden
    sup-phoneme is predicted once, at its first member position.  The two
    mean cross-entropies are added with equal weight.
    """
    if not batch.position_mask.any():
        return ad.Tensor(0.0), True
    pos_rows = np.flatnonzero(batch.position_mask)
    ph_logits = head_phoneme(ad.index(hidden, pos_rows))
    loss = cross_entropy(ph_logits, batch.phoneme_ids[pos_rows])
    sup_rows = np.array([batch.spans[t][0]
                         for t in np.flatnonzero(batch.sup_mask)])
    sup_logits = head_sup(ad.index(hidden, sup_rows))
    loss = loss + cross_entropy(sup_logits, batch.sup_ids[batch.sup_mask])
    return loss, False


class PretrainModel(nn.Module):
    """Encoder plus the two masked-prediction heads (discarded after)."""

    def __init__(self, encoder, phoneme_vocab, sup_vocab, rng):
        super().__init__()
        self.encoder = encoder
        self.head_phoneme = nn.Linear(encoder.dim, phoneme_vocab, rng)
        self.head_sup = nn.Linear(encoder.dim, sup_vocab, rng)

    def loss(self, batch, dropout=0.0, rng=None):
        hidden = self.encoder(batch.input_phonemes, batch.input_sups,
                              dropout, rng)
        return mlm_loss(hidden, self.head_phoneme, self.head_sup, batch)


def pretrain(model, corpus, vocab, steps, seed, lr=2e-4, mask_ratio=0.15,
             dropout=0.0, batch_size=8):
    """Masked pre-training; returns the per-step mean loss trace.

    Each step averages the loss over ``batch_size`` sampled sentences (the
    desk-scale stand-in for large-batch pre-training).  No weight decay: the
    model here under-fits, it does not overfit.
    """
    opt = optim.AdamW(model.parameters(), lr=lr, betas=(0.8, 0.99),
                      weight_decay=0.0)
    order = np.random.default_rng(seed)
    drop_rng = np.random.default_rng(seed + 1)
    losses = []
    for step in range(steps):
        total = None
        used = 0
        for k in range(batch_size):
            seq = corpus[int(order.integers(len(corpus)))]
            batch = mask_batch(seq, vocab, mask_ratio,
                               seed=seed * 100003 + step * batch_size + k)
            loss, degenerate = model.loss(batch, dropout, drop_rng)
            if degenerate:
                continue
            total = loss if total is None else total + loss
            used += 1
        if total is None:
            losses.append(0.0)
            continue
        mean_loss = total * (1.0 / used)
        record = ad.backward(mean_loss)
        opt.step(record)
        losses.append(float(mean_loss.data))
    return losses


def masked_accuracy(model, corpus, vocab, trials, seed, mask_ratio=0.15):
    """Fraction of hidden phonemes recovered by the phoneme head's argmax."""
    rng = np.random.default_rng(seed)
    hit = total = 0
    with ad.no_grad():
        for t in range(trials):
            seq = corpus[int(rng.integers(len(corpus)))]
            batch = mask_batch(seq, vocab, mask_ratio, seed=seed * 7919 + t)
            if not batch.position_mask.any():
                continue
            hidden = model.encoder(batch.input_phonemes, batch.input_sups)
            rows = np.flatnonzero(batch.position_mask)
            logits = model.head_phoneme(ad.index(hidden, rows)).data
            hit += int(np.sum(np.argmax(logits, axis=-1)
                              == batch.phoneme_ids[rows]))
            total += len(rows)
    return hit / max(total, 1)
