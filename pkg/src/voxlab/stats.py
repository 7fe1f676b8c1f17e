"""Rank tests and the human-level listening-test decision rule.

Paired comparisons use the Wilcoxon signed-rank test, unpaired score sets the
rank-sum (Mann-Whitney) test.  Small samples get exact permutation p-values,
larger ones a normal approximation with tie and continuity corrections.  Both
p-values are two-sided: twice the smaller tail, capped at 1.

The decision rule: a paired comparison study counts as human-level parity when
it has at least 20 judges, at least 50 utterances, and the signed-rank p-value
exceeds 0.05.  The mean comparative score is reported but not thresholded,
since "close to zero" has no agreed numeric cutoff.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

SIGNED_RANK_EXACT_LIMIT = 20
RANK_SUM_EXACT_LIMIT = 14
MIN_JUDGES = 20
MIN_UTTERANCES = 50
ALPHA = 0.05


def average_ranks(values):
    """Ranks 1..n with tied values sharing their average rank."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v), dtype=np.float64)
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _normal_two_sided(z):
    return math.erfc(abs(z) / math.sqrt(2.0))


class RankTest(NamedTuple):
    statistic: float
    p_value: float
    method: str   # "exact" | "approx" | "degenerate"
    n: int


def _signed_rank_exact_p(ranks, w_plus):
    # distribution of W+ over all 2^n sign patterns, via subset-sum counting
    # on doubled ranks (integers even with midpoint ties)
    doubled = [int(round(2.0 * r)) for r in ranks]
    total = sum(doubled)
    counts = [0] * (total + 1)
    counts[0] = 1
    for d in doubled:
        for s in range(total, d - 1, -1):
            counts[s] += counts[s - d]
    patterns = 1 << len(doubled)
    w2 = int(round(2.0 * w_plus))
    lo = sum(counts[:w2 + 1])
    hi = sum(counts[w2:])
    return min(1.0, 2.0 * min(lo, hi) / patterns)


def wilcoxon_signed_rank(differences, method="auto"):
    """Paired-sample signed-rank test on a sequence of differences.

    Zero differences are dropped first.  Returns the positive-rank sum W+ and
    a two-sided p-value.  ``method`` forces a branch; "auto" picks exact for
    up to 20 nonzero differences.
    """
    d = np.asarray(differences, dtype=np.float64)
    if d.ndim != 1:
        raise ValueError("differences must be a flat sequence")
    if not np.all(np.isfinite(d)):
        raise ValueError("non-finite differences")
    d = d[d != 0.0]
    n = len(d)
    if n == 0:
        return RankTest(0.0, 1.0, "degenerate", 0)
    ranks = average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if method == "auto":
        method = "exact" if n <= SIGNED_RANK_EXACT_LIMIT else "approx"
    if method == "exact":
        return RankTest(w_plus, _signed_rank_exact_p(ranks, w_plus), "exact", n)
    if method != "approx":
        raise ValueError(f"unknown method {method!r}")
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_sizes = np.unique(np.abs(d), return_counts=True)
    var -= float(np.sum(tie_sizes ** 3 - tie_sizes)) / 48.0
    if var <= 0.0:
        return RankTest(w_plus, 1.0, "degenerate", n)
    shift = w_plus - mean
    z = (shift - 0.5 * np.sign(shift)) / math.sqrt(var)
    return RankTest(w_plus, _normal_two_sided(z), "approx", n)


def _rank_sum_exact_p(ranks, n_a, u_obs):
    # U over all choices of which rank positions belong to sample a
    n = len(ranks)
    offset = n_a * (n_a + 1) / 2.0
    count_le = 0
    count_ge = 0
    total = 0
    for picked in itertools.combinations(range(n), n_a):
        u = sum(ranks[i] for i in picked) - offset
        total += 1
        if u <= u_obs:
            count_le += 1
        if u >= u_obs:
            count_ge += 1
    return min(1.0, 2.0 * min(count_le, count_ge) / total)


def wilcoxon_rank_sum(a, b, method="auto"):
    """Two-sample rank-sum test; returns Mann-Whitney U for sample ``a``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    combined = np.concatenate([a, b])
    if not np.all(np.isfinite(combined)):
        raise ValueError("non-finite scores")
    n_a, n_b = len(a), len(b)
    n = n_a + n_b
    ranks = average_ranks(combined)
    u = float(ranks[:n_a].sum() - n_a * (n_a + 1) / 2.0)
    if method == "auto":
        method = "exact" if n <= RANK_SUM_EXACT_LIMIT else "approx"
    if method == "exact":
        return RankTest(u, _rank_sum_exact_p(ranks, n_a, u), "exact", n)
    if method != "approx":
        raise ValueError(f"unknown method {method!r}")
    mean = n_a * n_b / 2.0
    _, tie_sizes = np.unique(combined, return_counts=True)
    tie_term = float(np.sum(tie_sizes ** 3 - tie_sizes)) / (n * (n - 1))
    var = n_a * n_b / 12.0 * ((n + 1) - tie_term)
    if var <= 0.0:
        return RankTest(u, 1.0, "degenerate", n)
    shift = u - mean
    z = (shift - 0.5 * np.sign(shift)) / math.sqrt(var)
    return RankTest(u, _normal_two_sided(z), "approx", n)


# -- the decision rule --------------------------------------------------------

CMOS_BOUND = 3.0
CSV_HEADER = ["utterance_id", "judge_id", "score_a", "score_b"]


@dataclass
class CmosTable:
    """Paired listening scores: one row per (utterance, judge)."""

    rows: list  # of (utterance_id, judge_id, score_a, score_b)

    def __post_init__(self):
        seen = set()
        for utt, judge, sa, sb in self.rows:
            if (utt, judge) in seen:
                raise ValueError(f"duplicate pair ({utt!r}, {judge!r})")
            seen.add((utt, judge))
            if abs(float(sa) - float(sb)) > CMOS_BOUND:
                raise ValueError(
                    f"comparative score out of the 7-point range at ({utt}, {judge})")

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != CSV_HEADER:
                raise ValueError(f"expected header {','.join(CSV_HEADER)}")
            rows = [(u, j, float(sa), float(sb)) for u, j, sa, sb in reader]
        return cls(rows)

    def differences(self):
        return np.array([sa - sb for _, _, sa, sb in self.rows])

    def judge_count(self):
        return len({j for _, j, _, _ in self.rows})

    def utterance_count(self):
        return len({u for u, _, _, _ in self.rows})


def verdict(mean_cmos, p_value, judges, utterances):
    """(passed, reason) for the human-level rule on summary numbers."""
    if judges < MIN_JUDGES:
        return False, f"insufficient judges ({judges} < {MIN_JUDGES})"
    if utterances < MIN_UTTERANCES:
        return False, f"insufficient utterances ({utterances} < {MIN_UTTERANCES})"
    if not p_value > ALPHA:
        return False, (f"significant difference (p={p_value:.4g} <= {ALPHA}, "
                       f"mean CMOS {mean_cmos:+.2f})")
    return True, f"no significant difference (p={p_value:.4g} > {ALPHA})"


@dataclass
class JudgeResult:
    statistic: float
    p_value: float
    method: str
    mean_cmos: float
    judge_count: int
    utterance_count: int
    zeros_dropped: int
    passed: bool
    reason: str

    def to_kv(self):
        return {
            "statistic": self.statistic,
            "p_value": self.p_value,
            "method": self.method,
            "mean_cmos": self.mean_cmos,
            "judges": self.judge_count,
            "utterances": self.utterance_count,
            "zeros_dropped": self.zeros_dropped,
            "verdict": "PASS" if self.passed else "FAIL",
            "reason": self.reason,
            "note": "mean CMOS reported, not thresholded (no agreed cutoff)",
        }

    def format_report(self):
        lines = [
            "human-level judgment",
            f"  mean CMOS     {self.mean_cmos:+.4f}",
            f"  signed-rank W {self.statistic:g} ({self.method}, "
            f"{self.zeros_dropped} zero diffs dropped)",
            f"  p two-sided   {self.p_value:.4g}",
            f"  judges        {self.judge_count}",
            f"  utterances    {self.utterance_count}",
            f"  verdict       {'PASS' if self.passed else 'FAIL'}: {self.reason}",
        ]
        return "\n".join(lines)


def judge_human_level(table):
    """Run the full decision rule on a paired score table."""
    diffs = table.differences()
    test = wilcoxon_signed_rank(diffs)
    mean_cmos = float(diffs.mean())
    passed, reason = verdict(mean_cmos, test.p_value,
                             table.judge_count(), table.utterance_count())
    return JudgeResult(
        statistic=test.statistic, p_value=test.p_value, method=test.method,
        mean_cmos=mean_cmos, judge_count=table.judge_count(),
        utterance_count=table.utterance_count(),
        zeros_dropped=len(diffs) - test.n, passed=passed, reason=reason)
