"""Release-gate oracle suites behind the ``selftest`` command.

Every suite re-derives its expected values on an independent route: path
enumeration, exhaustive search over alignments or sign patterns, closed
forms, or a line-by-line transcription of the defining formula.  The fast
implementations must agree at the stated tolerances, inside the stated
wall-clock budget; a suite that blows its budget fails even with every
value correct.  Details embed the measured numbers so that two runs can
be compared bit for bit.
"""

import itertools
import time
from dataclasses import dataclass, replace

import numpy as np

from . import align, autodiff as ad
from . import config as config_mod
from . import corpus, duration, flow, posterior, softdtw, stats, training

GAMMA, WARP = 0.01, 0.07


@dataclass
class CheckResult:
    name: str
    ok: bool
    seconds: float
    budget: float
    detail: str

    def line(self):
        mark = "PASS" if self.ok else "FAIL"
        return (f"{self.name:<18} {mark}  {self.seconds:6.2f}s "
                f"(budget {self.budget:g}s)  {self.detail}")


def check_flow_round_trip():
    rng = np.random.default_rng(11)
    stack = flow.FlowStack(8, rng, n_layers=4, filt=16, kernel=5,
                           net_layers=2)
    worst = 0.0
    zero_logdets = 0
    with ad.no_grad():
        for _ in range(100):
            z0 = rng.standard_normal((6, 8))
            mapped, ld_f = stack.forward(ad.Tensor(z0))
            back, ld_i = stack.inverse(mapped)
            worst = max(worst, float(np.abs(back.data - z0).max()))
            other, _ = stack.forward(stack.inverse(ad.Tensor(z0))[0])
            worst = max(worst, float(np.abs(other.data - z0).max()))
            zero_logdets += (np.all(ld_f.data == 0.0)
                             and np.all(ld_i.data == 0.0))
    ok = worst <= 1e-9 and zero_logdets == 100
    return ok, (f"round-trip max err {worst!r}, "
                f"{zero_logdets}/100 zero log-determinants")


def check_loss_grouping():
    rng = np.random.default_rng(12)
    stack = flow.FlowStack(6, rng, n_layers=2, filt=12, kernel=5,
                           net_layers=1)

    def params(n):
        return (ad.Tensor(rng.standard_normal((n, 6))),
                ad.Tensor(rng.uniform(0.3, 1.2, size=(n, 6))))

    worst = 0.0
    with ad.no_grad():
        for t in range(100):
            i = int(rng.integers(2, 7))
            j = i if t % 2 == 0 else int(rng.integers(2, 7))
            post_mu, post_sigma = params(i)
            prior_mu, prior_sigma = params(j)
            for one, two, own in (
                    (flow.loss_bwd, flow.loss_bwd_alt,
                     (post_mu, post_sigma, prior_mu, prior_sigma)),
                    (flow.loss_fwd, flow.loss_fwd_alt,
                     (prior_mu, prior_sigma, post_mu, post_sigma))):
                a = float(one(stack, *own, seed=1000 + t).data)
                b = float(two(stack, *own, seed=1000 + t).data)
                rel = abs(a - b) / max(abs(a), abs(b), 1e-300)
                worst = max(worst, rel)
    return worst <= 1e-9, f"worst relative grouping gap {worst!r}"


def check_kl_sanity():
    rng = np.random.default_rng(13)
    ident = flow.FlowStack(4, rng, n_layers=0)
    mu = ad.Tensor(rng.standard_normal((50, 4)))
    sigma = ad.Tensor(rng.uniform(0.4, 1.5, size=(50, 4)))
    with ad.no_grad():
        zb = float(flow.loss_bwd(ident, mu, sigma, mu, sigma, seed=5).data)
        zf = float(flow.loss_fwd(ident, mu, sigma, mu, sigma, seed=6).data)
        n = 100000
        zeros = ad.Tensor(np.zeros((n, 1)))
        ones = ad.Tensor(np.ones((n, 1)))
        shifted = ad.Tensor(np.ones((n, 1)))
        est_b = float(flow.loss_bwd(ident, zeros, ones, shifted, ones,
                                    seed=77).data)
        est_f = float(flow.loss_fwd(ident, shifted, ones, zeros, ones,
                                    seed=78).data)
    ok = (zb == 0.0 and zf == 0.0
          and abs(est_b - 0.5) <= 0.01 and abs(est_f - 0.5) <= 0.01)
    return ok, (f"matched-pair losses ({zb!r}, {zf!r}), "
                f"unit-shift estimates ({est_b!r}, {est_f!r}) vs 0.5")


def _every_path(I, J):
    out = []

    def walk(i, j, path):
        if i == I and j == J:
            out.append(list(path))
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            if i + di <= I and j + dj <= J:
                path.append((i + di, j + dj))
                walk(i + di, j + dj, path)
                path.pop()

    walk(1, 1, [(1, 1)])
    return out


def _enumerated_cost(C, gamma, warp):
    I, J = C.shape
    costs = []
    for path in _every_path(I, J):
        total = sum(C[i - 1, j - 1] for i, j in path)
        off_diag = sum(1 for a, b in zip(path, path[1:])
                       if b[0] - a[0] + b[1] - a[1] == 1)
        costs.append(total + warp * off_diag)
    return softdtw.soft_min(costs, gamma)


def _hard_cost(C, warp):
    I, J = C.shape
    R = np.full((I + 1, J + 1), np.inf)
    R[0, 0] = 0.0
    for i in range(1, I + 1):
        for j in range(1, J + 1):
            R[i, j] = C[i - 1, j - 1] + min(R[i - 1, j] + warp,
                                            R[i, j - 1] + warp,
                                            R[i - 1, j - 1])
    return R[I, J]


def check_soft_dtw():
    rng = np.random.default_rng(14)
    shapes = [(i, j) for i in range(1, 6) for j in range(1, 5)]
    worst = 0.0
    with ad.no_grad():
        for t in range(200):
            I, J = shapes[t % len(shapes)]
            C = rng.uniform(0.0, 2.0, size=(I, J))
            mine = float(softdtw.soft_dtw_cost(ad.Tensor(C)).data)
            worst = max(worst, abs(mine - _enumerated_cost(C, GAMMA, WARP)))
        hard_gap = 0.0
        for _ in range(20):
            C = rng.uniform(0.0, 2.0, size=(5, 4))
            cold = float(softdtw.soft_dtw_cost(ad.Tensor(C),
                                               gamma=1e-6).data)
            hard_gap = max(hard_gap, abs(cold - _hard_cost(C, WARP)))
    C = ad.Tensor(rng.uniform(0.0, 2.0, size=(4, 3)))
    grad_err = ad.finite_diff_check(lambda c: softdtw.soft_dtw_cost(c), C)
    ok = worst <= 1e-9 and hard_gap <= 1e-4 and grad_err <= 1e-3
    return ok, (f"enumeration gap {worst!r}, hard-limit gap {hard_gap!r}, "
                f"gradient err {grad_err!r}")


def check_alignment_search():
    rng = np.random.default_rng(15)
    agree = 0
    for _ in range(1000):
        n = int(rng.integers(1, 7))
        m = int(rng.integers(n, 11))
        loglik = rng.normal(size=(m, n))
        fast = align.search_alignment(loglik)
        slow = align.brute_force_align(loglik)
        agree += np.array_equal(fast, slow)
    return agree == 1000, f"{agree}/1000 exact matches with exhaustion"


def check_durator():
    rng = np.random.default_rng(16)
    d_int = ad.Tensor(np.array([2.0, 1.0, 4.0, 3.0]))
    S, E = duration.build_boundary_matrices(d_int, m=10)
    sum_exact = np.array_equal(S.data + E.data,
                               np.broadcast_to(d_int.data, (10, 4)))
    ups = duration.LearnableUpsampler(6, rng)
    H = ad.Tensor(rng.standard_normal((3, 6)))
    res = ups(H, ad.Tensor(np.array([2.0, 1.5, 2.5])), m=6)
    row_gap = float(np.abs(res.W.data.sum(axis=1) - 1.0).max())
    err_d = ad.finite_diff_check(
        lambda d: ups(H, d, 6).O.mean(), ad.Tensor(np.array([2.0, 1.5, 2.5])))
    picked = (ups.out_w.weight, ups.mlp_w.fc1.weight, ups.conv.weight)
    err_p = ad.finite_diff_check(
        lambda *_: ups(H, ad.Tensor(np.array([2.0, 1.5, 2.5])), 6).O.mean(),
        picked)
    ok = sum_exact and row_gap <= 1e-9 and err_d <= 1e-3 and err_p <= 1e-3
    return ok, (f"boundary sums exact {sum_exact}, softmax row gap "
                f"{row_gap!r}, gradient errs ({err_d!r}, {err_p!r})")


def check_memory_attention():
    rng = np.random.default_rng(17)
    bank = posterior.MemoryBank(6, 8, rng, heads=1)
    z = rng.standard_normal((5, 8))
    ours = posterior.memory_attend(ad.Tensor(z), bank).data
    q = z @ bank.wq.data
    k = bank.m.data @ bank.wk.data
    v = bank.m.data @ bank.wv.data
    scores = q @ k.T / np.sqrt(8.0)
    w = np.exp(scores - scores.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    by_hand = (w @ v) @ bank.wo.data
    formula_gap = float(np.abs(ours - by_hand).max())

    single = posterior.MemoryBank(1, 8, rng, heads=2)
    out_a = posterior.memory_attend(
        ad.Tensor(rng.standard_normal((3, 8))), single).data
    out_b = posterior.memory_attend(
        ad.Tensor(rng.standard_normal((3, 8))), single).data
    query_free = bool(np.array_equal(out_a, out_b))

    z_t = ad.Tensor(rng.standard_normal((4, 8)))
    record = ad.backward(posterior.memory_attend(z_t, bank).sum())
    wanted = (bank.m, bank.wq, bank.wk, bank.wv, bank.wo)
    reached = sum(p in record and np.any(record.get(p) != 0.0)
                  for p in wanted)
    ok = formula_gap <= 1e-12 and query_free and reached == 5
    return ok, (f"formula gap {formula_gap!r}, single-row query-free "
                f"{query_free}, {reached}/5 gradients present")


def _tiny_config():
    return replace(
        config_mod.desk(), hidden=16, enc_blocks=1, enc_filter=24,
        sup_vocab=8, max_phonemes=64, dur_filter=12, up_filter=4,
        up_mlp_hidden=8, flow_layers=2, flow_net_layers=1, flow_filter=12,
        post_layers=1, post_filter=12, dec_channels=(12, 8, 6),
        memory_size=8, disc_channels=(2, 3, 4), batch_size=4,
        segment_frames=8, warmup_epochs=1, main_epochs=1, tuning_epochs=1,
        heldout=2, seed=0)


def check_gradient_paths():
    spec = corpus.SynthSpec(vocab_size=6, n_utterances=10, seed=3,
                            min_len=3, max_len=5, max_duration=5)
    rng = np.random.default_rng(spec.seed)
    utts = [corpus.synth_utterance(spec, rng)
            for _ in range(spec.n_utterances)]
    state = training.init_state(_tiny_config(), utts)
    try:
        training.gradient_flow_audit(state)
    except training.AuditError as exc:
        return False, f"audit failed: {exc}"
    return True, ("six loss-to-parameter paths intact, "
                  "duration-predictor input stop verified")


def _signed_rank_by_enumeration(diffs):
    d = np.asarray(diffs, float)
    d = d[d != 0]
    ranks = stats.average_ranks(np.abs(d))
    w_obs = ranks[d > 0].sum()
    le = ge = 0
    for signs in itertools.product((1.0, -1.0), repeat=len(d)):
        w = ranks[np.array(signs) > 0].sum()
        le += w <= w_obs
        ge += w >= w_obs
    return min(1.0, 2.0 * min(le, ge) / 2 ** len(d))


def _rank_sum_by_enumeration(a, b):
    combined = np.concatenate([a, b])
    ranks = stats.average_ranks(combined)
    n_a = len(a)
    offset = n_a * (n_a + 1) / 2.0
    u_obs = ranks[:n_a].sum() - offset
    le = ge = total = 0
    for picked in itertools.combinations(range(len(combined)), n_a):
        u = ranks[list(picked)].sum() - offset
        total += 1
        le += u <= u_obs
        ge += u >= u_obs
    return min(1.0, 2.0 * min(le, ge) / total)


def check_rank_tests():
    rng = np.random.default_rng(19)
    signed_ok = 0
    signed_total = 0
    for n in range(1, 11):
        for _ in range(10):
            d = rng.integers(-4, 5, size=n).astype(float)
            if np.all(d == 0):
                continue
            signed_total += 1
            r = stats.wilcoxon_signed_rank(d)
            signed_ok += (r.method == "exact"
                          and r.p_value == _signed_rank_by_enumeration(d))
    rank_sum_ok = 0
    for _ in range(50):
        n_a = int(rng.integers(1, 6))
        n_b = int(rng.integers(1, 11 - n_a))
        a = rng.integers(0, 8, size=n_a).astype(float)
        b = rng.integers(0, 8, size=n_b).astype(float)
        r = stats.wilcoxon_rank_sum(a, b)
        rank_sum_ok += (r.method == "exact"
                        and r.p_value == _rank_sum_by_enumeration(a, b))
    steps = stats.wilcoxon_signed_rank([1.0, 2.0, 3.0]).p_value
    passed, _ = stats.verdict(-0.01, 0.6902, judges=20, utterances=50)
    failed, _ = stats.verdict(-0.30, 5.1e-20, judges=20, utterances=50)
    ok = (signed_ok == signed_total and rank_sum_ok == 50
          and steps == 0.25 and passed and not failed)
    return ok, (f"signed-rank {signed_ok}/{signed_total} bitwise, rank-sum "
                f"{rank_sum_ok}/50 bitwise, three-step p {steps!r}, "
                f"verdicts ({passed}, {failed})")


SUITES = (
    ("flow-round-trip", check_flow_round_trip, 1.0),
    ("loss-grouping", check_loss_grouping, 5.0),
    ("kl-sanity", check_kl_sanity, 10.0),
    ("soft-dtw", check_soft_dtw, 30.0),
    ("alignment-search", check_alignment_search, 10.0),
    ("durator", check_durator, 30.0),
    ("memory-attention", check_memory_attention, 5.0),
    ("gradient-paths", check_gradient_paths, 30.0),
    ("rank-tests", check_rank_tests, 10.0),
)


def run_suite(name):
    """Run one named suite and return its CheckResult."""
    for suite_name, fn, budget in SUITES:
        if suite_name == name:
            start = time.perf_counter()
            ok, detail = fn()
            seconds = time.perf_counter() - start
            return CheckResult(name=name, ok=ok and seconds < budget,
                               seconds=seconds, budget=budget, detail=detail)
    raise ValueError(f"no suite named {name!r}")


def run_all(verbose=False):
    results = []
    for name, _, _ in SUITES:
        result = run_suite(name)
        results.append(result)
        if verbose:
            print(result.line(), flush=True)
    return results


def format_table(results):
    lines = [r.line() for r in results]
    failed = sum(not r.ok for r in results)
    lines.append(f"{len(results) - failed}/{len(results)} suites passed")
    return "\n".join(lines)
