"""Gradient-engine tests: every op against central finite differences, plus
the bookkeeping contracts (record presence, stops, determinism, checkpoints).
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxlab import autodiff as ad
from voxlab import checkpoint as ck
from voxlab import nn

RNG = np.random.default_rng(20260822)


def t(shape, scale=1.0, shift=0.0):
    x = ad.Tensor(RNG.normal(shift, scale, size=shape))
    x.requires_grad = True
    x._reach = True
    return x


def check(fn, *points, tol=1e-6, step=1e-5):
    err = ad.finite_diff_check(lambda *ps: fn(*ps), list(points), step=step)
    assert err < tol, f"finite-diff mismatch {err:.3e}"


class TestElementwise:
    def test_add_mul_div_pow(self):
        check(lambda a, b: ad.sum_(a * b + a / b + a ** 3.0), t((3, 4)), t((3, 4), shift=2.0))

    def test_broadcasting(self):
        check(lambda a, b: ad.sum_((a + b) * b), t((3, 4)), t((4,)))
        check(lambda a, b: ad.sum_(a * b), t((2, 1, 5)), t((3, 1)))

    def test_unary(self):
        check(lambda a: ad.sum_(ad.exp(a)), t((5,)))
        check(lambda a: ad.sum_(ad.log(a)), t((5,), shift=3.0))
        check(lambda a: ad.sum_(ad.sqrt(a)), t((5,), shift=3.0))
        check(lambda a: ad.sum_(ad.tanh(a)), t((5,)))
        check(lambda a: ad.sum_(ad.sigmoid(a)), t((5,)))
        check(lambda a: ad.sum_(ad.swish(a)), t((5,)))
        check(lambda a: ad.sum_(ad.softplus(a)), t((5,)))

    def test_kinked_ops_away_from_kink(self):
        x = ad.Tensor(np.array([-2.0, -0.5, 0.4, 1.7]))
        check(lambda a: ad.sum_(ad.relu(a) + ad.leaky_relu(a) + ad.abs_(a)), x)

    def test_clip_min(self):
        x = ad.Tensor(np.array([-1.0, 0.2, 2.0]))
        check(lambda a: ad.sum_(ad.clip_min(a, 0.5) * a), x)

    def test_sigmoid_extreme_no_overflow(self):
        x = ad.Tensor(np.array([-800.0, 800.0]))
        y = ad.sigmoid(x)
        assert np.allclose(y.data, [0.0, 1.0])
        z = ad.softplus(x)
        assert np.isfinite(z.data).all()


class TestReductions:
    def test_sum_mean_axes(self):
        check(lambda a: ad.sum_(ad.mean(a, axis=0) * ad.sum_(a, axis=1, keepdims=False)[0]), t((3, 4)))
        check(lambda a: ad.mean(a), t((2, 3, 4)))

    def test_logsumexp_matches_numpy(self):
        x = RNG.normal(size=(4, 7))
        got = ad.logsumexp(ad.Tensor(x), axis=-1).data
        want = np.log(np.exp(x).sum(axis=-1))
        assert np.allclose(got, want, atol=1e-12)
        check(lambda a: ad.sum_(ad.logsumexp(a, axis=-1)), t((4, 7)))

    def test_softmax_rows_sum_one(self):
        y = ad.softmax(ad.Tensor(RNG.normal(size=(5, 9)) * 10), axis=-1)
        assert np.allclose(y.data.sum(axis=-1), 1.0, atol=1e-12)
        check(lambda a: ad.sum_(ad.softmax(a, axis=-1) * a), t((3, 6)))


class TestShapes:
    def test_reshape_transpose_concat_index(self):
        def fn(a, b):
            c = ad.concat([ad.reshape(a, 6), b], axis=0)
            d = ad.transpose(ad.reshape(c, 2, 5), (1, 0))
            return ad.sum_(d[1:4] * d[0:3])
        check(fn, t((2, 3)), t((4,)))

    def test_take1d_accumulates_repeats(self):
        x = t((4,))
        idx = np.array([0, 1, 1, 3])
        out = ad.sum_(ad.take1d(x, idx))
        rec = ad.backward(out)
        assert np.array_equal(rec[x], np.array([1.0, 2.0, 0.0, 1.0]))

    def test_pad_constant(self):
        check(lambda a: ad.sum_(ad.pad_constant(a, ((1, 2),)) * 2.0), t((5,)))


class TestLinalg:
    def test_matmul_2d(self):
        check(lambda a, b: ad.sum_(a @ b), t((3, 4)), t((4, 2)))

    def test_matmul_batched(self):
        check(lambda a, b: ad.sum_(a @ b), t((5, 3, 4)), t((5, 4, 2)))

    def test_matmul_broadcast_left_2d(self):
        check(lambda a, b: ad.sum_(a @ b), t((3, 4)), t((6, 4, 2)))

    def test_embedding_accumulates(self):
        table = t((5, 3))
        ids = np.array([1, 1, 4])
        rec = ad.backward(ad.sum_(ad.embedding(table, ids)))
        g = rec[table]
        assert np.array_equal(g[1], np.full(3, 2.0))
        assert np.array_equal(g[0], np.zeros(3))

    def test_layer_norm(self):
        check(lambda x, g, b: ad.sum_(ad.layer_norm(x, g, b) ** 2.0),
              t((4, 6)), t((6,), shift=1.0), t((6,)))


class TestConv:
    @pytest.mark.parametrize("cin,cout,k,stride,pad,dil,L", [
        (1, 1, 3, 1, 1, 1, 8),
        (2, 3, 5, 1, 2, 1, 9),
        (3, 2, 5, 3, 2, 1, 17),
        (2, 2, 3, 1, 2, 2, 10),
        (1, 4, 7, 2, 3, 1, 16),
    ])
    def test_conv1d_grads(self, cin, cout, k, stride, pad, dil, L):
        check(lambda x, w, b: ad.sum_(ad.conv1d(x, w, b, stride, pad, dil) ** 2.0),
              t((2, cin, L)), t((cout, cin, k)), t((cout,)))

    @pytest.mark.parametrize("cin,cout,k,stride,pad,L", [
        (2, 3, 4, 2, 1, 6),
        (3, 1, 16, 8, 4, 5),
        (2, 2, 3, 1, 1, 7),
    ])
    def test_conv_transpose1d_grads(self, cin, cout, k, stride, pad, L):
        check(lambda x, w, b: ad.sum_(ad.conv_transpose1d(x, w, b, stride, pad) ** 2.0),
              t((2, cin, L)), t((cin, cout, k)), t((cout,)))

    def test_transpose_is_adjoint_of_conv(self):
        # <conv(x), y> must equal <x, conv_T(y)> for matching geometry.
        x = RNG.normal(size=(2, 3, 13))
        w = RNG.normal(size=(4, 3, 5))
        y_len = ad.conv1d(ad.Tensor(x), ad.Tensor(w), stride=2, pad=2).shape[2]
        y = RNG.normal(size=(2, 4, y_len))
        lhs = np.sum(ad.conv1d(ad.Tensor(x), ad.Tensor(w), stride=2, pad=2).data * y)
        # conv_transpose1d takes the same (4, 3, 5) weight read as (C_in, C_out, K)
        back = ad.conv_transpose1d(ad.Tensor(y), ad.Tensor(w), stride=2, pad=2).data
        rhs = np.sum(back * x)
        assert abs(lhs - rhs) / max(abs(lhs), 1.0) < 1e-10

    def test_decoder_geometry_exact_length(self):
        # kernel 2r, stride r, pad r/2 multiplies length exactly by r
        for r in (2, 4, 8):
            x = ad.Tensor(RNG.normal(size=(1, 2, 7)))
            w = ad.Tensor(RNG.normal(size=(2, 3, 2 * r)))
            out = ad.conv_transpose1d(x, w, stride=r, pad=r // 2)
            assert out.shape == (1, 3, 7 * r)


class TestBackwardContract:
    def test_fanout_accumulates_and_order_invariant(self):
        x = t((4,))
        a = ad.sum_(x * x + 3.0 * x)
        b = ad.sum_(3.0 * x + x * x)
        ga = ad.backward(a)[x]
        gb = ad.backward(b)[x]
        assert np.max(np.abs(ga - gb)) < 1e-12
        assert np.allclose(ga, 2 * x.data + 3.0)

    def test_unreached_parameter_absent(self):
        x, y = t((3,)), t((3,))
        rec = ad.backward(ad.sum_(x * 2.0))
        assert x in rec and y not in rec

    def test_stop_gradient_blocks(self):
        x = t((3,))
        rec = ad.backward(ad.sum_(ad.stop_gradient(x) * x))
        assert np.allclose(rec[x], x.data)  # only the direct factor path

    def test_stopped_branch_has_no_entry(self):
        x = t((3,))
        rec = ad.backward(ad.sum_(ad.stop_gradient(x * 2.0)))
        assert x not in rec

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ValueError, match="scalar"):
            ad.backward(t((3,)))

    def test_nan_is_hard_error(self):
        with pytest.raises(ad.NonFiniteError):
            ad.log(ad.Tensor(np.array([-1.0])))

    def test_inf_is_hard_error(self):
        with pytest.raises(ad.NonFiniteError):
            ad.exp(ad.Tensor(np.array([1e4])))

    def test_known_chain_rule(self):
        A = RNG.normal(size=(3, 3))
        x = t((3,))
        y = ad.sum_(ad.tanh(ad.Tensor(A) @ ad.reshape(x, 3, 1)))
        rec = ad.backward(y)
        pre = A @ x.data
        want = A.T @ (1.0 - np.tanh(pre) ** 2)
        assert np.allclose(rec[x], want, atol=1e-12)

    def test_no_grad_builds_constants(self):
        x = t((3,))
        with ad.no_grad():
            y = x * 2.0
        assert y._parents == () and not y._reach


class TestDropout:
    def test_mask_stored_and_reused(self):
        x = t((1000,), shift=5.0)
        y = ad.dropout(x, 0.5, np.random.default_rng(7))
        rec = ad.backward(ad.sum_(y))
        forward_zero = y.data == 0.0
        assert np.array_equal(rec[x] == 0.0, forward_zero)
        kept = ~forward_zero
        assert np.allclose(rec[x][kept], 2.0)  # 1/keep_prob
        assert 0.4 < forward_zero.mean() < 0.6

    def test_rate_zero_identity(self):
        x = t((5,))
        y = ad.dropout(x, 0.0, np.random.default_rng(0))
        assert y is x

    def test_replay_same_seed_same_mask(self):
        x = ad.Tensor(np.ones(64))
        a = ad.dropout(x, 0.3, np.random.default_rng(11)).data
        b = ad.dropout(x, 0.3, np.random.default_rng(11)).data
        assert np.array_equal(a, b)


class TestFiniteDiffCheck:
    def test_detects_nondeterminism(self):
        state = {"n": 0}

        def fn(x):
            state["n"] += 1
            return ad.sum_(x * float(state["n"]))

        with pytest.raises(ValueError, match="deterministic"):
            ad.finite_diff_check(fn, t((2,)))

    def test_smooth_fn_small_error(self):
        err = ad.finite_diff_check(lambda x: ad.sum_(ad.swish(x) ** 2.0), t((4,)))
        assert err < 1e-7


class TestModuleAndCheckpoint:
    def test_named_parameters_and_freeze(self):
        rng = np.random.default_rng(3)
        ln = nn.Linear(4, 2, rng)
        names = dict(ln.named_parameters())
        assert set(names) == {"weight", "bias"}
        ln.set_requires_grad(False)
        rec = ad.backward(ad.sum_(ln(ad.Tensor(RNG.normal(size=(3, 4))))))
        assert not rec

    def test_checkpoint_roundtrip(self, tmp_path):
        rng = np.random.default_rng(5)
        m = nn.Module()
        m.lin = nn.Linear(3, 2, rng)
        m.emb = nn.Embedding(7, 3, rng)
        path = tmp_path / "model.ckpt"
        ck.save_checkpoint(m, path)
        loaded = ck.load_checkpoint(path)
        assert list(loaded) == [n for n, _ in m.named_parameters()]
        for name, p in m.named_parameters():
            assert np.allclose(loaded[name], p.data, atol=1e-6)
        manifest = (tmp_path / "model.ckpt.manifest").read_text().splitlines()
        assert manifest[0].startswith("lin.weight 3x2")

    def test_checkpoint_float32_on_disk(self, tmp_path):
        m = nn.Module()
        m.x = nn.Parameter(np.array([1.0 + 1e-12]))
        path = tmp_path / "c.ckpt"
        ck.save_checkpoint(m, path)
        assert ck.load_checkpoint(path)["x"][0] == np.float32(1.0 + 1e-12)

    def test_load_into_name_matched_subset(self, tmp_path):
        rng = np.random.default_rng(9)
        src = nn.Module()
        src.shared = nn.Linear(3, 3, rng)
        src.head = nn.Linear(3, 10, rng)
        path = tmp_path / "pre.ckpt"
        ck.save_checkpoint(src, path)
        dst = nn.Module()
        dst.shared = nn.Linear(3, 3, rng)
        copied = ck.load_into(dst, str(path), strict=False)
        assert copied == ["shared.weight", "shared.bias"]
        assert np.allclose(dst.shared.weight.data, src.shared.weight.data, atol=1e-6)

    def test_load_into_shape_mismatch(self, tmp_path):
        rng = np.random.default_rng(9)
        src = nn.Module()
        src.lin = nn.Linear(3, 3, rng)
        path = tmp_path / "pre.ckpt"
        ck.save_checkpoint(src, path)
        dst = nn.Module()
        dst.lin = nn.Linear(3, 4, rng)
        with pytest.raises(ValueError, match="shape mismatch"):
            ck.load_into(dst, str(path), strict=False)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))
def test_broadcast_grad_shapes_match_inputs(a, b, c):
    x = ad.Tensor(np.ones((a, 1, c)))
    y = ad.Tensor(np.ones((b, 1)))
    x.requires_grad = x._reach = True
    y.requires_grad = y._reach = True
    rec = ad.backward(ad.sum_(x * y))
    assert rec[x].shape == x.data.shape
    assert rec[y].shape == y.data.shape
    assert np.allclose(rec[x], b)
    assert np.allclose(rec[y], a * c)


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 6), st.integers(1, 3), st.integers(1, 3))
def test_attention_layer_grads_exist(n, heads_pow, seed):
    heads = 2 ** (heads_pow - 1)
    dim = 4 * heads
    rng = np.random.default_rng(seed)
    attn = nn.SelfAttention(dim, heads, rng)
    x = ad.Tensor(rng.normal(size=(n, dim)))
    rec = ad.backward(ad.sum_(attn(x) ** 2.0))
    assert len(rec) == 8  # four projections, weight+bias each
