"""Durator contracts: boundary matrices, upsampling attention, prior, grads."""

import numpy as np
import pytest

from voxlab import autodiff as ad
from voxlab import duration, nn


def rng_():
    return np.random.default_rng(0)


class TestBoundaryMatrices:
    def test_closed_form_small(self):
        S, E = duration.build_boundary_matrices(ad.Tensor([2.0, 1.0]), m=3)
        # 1-indexed closed forms, checked by hand
        assert S.data[0, 0] == 1.0 and S.data[0, 1] == -1.0
        assert E.data[0, 0] == 1.0 and E.data[0, 1] == 2.0
        assert S.data[1, 1] == 0.0 and E.data[1, 1] == 1.0

    def test_sum_identity_exact_on_integers(self):
        d = ad.Tensor([2.0, 1.0, 4.0])
        S, E = duration.build_boundary_matrices(d, m=7)
        assert np.array_equal(S.data + E.data, np.broadcast_to(d.data, (7, 3)))

    def test_sum_identity_random(self):
        d = ad.Tensor(rng_().uniform(0.5, 8.0, size=5))
        S, E = duration.build_boundary_matrices(d, m=12)
        assert np.allclose(S.data + E.data, d.data, rtol=0, atol=1e-9)

    def test_matches_cumsum_oracle(self):
        dv = rng_().uniform(0.5, 6.0, size=4)
        S, E = duration.build_boundary_matrices(ad.Tensor(dv), m=9)
        prefix = np.concatenate([[0.0], np.cumsum(dv)[:-1]])
        for i in range(9):
            for j in range(4):
                assert S.data[i, j] == pytest.approx(i + 1 - prefix[j], abs=1e-12)
                assert E.data[i, j] == pytest.approx(
                    prefix[j] + dv[j] - (i + 1), abs=1e-12)

    def test_doubling_scales_linearly(self):
        dv = np.array([1.5, 2.25, 0.75])
        S1, E1 = duration.build_boundary_matrices(ad.Tensor(dv), m=4)
        S2, E2 = duration.build_boundary_matrices(ad.Tensor(2.0 * dv), m=8)
        # frame 2i of the doubled grid sits where frame i did, scaled by 2
        assert np.array_equal(S2.data[1::2], 2.0 * S1.data)
        assert np.array_equal(E2.data[1::2], 2.0 * E1.data)

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            duration.build_boundary_matrices(ad.Tensor([1.0]), m=0)


class TestEinsum:
    def test_matches_numpy_einsum(self):
        rng = rng_()
        w = rng.normal(size=(4, 6, 3))
        c = rng.normal(size=(6, 3, 2))
        out = duration.einsum_qmn_mnp(ad.Tensor(w), ad.Tensor(c))
        assert np.allclose(out.data, np.einsum("qmn,mnp->qmp", w, c), atol=1e-12)

    def test_gradient(self):
        rng = rng_()
        w = ad.Tensor(rng.normal(size=(2, 3, 4)))
        c = ad.Tensor(rng.normal(size=(3, 4, 2)))
        err = ad.finite_diff_check(
            lambda a, b: duration.einsum_qmn_mnp(a, b).sum(), (w, c))
        assert err < 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            duration.einsum_qmn_mnp(ad.Tensor(np.zeros((2, 3, 4))),
                                    ad.Tensor(np.zeros((5, 4, 2))))


class TestPredictor:
    def test_constant_network_gives_constant_durations(self):
        pred = duration.DurationPredictor(8, 12, 3, rng_())
        pred.out.weight.data[...] = 0.0
        pred.out.bias.data[...] = 0.7
        H = ad.Tensor(rng_().normal(size=(5, 8)))
        d = duration.predict_durations(pred, H)
        assert np.allclose(d.data, np.exp(0.7), atol=1e-12)
        assert d.shape == (5,)

    def test_gradient_stopped_at_input(self):
        pred = duration.DurationPredictor(8, 12, 3, rng_())
        H = ad.Tensor(rng_().normal(size=(4, 8)), requires_grad=True)
        rec = ad.backward(pred(H).sum())
        assert H not in rec
        assert any(p in rec for p in pred.parameters())

    def test_output_length(self):
        pred = duration.DurationPredictor(8, 12, 3, rng_())
        for n in (1, 3, 9):
            H = ad.Tensor(np.zeros((n, 8)))
            assert pred(H).shape == (n,)


class TestUpsampler:
    def test_single_phoneme_attention_is_one(self):
        ups = duration.LearnableUpsampler(8, rng_())
        H = ad.Tensor(rng_().normal(size=(1, 8)))
        res = ups(H, ad.Tensor([4.0]), m=5)
        assert np.allclose(res.W.data, 1.0, atol=1e-12)
        assert res.O.shape == (5, 8)

    def test_attention_normalized_over_phonemes(self):
        ups = duration.LearnableUpsampler(8, rng_())
        H = ad.Tensor(rng_().normal(size=(4, 8)))
        res = ups(H, ad.Tensor([2.0, 1.0, 3.0, 1.5]), m=7)
        sums = res.W.data.sum(axis=1)
        assert np.allclose(sums, 1.0, atol=1e-9)
        assert res.W.data.min() >= 0.0
        assert res.W.shape == (7, 4, 4) and res.C.shape == (7, 4, 2)

    def test_gradient_in_durations(self):
        ups = duration.LearnableUpsampler(6, rng_())
        H = ad.Tensor(rng_().normal(size=(3, 6)))
        d0 = ad.Tensor(np.array([2.0, 1.5, 2.5]))
        err = ad.finite_diff_check(lambda d: ups(H, d, 6).O.mean(), d0)
        assert err < 1e-3

    def test_gradient_in_hiddens(self):
        ups = duration.LearnableUpsampler(6, rng_())
        H0 = ad.Tensor(rng_().normal(size=(3, 6)))
        d = ad.Tensor(np.array([2.0, 1.0, 2.0]))
        err = ad.finite_diff_check(lambda H: ups(H, d, 5).O.mean(), H0)
        assert err < 1e-3

    def test_rejects_empty(self):
        ups = duration.LearnableUpsampler(6, rng_())
        with pytest.raises(ValueError):
            ups(ad.Tensor(np.zeros((2, 6))), ad.Tensor([1.0, 1.0]), m=0)


class TestPrior:
    def test_zero_weight_reduction(self):
        prior = duration.PriorProjection(5, rng_())
        for p in prior.parameters():
            p.data[...] = 0.0
        O = ad.Tensor(rng_().normal(size=(4, 5)))
        mu, sigma = prior(O)
        assert np.allclose(mu.data, 0.0, atol=1e-12)
        want = np.log(2.0) + duration.VARIANCE_FLOOR
        assert np.allclose(sigma.data, want, atol=1e-12)

    def test_sigma_floor(self):
        prior = duration.PriorProjection(5, rng_())
        prior.scale.bias.data[...] = -40.0
        _, sigma = prior(ad.Tensor(np.zeros((6, 5))))
        assert np.all(sigma.data >= duration.VARIANCE_FLOOR)

    def test_shapes(self):
        prior = duration.PriorProjection(7, rng_())
        mu, sigma = prior(ad.Tensor(np.zeros((9, 7))))
        assert mu.shape == (9, 7) and sigma.shape == (9, 7)


class TestDurator:
    def test_end_to_end_gradient_reaches_predictor(self):
        dur = duration.Durator(8, 12, 3, rng_())
        H = ad.Tensor(rng_().normal(size=(4, 8)))
        out = dur(H, m=9)
        rec = ad.backward(out.upsample.O.sum())
        pred_params = set(map(id, dur.predictor.parameters()))
        hit = [p for p in rec if id(p) in pred_params]
        assert hit, "upsampling path carries no gradient to the predictor"
        assert any(np.any(rec[p] != 0.0) for p in hit)

    def test_inference_frame_count(self):
        dur = duration.Durator(8, 12, 3, rng_())
        dur.predictor.out.weight.data[...] = 0.0
        dur.predictor.out.bias.data[...] = np.log(3.0)
        H = ad.Tensor(np.zeros((4, 8)))
        out = dur(H)          # durations all 3.0 -> m = 12
        assert out.m == 12
        assert out.mu.shape == (12, 8)

    def test_frame_count_floor_is_one(self):
        dur = duration.Durator(8, 12, 3, rng_())
        dur.predictor.out.weight.data[...] = 0.0
        dur.predictor.out.bias.data[...] = -8.0
        out = dur(ad.Tensor(np.zeros((2, 8))))
        assert out.m == 1

    def test_supervision_loss(self):
        log_d = ad.Tensor(np.log([2.0, 3.0]), requires_grad=True)
        loss = duration.duration_supervision_loss(log_d, [2, 3])
        assert loss.data == 0.0
        loss2 = duration.duration_supervision_loss(log_d, [4, 6])
        assert loss2.data == pytest.approx(np.log(2.0) ** 2, rel=1e-12)
        with pytest.raises(ValueError):
            duration.duration_supervision_loss(log_d, [0, 1])
