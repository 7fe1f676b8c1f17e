"""Soft alignment cost: closed forms, a full path-enumeration oracle, the
hard-minimum limit, and gradient checks."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxlab import autodiff as ad
from voxlab import softdtw

GAMMA, WARP = 0.01, 0.07


def enumerate_paths(I, J):
    """All monotone paths (1,1) -> (I,J) as lists of cells."""
    out = []

    def walk(i, j, path):
        if i == I and j == J:
            out.append(list(path))
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            ni, nj = i + di, j + dj
            if ni <= I and nj <= J:
                path.append((ni, nj))
                walk(ni, nj, path)
                path.pop()

    walk(1, 1, [(1, 1)])
    return out


def oracle(C, gamma, warp):
    I, J = C.shape
    costs = []
    for path in enumerate_paths(I, J):
        total = sum(C[i - 1, j - 1] for i, j in path)
        non_diag = sum(1 for a, b in zip(path, path[1:])
                       if b[0] - a[0] + b[1] - a[1] == 1)
        costs.append(total + warp * non_diag)
    return softdtw.soft_min(costs, gamma)


def hard_dtw(C, warp):
    I, J = C.shape
    R = np.full((I + 1, J + 1), np.inf)
    R[0, 0] = 0.0
    for i in range(1, I + 1):
        for j in range(1, J + 1):
            R[i, j] = C[i - 1, j - 1] + min(R[i - 1, j] + warp,
                                            R[i, j - 1] + warp,
                                            R[i - 1, j - 1])
    return R[I, J]


class TestSoftMin:
    def test_single_value(self):
        assert softdtw.soft_min([3.5], GAMMA) == 3.5

    def test_matches_direct_formula(self):
        v = [0.3, 0.1, 0.9]
        want = -0.5 * np.log(np.sum(np.exp(-np.asarray(v) / 0.5)))
        assert abs(softdtw.soft_min(v, 0.5) - want) < 1e-12

    def test_large_values_stable(self):
        assert np.isfinite(softdtw.soft_min([1e6, 1e6 + 1], 0.01))

    def test_tends_to_min(self):
        assert abs(softdtw.soft_min([2.0, 3.0], 1e-9) - 2.0) < 1e-6

    def test_below_min(self):
        assert softdtw.soft_min([1.0, 1.0], 0.1) < 1.0

    def test_gamma_validation(self):
        with pytest.raises(ValueError, match="gamma"):
            softdtw.soft_min([1.0], 0.0)


class TestClosedForms:
    def test_1x1(self):
        c = 0.37
        got = softdtw.soft_dtw_cost(np.array([[c]]), GAMMA, WARP)
        assert abs(got.item() - c) < 1e-12

    def test_2x2_uniform(self):
        c = 0.25
        C = np.full((2, 2), c)
        want = softdtw.soft_min([2 * c, 3 * c + 2 * WARP, 3 * c + 2 * WARP], GAMMA)
        got = softdtw.soft_dtw_cost(C, GAMMA, WARP).item()
        assert abs(got - want) < 1e-12

    def test_1xJ_is_row_sum_plus_warp(self):
        C = np.array([[0.1, 0.2, 0.3, 0.4]])
        want = C.sum() + 3 * WARP  # single path, 3 horizontal steps
        assert abs(softdtw.soft_dtw_cost(C, GAMMA, WARP).item() - want) < 1e-12


class TestOracle:
    @pytest.mark.parametrize("shape", [(2, 2), (3, 2), (3, 3), (4, 3), (5, 4)])
    def test_enumeration_small(self, shape):
        rng = np.random.default_rng(hash(shape) % 2 ** 31)
        for trial in range(40):
            C = rng.uniform(0.0, 1.0, size=shape)
            got = softdtw.soft_dtw_cost(C, GAMMA, WARP).item()
            want = oracle(C, GAMMA, WARP)
            assert abs(got - want) <= 1e-9 * max(1.0, abs(want))

    def test_hard_limit(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            C = rng.uniform(0.0, 2.0, size=(6, 5))
            soft = softdtw.soft_dtw_cost(C, 1e-6, WARP).item()
            hard = hard_dtw(C, WARP)
            assert abs(soft - hard) < 1e-4

    def test_soft_lower_bounds_hard(self):
        rng = np.random.default_rng(8)
        for _ in range(25):
            C = rng.uniform(0.0, 1.0, size=(5, 5))
            assert softdtw.soft_dtw_cost(C, 0.1, WARP).item() <= hard_dtw(C, WARP) + 1e-12


class TestGradient:
    def test_matches_finite_difference(self):
        rng = np.random.default_rng(9)
        C = ad.Tensor(rng.uniform(0.2, 1.0, size=(4, 3)))
        err = ad.finite_diff_check(
            lambda c: softdtw.soft_dtw_cost(c, GAMMA, WARP), C, step=1e-6)
        assert err < 1e-3

    def test_matches_finite_difference_smooth_gamma(self):
        rng = np.random.default_rng(10)
        C = ad.Tensor(rng.uniform(0.2, 1.0, size=(5, 4)))
        err = ad.finite_diff_check(
            lambda c: softdtw.soft_dtw_cost(c, 0.3, WARP), C, step=1e-6)
        assert err < 1e-6

    def test_occupancy_total_mass(self):
        # gradient sums to the expected path length: between max(I,J) and I+J-1
        rng = np.random.default_rng(11)
        C = ad.Tensor(rng.uniform(size=(6, 4)), requires_grad=True)
        rec = ad.backward(softdtw.soft_dtw_cost(C, 0.05, WARP))
        total = rec[C].sum()
        assert 6 - 1e-6 <= total <= 9 + 1e-6
        assert np.all(rec[C] >= -1e-12)


class TestValidation:
    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            softdtw.soft_dtw_cost(np.zeros((0, 3)), GAMMA, WARP)

    def test_nonfinite_rejected(self):
        with pytest.raises(ad.NonFiniteError):
            softdtw.soft_dtw_cost(np.array([[np.nan]]), GAMMA, WARP)

    def test_negative_warp_rejected(self):
        with pytest.raises(ValueError, match="warp"):
            softdtw.soft_dtw_cost(np.ones((2, 2)), GAMMA, -0.1)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 10 ** 6))
def test_monotone_in_each_cell(I, J, seed):
    rng = np.random.default_rng(seed)
    C = rng.uniform(0.0, 1.0, size=(I, J))
    base = softdtw.soft_dtw_cost(C, 0.05, WARP).item()
    i, j = rng.integers(I), rng.integers(J)
    C2 = C.copy()
    C2[i, j] += 0.5
    assert softdtw.soft_dtw_cost(C2, 0.05, WARP).item() >= base - 1e-12
