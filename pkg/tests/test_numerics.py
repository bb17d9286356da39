import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sctlab.numerics import (
    cosine_matrix,
    cosine_sim,
    finite_diff_grad,
    log_sum_exp,
    make_rng,
    max_rel_error,
    safe_log,
    softmax,
)

finite_vecs = st.lists(
    st.floats(min_value=-50, max_value=50, allow_nan=False), min_size=1, max_size=12
)


class TestCosineSim:
    def test_identical_unit_vectors(self):
        assert cosine_sim([1.0, 0.0], [1.0, 0.0]) == 1.0

    def test_orthogonal(self):
        assert cosine_sim([1.0, 0.0], [0.0, 1.0]) == 0.0

    def test_45_degrees(self):
        # independent scalar evaluation: 1/sqrt(2)
        assert cosine_sim([1.0, 0.0], [1.0, 1.0]) == pytest.approx(0.70710678, abs=1e-8)

    def test_zero_norm_names_argument(self):
        with pytest.raises(ValueError, match="'u'"):
            cosine_sim([0.0, 0.0], [1.0, 0.0])
        with pytest.raises(ValueError, match="'v'"):
            cosine_sim([1.0, 0.0], [0.0, 0.0])

    def test_symmetric_and_scale_invariant(self):
        rng = make_rng(7)
        for _ in range(20):
            u = rng.normal(size=5)
            v = rng.normal(size=5)
            a, b = rng.uniform(0.1, 10, size=2)
            assert cosine_sim(u, v) == pytest.approx(cosine_sim(v, u), abs=1e-12)
            assert cosine_sim(a * u, b * v) == pytest.approx(cosine_sim(u, v), abs=1e-12)

    def test_range(self):
        rng = make_rng(8)
        for _ in range(50):
            u, v = rng.normal(size=(2, 4))
            assert -1.0 <= cosine_sim(u, v) <= 1.0


class TestSoftmax:
    def test_uniform_under_equal_logits(self):
        for c in (0.0, -3.5, 1e4):
            np.testing.assert_allclose(softmax([c] * 4, 1.0), [0.25] * 4, atol=1e-12)

    def test_two_logit_value(self):
        # scalar evaluation of e/(e+1)
        np.testing.assert_allclose(
            softmax([1.0, 0.0], 1.0), [0.73105858, 0.26894142], atol=1e-8
        )

    def test_tau_must_be_positive(self):
        with pytest.raises(ValueError):
            softmax([1.0, 2.0], 0.0)
        with pytest.raises(ValueError):
            softmax([1.0, 2.0], -1.0)

    @settings(deadline=None, max_examples=80)
    @given(finite_vecs, st.floats(min_value=1e-3, max_value=1e6))
    def test_sums_to_one(self, logits, tau):
        p = softmax(logits, tau)
        assert abs(p.sum() - 1.0) < 1e-12
        assert np.all(p >= 0)
        if (np.max(logits) - np.min(logits)) / tau < 700:  # exp has not underflowed
            assert np.all(p > 0)

    @settings(deadline=None, max_examples=80)
    @given(finite_vecs, st.floats(min_value=-100, max_value=100))
    def test_shift_invariance(self, logits, c):
        base = softmax(logits, 1.0)
        shifted = softmax(np.asarray(logits) + c, 1.0)
        assert np.max(np.abs(base - shifted)) < 1e-12


class TestLogSumExp:
    def test_two_zeros(self):
        assert log_sum_exp([0.0, 0.0], 1.0) == pytest.approx(np.log(2.0), abs=1e-12)

    def test_single_entry_exact(self):
        for z in (0.3, -17.25, 1e8):
            for tau in (1.0, 0.1, 3.0):
                assert log_sum_exp([z], tau) == z

    def test_large_values_no_overflow(self):
        assert log_sum_exp([1000.0, 1000.0], 1.0) == pytest.approx(
            1000.0 + np.log(2.0), rel=1e-12
        )

    def test_tau_must_be_positive(self):
        with pytest.raises(ValueError):
            log_sum_exp([1.0], 0.0)

    @settings(deadline=None, max_examples=80)
    @given(finite_vecs, st.floats(min_value=1e-3, max_value=1e3))
    def test_bounds(self, logits, tau):
        z = np.asarray(logits)
        val = log_sum_exp(z, tau)
        assert val >= z.max()
        upper = z.max() + tau * np.log(len(logits))
        assert val <= upper + 1e-9 * (1.0 + abs(upper))


class TestFiniteDiffGrad:
    def test_quadratic(self):
        grad = finite_diff_grad(lambda x: float(np.sum(x**2)), np.array([1.0, 2.0]), 1e-5)
        np.testing.assert_allclose(grad, [2.0, 4.0], atol=1e-6)

    def test_constant_function(self):
        grad = finite_diff_grad(lambda x: 3.25, np.array([0.1, -0.4, 2.0]), 1e-5)
        np.testing.assert_array_equal(grad, np.zeros(3))

    def test_softmax_cross_entropy_matches_analytic(self):
        # analytic gradient of -log softmax(z)_y is p - onehot(y)
        rng = make_rng(11)
        z = rng.normal(size=6)
        y = 2

        def f(v):
            return float(-np.log(softmax(v, 1.0)[y]))

        p = softmax(z, 1.0)
        expected = p.copy()
        expected[y] -= 1.0
        np.testing.assert_allclose(finite_diff_grad(f, z, 1e-5), expected, atol=1e-6)

    def test_h_must_be_positive(self):
        with pytest.raises(ValueError):
            finite_diff_grad(lambda x: 0.0, np.zeros(2), 0.0)

    def test_non_finite_propagates(self):
        with pytest.raises(FloatingPointError):
            finite_diff_grad(lambda x: float("nan"), np.zeros(2), 1e-5)


class TestSeededRng:
    def test_same_seed_same_stream(self):
        a = make_rng(123).normal(size=100)
        b = make_rng(123).normal(size=100)
        np.testing.assert_array_equal(a, b)

    def test_different_seeds_differ(self):
        a = make_rng(123).normal(size=100)
        b = make_rng(124).normal(size=100)
        assert np.any(a != b)

    def test_tags_give_independent_streams(self):
        a = make_rng(5, 1).normal(size=10)
        b = make_rng(5, 2).normal(size=10)
        assert np.any(a != b)


class TestHelpers:
    def test_safe_log_clamps(self):
        assert safe_log(np.array([0.0]))[0] == pytest.approx(np.log(1e-12))
        assert safe_log(np.array([0.5]))[0] == pytest.approx(np.log(0.5))

    def test_max_rel_error_zero_gradients(self):
        assert max_rel_error(np.zeros(3), np.zeros(3)) == 0.0

    def test_max_rel_error_scale_invariant(self):
        a = np.array([1.0, 2.0])
        b = np.array([1.0, 2.0 + 2e-5])
        assert max_rel_error(a, b) == pytest.approx(1e-5, rel=1e-3)

    def test_cosine_matrix_matches_scalar(self):
        rng = make_rng(3)
        rows = rng.normal(size=(4, 6))
        text = rng.normal(size=(3, 6))
        mat = cosine_matrix(rows, text)
        for i in range(4):
            for j in range(3):
                assert mat[i, j] == pytest.approx(cosine_sim(rows[i], text[j]), abs=1e-12)
