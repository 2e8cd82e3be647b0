import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from latentps.balance import balance_table, smd, weighted_means, weighted_moment_diffs
from latentps.errors import DataError
from latentps.scores import summary_scores


class TestWeightedMeans:
    def test_hand_computed(self):
        v = np.array([1.0, 2.0, 3.0, 4.0])
        a = np.array([1, 1, 0, 0])
        q = np.array([1.0, 3.0, 2.0, 2.0])
        m1, m0 = weighted_means(v, a, q)
        assert m1 == pytest.approx(7 / 4)
        assert m0 == pytest.approx(3.5)

    def test_zero_arm_weight_raises(self):
        with pytest.raises(DataError):
            weighted_means([1.0, 2.0], [1, 0], [1.0, 0.0])

    def test_negative_weight_raises(self):
        with pytest.raises(DataError):
            weighted_means([1.0, 2.0], [1, 0], [1.0, -1.0])

    @given(arrays(float, 12, elements=st.floats(-5, 5)), st.floats(0.1, 10))
    def test_invariant_to_weight_scale(self, v, c):
        a = np.tile([0, 1], 6)
        q = np.linspace(0.5, 2, 12)
        np.testing.assert_allclose(weighted_means(v, a, q), weighted_means(v, a, c * q), atol=1e-10)


class TestMomentDiffs:
    def test_raw_moments(self):
        v = np.array([1.0, 2.0, -1.0, 3.0])
        a = np.array([1, 1, 0, 0])
        d = weighted_moment_diffs(v, a, k_max=3)
        np.testing.assert_allclose(d, [1.5 - 1.0, 2.5 - 5.0, 4.5 - 13.0])

    def test_identical_arms_give_zero(self):
        v = np.array([0.3, -1.2, 0.7])
        d = weighted_moment_diffs(np.r_[v, v], np.r_[np.ones(3), np.zeros(3)], k_max=5)
        np.testing.assert_allclose(d, 0.0, atol=1e-14)


class TestSmd:
    def test_exposed_sd_denominator(self):
        v = np.array([1.0, 3.0, 0.0, 0.0, 2.0])
        a = np.array([1, 1, 0, 0, 0])
        assert smd(v, a) == pytest.approx((2.0 - 2 / 3) / np.std([1.0, 3.0], ddof=1))

    def test_pooled_denominator(self):
        v = np.array([1.0, 3.0, 0.0, 0.0, 2.0])
        a = np.array([1, 1, 0, 0, 0])
        sd = np.sqrt(0.5 * (np.var([1.0, 3.0], ddof=1) + np.var([0.0, 0.0, 2.0], ddof=1)))
        assert smd(v, a, pooled=True) == pytest.approx((2.0 - 2 / 3) / sd)

    def test_constant_exposed_raises(self):
        with pytest.raises(DataError):
            smd([1.0, 1.0, 0.0], [1, 1, 0])


class TestBalanceTable:
    def test_columns_and_rows(self, canonical_small):
        data = canonical_small.data
        s = summary_scores(data)
        table = balance_table(data, [s], {"w": np.ones(data.n)})
        assert list(table.variable) == ["z", "summary:x"]
        assert {"mean_exposed", "mean_unexposed", "smd", "mean_exposed_w", "mean_unexposed_w",
                "smd_w"} <= set(table.columns)
        # Unit weights reproduce the unweighted columns.
        np.testing.assert_allclose(table.smd, table.smd_w)

    def test_mismatched_scores_raise(self, canonical_small):
        data = canonical_small.data
        with pytest.raises(DataError):
            balance_table(data.take(np.arange(10)), [summary_scores(data)])
