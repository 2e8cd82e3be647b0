import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from latentps.quadrature import gauss_hermite


class TestGaussHermite:
    def test_weights_sum_to_one_and_positive(self):
        rule = gauss_hermite(21)
        np.testing.assert_allclose(rule.weights.sum(), 1.0, rtol=1e-13)
        assert (rule.weights > 0).all()

    @pytest.mark.parametrize("k", range(0, 41, 2))
    def test_exact_even_normal_moments(self, k):
        # 21 nodes integrate polynomials up to degree 41 exactly; E[T^k] = (k-1)!!.
        exact = np.prod(np.arange(k - 1, 0, -2, dtype=float))
        got = gauss_hermite(21).expect(lambda t: t[:, 0] ** k)
        np.testing.assert_allclose(got, exact, rtol=1e-10)

    def test_rule_is_symmetric(self):
        rule = gauss_hermite(21)
        np.testing.assert_allclose(rule.points, -rule.points[::-1], atol=1e-13)
        np.testing.assert_allclose(rule.weights, rule.weights[::-1], rtol=1e-12)

    def test_two_dimensional_tensor(self):
        rule = gauss_hermite(9, dim=2)
        nodes, w = rule.tensor()
        assert nodes.shape == (81, 2)
        np.testing.assert_allclose(w.sum(), 1.0)
        np.testing.assert_allclose(rule.expect(lambda t: t[:, 0] ** 2 * t[:, 1] ** 2), 1.0, rtol=1e-12)
        np.testing.assert_allclose(rule.expect(lambda t: t[:, 0] * t[:, 1]), 0.0, atol=1e-13)

    def test_rejects_three_dimensions(self):
        with pytest.raises(ValueError):
            gauss_hermite(5, dim=3)

    def test_cached_arrays_are_read_only(self):
        rule = gauss_hermite(11)
        with pytest.raises(ValueError):
            rule.points[0] = 1.0

    @given(mu=st.floats(-3, 3), s=st.floats(0.2, 3))
    def test_expectation_of_exp_matches_lognormal_mean(self, mu, s):
        got = gauss_hermite(41).expect(lambda t: np.exp(mu + s * t[:, 0]))
        np.testing.assert_allclose(got, np.exp(mu + s * s / 2), rtol=1e-8)
