import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import minimize
from scipy.special import expit, log_ndtr, ndtr

from latentps.errors import DataError, SeparationError
from latentps.propensity import (
    ate_weights,
    att_weights,
    fit_glm_binary,
    fit_ps_weights,
    propensity_scores,
    ps_design,
)


def _direct_mle(X, y, link, w=None):
    w = np.ones_like(y) if w is None else w

    def nll(b):
        eta = X @ b
        if link == "logit":
            return -np.sum(w * (y * eta - np.logaddexp(0, eta)))
        return -np.sum(w * (y * log_ndtr(eta) + (1 - y) * log_ndtr(-eta)))
    return minimize(nll, np.zeros(X.shape[1]), method="BFGS", options={"gtol": 1e-9}).x


def _sample(rng, n=800, link="logit"):
    z = rng.normal(size=(n, 2))
    X = ps_design(z)
    eta = X @ np.array([-0.4, 0.8, -0.5])
    p = expit(eta) if link == "logit" else ndtr(eta)
    return X, (rng.random(n) < p).astype(float)


class TestFitGlmBinary:
    @pytest.mark.parametrize("link", ["logit", "probit"])
    def test_matches_direct_likelihood_maximization(self, rng, link):
        X, y = _sample(rng, link=link)
        np.testing.assert_allclose(fit_glm_binary(X, y, link), _direct_mle(X, y, link), atol=1e-5)

    def test_case_weights_equal_replication(self, rng):
        X, y = _sample(rng, n=300)
        w = rng.integers(1, 4, 300).astype(float)
        rep = np.repeat(np.arange(300), w.astype(int))
        np.testing.assert_allclose(fit_glm_binary(X, y, weights=w), fit_glm_binary(X[rep], y[rep]), atol=1e-9)

    def test_separation_raises(self):
        x = np.linspace(-1, 1, 40)
        with pytest.raises(SeparationError):
            fit_glm_binary(ps_design(x), (x > 0).astype(float))

    def test_rank_deficient_design(self, rng):
        z = rng.normal(size=50)
        with pytest.raises(DataError):
            fit_glm_binary(ps_design(np.column_stack([z, 2 * z])), (z > 0.3).astype(float) * (rng.random(50) < .8))


class TestWeights:
    @given(e=st.floats(1e-6, 1 - 1e-6), a=st.integers(0, 1))
    def test_ate_and_att_weights(self, e, a):
        np.testing.assert_allclose(ate_weights([e], [a]), [1 / e if a else 1 / (1 - e)])
        np.testing.assert_allclose(att_weights([e], [a]), [1.0 if a else e / (1 - e)])

    def test_scores_are_clamped(self):
        e = propensity_scores(np.array([100.0]), np.ones((1, 1)))
        assert e[0] == 1 - 1e-12

    def test_logit_score_equations_balance_overlap_weights(self, rng):
        # sum (a - e) x = 0 at the logit MLE, i.e. weights a(1-e) and (1-a)e balance x exactly.
        X, y = _sample(rng)
        q, e = fit_ps_weights(X[:, 1:], None, y)
        np.testing.assert_allclose((y * (1 - e)) @ X, ((1 - y) * e) @ X, atol=1e-7)
        np.testing.assert_allclose(q, ate_weights(e, y))

    def test_design_columns(self):
        d = ps_design(np.arange(3.0), np.ones((3, 2)))
        assert d.shape == (3, 4)
        np.testing.assert_array_equal(d[:, 0], 1.0)
