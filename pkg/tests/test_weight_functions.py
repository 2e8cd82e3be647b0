import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import ndtr

from latentps.dgp import ScenarioConfig
from latentps.errors import DataError, NumericalError
from latentps.weight_functions import (
    LogitNormalParams,
    q0_weight,
    q1_weight,
    var_mle,
    weight_bias_experiment,
    x_mle,
    x_star,
)

R = np.array([0.4, 0.6, 0.4, 0.6, 0.4])


def canonical_params(beta_x=0.5):
    # Items W = r X + e with Var(e) = 1 - r^2, no intercepts or direct effects.
    return LogitNormalParams(beta0=-0.97, beta_x=beta_x, beta_z=[0.5], lam0=np.zeros(5), lam_x=R,
                             lam_z=np.zeros((5, 1)), Sigma=np.diag(1 - R ** 2))


class TestParams:
    def test_zero_loadings_rejected(self):
        with pytest.raises(DataError):
            LogitNormalParams(0, 1, [0], [0, 0], [0, 0], [[0], [0]], np.eye(2))

    def test_indefinite_sigma(self):
        with pytest.raises(NumericalError):
            LogitNormalParams(0, 1, [0], [0, 0], [1, 1], [[0], [0]], [[1, 2], [2, 1]])

    def test_var_mle(self):
        assert var_mle(canonical_params()) == pytest.approx(1 / np.sum(R ** 2 / (1 - R ** 2)))


class TestQ1:
    @given(z=st.floats(-3, 3), x=st.floats(-3, 3), a=st.integers(0, 1), beta_x=st.floats(-1.5, 1.5))
    def test_closed_form_equals_shifted_form(self, z, x, a, beta_x):
        p = canonical_params(beta_x)
        w = (x * R + 0.3)[None, :]
        q = q1_weight(w, [z], [a], p)
        eta = p.beta0 + p.beta_x * x_star(w, [z], [a], p) + p.beta_z[0] * z
        np.testing.assert_allclose(q, 1 + np.exp((1 - 2 * a) * eta), rtol=1e-12)

    def test_x_mle_unbiased_with_variance_v(self):
        p = canonical_params()
        rng = np.random.default_rng(0)
        w = 0.7 * R + rng.normal(size=(200_000, 5)) * np.sqrt(1 - R ** 2)
        xm = x_mle(w, np.zeros(200_000), p)
        assert xm.mean() == pytest.approx(0.7, abs=0.01)
        assert xm.var() == pytest.approx(var_mle(p), rel=0.02)

    def test_conditional_mean_equals_q0(self):
        p = canonical_params()
        rng = np.random.default_rng(1)
        for z, x, a in [(0.3, -0.5, 1), (-1.0, 1.2, 0), (0.0, 0.0, 1)]:
            w = x * R + rng.normal(size=(100_000, 5)) * np.sqrt(1 - R ** 2)
            q1 = q1_weight(w, np.full(100_000, z), np.full(100_000, a), p)
            q0 = q0_weight([z], [x], [a], p)[0]
            assert abs(q1.mean() - q0) < 3 * q1.std() / np.sqrt(q1.size)

    def test_probit_q0(self):
        p = canonical_params()
        e = ndtr(-0.97)
        np.testing.assert_allclose(q0_weight([0.0, 0.0], [0.0, 0.0], [1, 0], p, "probit"), [1 / e, 1 / (1 - e)])


def test_weight_bias_experiment_small():
    res = weight_bias_experiment(ScenarioConfig(n=300, scenario_id="wb-small"), m_reps=30)
    t = res.table
    assert res.n_skipped == 0 and len(t) == 300
    assert (np.diff(t.q0) >= 0).all()
    assert {"bias_q", "bias_qW", "bias_q1", "se_q1"} <= set(t.columns)
    assert res.rank_corr.size == 30 and res.rank_corr.min() > 0.95
