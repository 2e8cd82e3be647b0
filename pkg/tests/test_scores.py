import numpy as np
import pytest

from latentps.errors import DataError, NumericalError
from latentps.scores import (
    STRATEGIES,
    ProxyScores,
    compute_proxy,
    latent_sd,
    read_scores,
    scores_frame,
    summary_scores,
)


class TestProxyScores:
    def test_unknown_strategy(self):
        with pytest.raises(DataError):
            ProxyScores("mean", np.zeros(3), ("x",))

    def test_non_finite(self):
        with pytest.raises(NumericalError):
            ProxyScores("iFS", np.array([0.0, np.inf]), ("x",))

    def test_block_count(self):
        with pytest.raises(DataError):
            ProxyScores("iFS", np.zeros((3, 2)), ("x",))


class TestComputeProxy:
    @pytest.mark.parametrize("strategy", STRATEGIES)
    def test_every_strategy(self, canonical_small, strategy):
        sim = canonical_small
        scores, _ = compute_proxy(strategy, sim.data, x=sim.x)
        assert scores.n == sim.data.n and np.isfinite(scores.values).all()
        if strategy != "all_items":
            assert np.corrcoef(scores.values[:, 0], sim.x)[0, 1] > 0.6

    def test_summary_is_item_mean(self, canonical_small):
        data = canonical_small.data
        np.testing.assert_allclose(summary_scores(data).values[:, 0], data.w.mean(axis=1))

    def test_true_x_needs_values(self, canonical_small):
        with pytest.raises(DataError):
            compute_proxy("true_X", canonical_small.data)

    def test_latent_sd_rescales_to_unit_variance(self, canonical_small):
        sim = canonical_small
        scores, model = compute_proxy("iFS", sim.data)
        sd = latent_sd(model, sim.data)[0]
        # Var(X) = 1 in the simulation and Var(X | Z) = 1 in the model, so sd ~ 1 / sqrt(1 - rho^2).
        assert sd == pytest.approx(1 / np.sqrt(1 - 0.4 ** 2), rel=0.1)


class TestScoresFile:
    def test_round_trip(self, canonical_small, tmp_path):
        data = canonical_small.data
        scores = [summary_scores(data), ProxyScores("all_items", data.w, data.block_names)]
        scores_frame(scores, data.unit_id).to_csv(tmp_path / "s.csv", index=False)
        back = read_scores(tmp_path / "s.csv")
        assert set(back) == {"summary", "all_items"}
        np.testing.assert_allclose(back["summary"].values, scores[0].values)
        np.testing.assert_allclose(back["all_items"].values, data.w)
