import numpy as np
import pandas as pd
import pytest

from latentps.dgp import ScenarioConfig
from latentps.errors import DataError
from latentps.experiments import (
    LONG_COLUMNS,
    PREVALENCE_AXIS,
    aggregate,
    figure_scenarios,
    reproduce_figure,
    run_scenario,
)

SMALL = ScenarioConfig(n=300, scenario_id="exp-tests")


@pytest.fixture(scope="module")
def small_run():
    return run_scenario(SMALL, ("summary", "iFS"), reps=4)


class TestRunScenario:
    def test_long_layout(self, small_run):
        long = small_run.long
        assert tuple(long.columns) == LONG_COLUMNS
        assert set(long.strategy) == {"true_X", "summary", "iFS"}
        assert set(long.metric) == {"balance_x", "balance_z", "ace", "ace_bias"}
        # 5 + 5 moments and 2 x 3 outcome rows per strategy and replicate.
        assert len(long) == 4 * 3 * 16
        assert not small_run.failed

    def test_benchmark_centering(self, small_run):
        long = small_run.long
        np.testing.assert_array_equal(long.loc[long.strategy == "true_X", "centered"], 0.0)

    def test_workers_give_identical_results(self, small_run):
        par = run_scenario(SMALL, ("summary", "iFS"), reps=4, workers=2)
        pd.testing.assert_frame_equal(par.long, small_run.long)


def test_aggregate_statistics():
    long = pd.DataFrame({"scenario_id": "s", "rep": range(4), "strategy": "iFS", "metric": "ace_bias",
                         "moment_or_outcome": "y1", "value": [1.0, -1.0, 3.0, 1.0], "centered": 0.0})
    row = aggregate(long).iloc[0]
    assert row["mean"] == 1.0
    assert row["sd"] == pytest.approx(np.std([1, -1, 3, 1], ddof=1))
    assert row["mc_se"] == pytest.approx(row["sd"] / 2)
    assert row["rmse"] == pytest.approx(np.sqrt(3.0))


class TestFigures:
    def test_scenarios(self):
        assert list(figure_scenarios(2)) == ["canonical"]
        cells = figure_scenarios(3)
        assert [c.exposure.target_prevalence for c in cells.values()] == list(PREVALENCE_AXIS)
        assert figure_scenarios(5)["probit"].exposure.link == "probit"
        assert set(figure_scenarios(6)) == {"ordinal", "linear", "wrong_link", "skewed"}

    def test_unknown_figure(self):
        with pytest.raises(DataError):
            figure_scenarios(7)

    def test_reproduce_writes_series(self, tmp_path):
        paths = reproduce_figure(2, tmp_path, reps=2)
        assert [p.name for p in paths] == ["fig2_replicates.csv", "fig2_aggregate.csv", "fig2_balance.csv"]
        series = pd.read_csv(paths[-1])
        assert set(series.metric) == {"balance_x", "balance_z"}
