import json

import numpy as np
import pytest

from latentps.dgp import ScenarioConfig
from latentps.validation import (
    _merge_small,
    _ratio,
    collect,
    corollary1_report,
    corollary2_report,
    family_threshold,
    theorem_report,
    write_reports,
)


def test_family_threshold():
    assert family_threshold(1) == pytest.approx(3.0)
    assert family_threshold(200) == pytest.approx(4.35, abs=0.01)
    assert family_threshold(20) == pytest.approx(3.82, abs=0.01)


def test_ratio_estimator():
    S = np.array([[2.0], [4.0], [0.0]])
    N = np.array([[2.0], [2.0], [2.0]])
    est, se, n = _ratio(S, N)
    assert est[0] == pytest.approx(1.0)
    assert n[0] == 6
    assert se[0] > 0


def test_merge_small_pools_cells():
    S = np.ones((3, 4))
    N = np.array([[40.0, 5.0, 40.0, 5.0]] * 3)
    S2, N2, labels = _merge_small(S, N)
    assert N2.sum() == N.sum() and S2.sum() == S.sum()


@pytest.fixture(scope="module")
def stats():
    return collect(ScenarioConfig(n=1000, scenario_id="validation-tests"), 12)


class TestReports:
    def test_theorem_controls_detected(self, stats):
        rep = theorem_report(stats)
        assert rep.summary["part2:summary"]["passed"]
        assert set(rep.table.columns) >= {"suite", "check", "proxy", "estimate", "se"}

    def test_corollaries(self, stats, tmp_path):
        reports = [theorem_report(stats), corollary1_report(stats), corollary2_report(stats)]
        paths = write_reports(reports, tmp_path)
        doc = json.loads((tmp_path / "validation.json").read_text())
        assert set(doc) == {"theorem", "corollary1", "corollary2"}
        assert len(paths) == 4
