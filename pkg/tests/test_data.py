import json

import numpy as np
import pandas as pd
import pytest

from latentps.data import (
    Dataset,
    MeasurementSpec,
    ModelSpec,
    block_degrees_of_freedom,
    dataset_schema,
    default_model_spec,
    load_dataset,
    validate_spec,
    write_dataset,
)
from latentps.dgp import simulate_schema_dataset
from latentps.errors import DataError, SpecError


def _small(n=20, rng=None):
    rng = rng or np.random.default_rng(0)
    a = np.r_[np.ones(n // 2), np.zeros(n - n // 2)].astype(int)
    return Dataset(z=rng.normal(size=(n, 2)), w_blocks=(rng.normal(size=(n, 3)),), a=a,
                   y={"out": rng.normal(size=n)})


class TestDataset:
    def test_arrays_are_read_only(self):
        d = _small()
        with pytest.raises(ValueError):
            d.z[0, 0] = 1.0

    def test_single_class_exposure(self):
        with pytest.raises(DataError, match="single class"):
            Dataset(z=np.zeros((3, 1)), w_blocks=(np.zeros((3, 2)),), a=np.ones(3))

    def test_non_binary_exposure(self):
        with pytest.raises(DataError):
            Dataset(z=np.zeros((3, 1)), w_blocks=(np.zeros((3, 2)),), a=[0, 1, 2])

    def test_one_item_block(self):
        with pytest.raises(DataError):
            Dataset(z=np.zeros((2, 1)), w_blocks=(np.zeros((2, 1)),), a=[0, 1])

    def test_non_finite(self):
        w = np.zeros((2, 2))
        w[0, 0] = np.nan
        with pytest.raises(DataError):
            Dataset(z=np.zeros((2, 1)), w_blocks=(w,), a=[0, 1])

    def test_take_with_repeats(self):
        d = _small()
        t = d.take([0, 0, 15])
        assert t.n == 3
        np.testing.assert_array_equal(t.z[1], d.z[0])
        np.testing.assert_array_equal(t.y["out"], d.y["out"][[0, 0, 15]])


class TestCsvRoundTrip:
    def test_write_then_load(self, tmp_path):
        d = _small()
        schema = write_dataset(d, tmp_path / "d.csv", tmp_path / "s.json")
        assert json.loads((tmp_path / "s.json").read_text()) == schema == dataset_schema(d)
        back = load_dataset(tmp_path / "d.csv", tmp_path / "s.json")
        np.testing.assert_allclose(back.z, d.z, rtol=1e-11)
        np.testing.assert_allclose(back.w, d.w, rtol=1e-11)
        np.testing.assert_array_equal(back.a, d.a)
        np.testing.assert_allclose(back.y["out"], d.y["out"], rtol=1e-11)

    def test_categorical_expansion(self, tmp_path):
        frame, schema = simulate_schema_dataset(n=120, seed=3)
        frame.to_csv(tmp_path / "d.csv", index=False)
        d = load_dataset(tmp_path / "d.csv", schema)
        assert "race[Black]" in d.z_names and "race[Asian]" not in d.z_names
        # Sorted first level (Asian < Black < ...) is the reference: 4 levels give 3 indicators.
        assert sum(name.startswith("race[") for name in d.z_names) == 3
        assert d.block_names == ("violence", "academic")

    def test_missing_values_rejected(self, tmp_path):
        pd.DataFrame({"z": ["1", ""], "w1": [0, 1], "w2": [1, 0], "a": [0, 1]}).to_csv(tmp_path / "d.csv",
                                                                                    index=False)
        schema = {"z": "z", "w1": "w:x:w1", "w2": "w:x:w2", "a": "a"}
        with pytest.raises(DataError, match="missing"):
            load_dataset(tmp_path / "d.csv", schema)

    def test_unknown_role(self, tmp_path):
        pd.DataFrame({"z": [1, 2], "w1": [0, 1], "w2": [1, 0], "a": [0, 1]}).to_csv(tmp_path / "d.csv",
                                                                                 index=False)
        with pytest.raises(DataError, match="unknown role"):
            load_dataset(tmp_path / "d.csv", {"z": "q", "w1": "w:x:w1", "w2": "w:x:w2", "a": "a"})

    def test_column_without_role(self, tmp_path):
        pd.DataFrame({"z": [1, 2], "w1": [0, 1], "w2": [1, 0], "a": [0, 1]}).to_csv(tmp_path / "d.csv",
                                                                                 index=False)
        with pytest.raises(DataError, match="without a role"):
            load_dataset(tmp_path / "d.csv", {"w1": "w:x:w1", "w2": "w:x:w2", "a": "a"})


class TestSpec:
    def test_round_trip(self):
        spec = ModelSpec((MeasurementSpec.ordinal(["p", "q", "r"], 4, name="b"),), "probit", ("z1",))
        assert ModelSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec

    def test_default_spec_detects_types(self):
        frame, schema = simulate_schema_dataset(n=150, seed=4)
        d = Dataset(z=np.zeros((150, 1)), w_blocks=(frame[["viol1", "viol2", "viol3"]].to_numpy(),
                                                     np.random.default_rng(1).normal(size=(150, 2))),
                    a=frame["suspended"].to_numpy())
        spec = default_model_spec(d)
        assert spec.latent_blocks[0].item_types == ("ordinal",) * 3
        assert spec.latent_blocks[1].item_types == ("continuous",) * 2

    def test_degrees_of_freedom(self):
        # K items plus the exposure: (K+1)(K+2)/2 moments, 2(K+1) parameters.
        assert block_degrees_of_freedom(MeasurementSpec.continuous(list("abc"))) == 2
        assert block_degrees_of_freedom(MeasurementSpec.continuous(list("ab"))) == 0

    def test_just_identified_warns(self):
        report = validate_spec(ModelSpec((MeasurementSpec.continuous(["a", "b"]),)))
        assert report.ok and report.warnings

    def test_direct_effects_leave_one_clean_item(self):
        block = MeasurementSpec(items=("a", "b", "c"), item_types=("continuous",) * 3,
                                z_direct_effects=(("z1",), ("z1",), ()))
        report = validate_spec(ModelSpec((block,)))
        assert not report.ok
        with pytest.raises(SpecError):
            report.raise_if_failed()

    def test_nuisance_on_ordinal_rejected(self):
        block = MeasurementSpec(items=("a", "b", "c", "d"), item_types=("ordinal",) * 4, n_levels=(3,) * 4,
                                nuisance_groups=((0, 1),))
        assert not validate_spec(ModelSpec((block,))).ok

    def test_three_blocks_rejected(self):
        b = MeasurementSpec.continuous(list("abc"))
        assert not validate_spec(ModelSpec((b, b, b))).ok

    def test_items_must_match_data(self):
        d = _small()
        assert not validate_spec(ModelSpec((MeasurementSpec.continuous(["x", "y", "z"]),)), d).ok
        assert validate_spec(default_model_spec(d), d).ok
