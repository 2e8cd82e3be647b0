import json
import zlib

import numpy as np
import pytest

from latentps.data import Dataset, MeasurementSpec, ModelSpec
from latentps.dgp import ScenarioConfig, Variants, simulate, simulate_schema_dataset
from latentps.errors import SpecError
from latentps.scores import eap_given_wz, ifs_eap, linear_ifs, posterior_mean_oracle, regression_scores
from latentps.sem.fit import (
    FittedSEM,
    fit_joint,
    fit_linear_joint,
    fit_measurement_only,
    load_model,
    model_from_dict,
    model_to_dict,
    save_model,
)
from latentps.sem.likelihood import compute_anchors, default_rule, evaluate, unit_loglik
from latentps.sem.model import SEMData, grad_to_theta, joint_layout, measurement_layout, pack, unpack

Z_NAMES = ("z1", "z2")
C3 = MeasurementSpec.continuous(["a", "b", "c"])
C4N = MeasurementSpec(items=("a", "b", "c", "d"), item_types=("continuous",) * 4,
                      z_direct_effects=((), ("z1",), (), ()), nuisance_groups=((2, 3),))
O4 = MeasurementSpec.ordinal(["p", "q", "r", "s"], 4, name="1")
MIX = MeasurementSpec(items=("a", "b", "c"), item_types=("continuous", "ordinal", "continuous"),
                      n_levels=(None, 3, None), z_direct_effects=((), (), ("z2",)), name="m")
LEV4 = {(b, k): (0.0, 1.0, 2.0, 3.0) for b in range(2) for k in range(4)}

LAYOUTS = {
    "continuous-logit": lambda: joint_layout(ModelSpec((C3,), "logit"), Z_NAMES, {}),
    "continuous-probit": lambda: joint_layout(ModelSpec((C3,), "probit"), Z_NAMES, {}),
    "nuisance-direct": lambda: joint_layout(ModelSpec((C4N,), "logit"), Z_NAMES, {}),
    "two-blocks-probit": lambda: joint_layout(ModelSpec((C3, C4N), "probit"), Z_NAMES, {}),
    "ordinal": lambda: joint_layout(ModelSpec((O4,), "logit"), Z_NAMES, LEV4),
    "two-ordinal-blocks": lambda: joint_layout(ModelSpec((O4, O4), "logit"), Z_NAMES, LEV4),
    "mixed": lambda: joint_layout(ModelSpec((MIX, C4N), "probit"), Z_NAMES, {(0, 1): (0.0, 1.0, 2.0)}),
    "all-linear": lambda: joint_layout(ModelSpec((C3, C3), "logit"), Z_NAMES, {}, linear=True),
    "measurement-ordinal": lambda: measurement_layout(O4, {(0, k): (0.0, 1.0, 2.0, 3.0) for k in range(4)}),
}


def _random_data(layout, rng, n=60):
    z = rng.normal(size=(n, layout.n_z))
    wc = rng.normal(size=(n, layout.n_cont))
    wo = (np.column_stack([rng.integers(0, r, n) for r in layout.n_cats]) if layout.n_ord
          else np.zeros((n, 0), int))
    a = rng.integers(0, 2, n).astype(float) if layout.link else None
    return SEMData(z, wc, wo, a)


class TestGradient:
    @pytest.mark.parametrize("name", sorted(LAYOUTS))
    def test_analytic_matches_finite_differences(self, name):
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        layout = LAYOUTS[name]()
        data = _random_data(layout, rng)
        theta = rng.normal(scale=0.4, size=layout.n_params)
        p = unpack(theta, layout)
        anchors = compute_anchors(p, layout, data) if layout.n_ord else None

        def f(t):
            return evaluate(unpack(t, layout), layout, data, grad=False, anchors=anchors).loglik.sum()

        g = grad_to_theta(evaluate(p, layout, data, anchors=anchors).grad, p, layout)
        h = 1e-6
        fd = np.array([(f(theta + h * e) - f(theta - h * e)) / (2 * h) for e in np.eye(theta.size)])
        np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-4 * np.max(np.abs(fd)))

    def test_pack_unpack_round_trip(self):
        layout = LAYOUTS["mixed"]()
        theta = np.random.default_rng(0).normal(size=layout.n_params)
        np.testing.assert_allclose(pack(unpack(theta, layout), layout), theta, atol=1e-12)


class TestQuadrature:
    def test_probit_closed_form_matches_quadrature(self):
        rng = np.random.default_rng(3)
        layout = LAYOUTS["continuous-probit"]()
        data = _random_data(layout, rng)
        p = unpack(rng.normal(scale=0.4, size=layout.n_params), layout)
        closed = evaluate(p, layout, data, grad=False, closed_form=True)
        quad = evaluate(p, layout, data, default_rule(41), grad=False, closed_form=False)
        np.testing.assert_allclose(closed.loglik, quad.loglik, atol=1e-10)
        np.testing.assert_allclose(closed.post_mean, quad.post_mean, atol=1e-10)

    @pytest.mark.parametrize("name", ["ordinal", "two-ordinal-blocks", "mixed"])
    def test_adaptive_rule_converged_at_21_nodes(self, name):
        rng = np.random.default_rng(4)
        layout = LAYOUTS[name]()
        data = _random_data(layout, rng, n=100)
        p = unpack(rng.normal(scale=0.4, size=layout.n_params), layout)
        l21 = unit_loglik(p, layout, data, default_rule(21))
        l41 = unit_loglik(p, layout, data, default_rule(41))
        assert np.max(np.abs(l21 - l41)) < 1e-6


@pytest.fixture(scope="module")
def probit_fit():
    cfg = ScenarioConfig(n=400, scenario_id="sem-tests",
                         exposure={"link": "probit", "b_z": 0.294, "b_x": 0.294, "target_prevalence": 0.3})
    sim = simulate(cfg, 0)
    return sim, fit_joint(sim.data, ModelSpec((MeasurementSpec.continuous(sim.data.item_names[0], name="x"),),
                                              "probit"))


class TestFitJoint:
    def test_converged_and_identified_sign(self, probit_fit):
        _, model = probit_fit
        assert model.converged
        assert model.params.lam_c[0, 0] > 0
        assert model.heywood == ()

    def test_scores_match_dense_grid_oracle(self, probit_fit):
        sim, model = probit_fit
        ifs = ifs_eap(model, sim.data).values[:, 0]
        for i in range(0, 400, 40):
            assert ifs[i] == pytest.approx(posterior_mean_oracle(model, sim.data, i), abs=1e-6)

    def test_scores_correlate_with_truth(self, probit_fit):
        sim, model = probit_fit
        assert np.corrcoef(ifs_eap(model, sim.data).values[:, 0], sim.x)[0, 1] > 0.7

    def test_exposure_shifts_scores(self, probit_fit):
        # Conditioning on A moves exposed units up when the exposure loads positively on X.
        sim, model = probit_fit
        diff = ifs_eap(model, sim.data).values[:, 0] - eap_given_wz(model, sim.data)[:, 0]
        a = sim.data.a == 1
        assert model.params.bx[0] > 0
        assert diff[a].min() > 0 and diff[~a].max() < 0

    def test_json_round_trip(self, probit_fit, tmp_path):
        sim, model = probit_fit
        save_model(model, tmp_path / "m.json")
        back = load_model(tmp_path / "m.json")
        assert isinstance(back, FittedSEM)
        np.testing.assert_allclose(ifs_eap(back, sim.data).values, ifs_eap(model, sim.data).values, atol=1e-12)
        assert model_to_dict(model_from_dict(json.loads(json.dumps(model_to_dict(model))))) == model_to_dict(model)

    def test_warm_start_reaches_same_optimum(self, probit_fit):
        sim, model = probit_fit
        again = fit_joint(sim.data, model.spec, start=model.params, hess_inv0=model.hess_inv)
        assert again.loglik == pytest.approx(model.loglik, abs=1e-6)
        assert again.n_iter <= 5

    def test_unidentified_spec_raises(self, probit_fit):
        sim, _ = probit_fit
        bad = MeasurementSpec(items=sim.data.item_names[0], item_types=("continuous",) * 5,
                              z_direct_effects=(("z",),) * 4 + ((),), name="x")
        with pytest.raises(SpecError):
            fit_joint(sim.data, ModelSpec((bad,)))


class TestOrdinalFit:
    def test_two_block_schema_data(self):
        frame, schema = simulate_schema_dataset(n=417, seed=2024)
        z = frame[["age"]].to_numpy(float)
        w = (frame[[f"viol{k}" for k in range(1, 5)]].to_numpy(float),
             frame[[f"acad{k}" for k in range(1, 5)]].to_numpy(float))
        data = Dataset(z=z, w_blocks=w, a=frame["suspended"].to_numpy(), block_names=("violence", "academic"))
        model = fit_joint(data)
        assert model.converged
        assert model.params.psi < 0
        # Every ordinal item loads positively after sign identification of each block's first item.
        assert (model.params.lam_o[:4, 0] > 0).all() and (model.params.lam_o[4:, 1] > 0).all()


class TestMeasurementOnly:
    def test_needs_three_items(self):
        with pytest.raises(SpecError):
            fit_measurement_only(np.random.default_rng(0).normal(size=(50, 2)))

    def test_loadings_recover_item_correlations(self):
        sim = simulate(ScenarioConfig(n=5000, scenario_id="cfs-recovery"), 0)
        model = fit_measurement_only(sim.data.w)
        np.testing.assert_allclose(model.loadings, [0.4, 0.6, 0.4, 0.6, 0.4], atol=0.06)


class TestLinearJoint:
    def test_scores_equal_regression_method(self, probit_fit):
        sim, _ = probit_fit
        model = fit_linear_joint(sim.data)
        np.testing.assert_allclose(linear_ifs(model, sim.data).values, regression_scores(model, sim.data),
                                   atol=1e-8)
        assert model.fit_statistic >= 0

    def test_ordinal_variant_fits(self):
        sim = simulate(ScenarioConfig(n=300, scenario_id="lin-ord", variants=Variants(ordinal_levels=4)), 0)
        assert fit_linear_joint(sim.data).converged
