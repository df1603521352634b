import numpy as np
import pytest

from effectbridge import (DataError, SurveyDesign, ate_contrast,
                          combined_transport_estimate, default_dgp, dr_estimate,
                          oracle_noisy_nuisances, simulate_dgp,
                          survey_transport_estimate, weighted_mean_variance)
from effectbridge.survey import SingleClusterWarning

from conftest import build_sample


def singleton_design(n, weights=None):
    return SurveyDesign(stratum=np.zeros(n, dtype=int), cluster=np.arange(n),
                        weight=np.ones(n) if weights is None else np.asarray(weights))


class TestWeightedMeanVariance:
    def test_equal_weights_reduce_to_plain_mean(self):
        mean, _ = weighted_mean_variance(singleton_design(3), [1.0, 2.0, 3.0])
        assert mean == pytest.approx(2.0, abs=1e-12)

    def test_hand_weighted_mean(self):
        design = singleton_design(2, weights=[1.0, 3.0])
        mean, _ = weighted_mean_variance(design, [1.0, 3.0])
        assert mean == (1.0 + 9.0) / 4.0

    def test_degenerate_values(self):
        mean, var = weighted_mean_variance(singleton_design(4, [2.0, 1.0, 3.0, 4.0]),
                                           np.full(4, 5.5))
        assert mean == 5.5 and var == pytest.approx(0.0, abs=1e-25)

    def test_equal_weight_variance_matches_classic_formula(self, rng):
        y = rng.standard_normal(23)
        mean, var = weighted_mean_variance(singleton_design(23), y)
        assert mean == pytest.approx(y.mean(), abs=1e-12)
        assert var == pytest.approx(np.var(y, ddof=1) / 23, rel=1e-12)

    def test_weight_scale_equivariance(self, rng):
        y = rng.standard_normal(12)
        w = rng.uniform(0.5, 4.0, 12)
        design = SurveyDesign(stratum=np.repeat([0, 1], 6),
                              cluster=np.tile([0, 0, 1, 1, 2, 2], 2), weight=w)
        base = weighted_mean_variance(design, y)
        for c in (2.0, 0.25):  # power-of-two scales leave every float untouched
            scaled = SurveyDesign(stratum=design.stratum, cluster=design.cluster,
                                  weight=c * w)
            out = weighted_mean_variance(scaled, y)
            assert out[0] == base[0] and out[1] == base[1]

    def test_single_cluster_stratum_warns_and_contributes_zero(self):
        design = SurveyDesign(stratum=np.array([0, 0, 1, 1]),
                              cluster=np.array([0, 1, 5, 5]),
                              weight=np.ones(4))
        y = np.array([1.0, 3.0, 10.0, 20.0])
        with pytest.warns(SingleClusterWarning, match=r"\[1\]"):
            mean, var = weighted_mean_variance(design, y)
        assert mean == pytest.approx(8.5)
        only_first = SurveyDesign(stratum=np.zeros(2, dtype=int),
                                  cluster=np.array([0, 1]), weight=np.ones(2))
        # variance equals the first stratum's contribution with the full-N denominator
        t = np.array([1.0, 3.0])
        expected = 2.0 * np.sum((t - t.mean()) ** 2)  # Var(Yhat) part
        u = np.array([1.0, 1.0])
        expected_var = (expected + mean ** 2 * 0.0 - 2 * mean *
                        (2.0 * np.sum((t - t.mean()) * (u - u.mean())))) / 16.0
        assert var == pytest.approx(expected_var, rel=1e-12)

    def test_positive_weights_required(self):
        with pytest.raises(DataError):
            SurveyDesign(stratum=np.zeros(2, dtype=int), cluster=np.arange(2),
                         weight=np.array([1.0, 0.0]))


class TestCombinedTransportEstimate:
    def test_equal_components_preserved(self):
        est = combined_transport_estimate(np.full(10, 0.42), (0.42, 0.0), 10, 10)
        assert est.point == pytest.approx(0.42, abs=1e-15)

    def test_zero_survey_variance_reduction(self):
        src = np.array([0.0, 1.0, 2.0, 3.0])
        est = combined_transport_estimate(src, (0.5, 0.0), 4, 12)
        var_src = np.var(src, ddof=1) / 4
        assert est.se == pytest.approx(np.sqrt(16 * var_src / 256), rel=1e-12)

    def test_hand_combination(self):
        # n1=100, n2=300, theta1=0.2, theta2=0.4 -> 0.25*0.2 + 0.75*0.4 = 0.35
        est = combined_transport_estimate(np.full(100, 0.2), (0.4, 0.0), 100, 300)
        assert est.point == 0.35
        assert est.survey

    def test_needs_both_populations(self):
        with pytest.raises(DataError):
            combined_transport_estimate(np.empty(0), (0.1, 0.0), 0, 5)


@pytest.fixture(scope="module")
def surveyed():
    dgp = default_dgp()
    draw = simulate_dgp(800, seed=31, dgp=dgp)
    s = draw.sample
    rng = np.random.default_rng(5)
    sample = build_sample(
        s.x, s.a, s.y, s.v_target, s.v_index_map,
        target_stratum=rng.integers(0, 3, s.n2),
        target_cluster=rng.integers(0, 6, s.n2),
        target_weight=np.ones(s.n2))
    fit = oracle_noisy_nuisances(sample, dgp, 0.4, seed=9)
    return sample, fit


class TestSurveyTransportEstimate:
    def test_equal_weights_reproduce_dr_point(self, surveyed):
        sample, fit = surveyed
        for arm in (0, 1):
            svy = survey_transport_estimate(sample, fit, arm)
            dr = dr_estimate(sample, fit, arm, "transportation")
            assert svy.point == pytest.approx(dr.point, abs=1e-12)
        svy_c = survey_transport_estimate(sample, fit, "contrast")
        dr_c = ate_contrast(sample, fit, "transportation")
        assert svy_c.point == pytest.approx(dr_c.point, abs=1e-12)

    def test_serialization_flags_survey(self, surveyed):
        sample, fit = surveyed
        d = survey_transport_estimate(sample, fit, 1).to_dict()
        assert d["survey"] is True and d["method"] == "dr"
        assert d["kind"] == "transportation"

    def test_design_must_cover_targets(self, surveyed):
        sample, fit = surveyed
        short = SurveyDesign(stratum=np.zeros(3, dtype=int), cluster=np.arange(3),
                             weight=np.ones(3))
        with pytest.raises(ValueError):
            survey_transport_estimate(sample, fit, 1, design=short)
