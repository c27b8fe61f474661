import math

import numpy as np
import pytest
from scipy import stats

from rramsnn.errors import ConfigError, OutOfRangeError
from rramsnn.heterogeneity import (BiasCurve, HeterogeneityModel, load_empirical_table, model_from_dict,
                                   sample_time_constants, tau_from_bias)


def test_lognormal_matches_reference_distribution():
    model = HeterogeneityModel(cv=0.3, seed=3)
    taus = sample_time_constants(model, 20000, "membrane")
    sigma = math.sqrt(math.log1p(0.3**2))
    ref = stats.lognorm(s=sigma, scale=20e-3 * math.exp(-0.5 * sigma**2))
    assert stats.kstest(taus, ref.cdf).pvalue > 0.01
    assert abs(taus.mean() / 20e-3 - 1) < 0.01
    assert abs(taus.std() / taus.mean() - 0.3) < 0.01


def test_synapse_kind_uses_synaptic_mean():
    taus = sample_time_constants(HeterogeneityModel(seed=1), 20000, "synapse")
    assert abs(taus.mean() / 10e-3 - 1) < 0.01


def test_zero_cv_gives_exact_mean():
    taus = sample_time_constants(HeterogeneityModel(cv=0.0), 7, "readout-membrane")
    assert np.all(taus == 20e-3)


def test_truncated_normal_respects_lower_bound():
    model = HeterogeneityModel(family="truncated-normal", cv=0.5, seed=2)
    taus = sample_time_constants(model, 50000)
    assert taus.min() > 0.05 * 20e-3
    mean, std = 20e-3, 0.5 * 20e-3
    ref = stats.truncnorm((0.05 * mean - mean) / std, np.inf, loc=mean, scale=std)
    assert stats.kstest(taus, ref.cdf).pvalue > 0.01


def test_sampling_is_pure_function_of_inputs():
    m = HeterogeneityModel(seed=9)
    a = sample_time_constants(m, 100, "membrane", stream=0)
    assert np.array_equal(a, sample_time_constants(m, 100, "membrane", stream=0))
    assert not np.array_equal(a, sample_time_constants(m, 100, "membrane", stream=1))
    assert not np.array_equal(a, sample_time_constants(HeterogeneityModel(seed=10), 100))


def test_empirical_table_mean(tmp_path):
    p = tmp_path / "taus.csv"
    p.write_text("tau_seconds,probability\n0.01,0.25\n0.02,0.5\n0.04,0.25\n")
    table = load_empirical_table(p)
    model = HeterogeneityModel(family="empirical-table", empirical_table=table, seed=4)
    taus = sample_time_constants(model, 40000)
    expected = 0.01 * 0.25 + 0.02 * 0.5 + 0.04 * 0.25
    # standard error of the sample mean is ~5e-5
    assert abs(taus.mean() - expected) < 3e-4
    assert set(np.unique(taus)) <= {0.01, 0.02, 0.04}


def test_empirical_table_must_sum_to_one():
    with pytest.raises(ConfigError):
        HeterogeneityModel(family="empirical-table", empirical_table=((0.01, 0.5), (0.02, 0.4)))


def test_invalid_model_rejected():
    with pytest.raises(ConfigError):
        HeterogeneityModel(family="gamma")
    with pytest.raises(ConfigError):
        HeterogeneityModel(cv=-0.1)
    with pytest.raises(ConfigError):
        sample_time_constants(HeterogeneityModel(), 0)


def test_bias_curve_log_linear_midpoint():
    curve = BiasCurve(((0.1, 20e-3), (0.2, 5e-3)))
    assert tau_from_bias(curve, 0.15) == pytest.approx(10e-3, rel=1e-12)
    assert tau_from_bias(curve, 0.1) == 20e-3
    with pytest.raises(OutOfRangeError):
        tau_from_bias(curve, 0.25)


def test_bias_curve_must_be_monotone():
    with pytest.raises(ConfigError):
        BiasCurve(((0.1, 5e-3), (0.2, 20e-3)))


def test_model_from_dict_reads_table(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("0.01,1.0\n")
    m = model_from_dict({"family": "empirical-table", "empirical_table_csv": str(p)})
    assert m.empirical_table == ((0.01, 1.0),)
