import numpy as np
import pytest

from ecborrow.gaussian import (
    ADAPTIVE,
    COIN,
    FIXED,
    analytic_type1,
    gaussian_oracle,
    least_favourable_a0,
)


class TestAnalytic:
    def test_endpoints_are_nominal(self):
        assert np.isclose(analytic_type1(100, 100, 0.0), 0.025)
        assert np.isclose(analytic_type1(100, 100, 1.0), 0.025)

    def test_least_favourable_point(self):
        a_star = least_favourable_a0(100, 100)
        assert np.isclose(a_star, np.sqrt(2.0) - 1.0)
        assert round(analytic_type1(100, 100, a_star), 5) == 0.01564

    def test_strictly_conservative_inside(self):
        grid = np.linspace(0.05, 0.95, 19)
        rates = [analytic_type1(100, 100, a) for a in grid]
        assert max(rates) < 0.025

    def test_half_weight_value(self):
        assert abs(analytic_type1(100, 100, 0.5) - 0.0159) < 5e-4


class TestSimulated:
    def test_fixed_matches_analytic(self):
        for a0 in (0.0, 0.25, 0.5, 1.0):
            res = gaussian_oracle(100, 100, FIXED, a0=a0, n_reps=20_000, seed=3)
            se = max(res.rejection_se, 1e-4)
            assert abs(res.rejection_rate - res.analytic_rate) < 3 * se

    def test_coin_is_exact_with_matched_sd(self):
        res = gaussian_oracle(100, 100, COIN, n_reps=20_000, seed=4)
        assert abs(res.rejection_rate - 0.025) < 3 * res.rejection_se
        assert abs(res.mean_posterior_sd - np.sqrt(2.0 / 150.0)) < 0.002

    def test_adaptive_inflates(self):
        res = gaussian_oracle(100, 100, ADAPTIVE, n_reps=20_000, seed=5)
        assert 0.030 < res.rejection_rate < 0.043
        assert abs(res.mean_posterior_sd - np.sqrt(2.0 / 150.0)) < 0.002

    def test_unknown_policy(self):
        with pytest.raises(ValueError):
            gaussian_oracle(100, 100, "other")

    def test_power_under_alternative(self):
        null = gaussian_oracle(100, 100, FIXED, a0=1.0, mu=0.0, n_reps=5000, seed=6)
        alt = gaussian_oracle(100, 100, FIXED, a0=1.0, mu=0.3, n_reps=5000, seed=6)
        assert alt.rejection_rate > 0.5 > null.rejection_rate
