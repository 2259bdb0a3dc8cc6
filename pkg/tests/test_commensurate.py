import numpy as np
import pytest
from scipy.stats import norm

from ecborrow.commensurate import (
    CommensurateDraws,
    CommensurateState,
    log_posterior_commensurate,
    sample_mcmc,
    split_rhat,
)
from ecborrow.commensurate import test_superiority_mcmc as superiority_mcmc
from ecborrow.errors import DomainError
from ecborrow.inference import expand_rows, fit, log_posterior, marginal_treatment
from ecborrow.simulate import ScenarioSpec, generate_trial
from ecborrow.survival import RCT


def trial_rows(seed=3, weights=1.0, spec=None):
    spec = spec or ScenarioSpec(n_treat=80, n_rct_control=50, n_external=50)
    data = generate_trial(spec, np.random.default_rng(seed))
    return expand_rows(data, spec.partition, weights=weights), spec


class TestLogPosterior:
    def test_zero_drift_reduces_to_pooled_likelihood(self):
        rows, _ = trial_rows()
        theta_a = np.full(rows.n_params, -4.0)
        theta_a[-1] = 0.2
        theta_b = theta_a + 0.05
        state_a = CommensurateState(theta_a, 0.0, 0.5)
        state_b = CommensurateState(theta_b, 0.0, 0.5)
        # prior terms cancel in the difference when (delta, sigma) are fixed
        diff_comm = log_posterior_commensurate(state_a, rows) - log_posterior_commensurate(
            state_b, rows
        )
        diff_pooled = log_posterior(theta_a, rows) - log_posterior(theta_b, rows)
        assert np.isclose(diff_comm, diff_pooled, rtol=1e-12)

    def test_hierarchy_terms_by_hand(self):
        rows, _ = trial_rows()
        # same theta and delta, so the likelihood cancels and the log ratio
        # is exactly the Normal x Half-Cauchy hierarchy term
        theta = np.full(rows.n_params, -4.0)
        s1 = CommensurateState(theta, 0.2, 0.4)
        s2 = CommensurateState(theta, 0.2, 0.9)

        def manual(delta, sigma, scale=0.3):
            normal = -0.5 * np.log(2 * np.pi) - np.log(sigma) - delta**2 / (2 * sigma**2)
            cauchy = np.log(2.0 / (np.pi * scale)) - np.log1p((sigma / scale) ** 2)
            return normal + cauchy

        got = log_posterior_commensurate(s1, rows) - log_posterior_commensurate(s2, rows)
        want = manual(0.2, 0.4) - manual(0.2, 0.9)
        assert np.isclose(got, want, rtol=1e-12)

    def test_sigma_domain(self):
        rows, _ = trial_rows()
        with pytest.raises(DomainError):
            log_posterior_commensurate(
                CommensurateState(np.zeros(rows.n_params), 0.0, -1.0), rows
            )


class TestSampler:
    def test_deterministic(self):
        rows, _ = trial_rows()
        a = sample_mcmc(rows, n_iter=1500, n_warmup=500, chains=2, seed=42)
        b = sample_mcmc(rows, n_iter=1500, n_warmup=500, chains=2, seed=42)
        np.testing.assert_array_equal(a.gamma, b.gamma)
        np.testing.assert_array_equal(a.sigma, b.sigma)

    def test_acceptance_in_band_and_rhat(self):
        rows, _ = trial_rows()
        draws = sample_mcmc(rows, n_iter=4000, n_warmup=1500, chains=2, seed=1)
        for rate in draws.accept_rates.values():
            assert np.all((rate > 0.15) & (rate < 0.55))
        assert draws.rhat_gamma < 1.05

    def test_matches_laplace_on_drift_free_model(self):
        # zeroing the external indicator makes the commensurate model the
        # pooled model exactly; MCMC then must agree with the Laplace fit
        rows, _ = trial_rows()
        from dataclasses import replace

        pooled_rows = replace(rows, external=np.zeros_like(rows.external))
        draws = sample_mcmc(pooled_rows, n_iter=26_000, n_warmup=6000, chains=2, seed=7)
        post = fit(rows)
        g, sd = marginal_treatment(post)
        pooled = draws.pooled_gamma()
        se = pooled.std(ddof=1) / np.sqrt(pooled.size / 20)  # crude ESS guard
        assert abs(pooled.mean() - g) < max(3 * se, 0.05 * sd)
        assert abs(pooled.std(ddof=1) - sd) / sd < 0.06
        mc = draws.prob_benefit()
        exact = float(norm.cdf(0.0, loc=g, scale=sd))
        assert abs(mc - exact) < 0.02

    def test_zero_weights_match_no_borrowing(self):
        spec = ScenarioSpec(n_treat=80, n_rct_control=50, n_external=50)
        data = generate_trial(spec, np.random.default_rng(5))
        rows_zero = expand_rows(data, spec.partition, weights=0.0)
        draws = sample_mcmc(rows_zero, n_iter=12_000, n_warmup=3000, chains=2, seed=9)
        rct = [s for s in data if s.source == RCT]
        post = fit(expand_rows(rct, spec.partition))
        g, sd = marginal_treatment(post)
        exact = float(norm.cdf(0.0, loc=g, scale=sd))
        assert abs(draws.prob_benefit() - exact) < 0.03

    def test_unit_weights_equal_unweighted_model(self):
        rows, _ = trial_rows(weights=1.0)
        state = CommensurateState(np.full(rows.n_params, -4.0), 0.1, 0.3)
        explicit = expand_rows(
            generate_trial(ScenarioSpec(n_treat=80, n_rct_control=50, n_external=50),
                           np.random.default_rng(3)),
            ScenarioSpec(n_treat=80, n_rct_control=50, n_external=50).partition,
        )
        assert np.isclose(
            log_posterior_commensurate(state, rows),
            log_posterior_commensurate(state, explicit),
        )

    def test_chain_count_invariance_of_mean(self):
        rows, _ = trial_rows()
        two = sample_mcmc(rows, n_iter=11_000, n_warmup=3000, chains=2, seed=21)
        four = sample_mcmc(rows, n_iter=7000, n_warmup=3000, chains=4, seed=22)
        pooled_two, pooled_four = two.pooled_gamma(), four.pooled_gamma()
        se = np.sqrt(
            pooled_two.var() / (pooled_two.size / 20)
            + pooled_four.var() / (pooled_four.size / 20)
        )
        assert abs(pooled_two.mean() - pooled_four.mean()) < 3 * se

    def test_validates_iteration_budget(self):
        rows, _ = trial_rows()
        with pytest.raises(ValueError):
            sample_mcmc(rows, n_iter=400, n_warmup=500)


class TestSuperiority:
    def make_draws(self, gamma):
        gamma = np.asarray(gamma, dtype=float).reshape(1, -1)
        return CommensurateDraws(
            gamma=gamma, delta=np.zeros_like(gamma), sigma=np.ones_like(gamma),
            accept_rates={}, rhat_gamma=1.0, n_chains=1, n_warmup=0,
        )

    def test_all_negative_rejects(self):
        assert superiority_mcmc(self.make_draws(-np.abs(np.random.default_rng(0).normal(1, 0.1, 2000))))

    def test_symmetric_does_not_reject(self):
        rng = np.random.default_rng(1)
        assert not superiority_mcmc(self.make_draws(rng.normal(0, 1, 2000)))

    def test_requires_enough_draws(self):
        with pytest.raises(ValueError):
            superiority_mcmc(self.make_draws(np.zeros(10) - 1.0))


class TestSplitRhat:
    def test_identical_chains_near_one(self):
        rng = np.random.default_rng(2)
        chains = rng.normal(0, 1, (4, 4000))
        assert split_rhat(chains) < 1.02

    def test_separated_chains_flagged(self):
        rng = np.random.default_rng(3)
        chains = rng.normal(0, 1, (4, 1000)) + np.array([[0.0], [0.0], [3.0], [3.0]])
        assert split_rhat(chains) > 1.5
