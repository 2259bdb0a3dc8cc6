import numpy as np
import pytest
from scipy.stats import kstest

from ecborrow.errors import EcborrowError, HarnessError
from ecborrow.simulate import (
    _CONTAMINATION_PROBS,
    _CONTAMINATION_VALUES,
    MethodSpec,
    ScenarioSpec,
    fixed_weight,
    generate_trial,
    method_from_name,
    no_borrowing,
    pooling,
    run_scenario,
    untransformed,
    weight_summary,
)
from ecborrow.calibration import CalibrationParams
from ecborrow.survival import EXTERNAL, RCT


class TestScenarioSpec:
    def test_validation(self):
        with pytest.raises(ValueError):
            ScenarioSpec(n_treat=0)
        with pytest.raises(ValueError):
            ScenarioSpec(confounding="weird")
        with pytest.raises(ValueError):
            ScenarioSpec(event_rates=(0.01,))

    def test_scenario_id_stable_and_label_free(self):
        a = ScenarioSpec(label="x")
        b = ScenarioSpec(label="y")
        assert a.scenario_id() == b.scenario_id()
        assert a.scenario_id() != ScenarioSpec(beta3=0.1).scenario_id()


class TestGenerateTrial:
    def test_sizes_and_sources(self):
        spec = ScenarioSpec(n_treat=30, n_rct_control=20, n_external=10)
        data = generate_trial(spec, 0)
        assert len(data) == 60
        assert sum(s.source == EXTERNAL for s in data) == 10
        assert all(s.treat == 0 for s in data if s.source == EXTERNAL)
        assert sum(s.treat for s in data) == 30

    def test_compatible_externals_match_controls(self):
        # same censoring (multiplier 1) and no confounding: observation
        # times of randomised controls and externals share one law
        spec = ScenarioSpec(censor_multiplier=1.0)
        ctrl, ext = [], []
        for seed in range(30):
            data = generate_trial(spec, np.random.default_rng((1, seed)))
            ctrl.extend(s.time for s in data if s.source == RCT and s.treat == 0)
            ext.extend(s.time for s in data if s.source == EXTERNAL)
        from scipy.stats import ks_2samp

        assert ks_2samp(ctrl, ext).pvalue > 0.01

    def test_contamination_mass_function(self):
        assert np.isclose(_CONTAMINATION_PROBS.sum(), 1.0)
        assert _CONTAMINATION_PROBS[0] == 0.68
        assert set(_CONTAMINATION_VALUES) == {0} | {2 * k for k in range(1, 9)} | {
            -2 * k for k in range(1, 9)
        }
        rng = np.random.default_rng(2)
        draws = rng.choice(_CONTAMINATION_VALUES, size=200_000, p=_CONTAMINATION_PROBS)
        assert abs((draws != 0).mean() - 0.32) < 0.005

    def test_shift_scales_hazard(self):
        spec = ScenarioSpec(
            n_treat=1, n_rct_control=4000, n_external=4000,
            confounding="shift", beta3=np.log(2.0),
            event_rates=(1 / 300.0, 1 / 300.0),
            censor_multiplier=1.0, censor_rates=(1e-9, 1e-9),
            beta_age=0.0, beta_male=0.0,
        )
        data = generate_trial(spec, 3)
        ctrl = [s.time for s in data if s.source == RCT and s.treat == 0]
        ext = [s.time for s in data if s.source == EXTERNAL]
        # exponential-ish rates: reciprocal mean ratio estimates the hazard ratio
        assert abs(np.mean(ctrl) / np.mean(ext) - 2.0) < 0.15

    def test_partial_shift_only_second_interval(self):
        spec = ScenarioSpec(
            n_treat=1, n_rct_control=30000, n_external=30000,
            confounding="partial_shift", beta3=np.log(3.0),
            censor_multiplier=1.0, censor_rates=(1e-9, 1e-9),
            beta_age=0.0, beta_male=0.0,
        )
        ctrl, ext = [], []
        for seed in range(6):
            data = generate_trial(spec, seed)
            ctrl.extend(s.time for s in data if s.source == RCT and s.treat == 0)
            ext.extend(s.time for s in data if s.source == EXTERNAL)
        ctrl, ext = np.array(ctrl), np.array(ext)
        tau1 = spec.cutpoints[1]
        # first interval untouched
        p_ctrl = (ctrl <= tau1).mean()
        p_ext = (ext <= tau1).mean()
        assert abs(p_ctrl - p_ext) < 0.006
        # beyond tau1 the hazard triples: residual means differ threefold
        res_ctrl = ctrl[ctrl > tau1] - tau1
        res_ext = ext[ext > tau1] - tau1
        assert abs(np.mean(res_ctrl) / np.mean(res_ext) - 3.0) < 0.25

    def test_delayed_effect_onset(self):
        spec = ScenarioSpec(
            n_treat=30000, n_rct_control=1, n_external=1,
            gamma=np.log(0.5), effect_onset=100.0,
            censor_multiplier=1.0, censor_rates=(1e-9, 1e-9),
            beta_age=0.0, beta_male=0.0,
        )
        none = ScenarioSpec(
            n_treat=30000, n_rct_control=1, n_external=1,
            gamma=0.0, censor_multiplier=1.0, censor_rates=(1e-9, 1e-9),
            beta_age=0.0, beta_male=0.0,
        )
        delayed = np.array([s.time for s in generate_trial(spec, 5) if s.treat == 1])
        plain = np.array([s.time for s in generate_trial(none, 5) if s.treat == 1])
        # before onset the treated hazard matches the untreated one
        assert abs((delayed <= 100).mean() - (plain <= 100).mean()) < 0.01
        # after onset survival improves
        assert np.mean(delayed[delayed > 100]) > np.mean(plain[plain > 100]) + 50


class TestRunScenario:
    def test_worker_count_does_not_change_results(self):
        spec = ScenarioSpec(n_treat=40, n_rct_control=30, n_external=20)
        methods = [no_borrowing(), pooling()]
        a = run_scenario(spec, methods, n_reps=12, seed=5, workers=1)
        b = run_scenario(spec, methods, n_reps=12, seed=5, workers=2)
        for name in ("no_borrow", "pool"):
            assert a.methods[name] == b.methods[name]

    def test_weight_methods_report_summaries(self):
        spec = ScenarioSpec(n_treat=40, n_rct_control=30, n_external=20)
        res = run_scenario(
            spec, [untransformed()], n_reps=4, seed=6, n_samples=800, n_imputations=5
        )
        assert res.weights is not None
        assert 0.0 <= res.weights.overall <= 1.0
        rows = weight_summary([res])
        assert rows and "a0" in rows[0]

    def test_duplicate_method_names_rejected(self):
        spec = ScenarioSpec()
        with pytest.raises(ValueError):
            run_scenario(spec, [no_borrowing(), no_borrowing()], n_reps=2, seed=0)

    def test_failures_counted_and_limited(self, monkeypatch):
        import ecborrow.simulate as sim

        spec = ScenarioSpec(n_treat=40, n_rct_control=30, n_external=20)
        original = sim._analyse_one

        def flaky(method, dataset, partition, wm, alpha, opts, seed):
            if dataset[0].time < 60.0:
                raise EcborrowError("forced failure")
            return original(method, dataset, partition, wm, alpha, opts, seed)

        monkeypatch.setattr(sim, "_analyse_one", flaky)
        with pytest.raises(HarnessError):
            run_scenario(spec, [no_borrowing()], n_reps=40, seed=7, failure_limit=0.01)
        res = run_scenario(
            spec, [no_borrowing()], n_reps=40, seed=7, failure_limit=0.9
        )
        assert res.n_failures > 0
        assert res.methods["no_borrow"].n_used == 40 - res.n_failures

    def test_long_rows_schema(self):
        spec = ScenarioSpec(n_treat=40, n_rct_control=30, n_external=20)
        res = run_scenario(spec, [no_borrowing()], n_reps=3, seed=8)
        rows = res.as_rows()
        assert {r["metric"] for r in rows} >= {"rejection_rate", "mse", "mean_ci_width"}
        assert all(
            set(r) == {"scenario", "method", "beta3", "metric", "value", "se"}
            for r in rows
        )


class TestMethodSpecs:
    def test_from_name(self):
        assert method_from_name("fixed:0.25").a0 == 0.25
        assert method_from_name("pool").kind == "pool"
        params = CalibrationParams(p=3, c=0.3)
        assert method_from_name("discounted", params).params.c == 0.3
        with pytest.raises(ValueError):
            method_from_name("shrunk")
        with pytest.raises(ValueError):
            method_from_name("nonsense")

    def test_needs_weights(self):
        assert untransformed().needs_weights
        assert not fixed_weight(0.5).needs_weights
        assert MethodSpec("cw", "cw_commensurate", params=CalibrationParams()).is_mcmc
