"""Scenario generation and operating-characteristics estimation.

A :class:`ScenarioSpec` fixes the generative model for one simulated hybrid
trial: randomised treated and control subjects, external controls whose
hazard may be distorted by an unobserved confounder, and stochastic
censoring.  :func:`run_scenario` replays a spec ``n_reps`` times, analyses
every replicate with each requested method, and aggregates rejection rates,
estimation error and borrowing summaries.

Replicates are driven by seeds derived from (global seed, scenario id,
replicate index), so results are reproducible and independent of worker
count, and identical replicate streams are shared by every method and
calibration grid point evaluated against the same spec.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from multiprocessing import get_context
from typing import Sequence

import numpy as np

from .calibration import CalibrationParams, transform
from .commensurate import RHAT_THRESHOLD, sample_mcmc, test_superiority_mcmc
from .errors import EcborrowError, HarnessError
from .inference import expand_rows, fit, hazard_ratio_summary, test_superiority
from .survival import (
    EXTERNAL,
    RCT,
    SubjectRecord,
    TimePartition,
    sample_observations,
)
from .weights import (
    DEFAULT_N_IMPUTATIONS,
    DEFAULT_N_PREDICTIVE,
    WeightMatrix,
    compute_all,
)

CONFOUNDING_KINDS = ("none", "partial_contamination", "shift", "partial_shift")

LOW_CENSORING = 1.4
HIGH_CENSORING = 0.9

# Unobserved-confounder exponent for partial contamination: most external
# controls are clean, a minority get hazard multipliers 2^(m*beta3) with m
# spread symmetrically over even values up to +-16.
_CONTAMINATION_VALUES = np.array(
    [0] + [v for k in range(1, 9) for v in (2 * k, -2 * k)], dtype=float
)
_CONTAMINATION_PROBS = np.array([0.68] + [0.02] * 16)

_HARNESS_MCMC = {"chains": 2, "n_iter": 3000, "n_warmup": 1000}


@dataclass(frozen=True)
class ScenarioSpec:
    """Generative configuration for one simulated hybrid-control trial."""

    n_treat: int = 200
    n_rct_control: int = 100
    n_external: int = 100
    cutpoints: tuple[float, ...] = (0.0, 180.0)
    event_rates: tuple[float, ...] = (1.0 / 300.0, 1.0 / 420.0)
    censor_rates: tuple[float, ...] = (1.0 / 600.0, 1.0 / 600.0)
    beta_age: float = 0.015
    beta_male: float = 0.20
    gamma: float = 0.0
    confounding: str = "none"
    beta3: float = 0.0
    censor_multiplier: float = LOW_CENSORING
    age_mean: float = 64.0
    age_sd: float = 9.0
    age_range: tuple[float, float] = (18.0, 90.0)
    male_prob: float = 0.62
    effect_onset: float = 0.0
    label: str = ""

    def __post_init__(self):
        if min(self.n_treat, self.n_rct_control, self.n_external) <= 0:
            raise ValueError("all sample sizes must be positive")
        if self.confounding not in CONFOUNDING_KINDS:
            raise ValueError(f"confounding must be one of {CONFOUNDING_KINDS}")
        if not self.censor_multiplier > 0:
            raise ValueError("censoring multiplier must be positive")
        if len(self.event_rates) != len(self.cutpoints) or len(
            self.censor_rates
        ) != len(self.cutpoints):
            raise ValueError("rates must have one entry per partition interval")

    @property
    def partition(self) -> TimePartition:
        return TimePartition(self.cutpoints)

    def scenario_id(self) -> int:
        """Stable 32-bit id from the generative fields (label excluded)."""
        key = repr(
            (
                self.n_treat, self.n_rct_control, self.n_external,
                self.cutpoints, self.event_rates, self.censor_rates,
                self.beta_age, self.beta_male, self.gamma,
                self.confounding, self.beta3, self.censor_multiplier,
                self.age_mean, self.age_sd, self.age_range, self.male_prob,
                self.effect_onset,
            )
        )
        return zlib.crc32(key.encode())

    def name(self) -> str:
        if self.label:
            return self.label
        return (
            f"{self.confounding}@b3={self.beta3:+.3f}"
            f"@cm={self.censor_multiplier:g}@g={self.gamma:+.3f}"
        )


@dataclass(frozen=True)
class MethodSpec:
    """One analysis method to run against each replicate."""

    name: str
    kind: str
    a0: float | None = None
    params: CalibrationParams | None = None

    @property
    def needs_weights(self) -> bool:
        return self.kind in ("untransformed", "shrunk", "discounted", "cw_commensurate")

    @property
    def is_mcmc(self) -> bool:
        return self.kind in ("commensurate", "cw_commensurate")


def no_borrowing() -> MethodSpec:
    return MethodSpec("no_borrow", "no_borrow")


def pooling() -> MethodSpec:
    return MethodSpec("pool", "pool")


def fixed_weight(a0: float) -> MethodSpec:
    return MethodSpec(f"fixed:{a0:g}", "fixed", a0=float(a0))


def untransformed() -> MethodSpec:
    return MethodSpec("untransformed", "untransformed")


def shrunk(params: CalibrationParams) -> MethodSpec:
    return MethodSpec("shrunk", "shrunk", params=params)


def discounted(params: CalibrationParams) -> MethodSpec:
    return MethodSpec("discounted", "discounted", params=params)


def commensurate_prior() -> MethodSpec:
    return MethodSpec("commensurate", "commensurate")


def cw_commensurate(params: CalibrationParams) -> MethodSpec:
    return MethodSpec("cw_commensurate", "cw_commensurate", params=params)


def method_from_name(name: str, params: CalibrationParams | None = None) -> MethodSpec:
    """Parse a method label like ``pool`` or ``fixed:0.5`` into a MethodSpec."""
    if name.startswith("fixed:"):
        return fixed_weight(float(name.split(":", 1)[1]))
    table = {
        "no_borrow": no_borrowing,
        "pool": pooling,
        "untransformed": untransformed,
    }
    if name in table:
        return table[name]()
    needs = {"shrunk": shrunk, "discounted": discounted, "cw_commensurate": cw_commensurate}
    if name in needs:
        if params is None:
            raise ValueError(f"method {name!r} requires calibration parameters")
        return needs[name](params)
    if name == "commensurate":
        return commensurate_prior()
    raise ValueError(f"unknown method {name!r}")


def _truncated_normal(mean, sd, lo, hi, size, rng) -> np.ndarray:
    out = rng.normal(mean, sd, size)
    bad = (out < lo) | (out > hi)
    while bad.any():
        out[bad] = rng.normal(mean, sd, int(bad.sum()))
        bad = (out < lo) | (out > hi)
    return out


def _refine_partition(base: TimePartition, extra: float) -> tuple[TimePartition, np.ndarray]:
    """Insert one cutpoint; return the refined partition and, for each refined
    interval, the index of the base interval containing it."""
    cuts = sorted(set(base.cutpoints) | {float(extra)})
    refined = TimePartition(tuple(cuts))
    src = np.searchsorted(base.cutpoints, refined.lower, side="right") - 1
    return refined, src


def generate_trial(spec: ScenarioSpec, seed) -> list[SubjectRecord]:
    """Simulate one dataset: treated, randomised controls, external controls.

    The external event hazard carries the confounder: a static shift of the
    linear predictor for shift confounding, a per-subject random multiplier
    for partial contamination, and a hazard multiplier on every interval
    after the first for partial shift.  External censoring perturbs the
    trial-fitted censoring hazard on the log scale by ``censor_multiplier``;
    randomised subjects censor at the unperturbed rates.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    part = spec.partition
    lam = np.asarray(spec.event_rates)
    lam_c = np.asarray(spec.censor_rates)

    n_rct = spec.n_treat + spec.n_rct_control
    n_all = n_rct + spec.n_external
    age = _truncated_normal(
        spec.age_mean, spec.age_sd, spec.age_range[0], spec.age_range[1], n_all, rng
    )
    male = (rng.random(n_all) < spec.male_prob).astype(float)
    eta_cov = spec.beta_age * age + spec.beta_male * male

    treat_slice = slice(0, spec.n_treat)
    control_slice = slice(spec.n_treat, n_rct)
    external_slice = slice(n_rct, n_all)

    # Treated arm; a delayed effect switches the hazard ratio on past onset.
    if spec.effect_onset > 0.0:
        part_t, src = _refine_partition(part, spec.effect_onset)
        rates_t = lam[src] * np.exp(
            spec.gamma * (part_t.lower >= spec.effect_onset)
        )
        y_t, nu_t = sample_observations(
            rates_t, eta_cov[treat_slice], lam_c[src], eta_cov[treat_slice] * 0.0,
            part_t, rng,
        )
        # Censoring rates were mapped onto the refined partition above.
    else:
        y_t, nu_t = sample_observations(
            lam * np.exp(spec.gamma), eta_cov[treat_slice],
            lam_c, np.zeros(spec.n_treat), part, rng,
        )

    y_c, nu_c = sample_observations(
        lam, eta_cov[control_slice], lam_c, np.zeros(spec.n_rct_control), part, rng
    )

    eta_ext = eta_cov[external_slice].copy()
    rates_ext = lam
    if spec.confounding == "shift":
        eta_ext += spec.beta3
    elif spec.confounding == "partial_contamination":
        m = rng.choice(_CONTAMINATION_VALUES, size=spec.n_external, p=_CONTAMINATION_PROBS)
        eta_ext += m * np.log(2.0) * spec.beta3
    elif spec.confounding == "partial_shift":
        scale = np.ones(part.K)
        scale[1:] = np.exp(spec.beta3)
        rates_ext = lam * scale
    ext_censor = np.power(lam_c, spec.censor_multiplier)
    y_e, nu_e = sample_observations(
        rates_ext, eta_ext, ext_censor, np.zeros(spec.n_external), part, rng
    )

    subjects: list[SubjectRecord] = []
    for i in range(spec.n_treat):
        subjects.append(
            SubjectRecord(f"t{i:04d}", float(y_t[i]), int(nu_t[i]),
                          (float(age[i]), float(male[i])), 1, RCT)
        )
    off = spec.n_treat
    for i in range(spec.n_rct_control):
        subjects.append(
            SubjectRecord(f"c{i:04d}", float(y_c[i]), int(nu_c[i]),
                          (float(age[off + i]), float(male[off + i])), 0, RCT)
        )
    off = n_rct
    for i in range(spec.n_external):
        subjects.append(
            SubjectRecord(f"e{i:04d}", float(y_e[i]), int(nu_e[i]),
                          (float(age[off + i]), float(male[off + i])), 0, EXTERNAL)
        )
    return subjects


@dataclass
class OperatingCharacteristics:
    """Aggregated frequentist performance of one method over a scenario."""

    method: str
    n_used: int
    rejection_rate: float
    rejection_se: float
    mse: float
    mean_ci_width: float
    mean_abar: float
    rhat_ok_fraction: float | None = None

    def as_rows(self, scenario: str, beta3: float) -> list[dict]:
        rows = []
        for metric, value, se in (
            ("rejection_rate", self.rejection_rate, self.rejection_se),
            ("mse", self.mse, np.nan),
            ("mean_ci_width", self.mean_ci_width, np.nan),
            ("mean_abar", self.mean_abar, np.nan),
        ):
            rows.append(
                {
                    "scenario": scenario, "method": self.method, "beta3": beta3,
                    "metric": metric, "value": value, "se": se,
                }
            )
        return rows


@dataclass
class WeightSummaryTable:
    """Raw-weight means in the style of the weight-distribution table:
    within-dataset means averaged across datasets."""

    overall: float
    events: float
    censored: float
    by_interval: tuple[float, ...]
    mean_external_events: float

    def as_rows(self, scenario: str, beta3: float) -> list[dict]:
        rows = [
            {"scenario": scenario, "method": "weights", "beta3": beta3,
             "metric": name, "value": value, "se": np.nan}
            for name, value in (
                ("overall", self.overall),
                ("events", self.events),
                ("censored", self.censored),
                ("mean_external_events", self.mean_external_events),
            )
        ]
        for k, value in enumerate(self.by_interval):
            rows.append(
                {"scenario": scenario, "method": "weights", "beta3": beta3,
                 "metric": f"interval_{k + 1}", "value": value, "se": np.nan}
            )
        return rows


@dataclass
class ScenarioResult:
    spec: ScenarioSpec
    methods: dict
    weights: WeightSummaryTable | None
    n_reps: int
    n_failures: int

    def as_rows(self) -> list[dict]:
        name, b3 = self.spec.name(), self.spec.beta3
        rows = []
        for oc in self.methods.values():
            rows.extend(oc.as_rows(name, b3))
        if self.weights is not None:
            rows.extend(self.weights.as_rows(name, b3))
        return rows


def _weight_summary_one(wm: WeightMatrix, K: int) -> dict:
    evt = wm.terminal_entries(event=True)
    cen = wm.terminal_entries(event=False)
    summary = {
        "overall": wm.mean(),
        "events": float(evt.mean()) if evt.size else np.nan,
        "censored": float(cen.mean()) if cen.size else np.nan,
        "n_events": float(wm.events.sum()),
    }
    for k in range(K):
        vals = wm.interval_entries(k)
        summary[f"int{k}"] = float(vals.mean()) if vals.size else np.nan
    return summary


def _weights_argument(method: MethodSpec, wm: WeightMatrix | None):
    if method.kind == "no_borrow":
        return 0.0
    if method.kind in ("pool", "commensurate"):
        return 1.0
    if method.kind == "fixed":
        return method.a0
    if method.kind == "untransformed":
        return wm
    mode = "discounted" if method.kind == "discounted" else "shrunk"
    return transform(wm, method.params, mode)


def _analyse_one(
    method: MethodSpec,
    dataset: list[SubjectRecord],
    partition: TimePartition,
    wm: WeightMatrix | None,
    alpha: float,
    mcmc_opts: dict,
    mcmc_seed: int,
) -> dict:
    weights_arg = _weights_argument(method, wm)
    if np.isscalar(weights_arg):
        abar = float(weights_arg)
        rows = expand_rows(dataset, partition, weights=weights_arg)
    else:
        abar = float(weights_arg.entries().mean())
        rows = expand_rows(dataset, partition, weights=weights_arg)

    if method.is_mcmc:
        draws = sample_mcmc(rows, seed=mcmc_seed, **mcmc_opts)
        pooled = draws.pooled_gamma()
        q_lo, q_hi = np.quantile(pooled, [0.025, 0.975])
        return {
            "reject": test_superiority_mcmc(draws, alpha),
            "gamma": float(pooled.mean()),
            "ci_width": float(np.exp(q_hi) - np.exp(q_lo)),
            "abar": abar,
            "rhat": draws.rhat_gamma,
            "prob_benefit": draws.prob_benefit(),
        }
    post = fit(rows)
    summary = hazard_ratio_summary(post)
    return {
        "reject": test_superiority(post, alpha),
        "gamma": summary["gamma"],
        "ci_width": summary["ci_width"],
        "abar": abar,
        "rhat": None,
    }


def _replicate(args) -> tuple[int, dict | None, str | None]:
    (spec, methods, rep, seed, alpha, n_samples, n_imputations, mcmc_opts) = args
    sid = spec.scenario_id()
    try:
        import warnings

        # Near-zero censoring makes ridge-dominated censor intervals routine;
        # per-replicate warnings would swamp long runs.
        warnings.filterwarnings("ignore", message=".*ridge-dominated.*")
        rng = np.random.default_rng(np.random.SeedSequence([seed, sid, rep, 0]))
        dataset = generate_trial(spec, rng)
        partition = spec.partition
        rct = [s for s in dataset if s.source == RCT]
        external = [s for s in dataset if s.source == EXTERNAL]

        record: dict = {}
        wm = None
        if any(m.needs_weights for m in methods):
            wseed = int(
                np.random.SeedSequence([seed, sid, rep, 1]).generate_state(1, np.uint64)[0]
            )
            wm = compute_all(
                rct, external, partition,
                n_samples=n_samples, n_imputations=n_imputations, seed=wseed,
            )
            record["__weights__"] = _weight_summary_one(wm, partition.K)
        for mi, m in enumerate(methods):
            mseed = int(
                np.random.SeedSequence([seed, sid, rep, 2, mi]).generate_state(1, np.uint64)[0]
            )
            record[m.name] = _analyse_one(
                m, dataset, partition, wm, alpha, mcmc_opts, mseed
            )
        return rep, record, None
    except EcborrowError as exc:
        return rep, None, f"{type(exc).__name__}: {exc}"


def run_scenario(
    spec: ScenarioSpec,
    methods: Sequence[MethodSpec],
    n_reps: int,
    seed: int = 0,
    alpha: float = 0.025,
    n_samples: int = DEFAULT_N_PREDICTIVE,
    n_imputations: int = DEFAULT_N_IMPUTATIONS,
    workers: int = 1,
    mcmc_opts: dict | None = None,
    failure_limit: float = 0.01,
) -> ScenarioResult:
    """Estimate operating characteristics of ``methods`` under ``spec``.

    Per-replicate failures (singular fits and the like) are recorded and the
    replicate excluded; more than ``failure_limit`` of them aborts the run.
    Results are identical for any ``workers`` value.
    """
    names = [m.name for m in methods]
    if len(set(names)) != len(names):
        raise ValueError("method names must be unique")
    opts = dict(_HARNESS_MCMC)
    opts.update(mcmc_opts or {})
    tasks = [
        (spec, tuple(methods), rep, int(seed), alpha, n_samples, n_imputations, opts)
        for rep in range(n_reps)
    ]
    if workers > 1:
        chunk = max(1, n_reps // (workers * 8))
        with get_context("fork").Pool(workers) as pool:
            results = pool.map(_replicate, tasks, chunksize=chunk)
    else:
        results = [_replicate(t) for t in tasks]
    results.sort(key=lambda r: r[0])

    failures = [msg for _, rec, msg in results if rec is None]
    if len(failures) > failure_limit * n_reps:
        raise HarnessError(
            f"{len(failures)}/{n_reps} replicates failed; first: {failures[0]}"
        )
    records = [rec for _, rec, _ in results if rec is not None]
    n_used = len(records)

    per_method: dict[str, OperatingCharacteristics] = {}
    for m in methods:
        rejects = np.array([r[m.name]["reject"] for r in records], dtype=float)
        gammas = np.array([r[m.name]["gamma"] for r in records])
        ciw = np.array([r[m.name]["ci_width"] for r in records])
        abars = np.array([r[m.name]["abar"] for r in records])
        rate = float(rejects.mean())
        rhats = [r[m.name].get("rhat") for r in records]
        rhat_ok = (
            float(np.mean([h <= RHAT_THRESHOLD for h in rhats]))
            if m.is_mcmc
            else None
        )
        per_method[m.name] = OperatingCharacteristics(
            method=m.name,
            n_used=n_used,
            rejection_rate=rate,
            rejection_se=float(np.sqrt(rate * (1.0 - rate) / max(n_used, 1))),
            mse=float(np.mean((gammas - spec.gamma) ** 2)),
            mean_ci_width=float(ciw.mean()),
            mean_abar=float(abars.mean()),
            rhat_ok_fraction=rhat_ok,
        )

    weights_table = None
    if records and "__weights__" in records[0]:
        keys = records[0]["__weights__"].keys()
        agg = {k: float(np.nanmean([r["__weights__"][k] for r in records])) for k in keys}
        weights_table = WeightSummaryTable(
            overall=agg["overall"],
            events=agg["events"],
            censored=agg["censored"],
            by_interval=tuple(agg[f"int{k}"] for k in range(spec.partition.K)),
            mean_external_events=agg["n_events"],
        )
    return ScenarioResult(
        spec=spec,
        methods=per_method,
        weights=weights_table,
        n_reps=n_reps,
        n_failures=len(failures),
    )


def weight_summary(results: Sequence[ScenarioResult]) -> list[dict]:
    """Weight-distribution table rows across scenarios (one row per scenario)."""
    rows = []
    for res in results:
        if res.weights is None:
            continue
        row = {
            "scenario": res.spec.name(),
            "confounding": res.spec.confounding,
            "beta3": res.spec.beta3,
            "censor_multiplier": res.spec.censor_multiplier,
            "mean_events": res.weights.mean_external_events,
            "a0": res.weights.overall,
            "a0_evt": res.weights.events,
            "a0_cen": res.weights.censored,
        }
        for k, v in enumerate(res.weights.by_interval):
            row[f"a0_int{k + 1}"] = v
        rows.append(row)
    return rows


def weighted_rejection_rates(
    design: ScenarioSpec,
    params_list: Sequence[CalibrationParams],
    mode: str,
    reps: int,
    seed: int,
    alpha: float = 0.025,
    n_samples: int | None = None,
    n_imputations: int | None = None,
    workers: int = 1,
) -> list[float]:
    """Null rejection rate of the weighted analysis at each calibration point.

    All points share replicate data and raw weights (common random numbers),
    so the returned rates are directly comparable across the grid.
    """
    factory = shrunk if mode == "shrunk" else discounted
    methods = [
        replace(factory(par), name=f"{mode}[{i}]") for i, par in enumerate(params_list)
    ]
    result = run_scenario(
        design,
        methods,
        n_reps=reps,
        seed=seed,
        alpha=alpha,
        n_samples=n_samples or DEFAULT_N_PREDICTIVE,
        n_imputations=n_imputations or DEFAULT_N_IMPUTATIONS,
        workers=workers,
    )
    return [result.methods[m.name].rejection_rate for m in methods]
