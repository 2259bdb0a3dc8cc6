"""Batch command-line front end.

Four subcommands, each driven by an INI-style config of flat key = value
sections: ``fit`` analyses one dataset, ``weights`` dumps per-control
compatibility weights, ``calibrate`` grid-searches the shrinkage and
discount parameters against a simulated design, and ``simulate`` estimates
operating characteristics over a scenario grid.  Every command is
deterministic given its config (the seed lives in the config and can be
overridden on the command line), writes delimited output plus JSON reports
into the output directory, and renders matplotlib figures alongside unless
``--no-figures`` is passed.

Exit codes: 0 success, 2 config or input parse error, 3 model or
convergence error, 4 calibration failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

from . import report
from .calibration import (
    DEFAULT_BETA3_GRID,
    DEFAULT_C_GRID,
    DEFAULT_P_GRID,
    CalibrationParams,
    calibrate_c,
    calibrate_p,
    transform,
)
from .commensurate import sample_mcmc, test_superiority_mcmc
from .errors import (
    CalibrationFailure,
    EcborrowError,
    EmptyExternal,
    ParseError,
)
from .inference import bic, expand_rows, fit, hazard_ratio_summary, test_superiority
from .simulate import (
    ScenarioSpec,
    method_from_name,
    run_scenario,
)
from .survival import EXTERNAL, RCT, SubjectRecord, TimePartition, build_partition
from .weights import DEFAULT_N_IMPUTATIONS, DEFAULT_N_PREDICTIVE, compute_all

CSV_COLUMNS = ("id", "time", "event", "age", "sex", "treat", "source")


def read_subjects(path) -> list[SubjectRecord]:
    """Read the subject CSV (columns id,time,event,age,sex,treat,source).

    Raises :class:`ParseError` with the offending row number on malformed
    values or constraint violations.
    """
    subjects = []
    try:
        handle = open(path, newline="")
    except OSError as exc:
        raise ParseError(f"cannot open {path}: {exc}") from exc
    with handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None or set(reader.fieldnames) != set(CSV_COLUMNS):
            raise ParseError(
                f"expected columns {','.join(CSV_COLUMNS)}, "
                f"found {reader.fieldnames}", row=1,
            )
        for row_no, row in enumerate(reader, start=2):
            try:
                subjects.append(
                    SubjectRecord(
                        id=row["id"],
                        time=float(row["time"]),
                        event=int(row["event"]),
                        covariates=(float(row["age"]), float(row["sex"])),
                        treat=int(row["treat"]),
                        source=row["source"].strip(),
                    )
                )
            except (TypeError, ValueError) as exc:
                raise ParseError(str(exc), row=row_no) from exc
    return subjects


def write_subjects(subjects, path) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(CSV_COLUMNS)
        for s in subjects:
            writer.writerow(
                [s.id, repr(s.time), s.event, repr(s.covariates[0]),
                 int(s.covariates[1]), s.treat, s.source]
            )


def _json_ready(obj):
    if isinstance(obj, dict):
        return {str(k): _json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_ready(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    return obj


def write_json(obj, path) -> None:
    with open(path, "w") as handle:
        json.dump(_json_ready(obj), handle, indent=2, sort_keys=True)
        handle.write("\n")


class Config:
    """Typed access to one INI config with error context."""

    def __init__(self, path):
        self.parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        found = self.parser.read(path)
        if not found:
            raise ParseError(f"config file {path} not found or unreadable")

    def get(self, section, key, cast=str, default=None, required=False):
        try:
            raw = self.parser.get(section, key)
        except (configparser.NoSectionError, configparser.NoOptionError):
            if required:
                raise ParseError(f"missing [{section}] {key}") from None
            return default
        try:
            if cast is bool:
                return raw.strip().lower() in ("1", "true", "yes", "on")
            return cast(raw.strip())
        except ValueError as exc:
            raise ParseError(f"bad value for [{section}] {key}: {raw!r}") from exc

    def get_floats(self, section, key, default=None):
        raw = self.get(section, key)
        if raw is None:
            return default
        try:
            return tuple(float(x) for x in raw.split(",") if x.strip())
        except ValueError as exc:
            raise ParseError(f"bad list for [{section}] {key}: {raw!r}") from exc

    def get_strings(self, section, key, default=None):
        raw = self.get(section, key)
        if raw is None:
            return default
        return tuple(x.strip() for x in raw.split(",") if x.strip())

    def get_int_grid(self, section, key, default=None):
        raw = self.get(section, key)
        if raw is None:
            return default
        raw = raw.strip()
        if ":" in raw:
            lo, hi = raw.split(":", 1)
            return tuple(range(int(lo), int(hi) + 1))
        return tuple(int(x) for x in raw.split(",") if x.strip())


def _partition_from_config(cfg, section, rct) -> TimePartition:
    cutpoints = cfg.get_floats(section, "cutpoints")
    if cutpoints is not None:
        return TimePartition(cutpoints)
    k = cfg.get(section, "k", int)
    if k is None:
        raise ParseError(f"[{section}] needs either cutpoints or k")
    return build_partition(rct, k)


def _calibration_params(cfg, section, out_dir) -> CalibrationParams | None:
    calib_path = cfg.get(section, "calibration_file")
    if calib_path is not None:
        try:
            with open(calib_path) as handle:
                blob = json.load(handle)
        except (OSError, json.JSONDecodeError) as exc:
            raise ParseError(f"cannot read calibration file {calib_path}: {exc}") from exc
        return CalibrationParams(
            p=int(blob["p"]), c=float(blob["c"]), q=float(blob["q"]),
            alpha=float(blob["alpha"]), alpha_max=float(blob["alpha_max"]),
        )
    p = cfg.get(section, "p", int)
    if p is None:
        return None
    return CalibrationParams(
        p=p,
        c=cfg.get(section, "c", float, 0.0),
        q=cfg.get(section, "q", float, 50.0),
    )


def _scenario_from_config(cfg) -> ScenarioSpec:
    base = ScenarioSpec()
    kwargs = {}
    for key, cast in (
        ("n_treat", int), ("n_rct_control", int), ("n_external", int),
        ("beta_age", float), ("beta_male", float), ("gamma", float),
        ("confounding", str), ("beta3", float), ("censor_multiplier", float),
        ("age_mean", float), ("age_sd", float), ("male_prob", float),
        ("effect_onset", float),
    ):
        value = cfg.get("scenario", key, cast)
        if value is not None:
            kwargs[key] = value
    for key in ("cutpoints", "event_rates", "censor_rates"):
        value = cfg.get_floats("scenario", key)
        if value is not None:
            kwargs[key] = value
    try:
        return replace(base, **kwargs)
    except ValueError as exc:
        raise ParseError(f"bad [scenario]: {exc}") from exc


def _weight_dump(wm, params, mode, path) -> None:
    """Per-(control, interval) CSV: raw, shrunk and final weights plus
    observed value and predictive quantiles."""
    shrunk_m = transform(wm, params, "shrunk") if params else wm
    final_m = transform(wm, params, mode) if params and mode else shrunk_m
    rows = []
    by_pair = {(d["j"], d["k"]): d for d in wm.diagnostics}
    for j, raw in enumerate(wm.rows):
        for k in range(raw.size):
            d = by_pair.get((j, k), {})
            rows.append(
                {
                    "j": j, "k": k + 1,
                    "a_raw": raw[k],
                    "a_shrunk": shrunk_m.rows[j][k],
                    "a_final": final_m.rows[j][k],
                    "w_obs": d.get("w_obs", np.nan),
                    "q05": d.get("q05", np.nan),
                    "q50": d.get("q50", np.nan),
                    "q95": d.get("q95", np.nan),
                }
            )
    pd.DataFrame(rows).to_csv(path, index=False, float_format="%.17g")


def cmd_fit(cfg: Config, out_dir: Path, seed_override, threads, figures) -> int:
    data_path = cfg.get("data", "input", required=True)
    dataset = read_subjects(data_path)
    rct = [s for s in dataset if s.source == RCT]
    external = [s for s in dataset if s.source == EXTERNAL]
    method_name = cfg.get("analysis", "method", required=True)
    seed = seed_override if seed_override is not None else cfg.get(
        "analysis", "seed", int, 0
    )
    alpha = cfg.get("analysis", "alpha", float, 0.025)
    partition = _partition_from_config(cfg, "analysis", rct)
    params = _calibration_params(cfg, "analysis", out_dir)
    method = method_from_name(method_name, params)

    wm = None
    weights_arg = {"no_borrow": 0.0, "pool": 1.0, "commensurate": 1.0}.get(method.kind)
    if method.kind == "fixed":
        weights_arg = method.a0
    if method.needs_weights:
        if not external:
            raise EmptyExternal("method requires external controls, none in input")
        wm = compute_all(
            rct, external, partition,
            n_samples=cfg.get("analysis", "n_predictive", int, DEFAULT_N_PREDICTIVE),
            n_imputations=cfg.get("analysis", "n_imputations", int, DEFAULT_N_IMPUTATIONS),
            seed=seed,
            diagnostics=True,
        )
        mode = "discounted" if method.kind == "discounted" else "shrunk"
        weights_arg = transform(wm, method.params, mode) if method.kind != "untransformed" else wm
        _weight_dump(wm, method.params, mode if method.kind != "untransformed" else None,
                     out_dir / "weights.csv")

    rows = expand_rows(dataset, partition, weights=weights_arg)
    result = {
        "method": method.name,
        "seed": seed,
        "K": partition.K,
        "cutpoints": list(partition.cutpoints),
        "n_events": int(sum(s.event for s in dataset)),
        "a_bar": float(weights_arg.entries().mean())
        if wm is not None else (float(weights_arg) if weights_arg is not None else None),
    }
    if method.is_mcmc:
        draws = sample_mcmc(
            rows,
            n_iter=cfg.get("mcmc", "iterations", int, 10000),
            n_warmup=cfg.get("mcmc", "warmup", int, 2500),
            chains=cfg.get("mcmc", "chains", int, 4),
            seed=seed,
        )
        pooled = draws.pooled_gamma()
        lo, hi = np.exp(np.quantile(pooled, [0.025, 0.975]))
        result.update(
            hr=float(np.exp(pooled.mean())), ci_low=float(lo), ci_high=float(hi),
            ci_width=float(hi - lo), bic=None,
            reject=test_superiority_mcmc(draws, alpha),
            rhat_gamma=draws.rhat_gamma,
        )
    else:
        post = fit(rows)
        summary = hazard_ratio_summary(post)
        result.update(
            hr=summary["hr"], ci_low=summary["ci_low"], ci_high=summary["ci_high"],
            ci_width=summary["ci_width"], bic=bic(post, rows),
            reject=test_superiority(post, alpha),
        )
    write_json(result, out_dir / "fit.json")
    if figures and wm is not None:
        final = weights_arg.entries() if hasattr(weights_arg, "entries") else None
        report.weight_histogram(wm.entries(), final, out_dir / "weights_hist.png")
    print(json.dumps(_json_ready(result), sort_keys=True))
    return 0


def cmd_weights(cfg: Config, out_dir: Path, seed_override, threads, figures) -> int:
    data_path = cfg.get("data", "input", required=True)
    dataset = read_subjects(data_path)
    rct = [s for s in dataset if s.source == RCT]
    external = [s for s in dataset if s.source == EXTERNAL]
    if not external:
        raise EmptyExternal("no external controls in input")
    seed = seed_override if seed_override is not None else cfg.get(
        "analysis", "seed", int, 0
    )
    partition = _partition_from_config(cfg, "analysis", rct)
    params = _calibration_params(cfg, "analysis", out_dir)
    wm = compute_all(
        rct, external, partition,
        n_samples=cfg.get("analysis", "n_predictive", int, DEFAULT_N_PREDICTIVE),
        n_imputations=cfg.get("analysis", "n_imputations", int, DEFAULT_N_IMPUTATIONS),
        seed=seed,
        diagnostics=True,
    )
    _weight_dump(wm, params, "discounted" if params and params.c > 0 else None,
                 out_dir / "weights.csv")
    summary = {
        "seed": seed,
        "K": partition.K,
        "n_external": len(external),
        "mean_raw_weight": wm.mean(),
        "mean_by_interval": [
            float(wm.interval_entries(k).mean()) if wm.interval_entries(k).size else None
            for k in range(partition.K)
        ],
    }
    write_json(summary, out_dir / "weights.json")
    if figures:
        report.weight_histogram(wm.entries(), None, out_dir / "weights_hist.png")
    print(json.dumps(_json_ready(summary), sort_keys=True))
    return 0


def cmd_calibrate(cfg: Config, out_dir: Path, seed_override, threads, figures) -> int:
    scenario = _scenario_from_config(cfg)
    seed = seed_override if seed_override is not None else cfg.get(
        "calibrate", "seed", int, 0
    )
    alpha = cfg.get("calibrate", "alpha", float, 0.025)
    alpha_max = cfg.get("calibrate", "alpha_max", float, 0.15)
    reps = cfg.get("calibrate", "reps", int, 2000)
    q = cfg.get("calibrate", "q", float, 50.0)
    n_samples = cfg.get("calibrate", "n_predictive", int, DEFAULT_N_PREDICTIVE)
    n_imputations = cfg.get("calibrate", "n_imputations", int, DEFAULT_N_IMPUTATIONS)
    p_grid = cfg.get_int_grid("calibrate", "p_grid", DEFAULT_P_GRID)
    c_grid = cfg.get_floats("calibrate", "c_grid", DEFAULT_C_GRID)
    beta3_grid = cfg.get_floats("calibrate", "beta3_grid", DEFAULT_BETA3_GRID)

    p_design = replace(scenario, gamma=0.0, beta3=0.0, confounding="none")
    pcal = calibrate_p(
        p_design, alpha=alpha, reps=reps, p_grid=p_grid, seed=seed,
        n_samples=n_samples, n_imputations=n_imputations, workers=threads,
    )
    c_design = replace(scenario, gamma=0.0, confounding="shift")
    ccal = calibrate_c(
        c_design, pcal.p_star, alpha_max=alpha_max, reps=reps, c_grid=c_grid,
        beta3_grid=beta3_grid, seed=seed, q=q, alpha=alpha,
        n_samples=n_samples, n_imputations=n_imputations, workers=threads,
    )
    blob = {
        "p": pcal.p_star,
        "c": ccal.c_star,
        "q": q,
        "alpha": alpha,
        "alpha_max": alpha_max,
        "seed": seed,
        "reps": reps,
        "n_predictive": n_samples,
        "rates_by_grid_point": {
            "p": {str(k): v for k, v in pcal.rates.items()},
            "c_max_over_beta3": {f"{k:.4g}": v for k, v in ccal.max_rates.items()},
            "c_by_beta3": {
                f"{b:.4g}": {f"{c:.4g}": r for c, r in by_c.items()}
                for b, by_c in ccal.rates_by_beta3.items()
            },
        },
    }
    write_json(blob, out_dir / "calibration.json")
    if figures:
        report.calibration_figure(
            pcal.rates, ccal.max_rates, alpha, alpha_max, out_dir / "calibration.png"
        )
    print(json.dumps({"p": pcal.p_star, "c": ccal.c_star}, sort_keys=True))
    return 0


def cmd_simulate(cfg: Config, out_dir: Path, seed_override, threads, figures) -> int:
    scenario = _scenario_from_config(cfg)
    seed = seed_override if seed_override is not None else cfg.get(
        "simulate", "seed", int, 0
    )
    reps = cfg.get("simulate", "reps", int, 1000)
    alpha = cfg.get("simulate", "alpha", float, 0.025)
    n_samples = cfg.get("simulate", "n_predictive", int, DEFAULT_N_PREDICTIVE)
    n_imputations = cfg.get("simulate", "n_imputations", int, DEFAULT_N_IMPUTATIONS)
    method_names = cfg.get_strings("simulate", "methods", ("no_borrow",))
    params = _calibration_params(cfg, "simulate", out_dir)
    methods = [method_from_name(name, params) for name in method_names]
    beta3_grid = cfg.get_floats("simulate", "beta3_grid", (scenario.beta3,))
    confoundings = cfg.get_strings("simulate", "confoundings", (scenario.confounding,))
    multipliers = cfg.get_floats(
        "simulate", "censor_multipliers", (scenario.censor_multiplier,)
    )
    gammas = cfg.get_floats("simulate", "gammas", (scenario.gamma,))

    long_rows, summaries = [], []
    for confounding in confoundings:
        for multiplier in multipliers:
            for gamma in gammas:
                for beta3 in beta3_grid:
                    spec = replace(
                        scenario, confounding=confounding, beta3=float(beta3),
                        censor_multiplier=float(multiplier), gamma=float(gamma),
                    )
                    result = run_scenario(
                        spec, methods, n_reps=reps, seed=seed, alpha=alpha,
                        n_samples=n_samples, n_imputations=n_imputations,
                        workers=threads,
                    )
                    long_rows.extend(result.as_rows())
                    summaries.append(result)

    long_df = pd.DataFrame(long_rows)
    long_df.to_csv(out_dir / "oc_long.csv", index=False, float_format="%.17g")
    from .simulate import weight_summary

    weight_rows = weight_summary(summaries)
    if weight_rows:
        pd.DataFrame(weight_rows).to_csv(
            out_dir / "weight_summary.csv", index=False, float_format="%.17g"
        )
    if figures:
        report.oc_figures(long_df, out_dir)
    print(f"wrote {len(long_rows)} metric rows for {len(summaries)} scenario cells")
    return 0


COMMANDS = {
    "fit": cmd_fit,
    "weights": cmd_weights,
    "calibrate": cmd_calibrate,
    "simulate": cmd_simulate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ecborrow",
        description="Case-weighted adaptive power priors for hybrid control arms",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, help="INI config file")
        cmd.add_argument("--seed", type=int, default=None, help="override config seed")
        cmd.add_argument("--out", default=".", help="output directory")
        cmd.add_argument("--threads", type=int, default=1, help="worker processes")
        cmd.add_argument("--no-figures", action="store_true", help="skip PNG output")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out_dir = Path(args.out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        cfg = Config(args.config)
        return COMMANDS[args.command](
            cfg, out_dir, args.seed, args.threads, not args.no_figures
        )
    except (ParseError, EmptyExternal, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CalibrationFailure as exc:
        print(f"calibration failure: {exc}", file=sys.stderr)
        return 4
    except EcborrowError as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
