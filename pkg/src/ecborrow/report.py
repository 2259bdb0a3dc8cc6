"""Figure rendering for CLI reports.

Every command that writes delimited output also drops PNG figures next to
it; rendering is headless (Agg) and deterministic apart from matplotlib
versioning.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def weight_histogram(raw: np.ndarray, final: np.ndarray | None, path: Path) -> Path:
    """Histogram of raw (and, if different, transformed) weights on [0, 1]."""
    fig, ax = plt.subplots(figsize=(6, 4))
    bins = np.linspace(0.0, 1.0, 21)
    ax.hist(raw, bins=bins, alpha=0.6, label=f"raw (mean {np.mean(raw):.3f})")
    if final is not None and not np.array_equal(raw, final):
        ax.hist(final, bins=bins, alpha=0.6,
                label=f"transformed (mean {np.mean(final):.3f})")
    ax.axhline(len(raw) / 20.0, color="grey", ls="--", lw=1, label="uniform reference")
    ax.set_xlabel("case weight")
    ax.set_ylabel("count")
    ax.legend(frameon=False)
    return _save(fig, path)


def calibration_figure(p_rates: dict, c_max_rates: dict, alpha: float,
                       alpha_max: float, path: Path) -> Path:
    """Rejection-rate curves over the shrinkage and discount grids."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    if p_rates:
        ps = sorted(p_rates)
        axes[0].plot(ps, [p_rates[p] for p in ps], "o-")
        axes[0].axhline(alpha, color="red", ls="--", lw=1)
        axes[0].set_xlabel("shrinkage exponent p")
        axes[0].set_ylabel("null rejection rate")
    if c_max_rates:
        cs = sorted(c_max_rates)
        axes[1].plot(cs, [c_max_rates[c] for c in cs], "o-")
        axes[1].axhline(alpha_max, color="red", ls="--", lw=1)
        axes[1].set_xlabel("discount location c")
        axes[1].set_ylabel("max shifted-null rejection rate")
    return _save(fig, path)


def oc_figures(long_df: pd.DataFrame, out_dir: Path, stem: str = "oc") -> list[Path]:
    """One line chart per (scenario family, metric): value against beta3 by method."""
    paths = []
    df = long_df[long_df["method"] != "weights"]
    if df.empty:
        return paths
    families = df["scenario"].str.replace(r"@b3=[^@]*", "", regex=True)
    for family in sorted(families.unique()):
        sub = df[families == family]
        for metric in ("rejection_rate", "mse", "mean_ci_width"):
            block = sub[sub["metric"] == metric]
            if block.empty:
                continue
            fig, ax = plt.subplots(figsize=(6, 4))
            for method, grp in block.groupby("method"):
                grp = grp.sort_values("beta3")
                ax.plot(grp["beta3"], grp["value"], "o-", label=method)
            ax.set_xlabel("confounder effect beta3")
            ax.set_ylabel(metric)
            ax.set_title(family)
            ax.legend(frameon=False, fontsize=8)
            safe = family.replace("@", "_").replace("=", "").replace(":", "")
            paths.append(_save(fig, out_dir / f"{stem}_{safe}_{metric}.png"))
    return paths
