"""Weight shrinkage and discounting, with simulation-based tuning.

Raw compatibility weights are uniform on [0, 1] for compatible external
controls, but plugging them in untransformed inflates the type-I error while
a fixed weight of 0.5 is conservative.  The shrinkage map pulls weights
toward 0.5 with an odd polynomial of degree ``p``; the discount map scales
every weight by a logistic function of the dataset-average raw weight so that
dataset-level incompatibility collapses borrowing toward zero.  Both knobs
are tuned by grid search against a simulated design, never against observed
external outcomes.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import CalibrationFailure
from .weights import WeightMatrix

DEFAULT_Q = 50.0
DEFAULT_P_GRID = tuple(range(1, 16))
DEFAULT_C_GRID = tuple(round(0.05 * i, 2) for i in range(1, 10))
DEFAULT_BETA3_GRID = (
    -float(np.log(3.0)), -float(np.log(2.0)), -float(np.log(1.5)),
    0.0,
    float(np.log(1.5)), float(np.log(2.0)), float(np.log(3.0)),
)


@dataclass(frozen=True)
class CalibrationParams:
    """Shrinkage exponent, discount location/shape, and error-rate targets."""

    p: int = 1
    c: float = 0.0
    q: float = DEFAULT_Q
    alpha: float = 0.025
    alpha_max: float = 0.15

    def __post_init__(self):
        if not (isinstance(self.p, (int, np.integer)) and self.p >= 1):
            raise ValueError("p must be an integer >= 1")
        if not 0.0 <= self.c < 0.5:
            raise ValueError("c must lie in [0, 0.5)")
        if not self.q > 0:
            raise ValueError("q must be positive")
        if not 0.0 < self.alpha < self.alpha_max < 1.0:
            raise ValueError("need 0 < alpha < alpha_max < 1")


def shrink(a, p: int):
    """Odd polynomial pull toward 0.5: identity at p=1, flat at large p."""
    if p < 1:
        raise ValueError("p must be >= 1")
    a = np.asarray(a, dtype=float)
    s = 2.0 * (a - 0.5)
    out = 0.5 * (np.sign(s) * np.abs(s) ** p + 1.0)
    return float(out) if out.ndim == 0 else out


def discount(abar: float, c: float, q: float = DEFAULT_Q) -> float:
    """Logistic multiplier in (0, 1), increasing in the average weight."""
    return float(1.0 / (1.0 + np.exp(-q * (abar - c))))


def average_weight(weights) -> float:
    """Grand mean over all (control, interval) entries."""
    entries = weights.entries() if hasattr(weights, "entries") else np.concatenate(
        [np.asarray(r, dtype=float) for r in weights]
    )
    if entries.size == 0:
        raise ValueError("empty weight matrix")
    return float(entries.mean())


def transform(matrix: WeightMatrix, params: CalibrationParams, mode: str) -> WeightMatrix:
    """Apply ``f_p`` entrywise, and for ``mode='discounted'`` also the scalar
    ``g_c`` computed from the raw average weight."""
    if mode not in ("shrunk", "discounted"):
        raise ValueError("mode must be 'shrunk' or 'discounted'")
    mult = 1.0
    if mode == "discounted":
        mult = discount(average_weight(matrix), params.c, params.q)
    rows = tuple(shrink(r, params.p) * mult for r in matrix.rows)
    return replace(matrix, rows=rows)


@dataclass(frozen=True)
class PCalibration:
    p_star: int
    rates: dict
    alpha: float
    reps: int
    seed: int


@dataclass(frozen=True)
class CCalibration:
    c_star: float
    max_rates: dict
    rates_by_beta3: dict
    alpha_max: float
    reps: int
    seed: int


def calibrate_p(
    design,
    alpha: float = 0.025,
    reps: int = 2000,
    p_grid=DEFAULT_P_GRID,
    seed: int = 0,
    n_samples: int | None = None,
    n_imputations: int | None = None,
    workers: int = 1,
) -> PCalibration:
    """Pick the shrinkage exponent whose null rejection rate best matches ``alpha``.

    The design must be a compatible null scenario (no treatment effect, no
    confounding).  All grid points share the same simulated datasets and raw
    weights, so differences between them are not Monte Carlo noise.  Ties in
    ``|rate - alpha|`` break toward the smallest exponent whose rate is at
    most ``alpha`` plus one simulation standard error.

    Raises
    ------
    CalibrationFailure
        No grid point achieves a rate within two standard errors of alpha
        from above.
    """
    from .simulate import weighted_rejection_rates

    if design.gamma != 0.0:
        raise ValueError("calibration design must have gamma = 0")
    if design.confounding != "none" and design.beta3 != 0.0:
        raise ValueError("p-calibration requires compatible external controls")
    transforms = [CalibrationParams(p=p, c=0.0) for p in p_grid]
    rates = weighted_rejection_rates(
        design, transforms, mode="shrunk", reps=reps, seed=seed, alpha=alpha,
        n_samples=n_samples, n_imputations=n_imputations, workers=workers,
    )
    se = float(np.sqrt(alpha * (1.0 - alpha) / reps))
    by_p = {p: r for p, r in zip(p_grid, rates)}
    if not any(r <= alpha + 2.0 * se for r in rates):
        raise CalibrationFailure(
            f"no p in {list(p_grid)} reaches a rate within 2 SE of alpha={alpha}"
        )
    gaps = np.abs(np.asarray(rates) - alpha)
    best = gaps.min()
    tied = [p for p, g in zip(p_grid, gaps) if g == best]
    controlled = [p for p in tied if by_p[p] <= alpha + se]
    p_star = min(controlled) if controlled else min(tied)
    return PCalibration(p_star=int(p_star), rates=by_p, alpha=alpha, reps=reps, seed=seed)


def calibrate_c(
    design,
    p: int,
    alpha_max: float = 0.15,
    reps: int = 2000,
    c_grid=DEFAULT_C_GRID,
    beta3_grid=DEFAULT_BETA3_GRID,
    seed: int = 0,
    q: float = DEFAULT_Q,
    alpha: float = 0.025,
    n_samples: int | None = None,
    n_imputations: int | None = None,
    workers: int = 1,
) -> CCalibration:
    """Pick the largest discount location whose worst-case shifted-null
    rejection rate stays below ``alpha_max``.

    ``design`` must be a shift-confounded null scenario; its ``beta3`` is
    swept over ``beta3_grid``.  The chosen grid value is refined once by
    testing the midpoint toward its first infeasible neighbour.

    Raises
    ------
    CalibrationFailure
        Every grid value violates the bound.
    """
    from .simulate import weighted_rejection_rates

    if design.confounding != "shift" or design.gamma != 0.0:
        raise ValueError("calibration design must be a shift-confounded null scenario")

    def max_rate_for(cs):
        params = [CalibrationParams(p=p, c=c, q=q) for c in cs]
        per_beta = {}
        for b3 in beta3_grid:
            spec_b = replace(design, beta3=float(b3))
            per_beta[float(b3)] = weighted_rejection_rates(
                spec_b, params, mode="discounted", reps=reps, seed=seed, alpha=alpha,
                n_samples=n_samples, n_imputations=n_imputations, workers=workers,
            )
        maxima = [max(per_beta[b][i] for b in per_beta) for i in range(len(cs))]
        return maxima, per_beta

    c_grid = tuple(sorted(c_grid))
    maxima, per_beta = max_rate_for(c_grid)
    feasible = [c for c, m in zip(c_grid, maxima) if m < alpha_max]
    if not feasible:
        raise CalibrationFailure(
            f"no c in {list(c_grid)} keeps the shifted-null rate below {alpha_max}"
        )
    c_star = max(feasible)
    max_rates = {c: m for c, m in zip(c_grid, maxima)}
    rates_by_beta3 = {
        b: {c: per_beta[b][i] for i, c in enumerate(c_grid)} for b in per_beta
    }

    idx = c_grid.index(c_star)
    if idx + 1 < len(c_grid) and max_rates[c_grid[idx + 1]] >= alpha_max:
        mid = 0.5 * (c_star + c_grid[idx + 1])
        mid_max, mid_per_beta = max_rate_for((mid,))
        max_rates[mid] = mid_max[0]
        for b in mid_per_beta:
            rates_by_beta3[b][mid] = mid_per_beta[b][0]
        if mid_max[0] < alpha_max:
            c_star = mid
    return CCalibration(
        c_star=float(c_star), max_rates=max_rates, rates_by_beta3=rates_by_beta3,
        alpha_max=alpha_max, reps=reps, seed=seed,
    )
