"""Posterior inference for the weighted piecewise-exponential model.

The weighted survival likelihood factors into per-(subject, interval) Poisson
terms: response 1 only on the terminal interval of an event, ``log`` at-risk
time as offset, and the case weight multiplying each term's log-likelihood.
Under a flat improper prior the log posterior is therefore a weighted Poisson
log-likelihood, maximised here by Newton-Raphson with step halving, and the
posterior is approximated by a normal centred at the mode with covariance
equal to the inverse negative Hessian.

Parameter layout is ``[alpha_1..alpha_K, beta_1..beta_p, gamma?]`` where
``alpha = log(lambda)`` are log baseline rates and ``gamma`` (present only
when the design includes the treatment column) is the treatment
log-hazard-ratio.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import norm

from .errors import DomainError, NoConvergence, ShapeError, SingularDesign
from .survival import SubjectRecord, TimePartition, as_columns, exposure_matrix

# Rows with essentially zero weight are dropped to avoid 0 * (-inf) at the
# no-borrowing limit.
WEIGHT_FLOOR = 1e-12


@dataclass(frozen=True)
class PoissonRows:
    """Row-expanded dataset: one row per (subject, at-risk interval)."""

    response: np.ndarray
    offset: np.ndarray
    weight: np.ndarray
    design: np.ndarray
    external: np.ndarray
    n_intervals: int
    n_covariates: int
    has_treatment: bool

    @property
    def n_rows(self) -> int:
        return self.response.size

    @property
    def n_params(self) -> int:
        return self.design.shape[1]

    def weighted_events(self) -> float:
        return float(np.sum(self.weight * self.response))


@dataclass(frozen=True)
class Ridge:
    """Optional Gaussian penalty ``-0.5 * precision * (theta - center)^2``.

    Zero precision entries leave the corresponding coordinate unpenalised.
    """

    center: np.ndarray
    precision: np.ndarray


@dataclass(frozen=True)
class LaplacePosterior:
    """Normal approximation at the posterior mode.

    ``covariance`` is the inverse of the negative Hessian of the log
    posterior at ``mode``; it is symmetric positive definite by construction.
    ``log_likelihood`` excludes any ridge penalty, ``log_posterior`` includes
    it (they coincide for unpenalised fits).
    """

    mode: np.ndarray
    covariance: np.ndarray
    log_posterior: float
    log_likelihood: float
    n_intervals: int
    n_covariates: int
    has_treatment: bool
    n_iterations: int

    @property
    def n_params(self) -> int:
        return self.mode.size


def expand_rows(
    dataset: Sequence[SubjectRecord],
    partition: TimePartition,
    weights=None,
    include_covariates: bool = True,
    include_treatment: bool = True,
    response: str = "event",
) -> PoissonRows:
    """Expand subjects into weighted Poisson rows against ``partition``.

    Parameters
    ----------
    weights
        ``None`` for unit weights everywhere, a scalar applied to every
        external-control row, or per-control weight vectors (one array of
        length ``K_j`` per external control, in dataset order; a
        ``WeightMatrix`` works directly).
    response
        ``"event"`` for the event model, ``"censoring"`` to swap roles and
        treat censorings as the outcome.

    Raises
    ------
    ShapeError
        Weight vectors do not line up with the external controls or their
        at-risk intervals.
    """
    if response not in ("event", "censoring"):
        raise ValueError("response must be 'event' or 'censoring'")
    cols = as_columns(dataset)
    n = cols.times.size
    terminal, H = exposure_matrix(cols.times, partition)
    at_risk = H > 0.0

    idx_subject, idx_interval = np.nonzero(at_risk)
    m = idx_subject.size
    K = partition.K

    outcome = cols.events if response == "event" else 1 - cols.events
    resp = (
        (idx_interval == terminal[idx_subject]) & (outcome[idx_subject] == 1)
    ).astype(float)
    offset = np.log(H[at_risk])

    blocks = [np.zeros((m, K))]
    blocks[0][np.arange(m), idx_interval] = 1.0
    n_cov = 0
    if include_covariates and cols.covariates.shape[1] > 0:
        n_cov = cols.covariates.shape[1]
        blocks.append(cols.covariates[idx_subject])
    if include_treatment:
        blocks.append(cols.treat[idx_subject, None].astype(float))
    design = np.hstack(blocks)

    w = np.ones(m)
    ext_rows = cols.external[idx_subject]
    if weights is not None:
        weight_rows = getattr(weights, "rows", weights)
        if np.isscalar(weight_rows):
            w[ext_rows] = float(weight_rows)
        else:
            ext_subjects = np.nonzero(cols.external)[0]
            if len(weight_rows) != ext_subjects.size:
                raise ShapeError(
                    f"{len(weight_rows)} weight vectors for "
                    f"{ext_subjects.size} external controls"
                )
            for j, subj in enumerate(ext_subjects):
                if len(weight_rows[j]) != terminal[subj] + 1:
                    raise ShapeError(
                        f"external control {j}: weight vector length "
                        f"{len(weight_rows[j])} != {terminal[subj] + 1} at-risk intervals"
                    )
            cat = np.concatenate([np.asarray(r, dtype=float) for r in weight_rows])
            w[ext_rows] = cat

    return PoissonRows(
        response=resp,
        offset=offset,
        weight=w,
        design=design,
        external=ext_rows,
        n_intervals=K,
        n_covariates=n_cov,
        has_treatment=include_treatment,
    )


def _check_theta(theta: np.ndarray, rows: PoissonRows) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (rows.n_params,):
        raise ShapeError(f"theta has shape {theta.shape}, expected ({rows.n_params},)")
    if not np.all(np.isfinite(theta)):
        raise DomainError("non-finite parameter value")
    return theta


def log_posterior(theta, rows: PoissonRows, ridge: Ridge | None = None) -> float:
    """Weighted Poisson log-likelihood (flat prior), plus optional ridge."""
    theta = _check_theta(theta, rows)
    if rows.n_rows == 0:
        raise ValueError("no rows")
    eta = rows.design @ theta + rows.offset
    value = float(np.sum(rows.weight * (rows.response * eta - np.exp(eta))))
    if ridge is not None:
        value -= 0.5 * float(np.sum(ridge.precision * (theta - ridge.center) ** 2))
    return value


def gradient(theta, rows: PoissonRows, ridge: Ridge | None = None) -> np.ndarray:
    theta = _check_theta(theta, rows)
    mu = np.exp(rows.design @ theta + rows.offset)
    g = rows.design.T @ (rows.weight * (rows.response - mu))
    if ridge is not None:
        g -= ridge.precision * (theta - ridge.center)
    return g


def hessian(theta, rows: PoissonRows, ridge: Ridge | None = None) -> np.ndarray:
    theta = _check_theta(theta, rows)
    mu = np.exp(rows.design @ theta + rows.offset)
    wmu = rows.weight * mu
    H = -(rows.design.T * wmu) @ rows.design
    if ridge is not None:
        H -= np.diag(ridge.precision)
    return H


def _drop_negligible(rows: PoissonRows) -> PoissonRows:
    keep = rows.weight >= WEIGHT_FLOOR
    if np.all(keep):
        return rows
    return PoissonRows(
        response=rows.response[keep],
        offset=rows.offset[keep],
        weight=rows.weight[keep],
        design=rows.design[keep],
        external=rows.external[keep],
        n_intervals=rows.n_intervals,
        n_covariates=rows.n_covariates,
        has_treatment=rows.has_treatment,
    )


def fit(
    rows: PoissonRows,
    ridge: Ridge | None = None,
    max_iter: int = 100,
    grad_tol: float = 1e-8,
    step_tol: float = 1e-8,
    max_halvings: int = 20,
) -> LaplacePosterior:
    """Newton-Raphson mode finding with a Laplace covariance at the mode.

    Starts from the crude pooled-rate MLE (all ``alpha`` equal, remaining
    coefficients zero) and halves any Newton step that fails to increase the
    log posterior.  Convergence requires both a small gradient and a small
    step.

    Raises
    ------
    SingularDesign
        Rank-deficient design over the positive-weight rows, or a Hessian at
        the mode that is not negative definite.
    NoConvergence
        Tolerances not met within ``max_iter`` iterations.
    """
    rows = _drop_negligible(rows)
    if rows.n_rows == 0:
        raise SingularDesign("all rows have negligible weight")
    d = rows.n_params

    scaled = rows.design * np.sqrt(rows.weight)[:, None]
    if ridge is None:
        if np.linalg.matrix_rank(scaled) < d:
            raise SingularDesign("design matrix is rank deficient on weighted rows")
        # Under the flat prior the mode diverges if any indicator column has
        # at-risk exposure but no weighted events (log rate walks to -inf).
        wy = rows.weight * rows.response
        K = rows.n_intervals
        events_by_interval = rows.design[:, :K].T @ wy
        if np.any(events_by_interval <= 0):
            k = int(np.argmin(events_by_interval))
            raise SingularDesign(
                f"no weighted events in interval {k + 1}; the flat-prior mode diverges"
            )
        if rows.has_treatment:
            treat = rows.design[:, -1]
            if (treat @ wy) <= 0 or ((1.0 - treat) @ wy) <= 0:
                raise SingularDesign(
                    "one treatment arm has no weighted events; the mode diverges"
                )

    total_events = rows.weighted_events()
    total_exposure = float(np.sum(rows.weight * np.exp(rows.offset)))
    alpha0 = np.log(max(total_events, 0.5) / total_exposure)
    theta = np.zeros(d)
    theta[: rows.n_intervals] = alpha0

    current = log_posterior(theta, rows, ridge)
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        g = gradient(theta, rows, ridge)
        H = hessian(theta, rows, ridge)
        try:
            step = np.linalg.solve(-H, g)
        except np.linalg.LinAlgError as exc:
            raise SingularDesign("Hessian solve failed") from exc

        scale = 1.0
        # Accept steps that do not decrease the objective beyond rounding.
        floor = current - 1e-10 * (1.0 + abs(current))
        for _ in range(max_halvings + 1):
            candidate = theta + scale * step
            try:
                value = log_posterior(candidate, rows, ridge)
            except DomainError:
                value = -np.inf
            if value >= floor:
                break
            scale *= 0.5
        theta = theta + scale * step
        current = value

        if np.max(np.abs(g)) < grad_tol and np.linalg.norm(scale * step) < step_tol:
            break
    else:
        raise NoConvergence(f"Newton-Raphson did not converge in {max_iter} iterations")

    H = hessian(theta, rows, ridge)
    eigval, eigvec = np.linalg.eigh(-H)
    if eigval.min() <= 0:
        raise SingularDesign("Hessian at the mode is not negative definite")
    cov = (eigvec / eigval) @ eigvec.T
    cov = 0.5 * (cov + cov.T)

    logpost = log_posterior(theta, rows, ridge)
    loglik = log_posterior(theta, rows, None)
    return LaplacePosterior(
        mode=theta,
        covariance=cov,
        log_posterior=logpost,
        log_likelihood=loglik,
        n_intervals=rows.n_intervals,
        n_covariates=rows.n_covariates,
        has_treatment=rows.has_treatment,
        n_iterations=n_iter,
    )


def marginal_treatment(post: LaplacePosterior) -> tuple[float, float]:
    """Posterior mean and standard deviation of the treatment log-hazard-ratio."""
    if not post.has_treatment:
        raise ValueError("posterior was fitted without a treatment effect")
    idx = post.n_params - 1
    return float(post.mode[idx]), float(np.sqrt(post.covariance[idx, idx]))


def test_superiority(post: LaplacePosterior, level: float = 0.025) -> bool:
    """Reject the null of no benefit when ``Pr(gamma >= 0 | data) < level``."""
    gamma, sd = marginal_treatment(post)
    return bool(norm.sf(0.0, loc=gamma, scale=sd) < level)


def hazard_ratio_summary(post: LaplacePosterior, level: float = 0.05) -> dict:
    """Hazard ratio with a central credible interval on the HR scale."""
    gamma, sd = marginal_treatment(post)
    z = norm.ppf(1.0 - level / 2.0)
    lo, hi = np.exp(gamma - z * sd), np.exp(gamma + z * sd)
    return {
        "hr": float(np.exp(gamma)),
        "ci_low": float(lo),
        "ci_high": float(hi),
        "ci_width": float(hi - lo),
        "gamma": gamma,
        "gamma_sd": sd,
    }


def bic(post: LaplacePosterior, rows: PoissonRows) -> float:
    """Bayesian information criterion with weighted events as sample size.

    The row-expanded objective carries an extra ``sum(w * y * log H)`` term
    relative to the survival log-likelihood; it is constant in the parameters
    but depends on the partition, so it is removed here to make BIC values
    comparable across segment counts.  The effective sample size counts
    observed events with their case weights, which keeps adaptive,
    no-borrowing and pooling analyses comparable.
    """
    kept = _drop_negligible(rows)
    n_eff = kept.weighted_events()
    if n_eff <= 0:
        raise ValueError("no weighted events; BIC undefined")
    d = rows.n_params
    offset_term = float(np.sum(kept.weight * kept.response * kept.offset))
    return float(-2.0 * (post.log_likelihood - offset_term) + d * np.log(n_eff))
