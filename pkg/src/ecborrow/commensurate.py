"""Commensurate-prior baseline fitted by adaptive random-walk MCMC.

The external controls enter the likelihood with their linear predictor
extended by a drift term ``delta`` (log hazard ratio of external versus
randomised controls), with ``delta ~ Normal(0, sigma^2)`` and a Half-Cauchy
hyperprior on ``sigma``.  Case weights, when supplied, multiply the external
rows exactly as in the power-prior fits; unit weights recover the plain
commensurate model.

Sampling uses a component-blocked random-walk Metropolis on
``(theta, delta, log sigma)``.  Chains are updated in lockstep through
vectorised proposals from a single seeded generator, so runs are exactly
reproducible.  Proposal scales adapt toward a 0.3 acceptance rate during
warmup only (diminishing Robbins-Monro steps) and are frozen afterwards.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConvergenceWarning, DomainError, EcborrowError
from .inference import LaplacePosterior, PoissonRows, fit

DEFAULT_HALF_CAUCHY_SCALE = 0.3
DEFAULT_CHAINS = 4
DEFAULT_ITERATIONS = 10_000
DEFAULT_WARMUP = 2_500

_TARGET_ACCEPT = 0.3
RHAT_THRESHOLD = 1.05


@dataclass(frozen=True)
class CommensurateState:
    """One point in the commensurate parameter space."""

    theta: np.ndarray
    delta: float
    sigma: float


@dataclass(frozen=True)
class CommensurateDraws:
    """Post-warmup draws with acceptance and convergence diagnostics."""

    gamma: np.ndarray
    delta: np.ndarray
    sigma: np.ndarray
    accept_rates: dict
    rhat_gamma: float
    n_chains: int
    n_warmup: int

    def pooled_gamma(self) -> np.ndarray:
        return self.gamma.reshape(-1)

    def prob_benefit(self) -> float:
        """Posterior probability of a beneficial treatment effect (gamma < 0)."""
        return float(np.mean(self.pooled_gamma() < 0.0))


def _log_half_cauchy(sigma: float, scale: float) -> float:
    return float(np.log(2.0 / (np.pi * scale)) - np.log1p((sigma / scale) ** 2))


def log_posterior_commensurate(
    state: CommensurateState,
    rows: PoissonRows,
    hc_scale: float = DEFAULT_HALF_CAUCHY_SCALE,
) -> float:
    """Weighted Poisson log-likelihood with drift, plus the hierarchy terms.

    The initial prior on ``(theta, delta)`` is flat; ``delta`` additionally
    carries its Normal(0, sigma^2) commensurability prior and ``sigma`` the
    Half-Cauchy hyperprior.
    """
    if not state.sigma > 0:
        raise DomainError("sigma must be positive")
    theta = np.asarray(state.theta, dtype=float)
    eta = rows.design @ theta + rows.offset + rows.external * state.delta
    loglik = float(np.sum(rows.weight * (rows.response * eta - np.exp(eta))))
    log_delta = -0.5 * np.log(2.0 * np.pi) - np.log(state.sigma) - 0.5 * (
        state.delta / state.sigma
    ) ** 2
    return loglik + float(log_delta) + _log_half_cauchy(state.sigma, hc_scale)


def _laplace_init(rows: PoissonRows) -> tuple[np.ndarray, np.ndarray]:
    """Mode and covariance of the flat-prior fit with a drift column appended.

    Falls back to the plain fit (drift pinned near zero) when the drift
    column is degenerate, e.g. all external rows carry zero weight.
    """
    d = rows.n_params
    augmented = replace(
        rows, design=np.hstack([rows.design, rows.external[:, None].astype(float)])
    )
    try:
        post = fit(augmented)
        return post.mode, post.covariance
    except EcborrowError:
        post = fit(rows)
        mode = np.append(post.mode, 0.0)
        cov = np.zeros((d + 1, d + 1))
        cov[:d, :d] = post.covariance
        cov[d, d] = 0.01
        return mode, cov


def sample_mcmc(
    rows: PoissonRows,
    n_iter: int = DEFAULT_ITERATIONS,
    n_warmup: int = DEFAULT_WARMUP,
    chains: int = DEFAULT_CHAINS,
    seed: int = 0,
    hc_scale: float = DEFAULT_HALF_CAUCHY_SCALE,
) -> CommensurateDraws:
    """Draw from the commensurate posterior.

    Blocks: a joint random-walk on ``theta`` preconditioned by the Laplace
    covariance of the drift-augmented flat fit, a scalar walk on ``delta``
    and a scalar walk on ``log sigma``.  Warmup draws are discarded.

    A ``ConvergenceWarning`` is emitted (not raised) when the split-Rhat of
    the treatment effect exceeds 1.05.
    """
    if not rows.has_treatment:
        raise ValueError("commensurate sampling requires a treatment column")
    if not n_iter > n_warmup >= 500:
        raise ValueError("need n_iter > n_warmup >= 500")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x636F6D]))

    keep = rows.weight >= 1e-12
    if not np.all(keep):
        rows = replace(
            rows,
            response=rows.response[keep], offset=rows.offset[keep],
            weight=rows.weight[keep], design=rows.design[keep],
            external=rows.external[keep],
        )

    X = rows.design
    y = rows.response
    w = rows.weight
    off = rows.offset
    ext = rows.external.astype(float)
    d = rows.n_params
    C = chains
    gamma_idx = d - 1

    mode, cov = _laplace_init(rows)
    L_theta = np.linalg.cholesky(cov[:d, :d] + 1e-12 * np.eye(d))
    sd_delta = float(np.sqrt(cov[d, d]))

    # Overdispersed starts: mode plus one full-covariance draw per chain.
    z0 = rng.standard_normal((d + 1, C))
    start = mode[:, None] + np.linalg.cholesky(cov + 1e-12 * np.eye(d + 1)) @ z0
    theta = start[:d, :].copy()
    delta = start[d, :].copy()
    u = np.full(C, np.log(hc_scale))

    w_y_ext = float(np.sum(w * y * ext))

    def loglik_and_ext(theta_m, delta_v):
        eta = X @ theta_m + off[:, None] + ext[:, None] * delta_v[None, :]
        mu = np.exp(eta)
        ll = np.sum(w[:, None] * (y[:, None] * eta - mu), axis=0)
        s_ext = np.sum((w * ext)[:, None] * mu, axis=0)
        return ll, s_ext

    def log_prior(delta_v, u_v):
        sigma = np.exp(u_v)
        lp = -0.5 * np.log(2.0 * np.pi) - u_v - 0.5 * (delta_v / sigma) ** 2
        lp += np.log(2.0 / (np.pi * hc_scale)) - np.log1p((sigma / hc_scale) ** 2)
        return lp + u_v  # Jacobian of the log transform

    ll, s_ext = loglik_and_ext(theta, delta)
    lp = log_prior(delta, u)

    scale_theta = np.full(C, 2.38 / np.sqrt(d))
    scale_delta = np.full(C, 2.38)
    scale_u = np.full(C, 1.0)
    sd_u = 0.5

    kept = n_iter - n_warmup
    out_gamma = np.empty((C, kept))
    out_delta = np.empty((C, kept))
    out_sigma = np.empty((C, kept))
    acc = {"theta": np.zeros(C), "delta": np.zeros(C), "sigma": np.zeros(C)}

    for it in range(n_iter):
        adapt = it < n_warmup
        step = (it + 1) ** -0.6

        # theta block
        prop = theta + (L_theta @ rng.standard_normal((d, C))) * scale_theta[None, :]
        ll_p, s_ext_p = loglik_and_ext(prop, delta)
        log_accept = ll_p - ll
        accept = np.log(rng.random(C)) < log_accept
        theta[:, accept] = prop[:, accept]
        ll[accept] = ll_p[accept]
        s_ext[accept] = s_ext_p[accept]
        acc["theta"] += accept
        if adapt:
            scale_theta *= np.exp(
                step * (np.exp(np.minimum(0.0, log_accept)) - _TARGET_ACCEPT)
            )

        # delta block: only the external-row terms and the Normal prior move,
        # so the likelihood update is O(1) per chain.
        ds = rng.standard_normal(C) * scale_delta * max(sd_delta, 1e-6)
        delta_p = delta + ds
        ll_shift = w_y_ext * ds - (np.exp(ds) - 1.0) * s_ext
        lp_p = log_prior(delta_p, u)
        log_accept = ll_shift + lp_p - lp
        accept = np.log(rng.random(C)) < log_accept
        delta[accept] = delta_p[accept]
        ll[accept] += ll_shift[accept]
        s_ext[accept] *= np.exp(ds[accept])
        lp[accept] = lp_p[accept]
        acc["delta"] += accept
        if adapt:
            scale_delta *= np.exp(
                step * (np.exp(np.minimum(0.0, log_accept)) - _TARGET_ACCEPT)
            )

        # log-sigma block: likelihood untouched.
        u_p = u + rng.standard_normal(C) * scale_u * sd_u
        lp_p = log_prior(delta, u_p)
        log_accept = lp_p - lp
        accept = np.log(rng.random(C)) < log_accept
        u[accept] = u_p[accept]
        lp[accept] = lp_p[accept]
        acc["sigma"] += accept
        if adapt:
            scale_u *= np.exp(
                step * (np.exp(np.minimum(0.0, log_accept)) - _TARGET_ACCEPT)
            )

        if it >= n_warmup:
            j = it - n_warmup
            out_gamma[:, j] = theta[gamma_idx, :]
            out_delta[:, j] = delta
            out_sigma[:, j] = np.exp(u)

    rhat = split_rhat(out_gamma)
    if rhat > RHAT_THRESHOLD:
        warnings.warn(
            f"split-Rhat on the treatment effect is {rhat:.3f} (> {RHAT_THRESHOLD})",
            ConvergenceWarning,
            stacklevel=2,
        )
    return CommensurateDraws(
        gamma=out_gamma,
        delta=out_delta,
        sigma=out_sigma,
        accept_rates={k: v / n_iter for k, v in acc.items()},
        rhat_gamma=float(rhat),
        n_chains=C,
        n_warmup=n_warmup,
    )


def split_rhat(chains: np.ndarray) -> float:
    """Potential scale reduction with each chain split in half."""
    C, n = chains.shape
    half = n // 2
    split = chains[:, : 2 * half].reshape(2 * C, half)
    within = split.var(axis=1, ddof=1).mean()
    between = half * split.mean(axis=1).var(ddof=1)
    if within <= 0:
        return np.inf
    var_plus = (half - 1) / half * within + between / half
    return float(np.sqrt(var_plus / within))


def test_superiority_mcmc(draws: CommensurateDraws, level: float = 0.025) -> bool:
    """Reject when the sampled probability of ``gamma >= 0`` is below ``level``."""
    pooled = draws.pooled_gamma()
    if pooled.size < 1000:
        raise ValueError("need at least 1000 post-warmup draws")
    return bool(np.mean(pooled >= 0.0) < level)
