"""Piecewise-exponential proportional-hazards data model.

Time is measured in days and all rates are per day.  The time axis is split
by a :class:`TimePartition` into ``K`` intervals, left-open and right-closed,
``(tau_{k-1}, tau_k]``, with the final interval unbounded on the right.  The
baseline hazard is constant within each interval and covariates act
multiplicatively on it through ``exp(x.beta + z*gamma)``.

All sampling operations take an explicit ``numpy.random.Generator``; nothing
in this module holds mutable state, so concurrent use with independent
generators is safe.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import InsufficientEvents

RCT = "rct"
EXTERNAL = "external"

# Last interval always terminates, so this is a defensive bound only.
_MAX_SAMPLING_ITERATIONS = 1_000_000


@dataclass(frozen=True)
class TimePartition:
    """Cutpoints ``0 = tau_0 < tau_1 < ... < tau_{K-1}`` of the time axis.

    The stored tuple lists the left endpoints of the K intervals; the final
    interval extends to infinity.  Interval indices are 0-based in code.
    """

    cutpoints: tuple[float, ...]

    def __post_init__(self):
        cp = tuple(float(c) for c in self.cutpoints)
        object.__setattr__(self, "cutpoints", cp)
        if len(cp) < 1:
            raise ValueError("partition needs at least one interval")
        if cp[0] != 0.0:
            raise ValueError("first cutpoint must be 0")
        if any(not np.isfinite(c) for c in cp):
            raise ValueError("cutpoints must be finite")
        if any(b <= a for a, b in zip(cp, cp[1:])):
            raise ValueError("cutpoints must be strictly increasing")

    @property
    def K(self) -> int:
        return len(self.cutpoints)

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.cutpoints)

    @property
    def upper(self) -> np.ndarray:
        """Right endpoints; the last one is +inf."""
        return np.append(np.asarray(self.cutpoints[1:]), np.inf)

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    def index_of(self, t: float) -> int:
        """0-based index of the interval containing ``t`` (t > 0).

        Intervals are right-closed, so ``t == tau_k`` belongs to interval
        ``k - 1``.
        """
        if t <= 0:
            raise ValueError("time must be positive")
        return int(np.searchsorted(self.cutpoints, t, side="left")) - 1

    def indices_of(self, t: np.ndarray) -> np.ndarray:
        return np.searchsorted(self.cutpoints, t, side="left") - 1


@dataclass(frozen=True)
class PiecewiseHazard:
    """Per-interval constant hazard rates (per day), one per interval."""

    rates: tuple[float, ...]

    def __post_init__(self):
        rates = tuple(float(r) for r in self.rates)
        object.__setattr__(self, "rates", rates)
        if len(rates) < 1:
            raise ValueError("need at least one rate")
        if any(not (r > 0) or not np.isfinite(r) for r in rates):
            raise ValueError("rates must be positive and finite")

    @property
    def K(self) -> int:
        return len(self.rates)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.rates)


@dataclass(frozen=True)
class SubjectRecord:
    """One subject: observation time, event flag, covariates, arm, source."""

    id: str
    time: float
    event: int
    covariates: tuple[float, ...]
    treat: int
    source: str

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(float(c) for c in self.covariates))
        if not self.time > 0:
            raise ValueError(f"subject {self.id}: time must be positive")
        if self.event not in (0, 1):
            raise ValueError(f"subject {self.id}: event must be 0 or 1")
        if self.treat not in (0, 1):
            raise ValueError(f"subject {self.id}: treat must be 0 or 1")
        if self.source not in (RCT, EXTERNAL):
            raise ValueError(f"subject {self.id}: source must be '{RCT}' or '{EXTERNAL}'")
        if self.source == EXTERNAL and self.treat != 0:
            raise ValueError(f"subject {self.id}: external controls cannot be treated")


@dataclass(frozen=True)
class RiskDecomposition:
    """At-risk time per interval up to and including the terminal interval.

    ``exposures[k]`` is the full interval width for ``k < terminal`` and the
    residual time ``y - tau_terminal`` for the terminal interval itself.
    """

    terminal: int
    exposures: np.ndarray
    event: bool

    @property
    def total(self) -> float:
        return float(np.sum(self.exposures))


class DatasetColumns(NamedTuple):
    times: np.ndarray
    events: np.ndarray
    covariates: np.ndarray
    treat: np.ndarray
    external: np.ndarray
    ids: tuple[str, ...]


def as_columns(dataset: Sequence[SubjectRecord]) -> DatasetColumns:
    """Stack a record collection into column arrays for vectorised work."""
    if len(dataset) == 0:
        return DatasetColumns(
            np.empty(0), np.empty(0, dtype=int), np.empty((0, 0)),
            np.empty(0, dtype=int), np.empty(0, dtype=bool), (),
        )
    return DatasetColumns(
        times=np.array([s.time for s in dataset]),
        events=np.array([s.event for s in dataset], dtype=int),
        covariates=np.array([s.covariates for s in dataset], dtype=float),
        treat=np.array([s.treat for s in dataset], dtype=int),
        external=np.array([s.source == EXTERNAL for s in dataset], dtype=bool),
        ids=tuple(s.id for s in dataset),
    )


def build_partition(dataset: Sequence[SubjectRecord], K: int) -> TimePartition:
    """Choose cutpoints so each interval holds an equal share of the events.

    Interior cutpoints sit at the midpoint between the last event of one
    block and the first event of the next.  When tied event times straddle a
    block boundary the cutpoint moves down to the largest event time strictly
    below the next block's first event, pushing the whole tie group right.

    Raises
    ------
    InsufficientEvents
        Fewer than ``K`` events, or ties make ``K`` distinct boundaries
        impossible.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    event_times = np.sort(np.array([s.time for s in dataset if s.event == 1]))
    n = event_times.size
    if n < K:
        raise InsufficientEvents(f"need at least K={K} events, found {n}")
    if K == 1:
        return TimePartition((0.0,))

    # Block sizes as even as integer counts allow; earlier blocks get extras.
    sizes = np.full(K, n // K)
    sizes[: n % K] += 1
    splits = np.cumsum(sizes)[:-1]

    cuts = [0.0]
    for s in splits:
        left, right = event_times[s - 1], event_times[s]
        if left < right:
            cut = 0.5 * (left + right)
        else:
            below = event_times[event_times < right]
            if below.size == 0:
                raise InsufficientEvents(
                    "tied event times leave no strict boundary for the partition"
                )
            cut = float(below[-1])
        cuts.append(float(cut))
    if any(b <= a for a, b in zip(cuts, cuts[1:])):
        raise InsufficientEvents(
            f"tied event times make {K} distinct boundaries impossible"
        )
    return TimePartition(tuple(cuts))


def decompose(y: float, event: int, partition: TimePartition) -> RiskDecomposition:
    """Split observation time ``y`` into per-interval at-risk times."""
    if not y > 0:
        raise ValueError("observation time must be positive")
    k = partition.index_of(y)
    exposures = np.empty(k + 1)
    exposures[:k] = partition.widths[:k]
    exposures[k] = y - partition.cutpoints[k]
    return RiskDecomposition(terminal=k, exposures=exposures, event=bool(event))


def exposure_matrix(times: np.ndarray, partition: TimePartition) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised decomposition: terminal indices and an (n, K) exposure table.

    Entries beyond a subject's terminal interval are zero.
    """
    times = np.asarray(times, dtype=float)
    terminal = partition.indices_of(times)
    lower = partition.lower
    H = np.minimum(times[:, None], partition.upper[None, :]) - lower[None, :]
    np.clip(H, 0.0, None, out=H)
    return terminal, H


def _rate_array(rates) -> np.ndarray:
    if isinstance(rates, PiecewiseHazard):
        return rates.as_array()
    return np.asarray(rates, dtype=float)


def log_hazard(
    t: float,
    rates,
    partition: TimePartition,
    x: Sequence[float] = (),
    beta: Sequence[float] = (),
    z: int = 0,
    gamma: float = 0.0,
) -> float:
    """log of the subject hazard ``lambda_k(t) * exp(x.beta + z*gamma)``."""
    lam = _rate_array(rates)
    k = partition.index_of(t)
    return float(np.log(lam[k]) + np.dot(x, beta) + z * gamma)


def cumulative_hazard(t, rates, partition: TimePartition, eta: float = 0.0) -> np.ndarray:
    """Integrated hazard up to each time in ``t`` for linear predictor ``eta``."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    lam = _rate_array(rates) * np.exp(eta)
    _, H = exposure_matrix(t, partition)
    return H @ lam


def event_cdf(t, rates, partition: TimePartition, eta: float = 0.0) -> np.ndarray:
    """Closed-form CDF of the piecewise-exponential event time law."""
    return 1.0 - np.exp(-cumulative_hazard(t, rates, partition, eta))


def sample_time(rates, eta: float, partition: TimePartition, rng: np.random.Generator) -> float:
    """Draw one event time by chaining per-interval exponential variates."""
    lam = _rate_array(rates) * np.exp(eta)
    K = partition.K
    k = 0
    for _ in range(_MAX_SAMPLING_ITERATIONS):
        rate = lam[k]
        draw = rng.exponential(1.0 / rate) if rate > 0 else np.inf
        t = partition.cutpoints[k] + draw
        if k == K - 1 or t <= partition.cutpoints[k + 1]:
            return float(t)
        k += 1
    raise RuntimeError("piecewise-exponential sampling failed to terminate")


def sample_times(rates, eta, partition: TimePartition, rng: np.random.Generator) -> np.ndarray:
    """Vectorised :func:`sample_time` for ``n`` subjects.

    ``rates`` may be a single (K,) vector shared by all subjects or an
    (n, K) matrix of per-subject interval rates; ``eta`` is length n.
    """
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    n = eta.size
    lam = _rate_array(rates)
    if lam.ndim == 1:
        lam = np.broadcast_to(lam, (n, lam.size))
    scaled = lam * np.exp(eta)[:, None]

    K = partition.K
    out = np.empty(n)
    alive = np.ones(n, dtype=bool)
    for k in range(K):
        raw = rng.exponential(1.0, size=n)
        with np.errstate(divide="ignore"):
            draw = np.where(scaled[:, k] > 0, raw / scaled[:, k], np.inf)
        t = partition.cutpoints[k] + draw
        if k < K - 1:
            done = alive & (t <= partition.cutpoints[k + 1])
        else:
            done = alive
        out[done] = t[done]
        alive &= ~done
    return out


def sample_observation(
    event_rates,
    event_eta: float,
    censor_rates,
    censor_eta: float,
    partition: TimePartition,
    rng: np.random.Generator,
) -> tuple[float, int]:
    """Draw (observation time, event indicator) under competing censoring.

    A zero censoring rate vector yields no censoring (event always observed).
    """
    t = sample_time(event_rates, event_eta, partition, rng)
    c = sample_time(censor_rates, censor_eta, partition, rng)
    return (t, 1) if t <= c else (c, 0)


def sample_observations(
    event_rates,
    event_eta,
    censor_rates,
    censor_eta,
    partition: TimePartition,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`sample_observation` for ``n`` subjects."""
    t = sample_times(event_rates, event_eta, partition, rng)
    c = sample_times(censor_rates, censor_eta, partition, rng)
    y = np.minimum(t, c)
    nu = (t <= c).astype(int)
    return y, nu
