import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.stats import kstest

from ecborrow.errors import InsufficientEvents
from ecborrow.survival import (
    PiecewiseHazard,
    SubjectRecord,
    TimePartition,
    build_partition,
    cumulative_hazard,
    decompose,
    event_cdf,
    log_hazard,
    sample_observation,
    sample_observations,
    sample_time,
    sample_times,
)


def records(times, events=None):
    events = events if events is not None else [1] * len(times)
    return [
        SubjectRecord(f"s{i}", t, e, (), 0, "rct")
        for i, (t, e) in enumerate(zip(times, events))
    ]


class TestTimePartition:
    def test_validation(self):
        with pytest.raises(ValueError):
            TimePartition((1.0, 2.0))
        with pytest.raises(ValueError):
            TimePartition((0.0, 5.0, 5.0))
        with pytest.raises(ValueError):
            TimePartition(())

    def test_interval_membership_right_closed(self):
        part = TimePartition((0.0, 10.0, 20.0))
        assert part.index_of(5.0) == 0
        assert part.index_of(10.0) == 0
        assert part.index_of(10.0 + 1e-12) == 1
        assert part.index_of(25.0) == 2

    def test_widths(self):
        part = TimePartition((0.0, 10.0))
        assert part.widths[0] == 10.0
        assert np.isinf(part.widths[1])


class TestBuildPartition:
    def test_single_interval(self):
        part = build_partition(records(range(1, 101)), 1)
        assert part.cutpoints == (0.0,)

    def test_midpoint_rule(self):
        part = build_partition(records([10.0, 20.0, 30.0, 40.0]), 2)
        assert part.cutpoints == (0.0, 25.0)

    def test_exponential_quartiles(self):
        rng = np.random.default_rng(5)
        times = rng.exponential(100.0, 10_000)
        part = build_partition(records(times), 4)
        theory = [-100.0 * np.log(1 - q) for q in (0.25, 0.5, 0.75)]
        for cut, expected in zip(part.cutpoints[1:], theory):
            assert abs(cut - expected) / expected < 0.05

    def test_counts_balanced(self):
        rng = np.random.default_rng(17)
        times = rng.exponential(50.0, 103)
        part = build_partition(records(times), 5)
        edges = list(part.cutpoints[1:]) + [np.inf]
        lower = [0.0] + list(part.cutpoints[1:])
        counts = [np.sum((times > lo) & (times <= hi)) for lo, hi in zip(lower, edges)]
        assert max(counts) - min(counts) <= 1

    def test_insufficient_events(self):
        with pytest.raises(InsufficientEvents):
            build_partition(records([5.0, 6.0], [1, 0]), 2)

    def test_tie_pushes_group_right(self):
        # Ties straddling the boundary move the cutpoint down to the largest
        # strictly smaller event time.
        part = build_partition(records([1.0, 2.0, 2.0, 2.0]), 2)
        assert part.cutpoints == (0.0, 1.0)

    def test_all_tied_is_impossible(self):
        with pytest.raises(InsufficientEvents):
            build_partition(records([3.0, 3.0, 3.0, 3.0]), 2)

    def test_censored_ignored(self):
        part = build_partition(records([10, 20, 30, 40, 999], [1, 1, 1, 1, 0]), 2)
        assert part.cutpoints == (0.0, 25.0)


class TestDecompose:
    def test_first_interval(self):
        d = decompose(5.0, 1, TimePartition((0.0, 10.0)))
        assert d.terminal == 0
        np.testing.assert_allclose(d.exposures, [5.0])

    def test_spanning(self):
        d = decompose(15.0, 1, TimePartition((0.0, 10.0)))
        assert d.terminal == 1
        np.testing.assert_allclose(d.exposures, [10.0, 5.0])

    def test_boundary_belongs_left(self):
        d = decompose(10.0, 0, TimePartition((0.0, 10.0)))
        assert d.terminal == 0

    @given(
        y=st.floats(min_value=0.01, max_value=500.0),
        cut=st.lists(
            st.floats(min_value=0.5, max_value=400.0), min_size=0, max_size=4, unique=True
        ),
    )
    @settings(max_examples=200, deadline=None)
    def test_exposures_reconstruct_time(self, y, cut):
        part = TimePartition(tuple([0.0] + sorted(cut)))
        d = decompose(y, 1, part)
        assert abs(d.total - y) <= 4 * np.finfo(float).eps * max(1.0, y)
        # inverse consistency: terminal start + residual equals y
        assert d.exposures[-1] > 0
        np.testing.assert_allclose(part.cutpoints[d.terminal] + d.exposures[-1], y)


class TestLogHazard:
    def test_identity(self):
        part = TimePartition((0.0,))
        assert log_hazard(3.0, (1.0,), part) == 0.0

    def test_second_interval(self):
        part = TimePartition((0.0, 10.0))
        got = log_hazard(12.0, (0.01, 0.02), part, x=(1.0,), beta=(0.5,))
        assert np.isclose(got, np.log(0.02) + 0.5)

    def test_survival_matches_quadrature(self):
        part = TimePartition((0.0, 30.0, 90.0))
        lam = (0.02, 0.008, 0.004)
        eta = 0.35
        rng = np.random.default_rng(2)
        for t in rng.uniform(1.0, 400.0, 100):
            integral, _ = quad(
                lambda u: np.exp(log_hazard(u, lam, part) + eta),
                0.0, t, points=[c for c in part.cutpoints if 0 < c < t], limit=200,
            )
            np.testing.assert_allclose(
                np.exp(-integral), 1.0 - event_cdf(t, lam, part, eta)[0], rtol=1e-7
            )


class TestSampling:
    def test_single_interval_mean(self):
        part = TimePartition((0.0,))
        rng = np.random.default_rng(0)
        draws = sample_times((0.01,), np.zeros(100_000), part, rng)
        assert abs(draws.mean() - 100.0) / 100.0 < 0.02

    def test_survival_at_cutpoint(self):
        part = TimePartition((0.0, 50.0))
        lam, eta = (0.01, 0.03), 0.2
        rng = np.random.default_rng(1)
        draws = sample_times(lam, np.full(100_000, eta), part, rng)
        expected = np.exp(-lam[0] * 50.0 * np.exp(eta))
        assert abs((draws > 50.0).mean() - expected) < 0.005

    def test_ks_against_closed_form(self):
        part = TimePartition((0.0, 40.0, 120.0))
        lam = (0.012, 0.005, 0.002)
        rng = np.random.default_rng(3)
        draws = sample_times(lam, np.zeros(100_000), part, rng)
        stat = kstest(draws, lambda t: event_cdf(t, lam, part)).statistic
        assert stat < 0.01

    def test_scalar_matches_distribution(self):
        part = TimePartition((0.0, 10.0))
        rng = np.random.default_rng(4)
        draws = np.array([sample_time((0.05, 0.01), 0.0, part, rng) for _ in range(20_000)])
        stat = kstest(draws, lambda t: event_cdf(t, (0.05, 0.01), part)).statistic
        assert stat < 0.02

    def test_seed_reproducible(self):
        part = TimePartition((0.0, 10.0))
        a = sample_times((0.1, 0.2), np.zeros(100), part, np.random.default_rng(9))
        b = sample_times((0.1, 0.2), np.zeros(100), part, np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)

    def test_no_censoring(self):
        part = TimePartition((0.0,))
        rng = np.random.default_rng(5)
        for _ in range(50):
            _, nu = sample_observation((0.01,), 0.0, (0.0,), 0.0, part, rng)
            assert nu == 1

    def test_equal_hazards_half_events(self):
        part = TimePartition((0.0,))
        rng = np.random.default_rng(6)
        _, nu = sample_observations(
            (0.01,), np.zeros(100_000), (0.01,), np.zeros(100_000), part, rng
        )
        assert abs(nu.mean() - 0.5) < 0.005

    def test_event_fraction_competing(self):
        part = TimePartition((0.0,))
        rng = np.random.default_rng(7)
        _, nu = sample_observations(
            (0.01,), np.zeros(100_000), (0.02,), np.zeros(100_000), part, rng
        )
        assert abs(nu.mean() - 1.0 / 3.0) < 0.005


class TestPiecewiseHazard:
    def test_positive_rates_required(self):
        with pytest.raises(ValueError):
            PiecewiseHazard((0.0,))
        with pytest.raises(ValueError):
            PiecewiseHazard((0.1, -0.2))

    def test_used_by_operations(self):
        part = TimePartition((0.0, 10.0))
        hz = PiecewiseHazard((0.01, 0.05))
        assert np.isclose(log_hazard(3.0, hz, part), np.log(0.01))
        np.testing.assert_allclose(
            cumulative_hazard(12.0, hz, part), 0.01 * 10 + 0.05 * 2
        )
