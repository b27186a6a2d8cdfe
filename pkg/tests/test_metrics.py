import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special, stats

from mixsurv.metrics import (
    chi2_sf,
    gamma_q,
    kaplan_meier,
    logrank,
    stratify_median,
    td_concordance,
    write_km_csv,
)

from oracles import brute_force_tdc, hand_logrank


def _cohort(seed, n=10, tie_free=False):
    rng = np.random.default_rng(seed)
    times = rng.integers(1, 6, size=n).astype(float) if not tie_free else rng.permutation(n) + 1.0
    events = rng.integers(0, 2, size=n)
    if tie_free:
        surv = rng.uniform(size=(n, n))
    else:
        surv = rng.integers(0, 4, size=(n, n)) / 4.0  # coarse values force ties in S
    return times, events, surv


class TestConcordance:
    def test_perfect_order(self):
        times = np.array([1.0, 2.0, 3.0, 4.0])
        # record with larger time has uniformly higher survival
        m = np.tile(np.array([0.1, 0.2, 0.3, 0.4])[:, None], (1, 4))
        assert td_concordance(times, [1, 1, 1, 1], m).value == 1.0

    def test_identical_curves(self):
        times, events, _ = _cohort(0)
        m = np.tile(np.linspace(1, 0.1, 10), (10, 1))
        assert td_concordance(times, events, m).value == 0.5

    def test_hand_cohort(self):
        times = np.array([2.0, 5.0, 3.0, 7.0])
        events = np.array([1, 0, 1, 1])
        m = np.array([
            [0.4, 0.1, 0.3, 0.0],
            [0.6, 0.5, 0.6, 0.2],
            [0.4, 0.2, 0.35, 0.1],
            [0.9, 0.7, 0.5, 0.4],
        ])
        # comparable: (0,1) (0,2) (0,3) (2,1) (2,3)
        # at t_0: S_0=.4 vs .6 yes, .4 tie, .9 yes -> 2.5; at t_2: S_2=.35 vs .6 yes, .5 yes -> 2
        res = td_concordance(times, events, m)
        assert res.comparable == 5
        assert res.value == pytest.approx(4.5 / 5, abs=1e-15)
        assert res.value == brute_force_tdc(times, events, m)

    @pytest.mark.parametrize("seed", range(200))
    def test_matches_pair_enumeration(self, seed):
        times, events, m = _cohort(seed)
        ref = brute_force_tdc(times, events, m)
        got = td_concordance(times, events, m)
        if ref is None:
            assert not got.defined
        else:
            assert got.value == ref

    @given(st.integers(0, 2**31))
    @settings(max_examples=100, deadline=None)
    def test_antisymmetry(self, seed):
        times, _, m = _cohort(seed, tie_free=True)
        events = np.ones(10, int)
        a = td_concordance(times, events, m).value
        b = td_concordance(times, events, -m).value
        assert a + b == pytest.approx(1.0, abs=1e-12)

    def test_order_independent(self):
        times, events, m = _cohort(3)
        p = np.random.default_rng(4).permutation(10)
        a = td_concordance(times, events, m).value
        b = td_concordance(times[p], events[p], m[np.ix_(p, p)]).value
        assert a == b

    def test_undefined(self):
        res = td_concordance([3.0, 1.0], [0, 0], np.ones((2, 2)))
        assert not res.defined and res.comparable == 0

    def test_accepts_curve_objects(self):
        class Exp:
            def __init__(self, rate):
                self.rate = rate

            def survival(self, t):
                return np.exp(-self.rate * np.asarray(t))

        curves = [Exp(1.0), Exp(0.5), Exp(0.1)]
        assert td_concordance([1.0, 2.0, 3.0], [1, 1, 1], curves).value == 1.0


class TestKaplanMeier:
    def test_hand_example(self):
        km = kaplan_meier([1.0, 2.0, 3.0], [1, 0, 1])
        np.testing.assert_array_equal(km.times, [1.0, 3.0])
        np.testing.assert_allclose(km.survival, [2 / 3, 0.0], atol=1e-15)
        np.testing.assert_array_equal(km.at_risk, [3, 1])
        assert km(0.5) == 1.0 and km(2.5) == pytest.approx(2 / 3)

    def test_all_censored(self):
        km = kaplan_meier([1.0, 2.0, 5.0], [0, 0, 0])
        assert km.times.size == 0
        assert km(10.0) == 1.0

    @pytest.mark.parametrize("n", [1, 5, 20])
    def test_uncensored_staircase(self, n):
        t = np.random.default_rng(n).permutation(n) + 1.0
        km = kaplan_meier(t, np.ones(n, int))
        np.testing.assert_allclose(km.survival, (n - np.arange(1, n + 1)) / n, atol=1e-14)

    def test_event_before_censoring_at_tie(self):
        km = kaplan_meier([2.0, 2.0, 4.0], [1, 0, 1])
        # both records at t=2 are at risk for the death at t=2
        assert km.survival[0] == pytest.approx(2 / 3)

    def test_monotone_and_bounded(self):
        rng = np.random.default_rng(5)
        km = kaplan_meier(rng.exponential(size=100), rng.integers(0, 2, size=100))
        assert np.all(np.diff(km.survival) <= 0)
        assert km.survival.min() >= 0 and km.survival.max() <= 1

    def test_csv(self, tmp_path):
        km = kaplan_meier([1.0, 2.0, 3.0], [1, 0, 1])
        write_km_csv(tmp_path / "km.csv", km)
        rows = list(csv.DictReader(open(tmp_path / "km.csv")))
        assert [float(r["survival"]) for r in rows] == [1.0] + km.survival.tolist()
        np.testing.assert_allclose(km.survival, [2 / 3, 0.0], atol=1e-15)
        assert rows[0]["time"] == "0.0"


class TestIncompleteGamma:
    @pytest.mark.parametrize("x", [0.0, 1e-6, 0.3, 1.0, 3.84, 10.0, 50.0, 200.0])
    def test_chi2_one_df_matches_erfc(self, x):
        assert abs(chi2_sf(x) - math.erfc(math.sqrt(x / 2))) <= 1e-10

    @given(st.floats(0.05, 30), st.floats(0.0, 80))
    @settings(max_examples=200, deadline=None)
    def test_matches_reference(self, a, x):
        assert abs(gamma_q(a, x) - special.gammaincc(a, x)) <= 1e-10

    @pytest.mark.parametrize("df", [1, 2, 5])
    def test_chi2_reference(self, df):
        for s in (0.5, 2.0, 7.0, 25.0):
            assert abs(chi2_sf(s, df) - stats.chi2.sf(s, df)) <= 1e-10

    def test_monotone(self):
        p = [chi2_sf(s) for s in np.linspace(0, 40, 200)]
        assert all(a >= b for a, b in zip(p, p[1:]))

    def test_bad_args(self):
        with pytest.raises(ValueError):
            gamma_q(0.0, 1.0)


class TestLogRank:
    def test_mirrored_groups(self):
        t, e = [1.0, 3.0, 4.0, 6.0], [1, 0, 1, 1]
        res = logrank(t, e, t, e)
        assert res.statistic == pytest.approx(0.0, abs=1e-15)
        assert res.p_value == pytest.approx(1.0, abs=1e-12)

    def test_hand_table(self):
        ta, ea = [6, 6, 6, 7, 10, 13, 16, 22, 23], [1, 1, 1, 1, 0, 1, 1, 1, 1]
        tb, eb = [1, 1, 2, 2, 3, 4, 4, 5, 5, 8, 8], [1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1]
        stat, p, _ = hand_logrank(ta, ea, tb, eb)
        res = logrank(ta, ea, tb, eb)
        assert res.statistic == pytest.approx(stat, rel=1e-12)
        assert res.p_value == pytest.approx(p, abs=1e-10)

    @given(st.integers(0, 2**31))
    @settings(max_examples=100, deadline=None)
    def test_random_tables(self, seed):
        rng = np.random.default_rng(seed)
        ta, tb = rng.integers(1, 15, size=8), rng.integers(1, 15, size=11)
        ea, eb = rng.integers(0, 2, size=8), rng.integers(0, 2, size=11)
        res = logrank(ta, ea, tb, eb)
        if not res.defined:
            return
        stat, p, _ = hand_logrank(ta, ea, tb, eb)
        assert res.statistic == pytest.approx(stat, rel=1e-10, abs=1e-12)
        assert abs(res.p_value - p) <= 1e-10
        assert 0.0 <= res.p_value <= 1.0
        swapped = logrank(tb, eb, ta, ea)
        assert swapped.statistic == pytest.approx(res.statistic, rel=1e-12, abs=1e-15)
        assert swapped.p_value == pytest.approx(res.p_value, abs=1e-12)

    def test_order_independent(self):
        rng = np.random.default_rng(6)
        ta, ea = rng.exponential(size=12), rng.integers(0, 2, size=12)
        tb, eb = rng.exponential(size=9), rng.integers(0, 2, size=9)
        p = rng.permutation(12)
        assert logrank(ta, ea, tb, eb).statistic == pytest.approx(logrank(ta[p], ea[p], tb, eb).statistic, rel=1e-14)

    def test_no_events(self):
        assert not logrank([1.0, 2.0], [0, 0], [3.0], [0]).defined

    def test_empty_group(self):
        with pytest.raises(ValueError):
            logrank([], [], [1.0], [1])


class TestStratify:
    def test_even_split(self):
        s = stratify_median([0.4, -1.0, 3.0, 2.0])
        assert sorted(s.high.tolist()) == [2, 3]
        assert sorted(s.low.tolist()) == [0, 1]

    def test_all_equal_degenerate(self):
        s = stratify_median([1.0] * 5)
        assert s.degenerate and s.high.size == 0 and s.low.size == 5

    def test_ties_go_low(self):
        s = stratify_median([1.0, 2.0, 2.0, 2.0, 3.0])
        assert s.high.tolist() == [4]

    def test_too_few(self):
        with pytest.raises(ValueError):
            stratify_median([1.0])
