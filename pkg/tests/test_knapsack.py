import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_ip, lp_dual_value, lp_value
from spknap.knapsack import (
    Budget,
    Impression,
    InstanceTooLargeError,
    gap_bound_check,
    rank_by_ratio,
    solve_fractional,
    solve_integer_exact,
)


def make_ads(pairs):
    return [Impression(i + 1, float(v), float(b)) for i, (v, b) in enumerate(pairs)]


THREE = make_ads([(6, 2), (4, 2), (1, 1)])


@st.composite
def instances(draw, max_ads=10, integral=True):
    n = draw(st.integers(0, max_ads))
    if integral:
        price = st.integers(0, 50).map(float)
    else:
        price = st.one_of(st.just(0.0), st.floats(1e-3, 50))
    value = st.floats(0, 100, allow_nan=False)
    pairs = draw(st.lists(st.tuples(value, price), min_size=n, max_size=n))
    budget = draw(st.integers(0, 200).map(float))
    return make_ads(pairs), Budget(budget)


class TestImpression:
    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            Impression(1, -1.0, 2.0)
        with pytest.raises(ValueError):
            Impression(1, 1.0, -2.0)

    def test_budget_non_negative(self):
        with pytest.raises(ValueError):
            Budget(-0.5)


class TestRankByRatio:
    def test_descending_ratio(self):
        ads = make_ads([(6, 2), (1, 1), (4, 2)])
        assert [a.id for a in rank_by_ratio(ads)] == [1, 3, 2]

    def test_empty(self):
        assert rank_by_ratio([]) == []

    def test_zero_price_first(self):
        ads = make_ads([(3, 0), (9, 3)])
        assert rank_by_ratio(list(reversed(ads)))[0].id == 1

    def test_ties_by_ascending_id(self):
        ads = [Impression(5, 2.0, 1.0), Impression(2, 4.0, 2.0), Impression(9, 6.0, 3.0)]
        assert [a.id for a in rank_by_ratio(ads)] == [2, 5, 9]

    @given(instances(integral=False))
    def test_permutation(self, inst):
        ads, _ = inst
        ranked = rank_by_ratio(ads)
        assert sorted(a.id for a in ranked) == sorted(a.id for a in ads)
        ratios = [a.ratio for a in ranked]
        assert all(r0 >= r1 for r0, r1 in zip(ratios, ratios[1:]))


class TestSolveFractional:
    def test_three_ad_example(self):
        sel = solve_fractional(THREE, Budget(3))
        assert dict(sel.fractions) == {1: 1.0, 2: 0.5, 3: 0.0}
        assert sel.lambda_star == 2.0
        assert sel.objective == 8.0
        assert sel.marginal_id == 2
        # Independent LP solver agrees on the optimum.
        assert lp_value([6, 4, 1], [2, 2, 1], 3) == pytest.approx(8.0, abs=1e-9)

    def test_ample_budget(self):
        sel = solve_fractional(THREE, Budget(5))
        assert set(sel.fractions.values()) == {1.0}
        assert sel.lambda_star == 0.0
        assert sel.marginal_id is None
        assert sel.objective == 11.0

    def test_single_item(self):
        sel = solve_fractional(make_ads([(5, 10)]), Budget(4))
        assert sel.fractions[1] == pytest.approx(0.4)
        assert sel.objective == pytest.approx(2.0)
        assert sel.lambda_star == 0.5
        assert lp_value([5], [10], 4) == pytest.approx(2.0)

    def test_exact_fit_marks_next_ad_marginal(self):
        sel = solve_fractional(THREE, Budget(4))
        assert sel.fractions[2] == 1.0
        assert sel.marginal_id == 3 and sel.fractions[3] == 0.0
        assert sel.lambda_star == 1.0

    def test_zero_budget_keeps_free_ads(self):
        ads = make_ads([(3, 0), (9, 3)])
        sel = solve_fractional(ads, Budget(0))
        assert sel.fractions[1] == 1.0 and sel.fractions[2] == 0.0
        assert sel.objective == 3.0

    @settings(max_examples=300)
    @given(instances(max_ads=12, integral=False))
    def test_matches_generic_lp(self, inst):
        ads, budget = inst
        sel = solve_fractional(ads, budget)
        ref = lp_value([a.value for a in ads], [a.paying_price for a in ads], budget.total)
        assert sel.objective == pytest.approx(ref, rel=1e-7, abs=1e-7)

    @settings(max_examples=300)
    @given(instances(max_ads=12, integral=False))
    def test_threshold_structure(self, inst):
        ads, budget = inst
        sel = solve_fractional(ads, budget)
        inside = [f for f in sel.fractions.values() if 0.0 < f < 1.0]
        assert len(inside) <= 1
        assert sel.spend <= budget.total + 1e-9
        for ad in ads:
            f = sel.fractions[ad.id]
            assert 0.0 <= f <= 1.0
            if ad.ratio > sel.lambda_star:
                assert f == 1.0
            elif ad.ratio < sel.lambda_star:
                assert f == 0.0

    @settings(max_examples=200)
    @given(instances(max_ads=12, integral=False))
    def test_strong_duality_at_threshold(self, inst):
        ads, budget = inst
        if any(a.paying_price == 0 for a in ads):
            return
        sel = solve_fractional(ads, budget)
        dual = lp_dual_value([a.value for a in ads], [a.paying_price for a in ads],
                             budget.total, sel.lambda_star)
        assert dual == pytest.approx(sel.objective, rel=1e-9, abs=1e-9)

    @given(instances(max_ads=10), st.integers(0, 50))
    def test_monotone_in_budget(self, inst, extra):
        ads, budget = inst
        lo = solve_fractional(ads, budget).objective
        hi = solve_fractional(ads, Budget(budget.total + extra)).objective
        assert hi >= lo - 1e-9

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        ads = make_ads(zip(rng.uniform(0, 5, 50), rng.uniform(0, 5, 50)))
        a = solve_fractional(ads, Budget(20))
        b = solve_fractional(list(ads), Budget(20))
        assert a == b


class TestSolveIntegerExact:
    def test_three_ad_example(self):
        ids, z = solve_integer_exact(THREE, Budget(3))
        assert sorted(ids) == [1, 3]
        assert z == 7.0
        assert brute_force_ip([6, 4, 1], [2, 2, 1], 3)[0] == 7.0

    def test_zero_budget(self):
        assert solve_integer_exact(THREE, Budget(0)) == ([], 0.0)

    def test_symmetric_items(self):
        ids, z = solve_integer_exact(make_ads([(1, 1)] * 5), Budget(3))
        assert len(ids) == 3 and z == 3.0

    def test_fractional_prices_use_enumeration(self):
        ads = make_ads([(3, 1.5), (2, 1.25), (2.5, 1.75)])
        ids, z = solve_integer_exact(ads, Budget(3))
        assert z == brute_force_ip([3, 2, 2.5], [1.5, 1.25, 1.75], 3)[0] == 5.0

    def test_too_large_enumeration(self):
        ads = make_ads([(1, 0.5)] * 26)
        with pytest.raises(InstanceTooLargeError):
            solve_integer_exact(ads, Budget(3))

    def test_too_large_dp(self):
        ads = make_ads([(1, 1)] * 100)
        with pytest.raises(InstanceTooLargeError):
            solve_integer_exact(ads, Budget(1e7))

    @settings(max_examples=300)
    @given(instances(max_ads=9))
    def test_dp_matches_brute_force(self, inst):
        ads, budget = inst
        ids, z = solve_integer_exact(ads, budget)
        ref, _ = brute_force_ip([a.value for a in ads], [a.paying_price for a in ads],
                                budget.total)
        assert z == pytest.approx(ref, abs=1e-9)
        chosen = [a for a in ads if a.id in set(ids)]
        assert math.fsum(a.paying_price for a in chosen) <= budget.total
        assert math.fsum(a.value for a in chosen) == pytest.approx(z, abs=1e-9)

    @settings(max_examples=100)
    @given(instances(max_ads=8, integral=False))
    def test_enumeration_matches_brute_force(self, inst):
        ads, budget = inst
        _, z = solve_integer_exact(ads, budget)
        ref, _ = brute_force_ip([a.value for a in ads], [a.paying_price for a in ads],
                                budget.total)
        assert z == pytest.approx(ref, abs=1e-9)

    @settings(max_examples=200)
    @given(instances(max_ads=12))
    def test_lp_dominates_ip(self, inst):
        ads, budget = inst
        _, z_ip = solve_integer_exact(ads, budget)
        assert solve_fractional(ads, budget).objective >= z_ip - 1e-9

    @given(instances(max_ads=10), st.integers(0, 50))
    def test_monotone_in_budget(self, inst, extra):
        ads, budget = inst
        _, lo = solve_integer_exact(ads, budget)
        _, hi = solve_integer_exact(ads, Budget(budget.total + extra))
        assert hi >= lo


class TestGapBound:
    def test_three_ad_example(self):
        lhs, rhs, holds = gap_bound_check(THREE, Budget(3))
        # Z_IP(3) - Z_IP(2) = 7 - 6, against the marginal ad's value 4.
        assert (lhs, rhs, holds) == (1.0, 4.0, True)

    def test_ample_budget(self):
        assert gap_bound_check(THREE, Budget(100)) == (0.0, 0.0, True)

    def test_random_sweep(self):
        rng = np.random.default_rng(20240601)
        for _ in range(200):
            n = int(rng.integers(1, 11))
            ads = make_ads(zip(rng.uniform(0, 20, n).round(3), rng.integers(1, 30, n)))
            budget = Budget(float(rng.integers(0, 120)))
            lhs, rhs, holds = gap_bound_check(ads, budget)
            assert holds, (ads, budget, lhs, rhs)

    def test_propagates_size_error(self):
        ads = make_ads([(1, 0.5 + 0.01 * i) for i in range(30)])
        with pytest.raises(InstanceTooLargeError):
            gap_bound_check(ads, Budget(3))
