"""Offline knapsack machinery for the second-price setting.

Impressions carry a value and the price that must be paid to win them.
With hindsight the bidder's problem is a 0/1 knapsack; its LP relaxation is
solved greedily in value/price order and the ratio of the first ad that no
longer fits is the dual threshold.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Hashable, Mapping, Optional, Sequence

import numpy as np

TOL = 1e-9

# Exact-oracle limits: subset enumeration size and DP table cells.
MAX_ENUMERATION_ADS = 25
MAX_DP_CELLS = 20_000_000


class InstanceTooLargeError(ValueError):
    """Raised when the exact integer oracle is asked to solve too big an instance."""


@dataclass(frozen=True, slots=True)
class Impression:
    id: Hashable
    value: float
    paying_price: float
    clicked: Optional[bool] = None

    def __post_init__(self):
        if not (self.value >= 0 and self.paying_price >= 0):
            raise ValueError(
                f"impression {self.id!r}: value and paying_price must be non-negative "
                f"(got {self.value}, {self.paying_price})"
            )

    @property
    def ratio(self) -> float:
        return ratio(self.value, self.paying_price)


@dataclass(frozen=True, slots=True)
class Budget:
    total: float

    def __post_init__(self):
        if not self.total >= 0:
            raise ValueError(f"budget must be non-negative, got {self.total}")


@dataclass(frozen=True)
class FractionalSelection:
    """Optimal solution of the LP relaxation.

    ``fractions`` maps every ad id to its selected fraction. ``marginal_id`` is
    the first ad in ratio order that did not fully fit (it may have fraction 0
    when the budget is used up exactly); ``lambda_star`` is its ratio, or 0 when
    every ad fits.
    """

    fractions: Mapping[Hashable, float]
    lambda_star: float
    marginal_id: Optional[Hashable]
    objective: float
    spend: float
    order: tuple = field(default=(), repr=False)

    def selected_ids(self) -> list:
        """Ids that are fully selected, in ratio order."""
        return [i for i in self.order if self.fractions[i] == 1.0]


def ratio(value: float, paying_price: float) -> float:
    """Value per unit of price; free ads rank as infinitely good."""
    if paying_price == 0:
        return math.inf
    return value / paying_price


def _rank_key(ad: Impression):
    return (-ratio(ad.value, ad.paying_price), ad.id)


def rank_by_ratio(ads: Sequence[Impression]) -> list[Impression]:
    """Sort by value/price descending, zero-price ads first, ties by ascending id."""
    return sorted(ads, key=_rank_key)


def solve_fractional(ads: Sequence[Impression], budget: Budget) -> FractionalSelection:
    """Solve the knapsack LP relaxation by greedy filling in ratio order."""
    ordered = rank_by_ratio(ads)
    fractions: dict = {}
    marginal = None
    lambda_star = 0.0
    everything_fits = math.fsum(ad.paying_price for ad in ordered) <= budget.total
    # Compensated running spend, so a budget equal to the exact total spend is
    # not lost to accumulated rounding.
    spend = comp = 0.0
    for k, ad in enumerate(ordered):
        price = ad.paying_price
        if everything_fits or (spend + comp) + price <= budget.total:
            fractions[ad.id] = 1.0
            t = spend + price
            comp += (spend - t) + price if abs(spend) >= price else (price - t) + spend
            spend = t
            continue
        spend += comp
        marginal = ad
        lambda_star = ratio(ad.value, ad.paying_price)
        frac = (budget.total - spend) / ad.paying_price
        fractions[ad.id] = min(max(frac, 0.0), 1.0)
        for rest in ordered[k + 1:]:
            fractions[rest.id] = 0.0
        break

    objective = math.fsum(fractions[ad.id] * ad.value for ad in ordered)
    spend = math.fsum(fractions[ad.id] * ad.paying_price for ad in ordered)
    return FractionalSelection(
        fractions=MappingProxyType(fractions),
        lambda_star=lambda_star,
        marginal_id=None if marginal is None else marginal.id,
        objective=objective,
        spend=spend,
        order=tuple(ad.id for ad in ordered),
    )


def _integral_prices(ads: Sequence[Impression]) -> bool:
    return all(float(ad.paying_price).is_integer() for ad in ads)


def _solve_dp(ads: Sequence[Impression], capacity: int) -> tuple[list, float]:
    n = len(ads)
    best = np.zeros(capacity + 1)
    keep = np.zeros((n, capacity + 1), dtype=bool)
    for k, ad in enumerate(ads):
        w = int(ad.paying_price)
        if w > capacity:
            continue
        candidate = best.copy()
        if w == 0:
            candidate += ad.value
        else:
            candidate[w:] = best[:-w] + ad.value
        take = candidate > best
        keep[k] = take
        best = np.where(take, candidate, best)

    chosen = []
    c = capacity
    for k in range(n - 1, -1, -1):
        if keep[k, c]:
            chosen.append(ads[k])
            c -= int(ads[k].paying_price)
    chosen.reverse()
    return [ad.id for ad in chosen], math.fsum(ad.value for ad in chosen)


def _solve_enumeration(ads: Sequence[Impression], total: float) -> tuple[list, float]:
    best_ids: list = []
    best_value = 0.0
    for r in range(1, len(ads) + 1):
        for subset in itertools.combinations(ads, r):
            if math.fsum(ad.paying_price for ad in subset) > total + TOL:
                continue
            value = math.fsum(ad.value for ad in subset)
            if value > best_value:
                best_value = value
                best_ids = [ad.id for ad in subset]
    return best_ids, best_value


def solve_integer_exact(ads: Sequence[Impression], budget: Budget) -> tuple[list, float]:
    """Exact 0/1 optimum for small instances.

    Integral prices use a DP over budget units; otherwise all subsets are
    enumerated, which is capped at ``MAX_ENUMERATION_ADS`` ads.
    """
    ads = list(ads)
    if not ads:
        return [], 0.0
    if _integral_prices(ads):
        capacity = int(math.floor(budget.total + TOL))
        if len(ads) * (capacity + 1) > MAX_DP_CELLS:
            raise InstanceTooLargeError(
                f"DP table of {len(ads)} x {capacity + 1} cells exceeds {MAX_DP_CELLS}"
            )
        return _solve_dp(ads, capacity)
    if len(ads) > MAX_ENUMERATION_ADS:
        raise InstanceTooLargeError(
            f"{len(ads)} ads with non-integral prices; enumeration is capped at "
            f"{MAX_ENUMERATION_ADS}"
        )
    return _solve_enumeration(ads, budget.total)


def gap_bound_check(ads: Sequence[Impression], budget: Budget) -> tuple[float, float, bool]:
    """Check that removing the marginal ad's LP spend costs the IP at most its value.

    Returns ``(lhs, rhs, holds)`` with ``lhs = Z_IP(B) - Z_IP(B - b_j x_j)`` and
    ``rhs = v_j`` for the marginal ad ``j``.
    """
    sel = solve_fractional(ads, budget)
    if sel.marginal_id is None:
        return 0.0, 0.0, True
    marginal = next(ad for ad in ads if ad.id == sel.marginal_id)
    reduced = max(budget.total - marginal.paying_price * sel.fractions[marginal.id], 0.0)
    _, z_full = solve_integer_exact(ads, budget)
    _, z_reduced = solve_integer_exact(ads, Budget(reduced))
    lhs = z_full - z_reduced
    rhs = marginal.value
    return lhs, rhs, lhs <= rhs + TOL
