"""Bidding policies for sequential second-price auctions with a budget.

Every policy exposes ``bid(ctx)`` and ``update(ctx, record)``; the simulator
calls ``bid`` before each auction and ``update`` once the outcome is known.
Policies that learn from market prices set ``requires_price_feedback`` so the
simulator reveals the paying price of lost auctions to them.

Two adapters turn selection rules that look at the (unknown) paying price into
implementable bids: a deterministic rule ``g(v, b, B_t, H_t) <= 0`` becomes the
bid ``sup{b : g(b) <= 0}``, and a randomized rule selecting with probability
``p(b)`` becomes ``sup{b : 1 - p(b) <= u}`` for a uniform draw ``u``.
"""

from __future__ import annotations

import bisect
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, NamedTuple, Optional, Protocol, Sequence

import numpy as np

from .knapsack import Budget, Impression, solve_fractional

if TYPE_CHECKING:
    from .simulator import AuctionOutcome

logger = logging.getLogger(__name__)

# Cap on bracket doublings when searching for an upper end where the
# selector rejects.
_MAX_EXPANSIONS = 1100


class SelectorContractError(ValueError):
    """A selector handed to an adapter violates its monotonicity/limit contract."""


class DegenerateTrainingWarning(RuntimeWarning):
    """One-shot learning saw no priced impression and cannot fit a threshold."""


class InfeasibleEpsilonWarning(UserWarning):
    """The training fraction is too large for the budget's theoretical guarantee."""


class HistoryRecord(NamedTuple):
    value: float
    paying_price: Optional[float]  # None when the price was not revealed
    won: bool
    paid: float


@dataclass(slots=True)
class BidContext:
    value: float
    remaining_budget: float
    time_index: int
    horizon: int
    history: list = field(default_factory=list)
    impression_id: object = None


class BidPolicy(Protocol):
    requires_price_feedback: bool

    def bid(self, ctx: BidContext) -> float: ...

    def update(self, ctx: BidContext, record: HistoryRecord) -> None: ...


def bisect_sup(accept: Callable[[float], bool], lo: float, hi: float) -> float:
    """Largest float in ``[lo, hi)`` accepted by a monotone predicate.

    Requires ``accept(lo)`` true and ``accept(hi)`` false. Bisection runs until
    the bracket endpoints are adjacent floats, so the result is exact.
    """
    while True:
        mid = lo + (hi - lo) / 2
        if mid <= lo or mid >= hi:
            return lo
        if accept(mid):
            lo = mid
        else:
            hi = mid


def _price_scale(history: Sequence[HistoryRecord]) -> float:
    prices = [r.paying_price for r in history if r.paying_price is not None]
    return max(prices, default=0.0)


def _bid_cap(ctx: BidContext, b_max: Optional[float] = None) -> float:
    if b_max is None:
        b_max = _price_scale(ctx.history)
    cap = max(ctx.remaining_budget, 10.0 * b_max)
    return cap if cap > 0 else 1.0


# ---------------------------------------------------------------------------
# Adapters
# ---------------------------------------------------------------------------

DeterministicSelector = Callable[[float, float, float, Sequence[HistoryRecord]], float]
ProbabilisticSelector = Callable[[float, float, float, Sequence[HistoryRecord]], float]


def adapt_deterministic(selector, ctx: BidContext, b_max: Optional[float] = None) -> float:
    """Bid ``sup{b : g(v, b, B_t, H_t) <= 0}`` for a selector increasing in ``b``.

    If the selector has a ``threshold(value, remaining_budget, history)``
    method, it is used as the closed form. Otherwise the supremum is found by
    bisection on ``[0, cap]``; the cap is doubled until ``g`` turns positive.
    """
    threshold = getattr(selector, "threshold", None)
    if threshold is not None:
        return float(threshold(ctx.value, ctx.remaining_budget, ctx.history))

    def g(b: float) -> float:
        return selector(ctx.value, b, ctx.remaining_budget, ctx.history)

    if g(0.0) > 0:
        raise SelectorContractError(f"g(0) = {g(0.0)} > 0")
    hi = _bid_cap(ctx, b_max)
    for _ in range(_MAX_EXPANSIONS):
        if g(hi) > 0:
            break
        hi *= 2.0
    else:
        raise SelectorContractError("g never becomes positive on the bid bracket")
    return bisect_sup(lambda b: g(b) <= 0, 0.0, hi)


def _check_decreasing(p: Callable[[float], float], hi: float, probes: int = 17) -> None:
    grid = np.linspace(0.0, hi, probes)[1:]
    values = [p(float(b)) for b in grid]
    for b0, b1, p0, p1 in zip(grid, grid[1:], values, values[1:]):
        if p1 > p0 + 1e-12:
            raise SelectorContractError(
                f"selection probability increases from {p0} at b={b0} to {p1} at b={b1}"
            )
    if any(not 0.0 <= q <= 1.0 for q in values):
        raise SelectorContractError("selection probability outside [0, 1]")


def adapt_probabilistic(selector, ctx: BidContext, uniform_draw: float,
                        b_max: Optional[float] = None) -> float:
    """Bid ``sup{b : F(b) <= u}`` where ``F(b) = 1 - p(v, b, B_t, H_t)``.

    ``F(0)`` is taken as 0, so a bid of 0 is always admissible. The bid wins
    against price ``b_t`` exactly when ``u >= F(b_t)``, i.e. with probability
    ``p(b_t)`` over the draw.
    """
    if not 0.0 <= uniform_draw <= 1.0:
        raise ValueError(f"uniform draw must lie in [0, 1], got {uniform_draw}")

    def p(b: float) -> float:
        return selector(ctx.value, b, ctx.remaining_budget, ctx.history)

    def admissible(b: float) -> bool:
        return b == 0.0 or 1.0 - p(b) <= uniform_draw

    hi = _bid_cap(ctx, b_max)
    _check_decreasing(p, hi)
    for _ in range(_MAX_EXPANSIONS):
        if not admissible(hi):
            break
        hi *= 2.0
    else:
        raise SelectorContractError("selection probability never drops below 1 - u")
    return bisect_sup(admissible, 0.0, hi)


class SelectorPolicy:
    """Wraps a deterministic selector as a policy via ``adapt_deterministic``."""

    requires_price_feedback = False

    def __init__(self, selector, b_max: Optional[float] = None):
        self.selector = selector
        self.b_max = b_max

    def bid(self, ctx: BidContext) -> float:
        return adapt_deterministic(self.selector, ctx, self.b_max)

    def update(self, ctx: BidContext, record: HistoryRecord) -> None:
        pass


class RandomizedSelectorPolicy:
    """Wraps a probabilistic selector as a policy via ``adapt_probabilistic``."""

    requires_price_feedback = False

    def __init__(self, selector, rng: np.random.Generator, b_max: Optional[float] = None):
        self.selector = selector
        self.rng = rng
        self.b_max = b_max

    def bid(self, ctx: BidContext) -> float:
        return adapt_probabilistic(self.selector, ctx, float(self.rng.random()), self.b_max)

    def update(self, ctx: BidContext, record: HistoryRecord) -> None:
        pass


# ---------------------------------------------------------------------------
# Simple policies
# ---------------------------------------------------------------------------


class ConstantPolicy:
    """Always bids the same amount (0 gives the null policy)."""

    requires_price_feedback = False

    def __init__(self, amount: float = 0.0):
        self.amount = amount

    def bid(self, ctx: BidContext) -> float:
        return min(self.amount, ctx.remaining_budget)

    def update(self, ctx: BidContext, record: HistoryRecord) -> None:
        pass


class BudgetPolicy:
    """Bids the whole remaining budget every time."""

    requires_price_feedback = False

    def bid(self, ctx: BidContext) -> float:
        return ctx.remaining_budget

    def update(self, ctx: BidContext, record: HistoryRecord) -> None:
        pass


class ValuePolicy:
    """Bids the impression's value, clamped to the remaining budget."""

    requires_price_feedback = False

    def bid(self, ctx: BidContext) -> float:
        return min(ctx.value, ctx.remaining_budget)

    def update(self, ctx: BidContext, record: HistoryRecord) -> None:
        pass


# Relative shading that puts a linear bid just under the indifference price
# v / lambda, so an ad whose ratio equals lambda exactly is lost rather than
# won on the tie.
STRICT_SHADE = 1e-12


@dataclass
class LinearBidPolicy:
    """Scaled linear bid ``v / lambda``.

    Under second-price rules this wins exactly the ads whose value/price
    ratio exceeds ``lambda``. With ``strict=False`` the bid is exactly
    ``v / lambda`` and an ad sitting on the threshold is won on the tie.
    """

    lam: float
    strict: bool = True
    requires_price_feedback = False

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lambda must be positive, got {self.lam}")

    def bid(self, ctx: BidContext) -> float:
        return linear_bid(self, ctx)

    def update(self, ctx: BidContext, record: HistoryRecord) -> None:
        pass

    def threshold(self, value: float, remaining_budget: float, history) -> float:
        return _scaled_bid(value, self.lam, remaining_budget, self.strict)


def _scaled_bid(value: float, lam: float, remaining_budget: float, strict: bool = True) -> float:
    bid = value / lam
    if strict:
        bid *= 1.0 - STRICT_SHADE
    return max(min(bid, remaining_budget), 0.0)


def linear_bid(policy: LinearBidPolicy, ctx: BidContext) -> float:
    return _scaled_bid(ctx.value, policy.lam, ctx.remaining_budget, policy.strict)


# ---------------------------------------------------------------------------
# One-shot learning
# ---------------------------------------------------------------------------


def osla_required_budget(b_max: float, n: int, epsilon: float) -> float:
    """Smallest budget for which one-shot learning keeps its 1 - 6 eps guarantee."""
    return 6.0 * b_max * math.log(n / epsilon) / epsilon ** 3


class OslaPolicy:
    """One-shot learning: bid value while observing the first ``eps * N`` ads,
    fit a dual threshold on them, then bid linearly.

    During training at most ``eps * B`` is spent. The threshold is the LP dual
    over the training impressions with budget ``(1 - eps) * eps * B``.
    """

    requires_price_feedback = True

    def __init__(self, epsilon: float, budget: float, horizon: int,
                 b_max: Optional[float] = None):
        if not 0.0 < epsilon < 1.0:
            raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
        self.epsilon = epsilon
        self.budget = float(budget)
        self.horizon = int(horizon)
        self.training_steps = int(math.floor(epsilon * horizon))
        self.training_budget = epsilon * self.budget
        self.training_spend = 0.0
        self.learned_lambda: Optional[float] = None
        self.degenerate = False
        self.observed: list[Impression] = []
        if b_max is not None and horizon > 0:
            required = osla_required_budget(b_max, horizon, epsilon)
            if self.budget < required:
                warnings.warn(
                    f"budget {self.budget:.6g} is below {required:.6g} required for "
                    f"epsilon={epsilon} (b_max={b_max}, n={horizon})",
                    InfeasibleEpsilonWarning,
                    stacklevel=2,
                )

    @property
    def phase(self) -> str:
        return "bidding" if (self.learned_lambda is not None or self.degenerate) else "training"

    def fit(self) -> Optional[float]:
        if not any(ad.paying_price > 0 for ad in self.observed):
            self.degenerate = True
            warnings.warn(
                f"no priced impression among {len(self.observed)} training ads; bidding 0",
                DegenerateTrainingWarning,
                stacklevel=2,
            )
            return None
        fit_budget = (1.0 - self.epsilon) * self.epsilon * self.budget
        self.learned_lambda = solve_fractional(self.observed, Budget(fit_budget)).lambda_star
        logger.debug("osla: learned lambda %.6g on %d ads", self.learned_lambda,
                     len(self.observed))
        return self.learned_lambda

    def bid(self, ctx: BidContext) -> float:
        return osla_step(self, ctx)

    def update(self, ctx: BidContext, record: HistoryRecord) -> None:
        if ctx.time_index <= self.training_steps:
            self.training_spend += record.paid
            if record.paying_price is not None:
                self.observed.append(Impression(len(self.observed), record.value,
                                                record.paying_price))


def osla_step(policy: OslaPolicy, ctx: BidContext) -> float:
    if ctx.time_index <= policy.training_steps:
        left = max(policy.training_budget - policy.training_spend, 0.0)
        return min(ctx.value, left, ctx.remaining_budget)
    if policy.phase == "training":
        policy.fit()
    if policy.degenerate:
        return 0.0
    if policy.learned_lambda == 0.0:
        return ctx.remaining_budget
    return _scaled_bid(ctx.value, policy.learned_lambda, ctx.remaining_budget)


# ---------------------------------------------------------------------------
# Adaptive pacing baseline
# ---------------------------------------------------------------------------


@dataclass
class AdaptivePacingPolicy:
    """Dual-descent pacing: bid ``v / (1 + mu)`` and move ``mu`` against the
    gap between the per-period spend target and what was just paid.
    """

    step: float
    target_rate: float
    mu: float = 0.0
    mu_cap: float = 1e6
    requires_price_feedback = False

    @classmethod
    def for_horizon(cls, budget: float, horizon: int, mu_cap: float = 1e6,
                    step: Optional[float] = None) -> "AdaptivePacingPolicy":
        if step is None:
            step = 1.0 / math.sqrt(max(horizon, 1))
        return cls(step=step, target_rate=budget / max(horizon, 1), mu_cap=mu_cap)

    def bid(self, ctx: BidContext) -> float:
        return min(ctx.value / (1.0 + self.mu), ctx.remaining_budget)

    def observe_payment(self, paid: float) -> None:
        mu = self.mu - self.step * (self.target_rate - paid)
        self.mu = min(max(mu, 0.0), self.mu_cap)

    def update(self, ctx: BidContext, record: HistoryRecord) -> None:
        self.observe_payment(record.paid)


def adaptive_pacing_step(policy: AdaptivePacingPolicy, ctx: BidContext,
                         last_outcome: Optional["AuctionOutcome"]) -> float:
    """Apply the previous auction's payment to ``mu``, then bid."""
    if last_outcome is not None:
        policy.observe_payment(last_outcome.paid)
    return policy.bid(ctx)


# ---------------------------------------------------------------------------
# Primal randomized policy
# ---------------------------------------------------------------------------


class _RatioIndex:
    """Observed ads kept in LP ratio order with prefix sums of their prices.

    Answers "how much budget do ads ranked ahead of a hypothetical ad consume"
    in O(log n), which is all the greedy LP needs to fix that ad's fraction.
    """

    def __init__(self):
        self.keys: list = []
        self.prices: list[float] = []
        self._prefix: Optional[np.ndarray] = None

    def add(self, ad: Impression) -> None:
        key = (-ad.ratio, ad.id)
        k = bisect.bisect_left(self.keys, key)
        self.keys.insert(k, key)
        self.prices.insert(k, ad.paying_price)
        self._prefix = None

    def spend_ahead(self, key) -> float:
        if self._prefix is None:
            self._prefix = np.concatenate(([0.0], np.cumsum(self.prices)))
        return float(self._prefix[bisect.bisect_left(self.keys, key)])

    def __len__(self):
        return len(self.keys)


class PrimalRandomizedPolicy:
    """Randomized rounding of a scaled fractional selection.

    At arrival ``t`` the fraction ``x(b)`` given to the current ad is its share
    in the LP over all ads seen so far, with budget ``(t / N) * B`` and its own
    price set to ``b``. A uniform draw ``u`` then gives the bid
    ``min(B_t, sup{b : x(b) >= 1 - u})``.
    """

    requires_price_feedback = True

    def __init__(self, budget: float, horizon: int, rng: np.random.Generator,
                 b_max: Optional[float] = None):
        self.budget = float(budget)
        self.horizon = int(horizon)
        self.rng = rng
        self.b_max = b_max
        self.observed: list[Impression] = []
        self._index = _RatioIndex()
        self._max_price = 0.0

    def fraction(self, ctx: BidContext, price: float) -> float:
        """Current ad's LP fraction if its paying price were ``price``."""
        if price == 0:
            return 1.0
        capacity = ctx.time_index / self.horizon * self.budget
        ahead = self._index.spend_ahead((-ctx.value / price, _current_id(self)))
        return min(max((capacity - ahead) / price, 0.0), 1.0)

    def fraction_by_lp(self, ctx: BidContext, price: float) -> float:
        """Same quantity as ``fraction`` computed by a full LP solve."""
        current = Impression(_current_id(self), ctx.value, price)
        capacity = ctx.time_index / self.horizon * self.budget
        sel = solve_fractional(self.observed + [current], Budget(capacity))
        return sel.fractions[current.id]

    def bid(self, ctx: BidContext) -> float:
        return primal_randomized_step(self, ctx, float(self.rng.random()))

    def update(self, ctx: BidContext, record: HistoryRecord) -> None:
        if record.paying_price is None:
            return
        ad = Impression(len(self.observed), record.value, record.paying_price)
        self.observed.append(ad)
        self._index.add(ad)
        self._max_price = max(self._max_price, ad.paying_price)


def _current_id(policy: PrimalRandomizedPolicy) -> int:
    # The arriving ad ranks after every observed ad with an equal ratio.
    return len(policy.observed)


def primal_randomized_step(policy: PrimalRandomizedPolicy, ctx: BidContext,
                           uniform_draw: float) -> float:
    if ctx.remaining_budget <= 0:
        return 0.0
    target = 1.0 - uniform_draw

    def accept(b: float) -> bool:
        return policy.fraction(ctx, b) >= target

    b_max = policy.b_max if policy.b_max is not None else policy._max_price
    hi = _bid_cap(ctx, b_max)
    if accept(hi):
        return ctx.remaining_budget
    return min(ctx.remaining_budget, bisect_sup(accept, 0.0, hi))
