"""Second-price auction replay and the sequential simulation loop."""

from __future__ import annotations

import csv
import math
import random
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

from .knapsack import Budget, Impression, solve_fractional
from .strategies import BidContext, BidPolicy, HistoryRecord

TRACE_FIELDS = ("step", "value", "paying_price", "bid", "won", "paid", "remaining_budget")


class SimulationError(RuntimeError):
    """A policy failed during a simulation; ``step`` is the 1-based arrival index."""

    def __init__(self, step: int, cause: BaseException):
        super().__init__(f"policy failed at step {step}: {cause!r}")
        self.step = step
        self.cause = cause


@dataclass(frozen=True, slots=True)
class AuctionOutcome:
    won: bool
    paid: float
    value_collected: float
    clicked: Optional[bool] = None


class TraceRow(NamedTuple):
    step: int
    value: float
    paying_price: float
    bid: float
    won: bool
    paid: float
    remaining_budget: float


@dataclass
class SimulationResult:
    total_value: float
    total_spend: float
    wins: int
    clicks: int
    budget: float
    seed: Optional[int] = None
    trace: Optional[list[TraceRow]] = None
    min_remaining: float = math.inf


class BenchmarkResult(NamedTuple):
    optimal_value: float
    lambda_star: float
    optimal_clicks: int


def run_auction(bid: float, impression: Impression) -> AuctionOutcome:
    """Second-price rule with the competing bid summarized by the paying price.

    A bid equal to the paying price wins.
    """
    if bid < 0:
        raise ValueError(f"bid must be non-negative, got {bid}")
    if bid >= impression.paying_price:
        return AuctionOutcome(True, impression.paying_price, impression.value,
                              impression.clicked)
    return AuctionOutcome(False, 0.0, 0.0, None)


def permute_stream(ads: Sequence[Impression], seed: int) -> list[Impression]:
    """Uniformly random arrival order (Fisher-Yates driven by ``seed``)."""
    stream = list(ads)
    random.Random(seed).shuffle(stream)
    return stream


def simulate(policy: BidPolicy, stream: Sequence[Impression], budget: Budget,
             seed: Optional[int] = None, *, reveal_losing_price: bool = False,
             record_trace: bool = False) -> SimulationResult:
    """Replay ``stream`` against ``policy`` under a hard budget.

    Bids are clamped to the remaining budget before each auction, so the
    budget can never go negative. The paying price of a lost auction is
    written into the history only when ``reveal_losing_price`` is set or the
    policy asks for price feedback.
    """
    horizon = len(stream)
    reveal = reveal_losing_price or getattr(policy, "requires_price_feedback", False)
    remaining = budget.total
    min_remaining = remaining
    history: list[HistoryRecord] = []
    trace: Optional[list[TraceRow]] = [] if record_trace else None
    paid_log: list[float] = []
    value_log: list[float] = []
    wins = clicks = 0

    for t, imp in enumerate(stream, start=1):
        ctx = BidContext(imp.value, remaining, t, horizon, history, imp.id)
        try:
            bid = float(policy.bid(ctx))
        except Exception as exc:  # noqa: BLE001 - re-raised with the step index
            raise SimulationError(t, exc) from exc
        if not bid >= 0:
            bid = 0.0
        bid = min(bid, remaining)
        outcome = run_auction(bid, imp)
        if outcome.won:
            remaining -= outcome.paid
            wins += 1
            paid_log.append(outcome.paid)
            value_log.append(outcome.value_collected)
            if outcome.clicked:
                clicks += 1
        seen_price = imp.paying_price if (outcome.won or reveal) else None
        record = HistoryRecord(imp.value, seen_price, outcome.won, outcome.paid)
        try:
            policy.update(ctx, record)
        except Exception as exc:  # noqa: BLE001
            raise SimulationError(t, exc) from exc
        history.append(record)
        min_remaining = min(min_remaining, remaining)
        if trace is not None:
            trace.append(TraceRow(t, imp.value, imp.paying_price, bid, outcome.won,
                                  outcome.paid, remaining))

    return SimulationResult(
        total_value=math.fsum(value_log),
        total_spend=math.fsum(paid_log),
        wins=wins,
        clicks=clicks,
        budget=budget.total,
        seed=seed,
        trace=trace,
        min_remaining=min_remaining,
    )


def offline_benchmark(ads: Sequence[Impression], budget: Budget) -> BenchmarkResult:
    """Hindsight-optimal integral bundle: the LP's fully selected ads.

    The fractional marginal ad is left out, so the value is within the
    largest single ad value of the integer optimum.
    """
    sel = solve_fractional(ads, budget)
    chosen = [ad for ad in ads if sel.fractions[ad.id] == 1.0]
    return BenchmarkResult(
        optimal_value=math.fsum(ad.value for ad in chosen),
        lambda_star=sel.lambda_star,
        optimal_clicks=sum(1 for ad in chosen if ad.clicked),
    )


def write_trace_csv(trace: Sequence[TraceRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_FIELDS)
        for row in trace:
            writer.writerow([row.step, repr(row.value), repr(row.paying_price), repr(row.bid),
                             int(row.won), repr(row.paid), repr(row.remaining_budget)])
