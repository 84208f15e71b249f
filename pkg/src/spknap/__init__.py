"""Bidding strategies for the second-price knapsack problem."""

from .knapsack import (
    Budget,
    FractionalSelection,
    Impression,
    gap_bound_check,
    rank_by_ratio,
    solve_fractional,
    solve_integer_exact,
)
from .simulator import (
    AuctionOutcome,
    SimulationResult,
    offline_benchmark,
    permute_stream,
    run_auction,
    simulate,
)
from .strategies import (
    AdaptivePacingPolicy,
    BidContext,
    LinearBidPolicy,
    OslaPolicy,
    PrimalRandomizedPolicy,
    adapt_deterministic,
    adapt_probabilistic,
    linear_bid,
)

__version__ = "0.1.0"
