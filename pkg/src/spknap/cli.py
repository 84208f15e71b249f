"""Experiment harness: offline benchmarks, strategy runs and comparisons.

    spknap generate --spec stream.spec --out stream.csv
    spknap benchmark --data stream.csv --fractions 1/2,1/4,1/8,1/16
    spknap run --spec stream.spec --strategy osla --strategy pacing --seeds 0,1,2,3,4
    spknap compare --data stream.csv --strategy osla --strategy pacing --baseline pacing
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dataio import (
    InvalidSpecError,
    MalformedFileError,
    budget_fraction,
    generate_synthetic,
    read_impressions,
    read_spec_file,
    write_impressions,
)
from .knapsack import Budget, Impression
from .simulator import SimulationError, offline_benchmark, permute_stream, simulate
from .strategies import (
    AdaptivePacingPolicy,
    BudgetPolicy,
    ConstantPolicy,
    LinearBidPolicy,
    OslaPolicy,
    PrimalRandomizedPolicy,
    ValuePolicy,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_SIMULATION = 4

DEFAULT_FRACTIONS = (Fraction(1, 2), Fraction(1, 4), Fraction(1, 8), Fraction(1, 16))
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
DEFAULT_EPSILON = 0.01
STRATEGY_NAMES = ("osla", "pacing", "primal", "linear", "value", "budget", "zero")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StrategySpec:
    name: str
    params: tuple = ()

    @classmethod
    def parse(cls, text: str) -> "StrategySpec":
        """Parse ``name`` or ``name=key=value,key=value``."""
        name, _, rest = text.partition("=")
        name = name.strip()
        if name not in STRATEGY_NAMES:
            raise ConfigError(f"unknown strategy {name!r}; choose from {', '.join(STRATEGY_NAMES)}")
        params = []
        for item in filter(None, (s.strip() for s in rest.split(","))):
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"strategy parameter {item!r} must be key=value")
            try:
                params.append((key.strip(), float(value)))
            except ValueError as exc:
                raise ConfigError(f"strategy parameter {item!r} is not numeric") from exc
        return cls(name, tuple(params))

    @property
    def label(self) -> str:
        if not self.params:
            return self.name
        return self.name + "=" + ",".join(f"{k}={v:g}" for k, v in self.params)

    def get(self, key: str, default=None):
        return dict(self.params).get(key, default)


@dataclass
class ExperimentConfig:
    data: Optional[str] = None
    data_format: str = "processed"
    values: Optional[str] = None
    advertiser: Optional[str] = None
    spec: Optional[str] = None
    strategies: list = field(default_factory=lambda: [StrategySpec("osla"),
                                                      StrategySpec("pacing")])
    fractions: list = field(default_factory=lambda: list(DEFAULT_FRACTIONS))
    epsilon: float = DEFAULT_EPSILON
    seeds: list = field(default_factory=lambda: list(DEFAULT_SEEDS))
    baseline: Optional[str] = None
    out: Optional[str] = None
    format: str = "csv"
    reveal_losing_price: bool = False
    jobs: int = 1

    def validate(self) -> None:
        if not self.strategies:
            raise ConfigError("at least one strategy is required")
        if not self.fractions:
            raise ConfigError("at least one budget fraction is required")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        for f in self.fractions:
            if not 0 <= f <= 1:
                raise ConfigError(f"budget fraction {f} outside [0, 1]")
        if not 0 < self.epsilon < 1:
            raise ConfigError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.format not in ("csv", "md"):
            raise ConfigError(f"format must be csv or md, got {self.format!r}")
        if (self.data is None) == (self.spec is None):
            raise ConfigError("give exactly one of --data or --spec")


@dataclass(frozen=True)
class Dataset:
    label: str
    ads: tuple


def parse_fractions(text) -> list[Fraction]:
    if isinstance(text, (list, tuple)):
        items = [str(x) for x in text]
    else:
        items = [s for s in str(text).split(",") if s.strip()]
    try:
        return [Fraction(s.strip()) for s in items]
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"cannot parse budget fractions {text!r}") from exc


def parse_seeds(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        items = text
    else:
        items = [s for s in str(text).split(",") if s.strip()]
    try:
        return [int(s) for s in items]
    except ValueError as exc:
        raise ConfigError(f"cannot parse seeds {text!r}") from exc


def load_dataset(config: ExperimentConfig) -> Dataset:
    if config.spec is not None:
        spec = read_spec_file(config.spec)
        return Dataset("synthetic", tuple(generate_synthetic(spec)))
    result = read_impressions(config.data, config.data_format, values_path=config.values,
                              advertiser=config.advertiser)
    return Dataset(Path(config.data).stem, tuple(result.impressions))


def _budget(ads: Sequence[Impression], fraction: Fraction) -> Budget:
    if fraction == 0:
        return Budget(0.0)
    return budget_fraction(ads, fraction)


def _pct(num: float, den: float) -> Optional[float]:
    return 100.0 * num / den if den > 0 else None


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------


def build_policy(strategy: StrategySpec, *, budget: float, horizon: int, seed: int,
                 epsilon: float, lambda_star: float, b_max: float):
    name = strategy.name
    if name == "osla":
        return OslaPolicy(strategy.get("epsilon", epsilon), budget, horizon)
    if name == "pacing":
        return AdaptivePacingPolicy.for_horizon(budget, horizon,
                                                mu_cap=strategy.get("mu_cap", 1e6),
                                                step=strategy.get("step"))
    if name == "primal":
        return PrimalRandomizedPolicy(budget, horizon, np.random.default_rng(seed))
    if name == "linear":
        lam = strategy.get("lambda", lambda_star)
        if lam <= 0:
            return BudgetPolicy()
        return LinearBidPolicy(lam)
    if name == "value":
        return ValuePolicy()
    if name == "budget":
        return BudgetPolicy()
    if name == "zero":
        return ConstantPolicy(0.0)
    raise ConfigError(f"unknown strategy {name!r}")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


@dataclass
class BenchmarkRow:
    dataset: str
    fraction: str
    budget: float
    lambda_star: float
    optimal_value: float
    pct_total_value: Optional[float]
    optimal_clicks: int
    pct_total_clicks: Optional[float]


@dataclass
class RunRow:
    dataset: str
    fraction: str
    strategy: str
    seed: int
    value: float
    pct_optimal: Optional[float]
    clicks: int
    pct_optimal_clicks: Optional[float]
    spend: float
    budget: float
    min_remaining: float
    wins: int
    lambda_hat: Optional[float]
    lambda_star: float
    over_100: bool


@dataclass
class SummaryRow:
    dataset: str
    fraction: str
    strategy: str
    seeds: int
    value_mean: float
    value_std: float
    pct_optimal_mean: Optional[float]
    pct_optimal_std: Optional[float]
    clicks_mean: float
    pct_optimal_clicks_mean: Optional[float]
    lambda_hat_mean: Optional[float]
    lambda_star: float
    lambda_ratio: Optional[float]


@dataclass
class CompareRow:
    dataset: str
    fraction: str
    strategy: str
    baseline: str
    pct_optimal: Optional[float]
    baseline_pct_optimal: Optional[float]
    performance_ratio: Optional[float]


def cmd_benchmark(config: ExperimentConfig, dataset: Optional[Dataset] = None) -> list[BenchmarkRow]:
    dataset = dataset or load_dataset(config)
    ads = dataset.ads
    total_value = math.fsum(ad.value for ad in ads)
    total_clicks = sum(1 for ad in ads if ad.clicked)
    rows = []
    for frac in config.fractions:
        budget = _budget(ads, frac)
        bench = offline_benchmark(ads, budget)
        rows.append(BenchmarkRow(
            dataset=dataset.label,
            fraction=str(frac),
            budget=budget.total,
            lambda_star=bench.lambda_star,
            optimal_value=bench.optimal_value,
            pct_total_value=_pct(bench.optimal_value, total_value),
            optimal_clicks=bench.optimal_clicks,
            pct_total_clicks=_pct(bench.optimal_clicks, total_clicks),
        ))
    return rows


_WORKER_ADS: tuple = ()


def _init_worker(ads):
    global _WORKER_ADS
    _WORKER_ADS = ads


def _run_cell(cell):
    strategy, budget, seed, epsilon, lambda_star, b_max, reveal = cell
    stream = permute_stream(_WORKER_ADS, seed)
    policy = build_policy(strategy, budget=budget.total, horizon=len(stream), seed=seed,
                          epsilon=epsilon, lambda_star=lambda_star, b_max=b_max)
    result = simulate(policy, stream, budget, seed, reveal_losing_price=reveal)
    if result.min_remaining < 0:
        raise SimulationError(len(stream), RuntimeError("budget overdrawn"))
    return result, getattr(policy, "learned_lambda", None)


def cmd_run(config: ExperimentConfig, dataset: Optional[Dataset] = None
            ) -> tuple[list[RunRow], list[SummaryRow]]:
    """Simulate every (fraction, strategy, seed) cell against the offline benchmark."""
    dataset = dataset or load_dataset(config)
    ads = dataset.ads
    b_max = max((ad.paying_price for ad in ads), default=0.0)

    cells, meta = [], []
    for frac in config.fractions:
        budget = _budget(ads, frac)
        bench = offline_benchmark(ads, budget)
        for strategy in config.strategies:
            for seed in config.seeds:
                cells.append((strategy, budget, seed, config.epsilon, bench.lambda_star,
                              b_max, config.reveal_losing_price))
                meta.append((frac, strategy, seed, budget, bench))

    if config.jobs > 1:
        with ProcessPoolExecutor(config.jobs, initializer=_init_worker,
                                 initargs=(ads,)) as pool:
            outcomes = list(pool.map(_run_cell, cells))
    else:
        _init_worker(ads)
        outcomes = [_run_cell(c) for c in cells]

    rows = []
    for (frac, strategy, seed, budget, bench), (result, lam_hat) in zip(meta, outcomes):
        pct = _pct(result.total_value, bench.optimal_value)
        rows.append(RunRow(
            dataset=dataset.label,
            fraction=str(frac),
            strategy=strategy.label,
            seed=seed,
            value=result.total_value,
            pct_optimal=pct,
            clicks=result.clicks,
            pct_optimal_clicks=_pct(result.clicks, bench.optimal_clicks),
            spend=result.total_spend,
            budget=budget.total,
            min_remaining=result.min_remaining,
            wins=result.wins,
            lambda_hat=lam_hat,
            lambda_star=bench.lambda_star,
            over_100=pct is not None and pct > 100.0,
        ))
    return rows, summarize_runs(rows)


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return statistics.fmean(xs) if xs else None


def _std(xs):
    xs = [x for x in xs if x is not None]
    if not xs:
        return None
    return statistics.stdev(xs) if len(xs) > 1 else 0.0


def summarize_runs(rows: Sequence[RunRow]) -> list[SummaryRow]:
    groups: dict = {}
    for row in rows:
        groups.setdefault((row.dataset, row.fraction, row.strategy), []).append(row)
    out = []
    for (dataset, fraction, strategy), group in groups.items():
        lam_hat = _mean([r.lambda_hat for r in group])
        lam_star = group[0].lambda_star
        out.append(SummaryRow(
            dataset=dataset,
            fraction=fraction,
            strategy=strategy,
            seeds=len(group),
            value_mean=statistics.fmean(r.value for r in group),
            value_std=_std([r.value for r in group]),
            pct_optimal_mean=_mean([r.pct_optimal for r in group]),
            pct_optimal_std=_std([r.pct_optimal for r in group]),
            clicks_mean=statistics.fmean(r.clicks for r in group),
            pct_optimal_clicks_mean=_mean([r.pct_optimal_clicks for r in group]),
            lambda_hat_mean=lam_hat,
            lambda_star=lam_star,
            lambda_ratio=lam_hat / lam_star if lam_hat is not None and lam_star > 0 else None,
        ))
    return out


def cmd_compare(config: ExperimentConfig, baseline: Optional[str] = None,
                dataset: Optional[Dataset] = None,
                summary: Optional[Sequence[SummaryRow]] = None) -> list[CompareRow]:
    """Each strategy's share of the optimal bundle and its value ratio to ``baseline``."""
    baseline = baseline or config.baseline
    labels = [s.label for s in config.strategies]
    if baseline is None:
        raise ConfigError("compare needs --baseline")
    if baseline not in labels:
        matches = [s.label for s in config.strategies if s.name == baseline]
        if len(matches) != 1:
            raise ConfigError(f"baseline {baseline!r} is not among strategies {labels}")
        baseline = matches[0]
    if summary is None:
        _, summary = cmd_run(config, dataset)
    by_key = {(r.fraction, r.strategy): r for r in summary}
    out = []
    for r in summary:
        base = by_key[(r.fraction, baseline)]
        ratio = 100.0 * r.value_mean / base.value_mean if base.value_mean > 0 else None
        out.append(CompareRow(
            dataset=r.dataset,
            fraction=r.fraction,
            strategy=r.strategy,
            baseline=baseline,
            pct_optimal=r.pct_optimal_mean,
            baseline_pct_optimal=base.pct_optimal_mean,
            performance_ratio=ratio,
        ))
    return out


def cmd_generate(spec_path, out_path) -> int:
    spec = read_spec_file(spec_path)
    ads = generate_synthetic(spec)
    write_impressions(ads, out_path)
    return len(ads)


# ---------------------------------------------------------------------------
# Report output
# ---------------------------------------------------------------------------


def _cell(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, float):
        return f"{x:.10g}"
    return str(x)


def write_rows_csv(rows: Sequence, path) -> None:
    if not rows:
        return
    names = [f.name for f in fields(rows[0])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        for row in rows:
            writer.writerow([_cell(getattr(row, n)) for n in names])


def rows_to_markdown(rows: Sequence) -> str:
    if not rows:
        return ""
    names = [f.name for f in fields(rows[0])]
    lines = ["| " + " | ".join(names) + " |", "|" + "---|" * len(names)]
    for row in rows:
        lines.append("| " + " | ".join(_cell(getattr(row, n)) for n in names) + " |")
    return "\n".join(lines) + "\n"


def emit(rows: Sequence, name: str, config: ExperimentConfig) -> None:
    if config.out is None:
        sys.stdout.write(rows_to_markdown(rows) if config.format == "md" else _csv_text(rows))
        return
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    write_rows_csv(rows, out / f"{name}.csv")
    if config.format == "md":
        (out / f"{name}.md").write_text(rows_to_markdown(rows), encoding="utf-8")


def _csv_text(rows: Sequence) -> str:
    import io

    buf = io.StringIO()
    if rows:
        names = [f.name for f in fields(rows[0])]
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(names)
        for row in rows:
            writer.writerow([_cell(getattr(row, n)) for n in names])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Argument handling
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with the same keys as the flags")
    p.add_argument("--data", help="processed CSV (id,value,paying_price,clicked) or raw log")
    p.add_argument("--data-format", choices=("processed", "raw-log"))
    p.add_argument("--values", help="value sidecar CSV for raw logs (id,value[,clicked])")
    p.add_argument("--advertiser", help="keep only this advertiser id (raw logs)")
    p.add_argument("--spec", help="synthetic stream spec file (key = value)")
    p.add_argument("--fractions", help="comma-separated budget fractions, e.g. 1/2,1/4")
    p.add_argument("--out", help="output directory (default: print to stdout)")
    p.add_argument("--format", choices=("csv", "md"))


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--strategy", action="append",
                   help="strategy, repeatable: name or name=key=value,... "
                        f"({', '.join(STRATEGY_NAMES)})")
    p.add_argument("--epsilon", type=float, help="training fraction for osla (default 0.01)")
    p.add_argument("--seeds", help="comma-separated seeds (default 0,1,2,3,4)")
    p.add_argument("--reveal-losing-price", action="store_true", default=None,
                   help="record paying prices of lost auctions in the bid history")
    p.add_argument("--jobs", type=int, help="worker processes for independent cells")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spknap", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic stream as processed CSV")
    gen.add_argument("--spec", required=True)
    gen.add_argument("--out", required=True, help="output CSV path")

    bench = sub.add_parser("benchmark", help="offline optimal bundle per budget fraction")
    _add_common(bench)

    run = sub.add_parser("run", help="simulate strategies against the offline benchmark")
    _add_common(run)
    _add_run_flags(run)

    cmp_ = sub.add_parser("compare", help="performance ratios against a baseline strategy")
    _add_common(cmp_)
    _add_run_flags(cmp_)
    cmp_.add_argument("--baseline")
    return parser


_CONFIG_KEYS = {f.name for f in fields(ExperimentConfig)} | {"strategy"}


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    raw: dict = {}
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: {exc}") from exc
        raw = {k.replace("-", "_"): v for k, v in raw.items()}
        unknown = set(raw) - _CONFIG_KEYS
        if unknown:
            raise ConfigError(f"{args.config}: unknown keys {sorted(unknown)}")
    for key, value in vars(args).items():
        if key in ("command", "config", "verbose") or value is None:
            continue
        raw[key] = value

    config = ExperimentConfig()
    for key in ("data", "values", "advertiser", "spec", "baseline", "out"):
        if raw.get(key) is not None:
            setattr(config, key, str(raw[key]))
    if raw.get("data_format"):
        config.data_format = raw["data_format"]
    if raw.get("format"):
        config.format = raw["format"]
    strategies = raw.get("strategy", raw.get("strategies"))
    if strategies:
        if isinstance(strategies, str):
            strategies = [strategies]
        config.strategies = [StrategySpec.parse(s) for s in strategies]
    if raw.get("fractions") is not None:
        config.fractions = parse_fractions(raw["fractions"])
    if raw.get("seeds") is not None:
        config.seeds = parse_seeds(raw["seeds"])
    if raw.get("epsilon") is not None:
        config.epsilon = float(raw["epsilon"])
    if raw.get("reveal_losing_price") is not None:
        config.reveal_losing_price = bool(raw["reveal_losing_price"])
    if raw.get("jobs") is not None:
        config.jobs = int(raw["jobs"])
    config.validate()
    return config


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "generate":
            n = cmd_generate(args.spec, args.out)
            logger.info("wrote %d impressions to %s", n, args.out)
            return EXIT_OK
        config = config_from_args(args)
        if args.command == "benchmark":
            emit(cmd_benchmark(config), "benchmark", config)
        elif args.command == "run":
            cells, summary = cmd_run(config)
            emit(cells, "run_cells", config)
            emit(summary, "run_summary", config)
        elif args.command == "compare":
            if config.baseline is None:
                raise ConfigError("compare needs --baseline")
            dataset = load_dataset(config)
            cells, summary = cmd_run(config, dataset)
            rows = cmd_compare(config, dataset=dataset, summary=summary)
            if config.out is not None:
                emit(cells, "run_cells", config)
                emit(summary, "run_summary", config)
            emit(rows, "compare", config)
    except (ConfigError, InvalidSpecError) as exc:
        print(f"spknap: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, MalformedFileError) as exc:
        print(f"spknap: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SimulationError as exc:
        print(f"spknap: simulation error: {exc}", file=sys.stderr)
        return EXIT_SIMULATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
