"""Impression datasets: synthetic generation, file parsing, budgets, summaries."""

from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping, NamedTuple, Optional, Sequence

import numpy as np
from scipy.special import ndtr

from .knapsack import Budget, Impression

logger = logging.getLogger(__name__)

PROCESSED_HEADER = ("id", "value", "paying_price", "clicked")

# 1-based column positions in the 24-column impression log.
RAW_COLUMNS = 24
RAW_BID_ID = 1
RAW_PAYING_PRICE = 21
RAW_ADVERTISER_ID = 23

MAX_FAILED_FRACTION = 0.10


class InvalidSpecError(ValueError):
    pass


class MalformedFileError(ValueError):
    pass


@dataclass(frozen=True)
class Distribution:
    kind: str  # "uniform" or "lognormal"
    a: float  # lo, or mu of the underlying normal
    b: float  # hi, or sigma

    @classmethod
    def parse(cls, text: str) -> "Distribution":
        m = re.fullmatch(r"\s*(\w+)\s*\(\s*([^,]+?)\s*,\s*([^)]+?)\s*\)\s*", text)
        if not m:
            raise InvalidSpecError(f"cannot parse distribution {text!r}")
        try:
            dist = cls(m.group(1).lower(), float(m.group(2)), float(m.group(3)))
        except ValueError as exc:
            raise InvalidSpecError(f"bad distribution parameters in {text!r}") from exc
        dist.validate()
        return dist

    def validate(self) -> None:
        if self.kind == "uniform":
            if not self.b >= self.a:
                raise InvalidSpecError(f"uniform needs hi >= lo, got ({self.a}, {self.b})")
            if self.a < 0:
                raise InvalidSpecError("uniform support must be non-negative")
        elif self.kind == "lognormal":
            if not self.b > 0:
                raise InvalidSpecError(f"lognormal needs sigma > 0, got {self.b}")
        else:
            raise InvalidSpecError(f"unknown distribution {self.kind!r}")

    def transform(self, z: np.ndarray) -> np.ndarray:
        """Map standard normal scores to this marginal (monotone, keeps ranks)."""
        if self.kind == "lognormal":
            return np.exp(self.a + self.b * z)
        return self.a + (self.b - self.a) * ndtr(z)

    def __str__(self):
        return f"{self.kind}({self.a!r}, {self.b!r})"


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a synthetic impression stream.

    ``correlation`` is the target Spearman rank correlation between value and
    price. Clicks follow ``P(click) = sigmoid(click_intercept + click_slope * value)``.
    """

    n: int
    value_dist: Distribution
    price_dist: Distribution
    correlation: float = 0.0
    click_intercept: float = -7.13
    click_slope: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 0:
            raise InvalidSpecError(f"n must be non-negative, got {self.n}")
        if not -1.0 <= self.correlation <= 1.0:
            raise InvalidSpecError(f"correlation must lie in [-1, 1], got {self.correlation}")
        self.value_dist.validate()
        self.price_dist.validate()

    @classmethod
    def from_mapping(cls, items: Mapping[str, str]) -> "SyntheticSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(items) - known
        if unknown:
            raise InvalidSpecError(f"unknown spec keys: {sorted(unknown)}")
        if "n" not in items or "value_dist" not in items or "price_dist" not in items:
            raise InvalidSpecError("spec needs n, value_dist and price_dist")
        try:
            kwargs = dict(
                n=int(items["n"]),
                value_dist=Distribution.parse(items["value_dist"]),
                price_dist=Distribution.parse(items["price_dist"]),
            )
            for key in ("correlation", "click_intercept", "click_slope"):
                if key in items:
                    kwargs[key] = float(items[key])
            if "seed" in items:
                kwargs["seed"] = int(items["seed"])
        except ValueError as exc:
            if isinstance(exc, InvalidSpecError):
                raise
            raise InvalidSpecError(str(exc)) from exc
        return cls(**kwargs)

    def to_mapping(self) -> dict[str, str]:
        return {
            "n": str(self.n),
            "value_dist": str(self.value_dist),
            "price_dist": str(self.price_dist),
            "correlation": repr(self.correlation),
            "click_intercept": repr(self.click_intercept),
            "click_slope": repr(self.click_slope),
            "seed": str(self.seed),
        }


def read_spec_file(path) -> SyntheticSpec:
    """Read a flat ``key = value`` file (``#`` starts a comment)."""
    items: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidSpecError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            items[key] = value
    return SyntheticSpec.from_mapping(items)


def write_spec_file(spec: SyntheticSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in spec.to_mapping().items():
            fh.write(f"{key} = {value}\n")


def generate_synthetic(spec: SyntheticSpec) -> list[Impression]:
    """Draw ``spec.n`` impressions with a Gaussian copula linking value and price."""
    if spec.n == 0:
        return []
    rng = np.random.default_rng(spec.seed)
    # Spearman rho_s of a Gaussian copula is (6/pi) asin(rho/2).
    rho = 2.0 * math.sin(math.pi * spec.correlation / 6.0)
    z1 = rng.standard_normal(spec.n)
    z2 = rho * z1 + math.sqrt(max(1.0 - rho * rho, 0.0)) * rng.standard_normal(spec.n)
    values = spec.value_dist.transform(z1)
    prices = spec.price_dist.transform(z2)
    p_click = 1.0 / (1.0 + np.exp(-(spec.click_intercept + spec.click_slope * values)))
    clicks = rng.random(spec.n) < p_click
    return [
        Impression(i, float(v), float(b), bool(c))
        for i, (v, b, c) in enumerate(zip(values, prices, clicks))
    ]


class ParseResult(NamedTuple):
    impressions: list[Impression]
    rows: int
    dropped: int
    failed: int


def _parse_id(text: str):
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        return text


def _parse_clicked(text: Optional[str]) -> Optional[bool]:
    if text is None or text.strip() == "":
        return None
    flag = int(text)
    if flag not in (0, 1):
        raise ValueError(f"clicked must be 0 or 1, got {text!r}")
    return bool(flag)


def _check_failures(path, rows: int, failed: int) -> None:
    if rows and failed / rows > MAX_FAILED_FRACTION:
        raise MalformedFileError(
            f"{path}: {failed} of {rows} rows failed to parse "
            f"(limit {MAX_FAILED_FRACTION:.0%})"
        )


def _read_processed(path) -> ParseResult:
    out: list[Impression] = []
    rows = dropped = failed = 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != PROCESSED_HEADER:
            raise MalformedFileError(f"{path}: expected header {','.join(PROCESSED_HEADER)}, "
                                     f"got {header!r}")
        for row in reader:
            if not row:
                continue
            rows += 1
            if len(row) != 4 or not row[0].strip() or not row[1].strip() or not row[2].strip():
                dropped += 1
                continue
            try:
                out.append(Impression(_parse_id(row[0]), float(row[1]), float(row[2]),
                                      _parse_clicked(row[3])))
            except ValueError:
                dropped += 1
                failed += 1
    _check_failures(path, rows, failed)
    return ParseResult(out, rows, dropped, failed)


def _read_sidecar(path) -> dict:
    values = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"id", "value"} <= set(reader.fieldnames):
            raise MalformedFileError(f"{path}: value sidecar needs columns id,value")
        for row in reader:
            values[row["id"].strip()] = (float(row["value"]), _parse_clicked(row.get("clicked")))
    return values


def _read_raw(path, values_path=None, advertiser: Optional[str] = None) -> ParseResult:
    sidecar = _read_sidecar(values_path) if values_path is not None else None
    out: list[Impression] = []
    rows = dropped = failed = 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\r\n")
            if not line:
                continue
            rows += 1
            cols = line.split("\t")
            if len(cols) < RAW_COLUMNS:
                dropped += 1
                failed += 1
                continue
            if advertiser is not None and cols[RAW_ADVERTISER_ID - 1].strip() != advertiser:
                dropped += 1
                continue
            bid_id = cols[RAW_BID_ID - 1].strip()
            price_text = cols[RAW_PAYING_PRICE - 1].strip()
            if not bid_id or not price_text:
                dropped += 1
                continue
            clicked = None
            if sidecar is not None:
                if bid_id not in sidecar:
                    dropped += 1
                    continue
                value, clicked = sidecar[bid_id]
            elif len(cols) > RAW_COLUMNS and cols[RAW_COLUMNS].strip():
                value_text = cols[RAW_COLUMNS].strip()
                try:
                    value = float(value_text)
                except ValueError:
                    dropped += 1
                    failed += 1
                    continue
            else:
                dropped += 1
                continue
            try:
                out.append(Impression(_parse_id(bid_id), value, float(price_text), clicked))
            except ValueError:
                dropped += 1
                failed += 1
    _check_failures(path, rows, failed)
    return ParseResult(out, rows, dropped, failed)


def read_impressions(path, fmt: str = "processed", *, values_path=None,
                     advertiser: Optional[str] = None) -> ParseResult:
    """Parse a dataset file and report how many rows were dropped.

    ``processed`` is a CSV with header ``id,value,paying_price,clicked``.
    ``raw-log`` is the tab-separated 24-column impression log; paying prices
    come from column 21 and values from ``values_path`` (CSV ``id,value``
    keyed by bid id) or an optional 25th column.
    """
    if fmt == "processed":
        result = _read_processed(path)
    elif fmt == "raw-log":
        result = _read_raw(path, values_path, advertiser)
    else:
        raise ValueError(f"unknown format {fmt!r}")
    if result.dropped:
        logger.info("%s: dropped %d of %d rows", path, result.dropped, result.rows)
    return result


def parse_impressions(path, fmt: str = "processed", **kwargs) -> list[Impression]:
    return read_impressions(path, fmt, **kwargs).impressions


def write_impressions(ads: Sequence[Impression], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PROCESSED_HEADER)
        for ad in ads:
            clicked = "" if ad.clicked is None else int(ad.clicked)
            writer.writerow([ad.id, repr(ad.value), repr(ad.paying_price), clicked])


def budget_fraction(ads: Sequence[Impression], fraction) -> Budget:
    """Budget equal to ``fraction`` of the dataset's historical spend."""
    fraction = float(fraction)
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"budget fraction must lie in (0, 1], got {fraction}")
    return Budget(fraction * math.fsum(ad.paying_price for ad in ads))


@dataclass(frozen=True)
class DatasetSummary:
    impressions: int
    clicks: int
    total_cost: float
    ctr: Optional[float]
    ecpc: Optional[float]


def summarize(ads: Sequence[Impression]) -> DatasetSummary:
    n = len(ads)
    clicks = sum(1 for ad in ads if ad.clicked)
    cost = math.fsum(ad.paying_price for ad in ads)
    return DatasetSummary(
        impressions=n,
        clicks=clicks,
        total_cost=cost,
        ctr=clicks / n if n else None,
        ecpc=cost / clicks if clicks else None,
    )
