"""Listing ingestion and candidate-pool construction.

The candidate pool is the market knowledge base every downstream stage
retrieves from. Construction applies four filters, in order: a recency
window, fraud-flag rules, banned-phrase rules, and finally a click-count
percentile cutoff computed over the listings that survived the first three.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Any, Iterable, Iterator

from .errors import DuplicateIdError, ValidationError
from .recordio import dumps

logger = logging.getLogger(__name__)

DEFAULT_WINDOW_DAYS = 90
DEFAULT_CLICK_PERCENTILE = 70


@dataclass(frozen=True)
class Listing:
    """One second-hand product listing.

    `price` is the asking/ground-truth price for catalog members and training
    queries; inference-time queries may carry None (they are the thing being
    priced). Catalog and pool invariants require a positive price.
    """

    id: str
    title: str
    description: str
    condition: str
    category: str = ""
    price: float | None = None
    listed_at: datetime | None = None
    click_count: int = 0
    flags: frozenset[str] = frozenset()

    def __post_init__(self):
        if not self.id:
            raise ValidationError("listing id must be non-empty")
        if self.price is not None and not (self.price > 0 and math.isfinite(self.price)):
            raise ValidationError(f"listing {self.id!r}: price must be a positive finite number")
        if self.click_count < 0:
            raise ValidationError(f"listing {self.id!r}: click_count must be >= 0")

    def require_price(self) -> float:
        if self.price is None:
            raise ValidationError(f"listing {self.id!r} has no price")
        return self.price


@dataclass(frozen=True)
class FilterRules:
    """Config for the four pool filters."""

    banned_flag_labels: frozenset[str] = frozenset()
    banned_phrase_patterns: tuple[str, ...] = ()
    window_days: int = DEFAULT_WINDOW_DAYS
    click_percentile: int = DEFAULT_CLICK_PERCENTILE

    def __post_init__(self):
        if self.window_days < 1:
            raise ValidationError("window_days must be >= 1")
        if not 0 <= self.click_percentile <= 100:
            raise ValidationError("click_percentile must be in [0, 100]")

    def to_dict(self) -> dict[str, Any]:
        return {
            "banned_flag_labels": sorted(self.banned_flag_labels),
            "banned_phrase_patterns": list(self.banned_phrase_patterns),
            "window_days": self.window_days,
            "click_percentile": self.click_percentile,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "FilterRules":
        return cls(
            banned_flag_labels=frozenset(d.get("banned_flag_labels", ())),
            banned_phrase_patterns=tuple(d.get("banned_phrase_patterns", ())),
            window_days=int(d.get("window_days", DEFAULT_WINDOW_DAYS)),
            click_percentile=int(d.get("click_percentile", DEFAULT_CLICK_PERCENTILE)),
        )


@dataclass(frozen=True)
class RejectedLine:
    lineno: int
    reason: str


@dataclass
class Catalog:
    """Parsed listings plus a report of lines that failed to parse."""

    listings: list[Listing]
    rejects: list[RejectedLine] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.listings)

    def by_id(self) -> dict[str, Listing]:
        return {l.id: l for l in self.listings}


@dataclass(frozen=True)
class CandidatePool:
    """Filtered market reference set. Immutable once built."""

    as_of: datetime
    listings: tuple[Listing, ...]
    provenance: FilterRules
    click_cutoff: int = 0
    warning: str | None = None

    def __len__(self) -> int:
        return len(self.listings)

    def by_id(self) -> dict[str, Listing]:
        return {l.id: l for l in self.listings}


# --- record (de)serialization -------------------------------------------------

def parse_rfc3339(value: str) -> datetime:
    """Parse an RFC 3339 timestamp; naive values are taken as UTC."""
    text = value.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


def format_rfc3339(dt: datetime) -> str:
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")


def listing_from_record(rec: dict[str, Any], *, require_price: bool = True) -> Listing:
    """Build a Listing from one JSON record, validating required fields."""
    for key in ("id", "title", "description", "condition"):
        if key not in rec:
            raise ValidationError(f"missing field {key!r}")
    price = rec.get("price")
    if require_price and price is None:
        raise ValidationError("missing field 'price'")
    if price is not None:
        price = float(price)
    listed_at = rec.get("listed_at")
    if require_price and listed_at is None:
        raise ValidationError("missing field 'listed_at'")
    return Listing(
        id=str(rec["id"]),
        title=str(rec["title"]),
        description=str(rec["description"]),
        condition=str(rec["condition"]),
        category=str(rec.get("category", "")),
        price=price,
        listed_at=parse_rfc3339(listed_at) if isinstance(listed_at, str) else listed_at,
        click_count=int(rec.get("click_count", 0)),
        flags=frozenset(rec.get("flags", ())),
    )


def listing_to_record(listing: Listing) -> dict[str, Any]:
    rec: dict[str, Any] = {
        "id": listing.id,
        "title": listing.title,
        "description": listing.description,
        "condition": listing.condition,
        "category": listing.category,
        "click_count": listing.click_count,
        "flags": sorted(listing.flags),
    }
    if listing.price is not None:
        rec["price"] = listing.price
    if listing.listed_at is not None:
        rec["listed_at"] = format_rfc3339(listing.listed_at)
    return rec


# --- ingestion ----------------------------------------------------------------

def ingest_listings(source: str | Path | Iterable[str]) -> Catalog:
    """Parse a line-delimited record stream into a catalog.

    Malformed lines are collected in `catalog.rejects` (counted, never
    silently dropped). A duplicate id aborts the ingest with an error naming
    the id — duplicates poison retrieval and must be fixed upstream.
    """
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8") as fh:
            return _ingest_lines(fh)
    return _ingest_lines(source)


def _ingest_lines(lines: Iterable[str]) -> Catalog:
    listings: list[Listing] = []
    rejects: list[RejectedLine] = []
    seen: set[str] = set()
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            rejects.append(RejectedLine(lineno, f"invalid JSON: {exc.msg}"))
            continue
        rec_id = rec.get("id") if isinstance(rec, dict) else None
        if rec_id is not None and rec_id in seen:
            raise DuplicateIdError(str(rec_id))
        try:
            listing = listing_from_record(rec)
        except (ValidationError, ValueError, TypeError) as exc:
            rejects.append(RejectedLine(lineno, str(exc)))
            continue
        seen.add(listing.id)
        listings.append(listing)
    if rejects:
        logger.warning("ingest: rejected %d of %d lines", len(rejects), len(rejects) + len(listings))
    return Catalog(listings=listings, rejects=rejects)


# --- pool construction ----------------------------------------------------------

def nearest_rank_percentile(values: list[int], percentile: int) -> int:
    """Nearest-rank percentile: the value at rank ceil(p/100 * n), 1-based.

    percentile 0 maps to the minimum, 100 to the maximum.
    """
    if not values:
        raise ValidationError("percentile of empty population")
    ordered = sorted(values)
    rank = max(1, math.ceil(percentile / 100 * len(ordered)))
    return ordered[rank - 1]


def _matches_banned_phrase(listing: Listing, patterns: tuple[str, ...]) -> bool:
    if not patterns:
        return False
    haystack = f"{listing.title}\n{listing.description}".lower()
    return any(p.lower() in haystack for p in patterns)


def build_pool(catalog: Catalog, rules: FilterRules, as_of: datetime) -> CandidatePool:
    """Apply the four pool filters to a catalog.

    Filter order matters: the click-percentile cutoff is computed over the
    population that survived recency + flag + phrase filtering, and a listing
    is retained when its click count is at or above that cutoff. An empty
    result is a pool with a warning, not an error.
    """
    if not catalog.listings:
        raise ValidationError("catalog is empty")
    if as_of.tzinfo is None:
        as_of = as_of.replace(tzinfo=timezone.utc)

    window = timedelta(days=rules.window_days)
    survivors: list[Listing] = []
    for listing in catalog.listings:
        if listing.listed_at is None or listing.price is None:
            continue
        age = as_of - listing.listed_at
        if age > window:
            continue
        if listing.flags & rules.banned_flag_labels:
            continue
        if _matches_banned_phrase(listing, rules.banned_phrase_patterns):
            continue
        survivors.append(listing)

    warning = None
    cutoff = 0
    if survivors:
        cutoff = nearest_rank_percentile([l.click_count for l in survivors], rules.click_percentile)
        kept = tuple(l for l in survivors if l.click_count >= cutoff)
    else:
        kept = ()
    if not kept:
        warning = "all listings filtered out"
        logger.warning("build_pool: %s", warning)
    return CandidatePool(as_of=as_of, listings=kept, provenance=rules, click_cutoff=cutoff, warning=warning)


# --- manifest persistence -------------------------------------------------------

POOL_HEADER_KIND = "pool_header"


def write_pool_manifest(pool: CandidatePool, path: str | Path) -> None:
    """Persist a pool: a header record, then one record per listing."""
    header = {
        "kind": POOL_HEADER_KIND,
        "as_of": format_rfc3339(pool.as_of),
        "rules": pool.provenance.to_dict(),
        "click_cutoff": pool.click_cutoff,
        "count": len(pool.listings),
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(header) + "\n")
        for listing in pool.listings:
            fh.write(dumps(listing_to_record(listing)) + "\n")


def read_pool_manifest(path: str | Path) -> CandidatePool:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line for line in (raw.strip() for raw in fh) if line]
    if not lines:
        raise ValidationError(f"{path}: empty pool manifest")
    header = json.loads(lines[0])
    if header.get("kind") != POOL_HEADER_KIND:
        raise ValidationError(f"{path}: first record is not a pool header")
    listings = tuple(listing_from_record(json.loads(line)) for line in lines[1:])
    if len(listings) != header.get("count", len(listings)):
        raise ValidationError(f"{path}: header count {header.get('count')} != {len(listings)} records")
    return CandidatePool(
        as_of=parse_rfc3339(header["as_of"]),
        listings=listings,
        provenance=FilterRules.from_dict(header.get("rules", {})),
        click_cutoff=int(header.get("click_cutoff", 0)),
    )


def iter_query_listings(path: str | Path) -> Iterator[Listing]:
    """Read listings used as pricing queries (price optional)."""
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line:
                continue
            yield listing_from_record(json.loads(line), require_price=False)
