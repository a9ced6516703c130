"""Market-reference retrieval and LLM-backed price suggestion for second-hand listings."""

__version__ = "0.1.0"

from .catalog import CandidatePool, Catalog, FilterRules, Listing, build_pool, ingest_listings
from .metrics import PricePair, dar, male, rmsle, sar, segment_report

__all__ = [
    "CandidatePool",
    "Catalog",
    "FilterRules",
    "Listing",
    "PricePair",
    "build_pool",
    "dar",
    "ingest_listings",
    "male",
    "rmsle",
    "sar",
    "segment_report",
]
