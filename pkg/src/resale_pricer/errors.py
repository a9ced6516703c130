"""Exception hierarchy shared across the pipeline."""

from __future__ import annotations


class PricingError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(PricingError):
    """An input violated a documented precondition or invariant."""


class DuplicateIdError(ValidationError):
    """Two records share a listing id."""

    def __init__(self, listing_id: str):
        super().__init__(f"duplicate listing id: {listing_id!r}")
        self.listing_id = listing_id


class ParseError(PricingError):
    """Model output (or a record file) could not be parsed under the tag contract."""


class TransportError(PricingError):
    """A remote call failed at the transport level after retries.

    Carries retry metadata so callers can decide whether to re-enqueue.
    """

    def __init__(self, message: str, *, attempts: int, retryable: bool = True):
        super().__init__(f"{message} (attempts={attempts}, retryable={retryable})")
        self.attempts = attempts
        self.retryable = retryable


class CapabilityError(PricingError):
    """The endpoint answered but lacks a required capability (e.g. token logprobs).

    `text` carries the generated content, when any, so the pipeline can still
    parse a price and mark confidence unavailable.
    """

    def __init__(self, message: str, text: str | None = None):
        super().__init__(message)
        self.text = text


class IndexBuildError(PricingError):
    """Embedding/index construction failed for one or more listings."""

    def __init__(self, message: str, failed_ids: list[str]):
        super().__init__(f"{message}: {', '.join(failed_ids)}")
        self.failed_ids = failed_ids
