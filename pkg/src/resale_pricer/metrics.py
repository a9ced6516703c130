"""Price-prediction metrics: RMSLE, MALE, SAR, DAR, and segmented reporting.

Logs are natural throughout. SAR counts predictions within a fixed relative
error band; DAR's band a / ln(p + b) tightens as the true price grows, so it
is deliberately not scale-invariant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .errors import ValidationError

DEFAULT_SAR_TAU = 0.2
DEFAULT_DAR_A = 1.4
DEFAULT_DAR_B = 10.0


@dataclass(frozen=True)
class PricePair:
    predicted: float
    truth: float
    segment: str | None = None
    category: str | None = None

    def __post_init__(self):
        if not (self.predicted > 0 and math.isfinite(self.predicted)):
            raise ValidationError(f"predicted price must be positive, got {self.predicted}")
        if not (self.truth > 0 and math.isfinite(self.truth)):
            raise ValidationError(f"truth price must be positive, got {self.truth}")


@dataclass(frozen=True)
class MetricValues:
    rmsle: float
    male: float
    sar: float
    dar: float
    n: int

    def to_dict(self) -> dict:
        return {"rmsle": self.rmsle, "male": self.male, "sar": self.sar,
                "dar": self.dar, "n": self.n}


@dataclass(frozen=True)
class MetricsReport:
    overall: MetricValues
    per_segment: dict[str, MetricValues]
    sar_tau: float = DEFAULT_SAR_TAU
    dar_a: float = DEFAULT_DAR_A
    dar_b: float = DEFAULT_DAR_B

    def to_dict(self) -> dict:
        return {
            "overall": self.overall.to_dict(),
            "segments": {name: vals.to_dict() for name, vals in sorted(self.per_segment.items())},
            "params": {"sar_tau": self.sar_tau, "dar_a": self.dar_a, "dar_b": self.dar_b},
        }


def _require_pairs(pairs: Sequence[PricePair]) -> None:
    if not pairs:
        raise ValidationError("metrics need at least one (predicted, truth) pair")


def rmsle(pairs: Sequence[PricePair]) -> float:
    """sqrt(mean of squared log-price errors)."""
    _require_pairs(pairs)
    total = math.fsum((math.log(p.predicted) - math.log(p.truth)) ** 2 for p in pairs)
    return math.sqrt(total / len(pairs))


def male(pairs: Sequence[PricePair]) -> float:
    """Mean absolute log-price error."""
    _require_pairs(pairs)
    total = math.fsum(abs(math.log(p.predicted) - math.log(p.truth)) for p in pairs)
    return total / len(pairs)


def sar(pairs: Sequence[PricePair], tau: float = DEFAULT_SAR_TAU) -> float:
    """Fraction with relative error at or below tau (boundary inclusive)."""
    _require_pairs(pairs)
    hits = sum(1 for p in pairs if abs(p.predicted - p.truth) / p.truth <= tau)
    return hits / len(pairs)


def dar(pairs: Sequence[PricePair], a: float = DEFAULT_DAR_A, b: float = DEFAULT_DAR_B) -> float:
    """Fraction within the price-dependent band a / ln(truth + b)."""
    _require_pairs(pairs)
    hits = sum(
        1 for p in pairs
        if abs(p.predicted - p.truth) / p.truth <= a / math.log(p.truth + b)
    )
    return hits / len(pairs)


def compute_all(pairs: Sequence[PricePair], tau: float = DEFAULT_SAR_TAU,
                a: float = DEFAULT_DAR_A, b: float = DEFAULT_DAR_B) -> MetricValues:
    return MetricValues(
        rmsle=rmsle(pairs),
        male=male(pairs),
        sar=sar(pairs, tau),
        dar=dar(pairs, a, b),
        n=len(pairs),
    )


def segment_report(pairs: Sequence[PricePair], tau: float = DEFAULT_SAR_TAU,
                   a: float = DEFAULT_DAR_A, b: float = DEFAULT_DAR_B) -> MetricsReport:
    """All four metrics overall and per segment label.

    Pairs without a segment count toward the overall row only.
    """
    _require_pairs(pairs)
    segments: dict[str, list[PricePair]] = {}
    for pair in pairs:
        if pair.segment is not None:
            segments.setdefault(pair.segment, []).append(pair)
    return MetricsReport(
        overall=compute_all(pairs, tau, a, b),
        per_segment={name: compute_all(seg, tau, a, b) for name, seg in segments.items()},
        sar_tau=tau,
        dar_a=a,
        dar_b=b,
    )
