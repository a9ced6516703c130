"""Token-entropy confidence scoring and threshold sweeps.

Confidence is the mean entropy (nats) of the next-token distributions over
the tokens that spell the generated price. Served APIs expose only the top-k
alternatives, so the unseen tail is folded into one residual bucket; that
truncation preserves the ordering the gate needs and is recorded on the
score.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ParseError, ValidationError
from .llm_gateway import Generation
from .prompting import PRICE_TAG_RE

ABSTAIN_LOW_CONFIDENCE = "low_confidence"

_RESIDUAL_EPS = 1e-12
_LOGPROB_SLACK = 1e-9


@dataclass(frozen=True)
class ConfidenceScore:
    avg_entropy: float
    n_price_tokens: int
    truncated: bool

    def __post_init__(self):
        if self.avg_entropy < 0:
            raise ValidationError("entropy cannot be negative")
        if self.n_price_tokens < 1:
            raise ValidationError("a confidence score needs at least one price token")


@dataclass(frozen=True)
class FilterDecision:
    kept: bool
    reason: str | None = None


@dataclass(frozen=True)
class PrPoint:
    threshold: float
    coverage: float
    precision: float | None


@dataclass(frozen=True)
class PrSweep:
    points: tuple[PrPoint, ...]
    auc: float | None


def price_token_span(gen: Generation) -> list[int]:
    """Indices of tokens overlapping the digits inside the unique price tag."""
    matches = list(PRICE_TAG_RE.finditer(gen.text))
    if len(matches) != 1:
        raise ParseError(f"expected exactly one <price> tag, found {len(matches)}")
    lo, hi = matches[0].span(1)
    digit_positions = [i for i in range(lo, hi) if gen.text[i].isdigit()]
    if not digit_positions:
        raise ParseError("price tag contains no digits")
    span = [
        idx for idx, tok in enumerate(gen.tokens)
        if any(tok.start <= pos < tok.end for pos in digit_positions)
    ]
    return span


def token_entropy(alternatives: Sequence[tuple[str, float]]) -> float:
    """Entropy (nats) of the top-k distribution plus a residual tail bucket."""
    if not alternatives:
        raise ValidationError("empty alternative list")
    probs = []
    for token, logprob in alternatives:
        if logprob > _LOGPROB_SLACK:
            raise ValidationError(f"logprob for {token!r} is positive")
        probs.append(math.exp(min(logprob, 0.0)))
    total = sum(probs)
    if total > 1.0 + _LOGPROB_SLACK:
        raise ValidationError(f"alternative probabilities sum to {total} > 1")
    residual = max(0.0, 1.0 - total)
    if residual > _RESIDUAL_EPS:
        probs.append(residual)
        total += residual
    entropy = -sum((p / total) * math.log(p / total) for p in probs if p > 0.0)
    return max(0.0, entropy)


def has_residual(alternatives: Sequence[tuple[str, float]]) -> bool:
    return 1.0 - sum(math.exp(min(lp, 0.0)) for _, lp in alternatives) > _RESIDUAL_EPS


def avg_entropy(gen: Generation) -> ConfidenceScore:
    """Mean token entropy over the generated price span."""
    span = price_token_span(gen)
    entropies = [token_entropy(gen.tokens[i].top_alternatives) for i in span]
    truncated = any(has_residual(gen.tokens[i].top_alternatives) for i in span)
    return ConfidenceScore(
        avg_entropy=sum(entropies) / len(entropies),
        n_price_tokens=len(span),
        truncated=truncated,
    )


def filter_by_confidence(price: float, score: ConfidenceScore, theta_h: float) -> FilterDecision:
    """Keep the price iff its average entropy is at or below the threshold."""
    if score.avg_entropy <= theta_h:
        return FilterDecision(kept=True)
    return FilterDecision(kept=False, reason=ABSTAIN_LOW_CONFIDENCE)


def pr_sweep(items: Sequence[tuple[float, bool]], thresholds: Iterable[float]) -> PrSweep:
    """Coverage/precision trade-off across entropy thresholds.

    `items` are (avg_entropy, correct) pairs; `correct` is the static
    adoption criterion for that item. Precision over an empty kept set is
    emitted as None, and the AUC is the trapezoid over (coverage, precision).
    """
    items = list(items)
    if not items:
        raise ValidationError("cannot sweep an empty run")
    points = []
    total = len(items)
    for theta in sorted(thresholds):
        kept = [correct for entropy, correct in items if entropy <= theta]
        coverage = len(kept) / total
        precision = (sum(kept) / len(kept)) if kept else None
        points.append(PrPoint(threshold=float(theta), coverage=coverage, precision=precision))
    curve = sorted(
        ((p.coverage, p.precision) for p in points if p.precision is not None),
        key=lambda t: t[0],
    )
    auc = None
    if len(curve) >= 2:
        auc = 0.0
        for (c0, p0), (c1, p1) in zip(curve, curve[1:]):
            auc += (c1 - c0) * (p0 + p1) / 2.0
    return PrSweep(points=tuple(points), auc=auc)


def write_pr_csv(sweep: PrSweep, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "coverage", "precision"])
        for point in sweep.points:
            writer.writerow([
                repr(point.threshold),
                repr(point.coverage),
                "" if point.precision is None else repr(point.precision),
            ])


def sweep_summary(sweep: PrSweep) -> dict:
    return {
        "auc": sweep.auc,
        "n_points": len(sweep.points),
        "max_coverage": max((p.coverage for p in sweep.points), default=0.0),
        "points": [
            {"threshold": p.threshold, "coverage": p.coverage, "precision": p.precision}
            for p in sweep.points
        ],
    }
