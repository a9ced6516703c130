"""Training-data construction via backward/forward reasoning.

Each accepted query yields a sample whose golden subset is non-empty by
construction: rejection sampling drops queries whose retrieved set is
near-duplicate spam (Jaro homogeneity), whose backward pass finds no
consistent references, or whose model output cannot be parsed. Every sample
is then emitted in two hybrid formats sharing the same user prompt.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .catalog import Listing
from .errors import ParseError, ValidationError
from .llm_gateway import CompletionBackend, DecodingParams
from .prompting import (
    MODE_PRICE_ONLY,
    MODE_RATIONALE,
    PromptBundle,
    PromptTemplates,
    DEFAULT_TEMPLATES,
    assemble_backward_prompt,
    assemble_forward_prompt,
    assemble_pricing_prompt,
    labels_for,
    parse_golden_subset,
    parse_pricing_answer,
    render_price,
)
from .recordio import write_jsonl
from .vecindex import EmbeddingProvider, IndexSnapshot, RetrievalSet, embed, search_topk

logger = logging.getLogger(__name__)

REJECT_NO_REFS = "no_refs"
REJECT_HOMOGENEOUS = "homogeneous_refs"
REJECT_NO_GOLDEN = "no_golden_subset"
REJECT_UNPARSEABLE = "unparseable"

DEFAULT_JARO_THRESHOLD = 0.9


# --- Jaro similarity ---------------------------------------------------------------

def jaro(s1: str, s2: str) -> float:
    """Classical Jaro similarity in [0, 1].

    Matches are equal characters within a window of floor(max_len / 2) - 1;
    transpositions are half the number of matched characters out of order.
    Both strings empty compares as 1, one empty as 0.
    """
    if not s1 and not s2:
        return 1.0
    if not s1 or not s2:
        return 0.0
    window = max(len(s1), len(s2)) // 2 - 1
    if window < 0:
        window = 0
    flags1 = [False] * len(s1)
    flags2 = [False] * len(s2)
    matches = 0
    for i, ch in enumerate(s1):
        lo = max(0, i - window)
        hi = min(len(s2), i + window + 1)
        for j in range(lo, hi):
            if not flags2[j] and s2[j] == ch:
                flags1[i] = flags2[j] = True
                matches += 1
                break
    if matches == 0:
        return 0.0
    transposed = 0
    j = 0
    for i, matched in enumerate(flags1):
        if not matched:
            continue
        while not flags2[j]:
            j += 1
        if s1[i] != s2[j]:
            transposed += 1
        j += 1
    t = transposed // 2
    m = float(matches)
    return (m / len(s1) + m / len(s2) + (m - t) / m) / 3.0


def homogeneity_reject(refs: RetrievalSet, threshold: float,
                       listings_by_id: Mapping[str, Listing],
                       aggregate: str = "mean") -> bool:
    """True when the retrieved descriptions are too self-similar to train on.

    Rejects when the mean (or max, per config) pairwise Jaro similarity over
    the reference descriptions exceeds the threshold. Singleton sets are
    accepted outright.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValidationError("threshold must be in [0, 1]")
    if aggregate not in ("mean", "max"):
        raise ValidationError("aggregate must be 'mean' or 'max'")
    if len(refs.hits) < 2:
        return False
    texts = []
    for hit in refs.hits:
        listing = listings_by_id.get(hit.listing_id)
        if listing is None:
            raise ValidationError(f"retrieved id {hit.listing_id!r} not found in pool")
        texts.append(listing.description)
    sims = [
        jaro(texts[i], texts[j])
        for i in range(len(texts))
        for j in range(i + 1, len(texts))
    ]
    value = (sum(sims) / len(sims)) if aggregate == "mean" else max(sims)
    return value > threshold


# --- sample construction -------------------------------------------------------------


@dataclass(frozen=True)
class TrainingSample:
    query: Listing
    refs: RetrievalSet
    golden_ids: frozenset[str]
    rationale: str
    price: float

    def __post_init__(self):
        if not self.golden_ids:
            raise ValidationError("training sample requires a non-empty golden subset")
        known = set(labels_for(self.refs))
        if not self.golden_ids <= known:
            raise ValidationError("golden labels must come from the retrieved references")
        if self.price != self.query.require_price():
            raise ValidationError("sample price must equal the query's ground-truth price")


@dataclass(frozen=True)
class HybridRecord:
    format: str  # price-only | rationale-and-price
    input: PromptBundle
    label: str


@dataclass(frozen=True)
class Transcript:
    stage: str
    prompt: PromptBundle
    response: str


@dataclass
class SampleOutcome:
    query_id: str
    sample: TrainingSample | None = None
    reject_reason: str | None = None
    reject_detail: str = ""
    transcripts: list[Transcript] = field(default_factory=list)

    @property
    def accepted(self) -> bool:
        return self.sample is not None


def build_sft_sample(query: Listing, index: IndexSnapshot, provider: EmbeddingProvider,
                     backend: CompletionBackend, k: int,
                     listings_by_id: Mapping[str, Listing],
                     jaro_threshold: float = DEFAULT_JARO_THRESHOLD,
                     jaro_aggregate: str = "mean",
                     params: DecodingParams = DecodingParams(),
                     templates: PromptTemplates = DEFAULT_TEMPLATES) -> SampleOutcome:
    """Run retrieval, homogeneity screening, then backward and forward reasoning.

    Gateway/transport errors propagate (the caller may retry the query);
    unparseable model output rejects the sample instead of poisoning the set.
    """
    true_price = query.require_price()
    outcome = SampleOutcome(query_id=query.id)

    refs = search_topk(index, embed(query, provider), k, query_id=query.id)
    if not refs.hits:
        outcome.reject_reason = REJECT_NO_REFS
        outcome.reject_detail = "retrieval returned no references"
        return outcome

    if homogeneity_reject(refs, jaro_threshold, listings_by_id, aggregate=jaro_aggregate):
        outcome.reject_reason = REJECT_HOMOGENEOUS
        outcome.reject_detail = f"mean pairwise Jaro similarity above {jaro_threshold}"
        return outcome

    backward_prompt = assemble_backward_prompt(query, refs, true_price, listings_by_id, templates)
    backward_gen = backend.complete(backward_prompt, params)
    outcome.transcripts.append(Transcript("backward", backward_prompt, backward_gen.text))
    try:
        backward = parse_golden_subset(backward_gen.text, labels_for(refs))
    except ParseError as exc:
        outcome.reject_reason = REJECT_UNPARSEABLE
        outcome.reject_detail = f"backward: {exc}"
        return outcome
    if not backward.valid:
        outcome.reject_reason = REJECT_NO_GOLDEN
        outcome.reject_detail = "backward reasoning found no consistent references"
        return outcome

    forward_prompt = assemble_forward_prompt(
        query, refs, backward.golden_ids, true_price, backward.explanation,
        listings_by_id, templates)
    forward_gen = backend.complete(forward_prompt, params)
    outcome.transcripts.append(Transcript("forward", forward_prompt, forward_gen.text))
    try:
        forward = parse_pricing_answer(forward_gen.text, labels_for(refs), MODE_RATIONALE)
    except ParseError as exc:
        outcome.reject_reason = REJECT_UNPARSEABLE
        outcome.reject_detail = f"forward: {exc}"
        return outcome

    outcome.sample = TrainingSample(
        query=query,
        refs=refs,
        golden_ids=backward.golden_ids,
        rationale=forward.rationale or "",
        price=true_price,
    )
    return outcome


def emit_hybrid_formats(sample: TrainingSample, listings_by_id: Mapping[str, Listing],
                        templates: PromptTemplates = DEFAULT_TEMPLATES) -> tuple[HybridRecord, HybridRecord]:
    """One sample, two supervision formats sharing the same user prompt."""
    price_label = f"<price>{render_price(sample.price)}</price>"
    price_bundle = assemble_pricing_prompt(sample.query, sample.refs, MODE_PRICE_ONLY,
                                           listings_by_id, templates)
    rationale_bundle = assemble_pricing_prompt(sample.query, sample.refs, MODE_RATIONALE,
                                               listings_by_id, templates)
    rationale_label = f"<reason>{sample.rationale}</reason>\n{price_label}"
    return (
        HybridRecord(format=MODE_PRICE_ONLY, input=price_bundle, label=price_label),
        HybridRecord(format=MODE_RATIONALE, input=rationale_bundle, label=rationale_label),
    )


# --- dataset build ---------------------------------------------------------------


@dataclass
class DatasetBuild:
    records: list[dict]
    outcomes: list[SampleOutcome]
    reject_counts: Counter

    @property
    def n_accepted(self) -> int:
        return sum(1 for o in self.outcomes if o.accepted)


def record_for(sample: TrainingSample, record: HybridRecord) -> dict:
    return {
        "format": record.format,
        "messages": record.input.messages(),
        "label": record.label,
        "provenance": {
            "query_id": sample.query.id,
            "golden_ids": sorted(sample.golden_ids),
            "k": sample.refs.k,
        },
    }


def build_dataset(queries: Sequence[Listing], index: IndexSnapshot, provider: EmbeddingProvider,
                  backend: CompletionBackend, k: int,
                  listings_by_id: Mapping[str, Listing],
                  jaro_threshold: float = DEFAULT_JARO_THRESHOLD,
                  jaro_aggregate: str = "mean",
                  params: DecodingParams = DecodingParams(),
                  templates: PromptTemplates = DEFAULT_TEMPLATES,
                  max_workers: int = 1) -> DatasetBuild:
    """Build SFT records for every query; output order follows input order.

    `max_workers` > 1 parallelizes gateway calls (only safe with stateless
    backends such as HTTP endpoints or the median pricer).
    """
    def run_one(query: Listing) -> SampleOutcome:
        return build_sft_sample(query, index, provider, backend, k, listings_by_id,
                                jaro_threshold=jaro_threshold, jaro_aggregate=jaro_aggregate,
                                params=params, templates=templates)

    records: list[dict] = []
    outcomes: list[SampleOutcome] = []
    rejects: Counter = Counter()
    if max_workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            outcome_iter = list(pool.map(run_one, queries))
    else:
        outcome_iter = [run_one(q) for q in queries]
    for outcome in outcome_iter:
        outcomes.append(outcome)
        if outcome.sample is None:
            rejects[outcome.reject_reason] += 1
            continue
        for hybrid in emit_hybrid_formats(outcome.sample, listings_by_id, templates):
            records.append(record_for(outcome.sample, hybrid))
    if rejects:
        logger.info("datagen: rejected %d of %d queries (%s)",
                    sum(rejects.values()), len(queries), dict(sorted(rejects.items())))
    return DatasetBuild(records=records, outcomes=outcomes, reject_counts=rejects)


def write_dataset(build: DatasetBuild, out_path: str | Path, *,
                  rejects_path: str | Path | None = None,
                  audit_path: str | Path | None = None,
                  split_fraction: float | None = None,
                  split_path: str | Path | None = None) -> dict:
    """Write dataset records (and optional reject/audit/split files); returns counts.

    `split_fraction` sends the records of the first ceil(fraction * accepted)
    queries to `out_path` and the remainder (reserved for preference
    optimization) to `split_path`.
    """
    counts = {"records": 0, "rejects": sum(build.reject_counts.values())}
    if split_fraction is None:
        counts["records"] = write_jsonl(out_path, build.records)
    else:
        if split_path is None:
            raise ValidationError("split_fraction requires split_path")
        accepted_ids = [o.query_id for o in build.outcomes if o.accepted]
        n_head = math.ceil(split_fraction * len(accepted_ids))
        head = set(accepted_ids[:n_head])
        head_records = [r for r in build.records if r["provenance"]["query_id"] in head]
        tail_records = [r for r in build.records if r["provenance"]["query_id"] not in head]
        counts["records"] = write_jsonl(out_path, head_records)
        counts["split_records"] = write_jsonl(split_path, tail_records)
    if rejects_path is not None:
        write_jsonl(rejects_path, (
            {"query_id": o.query_id, "reason": o.reject_reason, "detail": o.reject_detail}
            for o in build.outcomes if not o.accepted
        ))
    if audit_path is not None:
        write_jsonl(audit_path, (
            {
                "query_id": o.query_id,
                "accepted": o.accepted,
                "transcripts": [
                    {"stage": t.stage, "system": t.prompt.system,
                     "user": t.prompt.user, "response": t.response}
                    for t in o.transcripts
                ],
            }
            for o in build.outcomes
        ))
    return counts
