"""End-to-end price suggestion: retrieve, reason, confidence-gate.

`Pipeline.suggest_price` runs the full inference path for one listing and
always returns a `PriceSuggestion` — abstention (no evidence, or entropy
above the gate) is a business outcome, not an error. `batch_eval` runs a
dataset through the pipeline and joins the results with the metric suite,
threshold sweeps, and retrieval-size sweeps.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

from . import confidence as confidence_mod
from . import metrics as metrics_mod
from .catalog import Listing
from .confidence import ConfidenceScore, PrSweep
from .errors import CapabilityError, ParseError, PricingError, TransportError, ValidationError
from .llm_gateway import CompletionBackend, DecodingParams, Generation
from .prompting import (
    MODE_RATIONALE,
    DEFAULT_TEMPLATES,
    PromptTemplates,
    assemble_pricing_prompt,
    labels_for,
    parse_pricing_answer,
)
from .recordio import write_json, write_jsonl
from .vecindex import (
    EmbeddingProvider,
    IndexSnapshot,
    RetrievalSet,
    SnapshotHolder,
    embed,
    search_topk,
    search_topk_ann,
)

logger = logging.getLogger(__name__)

STATUS_PRICED = "priced"
STATUS_ABSTAINED_LOW_CONFIDENCE = "abstained_low_confidence"
STATUS_ABSTAINED_NO_EVIDENCE = "abstained_no_evidence"
STATUS_ERROR = "error"

RETRIEVAL_EXACT = "exact"
RETRIEVAL_ANN = "ann"


@dataclass(frozen=True)
class PipelineConfig:
    """Inference defaults: top-50 retrieval, greedy decoding, gate off until set."""

    k: int = 50
    theta_h: float | None = None
    mode: str = MODE_RATIONALE
    retrieval: str = RETRIEVAL_EXACT
    on_missing_confidence: str = "abstain"  # or "pass-through"
    decoding: DecodingParams = field(default_factory=DecodingParams)

    def __post_init__(self):
        if self.k < 0:
            raise ValidationError("k must be >= 0 (0 selects the no-retrieval ablation)")
        if self.retrieval not in (RETRIEVAL_EXACT, RETRIEVAL_ANN):
            raise ValidationError(f"unknown retrieval mode {self.retrieval!r}")
        if self.on_missing_confidence not in ("abstain", "pass-through"):
            raise ValidationError("on_missing_confidence must be 'abstain' or 'pass-through'")

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "theta_h": self.theta_h,
            "mode": self.mode,
            "retrieval": self.retrieval,
            "on_missing_confidence": self.on_missing_confidence,
            "temperature": self.decoding.temperature,
            "max_tokens": self.decoding.max_tokens,
            "top_logprobs": self.decoding.top_logprobs,
        }


@dataclass(frozen=True)
class PriceSuggestion:
    status: str
    price: float | None = None
    rationale: str | None = None
    cited_ref_ids: frozenset[str] = frozenset()
    confidence: ConfidenceScore | None = None
    error_cause: str | None = None
    latency_ms: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if (self.status == STATUS_PRICED) != (self.price is not None):
            raise ValidationError("price must be present exactly when status is 'priced'")

    def to_dict(self, include_latency: bool = False) -> dict:
        d: dict = {
            "status": self.status,
            "price": self.price,
            "rationale": self.rationale,
            "cited_ref_ids": sorted(self.cited_ref_ids),
            "error_cause": self.error_cause,
        }
        if self.confidence is not None:
            d["confidence"] = {
                "avg_entropy": self.confidence.avg_entropy,
                "n_price_tokens": self.confidence.n_price_tokens,
                "truncated": self.confidence.truncated,
            }
        else:
            d["confidence"] = None
        if include_latency:
            d["latency_ms"] = dict(self.latency_ms)
        return d


class _StageTimer:
    def __init__(self):
        self.latency_ms: dict[str, float] = {}
        self._t0 = time.perf_counter()

    def mark(self, stage: str) -> None:
        now = time.perf_counter()
        self.latency_ms[stage] = (now - self._t0) * 1000.0
        self._t0 = now


@dataclass
class Pipeline:
    """Wires one embedding provider, pool, retrieval index, and LLM backend."""

    provider: EmbeddingProvider
    listings_by_id: Mapping[str, Listing]
    backend: CompletionBackend
    cfg: PipelineConfig = field(default_factory=PipelineConfig)
    templates: PromptTemplates = field(default_factory=lambda: DEFAULT_TEMPLATES)
    holder: SnapshotHolder = field(default_factory=SnapshotHolder)

    @classmethod
    def from_snapshot(cls, snapshot: IndexSnapshot | None, provider: EmbeddingProvider,
                      listings_by_id: Mapping[str, Listing], backend: CompletionBackend,
                      cfg: PipelineConfig | None = None,
                      templates: PromptTemplates = DEFAULT_TEMPLATES) -> "Pipeline":
        return cls(provider=provider, listings_by_id=listings_by_id, backend=backend,
                   cfg=cfg or PipelineConfig(), templates=templates,
                   holder=SnapshotHolder(snapshot))

    # --- single query -------------------------------------------------------

    def suggest_price(self, query: Listing, cfg: PipelineConfig | None = None,
                      backend: CompletionBackend | None = None) -> PriceSuggestion:
        cfg = cfg or self.cfg
        backend = backend or self.backend
        timer = _StageTimer()

        refs = RetrievalSet(query_id=query.id, hits=(), k=max(cfg.k, 1))
        if cfg.k > 0:
            snapshot = self.holder.current
            if snapshot is None or len(snapshot) == 0:
                timer.mark("retrieve")
                return PriceSuggestion(status=STATUS_ABSTAINED_NO_EVIDENCE,
                                       latency_ms=timer.latency_ms)
            try:
                query_vec = embed(query, self.provider)
            except (ValidationError, TransportError) as exc:
                timer.mark("embed")
                return PriceSuggestion(status=STATUS_ERROR, error_cause=f"embed_failure: {exc}",
                                       latency_ms=timer.latency_ms)
            timer.mark("embed")
            if cfg.retrieval == RETRIEVAL_ANN:
                refs = search_topk_ann(snapshot, query_vec, cfg.k, query_id=query.id)
            else:
                refs = search_topk(snapshot, query_vec, cfg.k, query_id=query.id)
            timer.mark("retrieve")
            if not refs.hits:
                return PriceSuggestion(status=STATUS_ABSTAINED_NO_EVIDENCE,
                                       latency_ms=timer.latency_ms)

        bundle = assemble_pricing_prompt(query, refs, cfg.mode, self.listings_by_id,
                                         self.templates)
        timer.mark("prompt")

        generation: Generation | None = None
        raw_text: str | None = None
        try:
            generation = backend.complete(bundle, cfg.decoding)
            raw_text = generation.text
        except CapabilityError as exc:
            raw_text = exc.text
            if raw_text is None:
                timer.mark("complete")
                return PriceSuggestion(status=STATUS_ERROR,
                                       error_cause=f"capability_failure: {exc}",
                                       latency_ms=timer.latency_ms)
        except (TransportError, ValidationError) as exc:
            timer.mark("complete")
            return PriceSuggestion(status=STATUS_ERROR, error_cause=f"gateway_failure: {exc}",
                                   latency_ms=timer.latency_ms)
        timer.mark("complete")

        try:
            parsed = parse_pricing_answer(raw_text, labels_for(refs), cfg.mode)
        except ParseError as exc:
            timer.mark("parse")
            return PriceSuggestion(status=STATUS_ERROR,
                                   error_cause=f"unparseable_output: {exc}",
                                   latency_ms=timer.latency_ms)
        timer.mark("parse")

        score: ConfidenceScore | None = None
        if generation is not None:
            score = confidence_mod.avg_entropy(generation)
        timer.mark("confidence")

        if score is None and cfg.theta_h is not None and cfg.on_missing_confidence == "abstain":
            return PriceSuggestion(status=STATUS_ABSTAINED_LOW_CONFIDENCE,
                                   rationale=parsed.rationale,
                                   cited_ref_ids=parsed.cited_ref_ids,
                                   error_cause="confidence_unavailable",
                                   latency_ms=timer.latency_ms)
        if score is not None and cfg.theta_h is not None:
            decision = confidence_mod.filter_by_confidence(parsed.price, score, cfg.theta_h)
            if not decision.kept:
                return PriceSuggestion(status=STATUS_ABSTAINED_LOW_CONFIDENCE,
                                       rationale=parsed.rationale,
                                       cited_ref_ids=parsed.cited_ref_ids,
                                       confidence=score,
                                       latency_ms=timer.latency_ms)

        return PriceSuggestion(status=STATUS_PRICED, price=parsed.price,
                               rationale=parsed.rationale,
                               cited_ref_ids=parsed.cited_ref_ids,
                               confidence=score, latency_ms=timer.latency_ms)


# --- batch evaluation ---------------------------------------------------------------


@dataclass(frozen=True)
class EvalItem:
    query_id: str
    truth: float | None
    segment: str | None
    suggestion: PriceSuggestion

    def to_record(self) -> dict:
        rec = {
            "query_id": self.query_id,
            "truth": self.truth,
            "segment": self.segment,
        }
        rec.update(self.suggestion.to_dict(include_latency=False))
        return rec


@dataclass
class EvalRun:
    items: list[EvalItem]
    config: dict

    def status_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for item in self.items:
            counts[item.suggestion.status] = counts.get(item.suggestion.status, 0) + 1
        return counts

    def pairs(self) -> list[metrics_mod.PricePair]:
        return [
            metrics_mod.PricePair(predicted=item.suggestion.price, truth=item.truth,
                                  segment=item.segment)
            for item in self.items
            if item.suggestion.status == STATUS_PRICED and item.truth is not None
        ]

    def sweep_items(self, tau: float = metrics_mod.DEFAULT_SAR_TAU) -> list[tuple[float, bool]]:
        """(avg_entropy, SAR-correct) pairs for gate-off runs feeding pr_sweep."""
        out = []
        for item in self.items:
            sug = item.suggestion
            if (sug.status == STATUS_PRICED and item.truth is not None
                    and sug.confidence is not None):
                correct = abs(sug.price - item.truth) / item.truth <= tau
                out.append((sug.confidence.avg_entropy, correct))
        return out


@dataclass
class BatchEvalResult:
    run: EvalRun
    report: metrics_mod.MetricsReport | None
    pr: PrSweep | None = None
    k_reports: dict[int, metrics_mod.MetricsReport] | None = None
    comparison: dict[str, metrics_mod.MetricsReport | None] | None = None


def batch_eval(pipeline: Pipeline, queries: Sequence[Listing],
               cfg: PipelineConfig | None = None, *,
               segments: Mapping[str, str] | None = None,
               theta_thresholds: Sequence[float] | None = None,
               k_sweep: Sequence[int] | None = None,
               compare_backend: CompletionBackend | None = None) -> BatchEvalResult:
    """Evaluate a dataset; optionally sweep entropy thresholds and retrieval sizes.

    Threshold sweeps run with the gate disabled so every item contributes its
    raw entropy; per-item failures are recorded in the run, never raised.
    """
    if not queries:
        raise ValidationError("batch_eval needs a non-empty dataset")
    cfg = cfg or pipeline.cfg
    if theta_thresholds is not None and cfg.theta_h is not None:
        cfg = replace(cfg, theta_h=None)

    run = _run_dataset(pipeline, queries, cfg, segments, pipeline.backend)
    pairs = run.pairs()
    report = metrics_mod.segment_report(pairs) if pairs else None

    pr = None
    if theta_thresholds is not None:
        items = run.sweep_items()
        if items:
            pr = confidence_mod.pr_sweep(items, theta_thresholds)

    k_reports = None
    if k_sweep is not None:
        k_reports = {}
        for k in k_sweep:
            k_run = _run_dataset(pipeline, queries, replace(cfg, k=k), segments,
                                 pipeline.backend)
            k_pairs = k_run.pairs()
            k_reports[k] = metrics_mod.segment_report(k_pairs) if k_pairs else None

    comparison = None
    if compare_backend is not None:
        other = _run_dataset(pipeline, queries, cfg, segments, compare_backend)
        other_pairs = other.pairs()
        comparison = {
            "primary": report,
            "alternate": metrics_mod.segment_report(other_pairs) if other_pairs else None,
        }

    return BatchEvalResult(run=run, report=report, pr=pr, k_reports=k_reports,
                           comparison=comparison)


def _run_dataset(pipeline: Pipeline, queries: Sequence[Listing], cfg: PipelineConfig,
                 segments: Mapping[str, str] | None,
                 backend: CompletionBackend) -> EvalRun:
    items = []
    for query in queries:
        try:
            suggestion = pipeline.suggest_price(query, cfg=cfg, backend=backend)
        except PricingError as exc:  # defensive: per-item failures never abort the run
            logger.error("suggest_price failed for %s: %s", query.id, exc)
            suggestion = PriceSuggestion(status=STATUS_ERROR, error_cause=str(exc))
        items.append(EvalItem(
            query_id=query.id,
            truth=query.price,
            segment=(segments or {}).get(query.id),
            suggestion=suggestion,
        ))
    return EvalRun(items=items, config=cfg.to_dict())


# --- artifacts --------------------------------------------------------------------

def write_eval_run(run: EvalRun, path: str | Path) -> None:
    """Persist a run as JSONL: a config header then one record per item.

    Latencies are deliberately excluded so seeded runs are byte-reproducible.
    """
    header = {"kind": "eval_run_header", "config": run.config,
              "status_counts": run.status_counts(), "n": len(run.items)}
    write_jsonl(path, [header] + [item.to_record() for item in run.items])


def write_metrics_report(report: metrics_mod.MetricsReport, path: str | Path) -> None:
    write_json(path, report.to_dict())


def write_k_sweep(k_reports: Mapping[int, metrics_mod.MetricsReport | None],
                  path: str | Path) -> None:
    payload = {
        str(k): (report.to_dict() if report is not None else None)
        for k, report in sorted(k_reports.items())
    }
    write_json(path, payload)
