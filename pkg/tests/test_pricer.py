import math

import pytest

from resale_pricer import confidence as confidence_mod
from resale_pricer.catalog import CandidatePool, FilterRules
from resale_pricer.errors import CapabilityError, TransportError, ValidationError
from resale_pricer.mocks import EchoModel, MedianPricerModel, ScriptedModel
from resale_pricer.pricer import (
    Pipeline,
    PipelineConfig,
    PriceSuggestion,
    STATUS_ABSTAINED_LOW_CONFIDENCE,
    STATUS_ABSTAINED_NO_EVIDENCE,
    STATUS_ERROR,
    STATUS_PRICED,
    batch_eval,
    write_eval_run,
    write_k_sweep,
    write_metrics_report,
)
from resale_pricer.vecindex import HashingEmbedder, build_index

from conftest import AS_OF, make_listing


def build_pipeline(pool, backend=None, cfg=None):
    provider = HashingEmbedder(64)
    snapshot = build_index(pool, provider) if pool.listings else None
    return Pipeline.from_snapshot(snapshot, provider, pool.by_id(),
                                  backend or MedianPricerModel(), cfg)


def exact_dup_pool(prices=(100.0,) * 5, extra=()):
    listings = [make_listing(f"dup{i}", price=p) for i, p in enumerate(prices)]
    listings += list(extra)
    return CandidatePool(as_of=AS_OF, listings=tuple(listings), provenance=FilterRules())


class TestSuggestPrice:
    def test_duplicate_oracle_priced_exactly(self, query_listing):
        pipeline = build_pipeline(exact_dup_pool())
        suggestion = pipeline.suggest_price(query_listing)
        assert suggestion.status == STATUS_PRICED
        assert suggestion.price == 100.0
        assert suggestion.confidence is not None
        assert set(suggestion.latency_ms) >= {"embed", "retrieve", "prompt", "complete",
                                              "parse", "confidence"}

    def test_empty_index_abstains_no_evidence(self, query_listing):
        provider = HashingEmbedder(64)
        pipeline = Pipeline.from_snapshot(None, provider, {}, MedianPricerModel())
        suggestion = pipeline.suggest_price(query_listing)
        assert suggestion.status == STATUS_ABSTAINED_NO_EVIDENCE
        assert suggestion.price is None

    def test_high_dispersion_gated(self, query_listing):
        # same-text references with wildly different prices: mock entropy is high
        pool = exact_dup_pool(prices=(10.0, 20.0, 100.0, 900.0, 2500.0))
        pipeline = build_pipeline(pool, cfg=PipelineConfig(k=5, theta_h=0.05))
        suggestion = pipeline.suggest_price(query_listing)
        assert suggestion.status == STATUS_ABSTAINED_LOW_CONFIDENCE
        assert suggestion.price is None
        assert suggestion.confidence.avg_entropy > 0.05

    def test_low_dispersion_passes_gate(self, query_listing):
        pool = exact_dup_pool(prices=(99.0, 100.0, 100.0, 100.0, 101.0))
        pipeline = build_pipeline(pool, cfg=PipelineConfig(k=5, theta_h=0.2))
        suggestion = pipeline.suggest_price(query_listing)
        assert suggestion.status == STATUS_PRICED

    def test_k_zero_ablation_uses_fallback(self, query_listing):
        pipeline = build_pipeline(exact_dup_pool(),
                                  backend=MedianPricerModel(fallback_price=1.0),
                                  cfg=PipelineConfig(k=0))
        suggestion = pipeline.suggest_price(query_listing)
        assert suggestion.status == STATUS_PRICED
        assert suggestion.price == 1.0

    def test_unparseable_output_is_error(self, query_listing):
        pipeline = build_pipeline(exact_dup_pool(), backend=EchoModel())
        suggestion = pipeline.suggest_price(query_listing)
        assert suggestion.status == STATUS_ERROR
        assert "unparseable_output" in suggestion.error_cause

    def test_gateway_failure_is_error(self, query_listing):
        class Down:
            def complete(self, prompt, params):
                raise TransportError("endpoint unreachable", attempts=3)

        pipeline = build_pipeline(exact_dup_pool(), backend=Down())
        suggestion = pipeline.suggest_price(query_listing)
        assert suggestion.status == STATUS_ERROR
        assert "gateway_failure" in suggestion.error_cause

    def test_missing_confidence_abstains_by_default(self, query_listing):
        class NoLogprobs:
            def complete(self, prompt, params):
                raise CapabilityError("no logprobs", text="<price>100</price>")

        pipeline = build_pipeline(exact_dup_pool(), backend=NoLogprobs(),
                                  cfg=PipelineConfig(k=5, theta_h=0.5, mode="price-only"))
        suggestion = pipeline.suggest_price(query_listing)
        assert suggestion.status == STATUS_ABSTAINED_LOW_CONFIDENCE
        assert suggestion.error_cause == "confidence_unavailable"

    def test_missing_confidence_pass_through(self, query_listing):
        class NoLogprobs:
            def complete(self, prompt, params):
                raise CapabilityError("no logprobs", text="<price>100</price>")

        cfg = PipelineConfig(k=5, theta_h=0.5, mode="price-only",
                             on_missing_confidence="pass-through")
        pipeline = build_pipeline(exact_dup_pool(), backend=NoLogprobs(), cfg=cfg)
        suggestion = pipeline.suggest_price(query_listing)
        assert suggestion.status == STATUS_PRICED
        assert suggestion.price == 100.0
        assert suggestion.confidence is None

    def test_no_gate_when_theta_none(self, query_listing):
        pool = exact_dup_pool(prices=(10.0, 20.0, 100.0, 900.0, 2500.0))
        pipeline = build_pipeline(pool, cfg=PipelineConfig(k=5, theta_h=None))
        assert pipeline.suggest_price(query_listing).status == STATUS_PRICED

    def test_deterministic(self, query_listing):
        pipeline = build_pipeline(exact_dup_pool())
        a = pipeline.suggest_price(query_listing)
        b = pipeline.suggest_price(query_listing)
        assert a.price == b.price
        assert a.status == b.status
        assert a.cited_ref_ids == b.cited_ref_ids

    def test_priced_iff_price_present(self):
        with pytest.raises(ValidationError):
            PriceSuggestion(status=STATUS_PRICED, price=None)
        with pytest.raises(ValidationError):
            PriceSuggestion(status=STATUS_ERROR, price=5.0)


def eval_queries(n=6):
    return [make_listing(f"q{i}", price=100.0) for i in range(n)]


class TestBatchEval:
    def test_counts_reconcile(self):
        pool = exact_dup_pool()
        pipeline = build_pipeline(pool)
        queries = eval_queries()
        result = batch_eval(pipeline, queries)
        counts = result.run.status_counts()
        assert sum(counts.values()) == len(queries)
        assert counts[STATUS_PRICED] == len(queries)

    def test_metrics_joined(self):
        pipeline = build_pipeline(exact_dup_pool())
        result = batch_eval(pipeline, eval_queries())
        assert result.report is not None
        assert result.report.overall.sar == 1.0

    def test_k_sweep_shows_retrieval_value(self):
        pipeline = build_pipeline(exact_dup_pool())
        result = batch_eval(pipeline, eval_queries(), k_sweep=[0, 5])
        sar_k0 = result.k_reports[0].overall.sar
        sar_k5 = result.k_reports[5].overall.sar
        assert sar_k5 > sar_k0

    def test_theta_sweep_delegates_to_pr_sweep(self):
        pipeline = build_pipeline(exact_dup_pool())
        thresholds = [0.0, 0.1, 1.0]
        result = batch_eval(pipeline, eval_queries(), theta_thresholds=thresholds)
        expected = confidence_mod.pr_sweep(result.run.sweep_items(), thresholds)
        assert result.pr == expected

    def test_theta_sweep_disables_gate(self):
        pool = exact_dup_pool(prices=(10.0, 20.0, 100.0, 900.0, 2500.0))
        pipeline = build_pipeline(pool, cfg=PipelineConfig(k=5, theta_h=0.01))
        result = batch_eval(pipeline, eval_queries(), theta_thresholds=[math.inf])
        assert result.run.status_counts()[STATUS_PRICED] == len(result.run.items)

    def test_comparison_mode(self):
        pipeline = build_pipeline(exact_dup_pool())
        constant = ScriptedModel(lambda bundle: "<reason>flat guess</reason><price>1</price>")
        result = batch_eval(pipeline, eval_queries(10), compare_backend=constant)
        assert result.comparison["primary"].overall.rmsle < \
            result.comparison["alternate"].overall.rmsle

    def test_partial_failures_recorded_not_raised(self):
        class Flaky:
            def __init__(self):
                self.calls = 0

            def complete(self, prompt, params):
                self.calls += 1
                if self.calls == 2:
                    raise TransportError("blip", attempts=3)
                return MedianPricerModel().complete(prompt, params)

        pipeline = build_pipeline(exact_dup_pool(), backend=Flaky())
        result = batch_eval(pipeline, eval_queries(4))
        counts = result.run.status_counts()
        assert counts[STATUS_ERROR] == 1
        assert counts[STATUS_PRICED] == 3

    def test_empty_dataset_rejected(self):
        pipeline = build_pipeline(exact_dup_pool())
        with pytest.raises(ValidationError):
            batch_eval(pipeline, [])

    def test_segments_flow_into_report(self):
        pipeline = build_pipeline(exact_dup_pool())
        queries = eval_queries(4)
        segments = {q.id: ("standardized" if i % 2 else "non-standardized")
                    for i, q in enumerate(queries)}
        result = batch_eval(pipeline, queries, segments=segments)
        assert set(result.report.per_segment) == {"standardized", "non-standardized"}


class TestArtifacts:
    def test_run_file_deterministic(self, tmp_path):
        pipeline = build_pipeline(exact_dup_pool())
        queries = eval_queries()
        paths = []
        for name in ("a", "b"):
            result = batch_eval(pipeline, queries)
            path = tmp_path / f"run_{name}.jsonl"
            write_eval_run(result.run, path)
            paths.append(path)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_metrics_and_k_sweep_files(self, tmp_path):
        pipeline = build_pipeline(exact_dup_pool())
        result = batch_eval(pipeline, eval_queries(), k_sweep=[0, 5])
        write_metrics_report(result.report, tmp_path / "metrics.json")
        write_k_sweep(result.k_reports, tmp_path / "k.json")
        import json

        metrics = json.loads((tmp_path / "metrics.json").read_text())
        assert metrics["overall"]["sar"] == 1.0
        sweep = json.loads((tmp_path / "k.json").read_text())
        assert set(sweep) == {"0", "5"}
