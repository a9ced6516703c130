"""Command-line interface.

Verbs: ingest, pool build, index build/search, price, datagen,
reward score, eval metrics/pr-sweep/k-sweep, synth, serve.
"""

from __future__ import annotations

import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import click

from . import catalog as catalog_mod
from . import confidence as confidence_mod
from . import datagen as datagen_mod
from . import metrics as metrics_mod
from . import pricer as pricer_mod
from . import synth as synth_mod
from . import vecindex as vecindex_mod
from .alignment import GroupConfig, RewardConfig, combined_reward, score_group
from .config import endpoint_from_config, load_config
from .errors import PricingError
from .llm_gateway import HttpChatEndpoint
from .mocks import EchoModel, MedianPricerModel
from .recordio import read_jsonl, write_json, write_jsonl


def _echo_json(payload) -> None:
    click.echo(json.dumps(payload, sort_keys=True, indent=2))


def _parse_as_of(value: str | None) -> datetime:
    if value is None:
        return datetime.now(timezone.utc)
    return catalog_mod.parse_rfc3339(value)


def _load_rules(path: str | None, window_days: int, click_percentile: int) -> catalog_mod.FilterRules:
    base = {}
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            base = json.load(fh)
    base.setdefault("window_days", window_days)
    base.setdefault("click_percentile", click_percentile)
    return catalog_mod.FilterRules.from_dict(base)


def _make_backend(kind: str, config_path: str | None):
    if kind == "median":
        return MedianPricerModel()
    if kind == "echo":
        return EchoModel()
    if kind == "endpoint":
        cfg = load_config(config_path)
        return HttpChatEndpoint(endpoint_from_config(cfg))
    raise click.BadParameter(f"unknown backend {kind!r}")


def _load_pipeline(index_path: str, pool_path: str, backend_kind: str, config_path: str | None,
                   cfg: pricer_mod.PipelineConfig) -> pricer_mod.Pipeline:
    snapshot = vecindex_mod.load_snapshot(index_path)
    pool = catalog_mod.read_pool_manifest(pool_path)
    provider = vecindex_mod.HashingEmbedder(dimension=snapshot.dimension)
    backend = _make_backend(backend_kind, config_path)
    return pricer_mod.Pipeline.from_snapshot(snapshot, provider, pool.by_id(), backend, cfg)


backend_option = click.option("--backend", "backend_kind",
                              type=click.Choice(["median", "echo", "endpoint"]),
                              default="median", show_default=True,
                              help="Completion backend (mocks run fully offline).")
config_option = click.option("--config", "config_path", type=click.Path(exists=True),
                             default=None, help="YAML config for the endpoint backend.")


@click.group()
def main():
    """Second-hand price suggestion: retrieval, reasoning, confidence gating."""


# --- ingest / pool ----------------------------------------------------------------

@main.command()
@click.argument("source", type=click.Path(exists=True))
def ingest(source):
    """Parse a listings JSONL file and report malformed lines."""
    try:
        result = catalog_mod.ingest_listings(source)
    except PricingError as exc:
        raise click.ClickException(str(exc))
    _echo_json({
        "listings": len(result.listings),
        "rejected": [{"line": r.lineno, "reason": r.reason} for r in result.rejects],
    })


@main.group()
def pool():
    """Candidate pool operations."""


@pool.command("build")
@click.option("--listings", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--window-days", default=catalog_mod.DEFAULT_WINDOW_DAYS, show_default=True, type=int)
@click.option("--click-percentile", default=catalog_mod.DEFAULT_CLICK_PERCENTILE,
              show_default=True, type=int)
@click.option("--rules", "rules_path", type=click.Path(exists=True), default=None,
              help="JSON file with banned flags/phrases (overrides defaults).")
@click.option("--as-of", default=None, help="RFC 3339 timestamp; defaults to now.")
def pool_build(listings, out, window_days, click_percentile, rules_path, as_of):
    """Filter listings into a candidate pool manifest."""
    rules = _load_rules(rules_path, window_days, click_percentile)
    cat = catalog_mod.ingest_listings(listings)
    try:
        result = catalog_mod.build_pool(cat, rules, _parse_as_of(as_of))
    except PricingError as exc:
        raise click.ClickException(str(exc))
    catalog_mod.write_pool_manifest(result, out)
    _echo_json({
        "pool_size": len(result),
        "click_cutoff": result.click_cutoff,
        "warning": result.warning,
        "out": str(out),
    })


# --- index ---------------------------------------------------------------------

@main.group()
def index():
    """Vector index operations."""


@index.command("build")
@click.option("--pool", "pool_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--dimension", default=vecindex_mod.DEFAULT_DIMENSION, show_default=True, type=int)
@click.option("--graph/--no-graph", default=False, show_default=True,
              help="Also build the approximate-search graph.")
def index_build(pool_path, out, dimension, graph):
    """Embed a pool manifest into an index snapshot file."""
    pool = catalog_mod.read_pool_manifest(pool_path)
    provider = vecindex_mod.HashingEmbedder(dimension=dimension)
    params = vecindex_mod.GraphParams() if graph else None
    try:
        snapshot = vecindex_mod.build_index(pool, provider, params)
    except PricingError as exc:
        raise click.ClickException(str(exc))
    vecindex_mod.save_snapshot(snapshot, out)
    _echo_json({"entries": len(snapshot), "dimension": snapshot.dimension,
                "graph": graph, "out": str(out)})


@index.command("search")
@click.option("--index", "index_path", required=True, type=click.Path(exists=True))
@click.option("--query", "query_json", required=True,
              help="Listing JSON (inline) to embed and search.")
@click.option("--k", default=50, show_default=True, type=int)
@click.option("--ann", is_flag=True, default=False, help="Use the approximate graph search.")
def index_search(index_path, query_json, k, ann):
    """Top-k cosine search against a snapshot."""
    snapshot = vecindex_mod.load_snapshot(index_path)
    provider = vecindex_mod.HashingEmbedder(dimension=snapshot.dimension)
    listing = catalog_mod.listing_from_record(json.loads(query_json), require_price=False)
    vec = vecindex_mod.embed(listing, provider)
    search = vecindex_mod.search_topk_ann if ann else vecindex_mod.search_topk
    refs = search(snapshot, vec, k, query_id=listing.id)
    _echo_json({
        "query_id": refs.query_id,
        "hits": [{"id": h.listing_id, "score": h.score, "price": h.price} for h in refs.hits],
    })


# --- price ----------------------------------------------------------------------

@main.command()
@click.option("--index", "index_path", required=True, type=click.Path(exists=True))
@click.option("--pool", "pool_path", required=True, type=click.Path(exists=True))
@click.option("--query", "query_json", required=True, help="Listing JSON (inline).")
@backend_option
@config_option
@click.option("--k", default=50, show_default=True, type=int)
@click.option("--theta", "theta_h", default=None, type=float,
              help="Entropy gate; omit to disable gating.")
@click.option("--mode", type=click.Choice(["price-only", "rationale-and-price"]),
              default="rationale-and-price", show_default=True)
@click.option("--ann", is_flag=True, default=False)
def price(index_path, pool_path, query_json, backend_kind, config_path, k, theta_h, mode, ann):
    """Suggest a price for one listing."""
    cfg = pricer_mod.PipelineConfig(
        k=k, theta_h=theta_h, mode=mode,
        retrieval=pricer_mod.RETRIEVAL_ANN if ann else pricer_mod.RETRIEVAL_EXACT)
    pipeline = _load_pipeline(index_path, pool_path, backend_kind, config_path, cfg)
    listing = catalog_mod.listing_from_record(json.loads(query_json), require_price=False)
    suggestion = pipeline.suggest_price(listing)
    _echo_json(suggestion.to_dict(include_latency=True))


# --- datagen ---------------------------------------------------------------------

@main.command()
@click.option("--pool", "pool_path", required=True, type=click.Path(exists=True))
@click.option("--queries", "queries_path", required=True, type=click.Path(exists=True),
              help="JSONL of query listings with ground-truth prices.")
@click.option("--out", required=True, type=click.Path())
@click.option("--k", default=50, show_default=True, type=int)
@click.option("--jaro-threshold", default=datagen_mod.DEFAULT_JARO_THRESHOLD,
              show_default=True, type=float)
@click.option("--jaro-aggregate", type=click.Choice(["mean", "max"]), default="mean",
              show_default=True)
@backend_option
@config_option
@click.option("--dimension", default=vecindex_mod.DEFAULT_DIMENSION, show_default=True, type=int)
@click.option("--rejects", "rejects_path", type=click.Path(), default=None)
@click.option("--audit", "audit_path", type=click.Path(), default=None,
              help="Write per-stage prompt/response transcripts here.")
@click.option("--split", "split_fraction", type=float, default=None,
              help="Fraction of accepted queries whose records go to --out; the rest to --split-out.")
@click.option("--split-out", "split_path", type=click.Path(), default=None)
@click.option("--workers", default=1, show_default=True, type=int)
def datagen(pool_path, queries_path, out, k, jaro_threshold, jaro_aggregate, backend_kind,
            config_path, dimension, rejects_path, audit_path, split_fraction, split_path, workers):
    """Build the bidirectional-reasoning SFT dataset."""
    pool = catalog_mod.read_pool_manifest(pool_path)
    provider = vecindex_mod.HashingEmbedder(dimension=dimension)
    snapshot = vecindex_mod.build_index(pool, provider)
    backend = _make_backend(backend_kind, config_path)
    queries = list(catalog_mod.iter_query_listings(queries_path))
    build = datagen_mod.build_dataset(
        queries, snapshot, provider, backend, k, pool.by_id(),
        jaro_threshold=jaro_threshold, jaro_aggregate=jaro_aggregate, max_workers=workers)
    counts = datagen_mod.write_dataset(
        build, out, rejects_path=rejects_path, audit_path=audit_path,
        split_fraction=split_fraction, split_path=split_path)
    _echo_json({
        "queries": len(queries),
        "accepted": build.n_accepted,
        "rejected": dict(sorted(build.reject_counts.items())),
        **counts,
    })


# --- reward ---------------------------------------------------------------------

@main.group()
def reward():
    """Reward/advantage scoring."""


@reward.command("score")
@click.option("--pred", type=float, default=None)
@click.option("--truth", type=float, default=None)
@click.option("--cited", default="", help="Comma-separated labels, e.g. B1,B3.")
@click.option("--golden", default=None, help="Comma-separated labels.")
@click.option("--alpha", default=RewardConfig().alpha, show_default=True, type=float)
@click.option("--epsilon", default=GroupConfig().epsilon, show_default=True, type=float)
@click.option("--beta", default=GroupConfig().beta, show_default=True, type=float)
@click.option("--batch", "batch_path", type=click.Path(exists=True), default=None,
              help="JSONL of trajectory groups; emits one report per group.")
@click.option("--out", "out_path", type=click.Path(), default=None)
def reward_score(pred, truth, cited, golden, alpha, epsilon, beta, batch_path, out_path):
    """Score one prediction, or a JSONL batch of trajectory groups."""
    reward_cfg = RewardConfig(alpha=alpha)
    if batch_path is not None:
        group_cfg = GroupConfig(epsilon=epsilon, beta=beta)
        reports = []
        for lineno, record in read_jsonl(batch_path):
            result = score_group(record["samples"], reward_cfg, group_cfg)
            result["group_id"] = record.get("group_id", lineno)
            reports.append(result)
        if out_path:
            write_jsonl(out_path, reports)
            _echo_json({"groups": len(reports), "out": str(out_path)})
        else:
            for report in reports:
                click.echo(json.dumps(report, sort_keys=True))
        return
    if pred is None or truth is None or golden is None:
        raise click.UsageError("--pred, --truth and --golden are required without --batch")
    report = combined_reward(
        pred, truth,
        [c for c in cited.split(",") if c],
        [g for g in golden.split(",") if g],
        reward_cfg)
    _echo_json({"price_term": report.price_term, "recall_term": report.recall_term,
                "reward": report.reward})


# --- eval -----------------------------------------------------------------------

@main.group("eval")
def eval_group():
    """Metric reports and sweeps."""


@eval_group.command("metrics")
@click.option("--pairs", "pairs_path", required=True, type=click.Path(exists=True),
              help="JSONL rows: {predicted, truth, segment?}.")
@click.option("--tau", default=metrics_mod.DEFAULT_SAR_TAU, show_default=True, type=float)
@click.option("--dar-a", default=metrics_mod.DEFAULT_DAR_A, show_default=True, type=float)
@click.option("--dar-b", default=metrics_mod.DEFAULT_DAR_B, show_default=True, type=float)
@click.option("--out", "out_path", type=click.Path(), default=None)
def eval_metrics(pairs_path, tau, dar_a, dar_b, out_path):
    """Metric report over (predicted, truth) pairs."""
    pairs = [
        metrics_mod.PricePair(predicted=float(r["predicted"]), truth=float(r["truth"]),
                              segment=r.get("segment"))
        for _, r in read_jsonl(pairs_path)
    ]
    try:
        report = metrics_mod.segment_report(pairs, tau=tau, a=dar_a, b=dar_b)
    except PricingError as exc:
        raise click.ClickException(str(exc))
    if out_path:
        pricer_mod.write_metrics_report(report, out_path)
    _echo_json(report.to_dict())


def _run_batch(pool_path, queries_path, backend_kind, config_path, cfg, dimension,
               theta_thresholds=None, k_sweep=None):
    pool = catalog_mod.read_pool_manifest(pool_path)
    provider = vecindex_mod.HashingEmbedder(dimension=dimension)
    snapshot = vecindex_mod.build_index(pool, provider)
    backend = _make_backend(backend_kind, config_path)
    pipeline = pricer_mod.Pipeline.from_snapshot(snapshot, provider, pool.by_id(), backend, cfg)
    queries = list(catalog_mod.iter_query_listings(queries_path))
    return pricer_mod.batch_eval(pipeline, queries, cfg,
                                 theta_thresholds=theta_thresholds, k_sweep=k_sweep)


@eval_group.command("pr-sweep")
@click.option("--pool", "pool_path", required=True, type=click.Path(exists=True))
@click.option("--queries", "queries_path", required=True, type=click.Path(exists=True))
@click.option("--thresholds", required=True,
              help="Comma-separated entropy thresholds, e.g. 0.05,0.1,0.2,0.5.")
@backend_option
@config_option
@click.option("--k", default=50, show_default=True, type=int)
@click.option("--dimension", default=vecindex_mod.DEFAULT_DIMENSION, show_default=True, type=int)
@click.option("--out-csv", required=True, type=click.Path())
@click.option("--out-json", type=click.Path(), default=None)
def eval_pr_sweep(pool_path, queries_path, thresholds, backend_kind, config_path, k,
                  dimension, out_csv, out_json):
    """Run the pipeline ungated and sweep the entropy threshold."""
    theta_list = [float(t) for t in thresholds.split(",") if t.strip()]
    cfg = pricer_mod.PipelineConfig(k=k, theta_h=None)
    result = _run_batch(pool_path, queries_path, backend_kind, config_path, cfg, dimension,
                        theta_thresholds=theta_list)
    if result.pr is None:
        raise click.ClickException("run produced no confidence-scored items")
    confidence_mod.write_pr_csv(result.pr, out_csv)
    if out_json:
        write_json(out_json, confidence_mod.sweep_summary(result.pr))
    _echo_json({"auc": result.pr.auc, "points": len(result.pr.points), "out_csv": str(out_csv)})


@eval_group.command("k-sweep")
@click.option("--pool", "pool_path", required=True, type=click.Path(exists=True))
@click.option("--queries", "queries_path", required=True, type=click.Path(exists=True))
@click.option("--k-values", default="0,1,5,15,50", show_default=True)
@backend_option
@config_option
@click.option("--dimension", default=vecindex_mod.DEFAULT_DIMENSION, show_default=True, type=int)
@click.option("--out", "out_path", required=True, type=click.Path())
def eval_k_sweep(pool_path, queries_path, k_values, backend_kind, config_path, dimension, out_path):
    """Metric reports across retrieval sizes."""
    ks = [int(v) for v in k_values.split(",") if v.strip()]
    cfg = pricer_mod.PipelineConfig(theta_h=None)
    result = _run_batch(pool_path, queries_path, backend_kind, config_path, cfg, dimension,
                        k_sweep=ks)
    pricer_mod.write_k_sweep(result.k_reports, out_path)
    summary = {
        str(k): (report.overall.to_dict() if report else None)
        for k, report in sorted(result.k_reports.items())
    }
    _echo_json({"k_reports": summary, "out": str(out_path)})


# --- synth / serve -----------------------------------------------------------------

@main.command()
@click.option("--seed", default=7, show_default=True, type=int)
@click.option("--queries", "n_queries", default=200, show_default=True, type=int)
@click.option("--dups", default=5, show_default=True, type=int)
@click.option("--distractors", default=600, show_default=True, type=int)
@click.option("--out-dir", required=True, type=click.Path())
def synth(seed, n_queries, dups, distractors, out_dir):
    """Generate a seeded synthetic marketplace (pool.jsonl + queries.jsonl)."""
    cfg = synth_mod.SynthConfig(seed=seed, n_queries=n_queries, dups_per_query=dups,
                                n_distractors=distractors)
    market = synth_mod.generate_marketplace(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / "listings.jsonl", (catalog_mod.listing_to_record(l) for l in market.pool))
    write_jsonl(out / "queries.jsonl", (catalog_mod.listing_to_record(l) for l in market.queries))
    _echo_json({
        "pool": len(market.pool),
        "queries": len(market.queries),
        "as_of": catalog_mod.format_rfc3339(market.as_of),
        "out_dir": str(out),
    })


@main.command()
@click.option("--index", "index_path", required=True, type=click.Path(exists=True))
@click.option("--pool", "pool_path", required=True, type=click.Path(exists=True))
@backend_option
@config_option
@click.option("--k", default=50, show_default=True, type=int)
@click.option("--theta", "theta_h", default=None, type=float)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8080, show_default=True, type=int)
@click.option("--refresh-interval", default=3600.0, show_default=True, type=float,
              help="Seconds between index rebuilds from the pool manifest.")
def serve(index_path, pool_path, backend_kind, config_path, k, theta_h, host, port,
          refresh_interval):
    """Run the pricing HTTP service."""
    import uvicorn

    from .service import create_app
    from .vecindex import IndexRefresher

    cfg = pricer_mod.PipelineConfig(k=k, theta_h=theta_h)
    pipeline = _load_pipeline(index_path, pool_path, backend_kind, config_path, cfg)

    def rebuild():
        pool = catalog_mod.read_pool_manifest(pool_path)
        return vecindex_mod.build_index(pool, pipeline.provider)

    refresher = IndexRefresher(pipeline.holder, rebuild, interval_s=refresh_interval)
    app = create_app(pipeline, refresher)
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    sys.exit(main())
