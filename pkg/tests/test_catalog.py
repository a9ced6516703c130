import json
import math
from datetime import timedelta

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resale_pricer.catalog import (
    Catalog,
    FilterRules,
    build_pool,
    ingest_listings,
    listing_to_record,
    nearest_rank_percentile,
    read_pool_manifest,
    write_pool_manifest,
)
from resale_pricer.errors import DuplicateIdError, ValidationError

from conftest import AS_OF, make_listing


def record_line(listing_id="a1", **overrides):
    rec = listing_to_record(make_listing(listing_id))
    rec.update(overrides)
    for key in [k for k, v in overrides.items() if v is None]:
        rec.pop(key)
    return json.dumps(rec)


class TestIngest:
    def test_three_valid_lines(self):
        lines = [record_line(f"a{i}") for i in range(3)]
        catalog = ingest_listings(lines)
        assert len(catalog.listings) == 3
        assert catalog.rejects == []

    def test_missing_price_rejected_with_line_number(self):
        lines = [record_line("a1"), record_line("a2"), record_line("a3", price=None)]
        catalog = ingest_listings(lines)
        assert len(catalog.listings) == 2
        assert len(catalog.rejects) == 1
        assert catalog.rejects[0].lineno == 3
        assert "price" in catalog.rejects[0].reason

    def test_duplicate_id_names_the_id(self):
        lines = [record_line("x1"), record_line("x1")]
        with pytest.raises(DuplicateIdError, match="x1"):
            ingest_listings(lines)

    def test_invalid_json_rejected(self):
        catalog = ingest_listings([record_line("a1"), "{not json"])
        assert len(catalog.listings) == 1
        assert catalog.rejects[0].lineno == 2

    def test_from_file(self, tmp_path):
        path = tmp_path / "listings.jsonl"
        path.write_text("\n".join(record_line(f"a{i}") for i in range(4)) + "\n")
        assert len(ingest_listings(path).listings) == 4


def oracle_percentile(values, p):
    """Smallest value v such that at least ceil(p/100 * n) values are <= v."""
    n = len(values)
    need = max(1, math.ceil(p / 100 * n))
    for v in sorted(values):
        if sum(1 for u in values if u <= v) >= need:
            return v
    raise AssertionError("unreachable")


class TestPercentile:
    def test_matches_oracle_on_spec_example(self):
        values = list(range(1, 11))
        assert oracle_percentile(values, 70) == 7
        assert nearest_rank_percentile(values, 70) == 7

    @given(st.lists(st.integers(0, 1000), min_size=1, max_size=50),
           st.integers(0, 100))
    def test_matches_oracle(self, values, p):
        assert nearest_rank_percentile(values, p) == oracle_percentile(values, p)

    def test_extremes(self):
        assert nearest_rank_percentile([5, 1, 9], 0) == 1
        assert nearest_rank_percentile([5, 1, 9], 100) == 9


class TestBuildPool:
    def test_recency_window_excludes_old_listing(self):
        catalog = Catalog([make_listing("old", age_days=120), make_listing("new", age_days=10)])
        pool = build_pool(catalog, FilterRules(window_days=90, click_percentile=0), AS_OF)
        assert [l.id for l in pool.listings] == ["new"]

    def test_window_boundary_inclusive(self):
        catalog = Catalog([make_listing("edge", age_days=90)])
        pool = build_pool(catalog, FilterRules(window_days=90, click_percentile=0), AS_OF)
        assert [l.id for l in pool.listings] == ["edge"]

    def test_banned_flag_excludes(self):
        catalog = Catalog([
            make_listing("bad", flags=("off-platform-solicitation",)),
            make_listing("ok"),
        ])
        rules = FilterRules(banned_flag_labels=frozenset({"off-platform-solicitation"}),
                            click_percentile=0)
        pool = build_pool(catalog, rules, AS_OF)
        assert [l.id for l in pool.listings] == ["ok"]

    def test_banned_phrase_excludes(self):
        catalog = Catalog([
            make_listing("bait", description="amazing deal, contact me on WeChat"),
            make_listing("ok"),
        ])
        rules = FilterRules(banned_phrase_patterns=("contact me on wechat",), click_percentile=0)
        pool = build_pool(catalog, rules, AS_OF)
        assert [l.id for l in pool.listings] == ["ok"]

    def test_click_percentile_spec_example(self):
        # ten survivors with clicks 1..10, percentile 70: cutoff 7 keeps {7,8,9,10}
        catalog = Catalog([make_listing(f"c{i}", click_count=i) for i in range(1, 11)])
        pool = build_pool(catalog, FilterRules(click_percentile=70), AS_OF)
        assert sorted(l.click_count for l in pool.listings) == [7, 8, 9, 10]
        assert pool.click_cutoff == 7

    def test_percentile_population_is_post_fraud_filter(self):
        # the flagged high-click listing must not raise the cutoff
        catalog = Catalog(
            [make_listing(f"c{i}", click_count=i) for i in range(1, 11)]
            + [make_listing("spam", click_count=10_000, flags=("fraud",))]
        )
        rules = FilterRules(banned_flag_labels=frozenset({"fraud"}), click_percentile=70)
        pool = build_pool(catalog, rules, AS_OF)
        assert pool.click_cutoff == 7

    def test_all_filtered_is_warning_not_error(self):
        catalog = Catalog([make_listing("old", age_days=400)])
        pool = build_pool(catalog, FilterRules(), AS_OF)
        assert len(pool.listings) == 0
        assert pool.warning is not None

    def test_empty_catalog_is_error(self):
        with pytest.raises(ValidationError):
            build_pool(Catalog([]), FilterRules(), AS_OF)

    def test_deterministic(self):
        catalog = Catalog([make_listing(f"c{i}", click_count=i * 3 % 7) for i in range(20)])
        a = build_pool(catalog, FilterRules(), AS_OF)
        b = build_pool(catalog, FilterRules(), AS_OF)
        assert [l.id for l in a.listings] == [l.id for l in b.listings]
        assert a.click_cutoff == b.click_cutoff

    def test_members_satisfy_pool_invariants(self):
        catalog = Catalog([
            make_listing(f"c{i}", click_count=i, age_days=i * 11 % 150,
                         flags=("spam",) if i % 5 == 0 else ())
            for i in range(1, 30)
        ])
        rules = FilterRules(banned_flag_labels=frozenset({"spam"}), click_percentile=50)
        pool = build_pool(catalog, rules, AS_OF)
        assert pool.listings
        for l in pool.listings:
            assert (AS_OF - l.listed_at) <= timedelta(days=rules.window_days)
            assert not (l.flags & rules.banned_flag_labels)
            assert l.click_count >= pool.click_cutoff

    def test_refiltering_without_click_cut_is_identity(self):
        # value-based filters are idempotent; see the percentile note below
        catalog = Catalog([make_listing(f"c{i}", click_count=i) for i in range(1, 11)])
        first = build_pool(catalog, FilterRules(click_percentile=70), AS_OF)
        rules0 = FilterRules(click_percentile=0)
        again = build_pool(Catalog(list(first.listings)), rules0, AS_OF)
        assert [l.id for l in again.listings] == [l.id for l in first.listings]

    def test_reapplying_click_percentile_shrinks_monotonically(self):
        # re-running the full build on its own output recomputes the cutoff
        # over the survivors, so the pool can only stay equal or shrink
        catalog = Catalog([make_listing(f"c{i}", click_count=i) for i in range(1, 11)])
        first = build_pool(catalog, FilterRules(click_percentile=70), AS_OF)
        second = build_pool(Catalog(list(first.listings)), FilterRules(click_percentile=70), AS_OF)
        assert set(l.id for l in second.listings) <= set(l.id for l in first.listings)


@st.composite
def catalogs(draw):
    n = draw(st.integers(1, 25))
    listings = [
        make_listing(
            f"l{i}",
            age_days=draw(st.integers(0, 200)),
            click_count=draw(st.integers(0, 50)),
            flags=("spam",) if draw(st.booleans()) else (),
        )
        for i in range(n)
    ]
    return Catalog(listings)


class TestPoolProperties:
    @settings(max_examples=60, deadline=None)
    @given(catalogs(), st.integers(1, 120), st.integers(0, 80))
    def test_enlarging_window_never_shrinks_pool(self, catalog, window, percentile):
        rules_small = FilterRules(banned_flag_labels=frozenset({"spam"}),
                                  window_days=window, click_percentile=percentile)
        rules_large = FilterRules(banned_flag_labels=frozenset({"spam"}),
                                  window_days=window + 30, click_percentile=percentile)
        small = build_pool(catalog, rules_small, AS_OF)
        large = build_pool(catalog, rules_large, AS_OF)
        assert len(large) >= len(small)

    @settings(max_examples=60, deadline=None)
    @given(catalogs(), st.integers(0, 90))
    def test_raising_percentile_never_grows_pool(self, catalog, percentile):
        low = build_pool(catalog, FilterRules(click_percentile=percentile), AS_OF)
        high = build_pool(catalog, FilterRules(click_percentile=min(percentile + 10, 100)), AS_OF)
        assert set(l.id for l in high.listings) <= set(l.id for l in low.listings)


class TestManifest:
    def test_round_trip(self, tmp_path):
        catalog = Catalog([make_listing(f"c{i}", click_count=i) for i in range(1, 11)])
        pool = build_pool(catalog, FilterRules(click_percentile=70), AS_OF)
        path = tmp_path / "pool.jsonl"
        write_pool_manifest(pool, path)
        loaded = read_pool_manifest(path)
        assert loaded.as_of == pool.as_of
        assert loaded.click_cutoff == pool.click_cutoff
        assert loaded.provenance == pool.provenance
        assert [l.id for l in loaded.listings] == [l.id for l in pool.listings]
        assert [l.price for l in loaded.listings] == [l.price for l in pool.listings]

    def test_header_required(self, tmp_path):
        path = tmp_path / "pool.jsonl"
        path.write_text(record_line("a1") + "\n")
        with pytest.raises(ValidationError):
            read_pool_manifest(path)
