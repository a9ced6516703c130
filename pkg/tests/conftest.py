from datetime import datetime, timedelta, timezone

import pytest

from resale_pricer.catalog import CandidatePool, FilterRules, Listing

AS_OF = datetime(2026, 6, 1, 12, 0, 0, tzinfo=timezone.utc)


def make_listing(listing_id="a1", title="Aurora X1 64GB", description="Aurora X1 64GB, like new",
                 condition="like new", category="phones", price=100.0, age_days=5,
                 click_count=10, flags=()):
    return Listing(
        id=listing_id,
        title=title,
        description=description,
        condition=condition,
        category=category,
        price=price,
        listed_at=AS_OF - timedelta(days=age_days),
        click_count=click_count,
        flags=frozenset(flags),
    )


@pytest.fixture
def as_of():
    return AS_OF


@pytest.fixture
def small_pool():
    """Five exact duplicates priced around 100 plus three distractors."""
    listings = [
        make_listing(f"dup{i}", price=p)
        for i, p in enumerate([98.0, 99.0, 100.0, 101.0, 102.0])
    ]
    listings += [
        make_listing("d1", title="Peak M7 128GB", description="Peak M7 128GB, well used",
                     condition="well used", price=250.0),
        make_listing("d2", title="Nimbus S2 256GB", description="Nimbus S2 256GB, lightly used",
                     condition="lightly used", price=400.0),
        make_listing("d3", title="Vertex Pro 9 bundle", description="Vertex Pro 9 bundle, heavily used",
                     condition="heavily used", price=60.0),
    ]
    return CandidatePool(as_of=AS_OF, listings=tuple(listings), provenance=FilterRules())


@pytest.fixture
def query_listing():
    return make_listing("q1", price=100.0)
