"""Seeded synthetic marketplace for offline evaluation.

Listings are generated from latent (brand, model, variant, condition) tuples:
price = base(brand, model, variant) x condition multiplier x (1 + noise).
Descriptions are templated from the tuple, so true duplicates share byte-equal
text and the feature-hash embedder makes them exact nearest neighbours. All
randomness flows from one seed; two builds from the same config are identical.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone

from .catalog import Listing

BRANDS = ("Aurora", "Peak", "Nimbus", "Vertex", "Solace", "Quanta", "Harbor", "Atlas")
MODELS = ("S2", "S3", "X1", "X5", "M4", "M7", "Pro 9", "Lite 6", "Max 11", "Neo 8")
VARIANTS = ("64GB", "128GB", "256GB", "silver", "black", "blue", "bundle", "single unit")
CONDITIONS = (
    ("like new", 1.0),
    ("lightly used", 0.85),
    ("well used", 0.7),
    ("heavily used", 0.5),
)
CATEGORIES = ("phones", "tablets", "audio", "cameras", "wearables")

BASE_DATE = datetime(2026, 6, 1, 12, 0, 0, tzinfo=timezone.utc)


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 7
    n_queries: int = 500
    dups_per_query: int = 5
    n_distractors: int = 1500
    price_noise: float = 0.05
    max_age_days: int = 45


@dataclass
class Marketplace:
    pool: list[Listing]
    queries: list[Listing]
    as_of: datetime

    def pool_by_id(self) -> dict[str, Listing]:
        return {l.id: l for l in self.pool}


WEAR_NOTES = (
    "battery health 93 percent", "battery replaced last spring", "screen is flawless",
    "small dent on one corner", "light scuffs on the frame", "runs without any issues",
    "hairline mark near the port", "kept in a case since day one",
)
EXTRAS = (
    "charger and cable included", "original box kept", "comes with a spare case",
    "no accessories included", "receipt available", "two covers thrown in",
    "original invoice included", "extra strap in the bag",
)
SALE_NOTES = (
    "selling due to an upgrade", "moving sale", "unwanted gift", "rarely used",
    "was my daily driver", "bought abroad last year", "clearing out storage",
    "price slightly negotiable",
)


def _tuple_description(brand: str, model: str, variant: str, condition: str) -> tuple[str, str]:
    """Templated text for one latent tuple.

    Detail phrases are drawn with a tuple-keyed deterministic RNG: duplicates
    share byte-equal text while neighbouring tuples diverge in wording, which
    keeps honest retrieval neighbourhoods textually heterogeneous.
    """
    title = f"{brand} {model} {variant}"
    key = hashlib.blake2b(f"{brand}|{model}|{variant}|{condition}".encode("utf-8"),
                          digest_size=8).digest()
    picker = random.Random(int.from_bytes(key, "big"))
    details = ", ".join((picker.choice(WEAR_NOTES), picker.choice(EXTRAS),
                         picker.choice(SALE_NOTES)))
    description = f"{brand} {model} {variant}, {condition}, {details}"
    return title, description


class _World:
    """Latent tuple sampler with a stable base-price table."""

    def __init__(self, rng: random.Random):
        self.rng = rng
        self._base_prices: dict[tuple[str, str, str], float] = {}
        self._used: set[tuple[str, str, str, str]] = set()

    def sample_tuple(self, unique: bool = False) -> tuple[str, str, str, str, float]:
        for _ in range(200):
            brand = self.rng.choice(BRANDS)
            model = self.rng.choice(MODELS)
            variant = self.rng.choice(VARIANTS)
            condition, mult = self.rng.choice(CONDITIONS)
            key = (brand, model, variant, condition)
            if not unique or key not in self._used:
                self._used.add(key)
                return brand, model, variant, condition, mult
        raise RuntimeError("latent tuple space exhausted")

    def base_price(self, brand: str, model: str, variant: str) -> float:
        key = (brand, model, variant)
        if key not in self._base_prices:
            self._base_prices[key] = round(self.rng.uniform(60.0, 900.0), 2)
        return self._base_prices[key]

    def noisy_price(self, base: float, mult: float, noise: float) -> float:
        jitter = self.rng.uniform(-noise, noise)
        return round(base * mult * (1.0 + jitter), 2)


def _make_listing(listing_id: str, world: _World, brand: str, model: str, variant: str,
                  condition: str, mult: float, cfg: SynthConfig) -> Listing:
    title, description = _tuple_description(brand, model, variant, condition)
    base = world.base_price(brand, model, variant)
    return Listing(
        id=listing_id,
        title=title,
        description=description,
        condition=condition,
        category=world.rng.choice(CATEGORIES),
        price=world.noisy_price(base, mult, cfg.price_noise),
        listed_at=BASE_DATE - timedelta(days=world.rng.randint(0, cfg.max_age_days)),
        click_count=world.rng.randint(50, 500),
    )


def generate_marketplace(cfg: SynthConfig = SynthConfig()) -> Marketplace:
    """Pool plus queries where every query has `dups_per_query` true duplicates."""
    rng = random.Random(cfg.seed)
    world = _World(rng)
    pool_specs: list[tuple[str, str, str, str, float]] = []
    queries: list[Listing] = []

    for qi in range(cfg.n_queries):
        spec = world.sample_tuple()
        brand, model, variant, condition, mult = spec
        queries.append(_make_listing(f"q{qi:04d}", world, brand, model, variant,
                                     condition, mult, cfg))
        pool_specs.extend([spec] * cfg.dups_per_query)

    for _ in range(cfg.n_distractors):
        pool_specs.append(world.sample_tuple())

    rng.shuffle(pool_specs)
    pool = [
        _make_listing(f"p{idx:05d}", world, brand, model, variant, condition, mult, cfg)
        for idx, (brand, model, variant, condition, mult) in enumerate(pool_specs)
    ]
    return Marketplace(pool=pool, queries=queries, as_of=BASE_DATE)


@dataclass
class DatagenCorpus:
    pool: list[Listing]
    queries: list[Listing]
    homogeneous_ids: frozenset[str]
    backward_invalid_ids: frozenset[str]
    as_of: datetime

    def pool_by_id(self) -> dict[str, Listing]:
        return {l.id: l for l in self.pool}


def generate_datagen_corpus(seed: int = 11, n_queries: int = 50, k: int = 10,
                            frac_homogeneous: float = 0.1,
                            frac_invalid: float = 0.1) -> DatagenCorpus:
    """Corpus with known-bad cases for rejection-sampling tests.

    Homogeneous queries are copy-paste spam with at least k identical-text
    pool copies, so their entire retrieved set is near-duplicate. Backward-
    invalid queries are parts-lot items anchored to same-brand/model families:
    retrieval finds plausible references but none matches the query, so a
    text-matching backward stage finds no golden subset. Everything else is a
    normal query with a handful of true duplicates.
    """
    cfg = SynthConfig(seed=seed, n_queries=0, n_distractors=0)
    rng = random.Random(seed)
    world = _World(rng)

    n_homog = round(frac_homogeneous * n_queries)
    n_invalid = round(frac_invalid * n_queries)
    homogeneous_ids = set()
    invalid_ids = set()
    queries: list[Listing] = []
    pool_specs: list[tuple[str, str, str, str, float]] = []

    spam_listings: list[Listing] = []

    def spam_listing(listing_id: str, group: int, price: float) -> Listing:
        # copy-paste spam family: identical text across many accounts, far
        # from every templated tuple so it only floods its own neighbourhood
        return Listing(
            id=listing_id,
            title=f"Reseller bundle lot {group}",
            description=f"reseller stock bundle {group}, identical units, copy-paste listing",
            condition="new in box",
            category="misc",
            price=price,
            listed_at=BASE_DATE - timedelta(days=rng.randint(0, cfg.max_age_days)),
            click_count=rng.randint(50, 500),
        )

    for qi in range(n_queries):
        qid = f"q{qi:04d}"
        if len(homogeneous_ids) < n_homog and qi % 10 == 0:
            homogeneous_ids.add(qid)
            base = round(rng.uniform(30.0, 300.0), 2)
            queries.append(spam_listing(qid, qi, base))
            for copy_i in range(k + 2):
                noisy = round(base * (1.0 + rng.uniform(-cfg.price_noise, cfg.price_noise)), 2)
                spam_listings.append(spam_listing(f"s{qi:03d}_{copy_i:02d}", qi, noisy))
        elif len(invalid_ids) < n_invalid and qi % 10 == 1:
            invalid_ids.add(qid)
            base = round(rng.uniform(20.0, 200.0), 2)
            # anchored to several same-brand/model families so retrieval finds
            # plausible, textually diverse references that match nothing exactly
            brand = rng.choice(BRANDS)
            model = rng.choice(MODELS)
            made = 0
            for _ in range(100):
                if made == 3:
                    break
                variant = rng.choice(VARIANTS)
                condition, mult = rng.choice(CONDITIONS)
                key = (brand, model, variant, condition)
                if key in world._used:
                    continue
                world._used.add(key)
                pool_specs.extend([(brand, model, variant, condition, mult)] * 3)
                made += 1
            queries.append(Listing(
                id=qid,
                title=f"{brand} {model} parts",
                description=(f"{brand} {model} spares kit {qi}, untested, "
                             "board and shell only"),
                condition="for parts",
                category="misc",
                price=base,
                listed_at=BASE_DATE - timedelta(days=rng.randint(0, cfg.max_age_days)),
                click_count=rng.randint(50, 500),
            ))
        else:
            spec = world.sample_tuple(unique=True)
            brand, model, variant, condition, mult = spec
            queries.append(_make_listing(qid, world, brand, model, variant, condition, mult, cfg))
            pool_specs.extend([spec] * 3)

    # distractors so every retrieval can fill k slots
    for _ in range(max(4 * k, 60)):
        pool_specs.append(world.sample_tuple(unique=True))

    rng.shuffle(pool_specs)
    pool = [
        _make_listing(f"p{idx:05d}", world, brand, model, variant, condition, mult, cfg)
        for idx, (brand, model, variant, condition, mult) in enumerate(pool_specs)
    ]
    pool.extend(spam_listings)
    return DatagenCorpus(
        pool=pool,
        queries=queries,
        homogeneous_ids=frozenset(homogeneous_ids),
        backward_invalid_ids=frozenset(invalid_ids),
        as_of=BASE_DATE,
    )
