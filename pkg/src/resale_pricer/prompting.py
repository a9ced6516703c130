"""Prompt assembly for the three prompt families, and strict output parsing.

Prompt construction is pure: identical inputs produce byte-identical
prompts, so fixtures can be frozen as golden files. Reference products are
numbered B1..Bk in retrieval-score order and that labelling is the shared
vocabulary between prompts, parsed outputs, and the recall reward.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterable, Mapping

from .catalog import Listing
from .errors import ParseError, ValidationError
from .vecindex import RetrievalSet

MODE_PRICE_ONLY = "price-only"
MODE_RATIONALE = "rationale-and-price"
MODE_BACKWARD = "backward"
MODE_FORWARD = "forward"

PRICE_TAG_RE = re.compile(r"<price>(.*?)</price>", re.DOTALL)
REASON_TAG_RE = re.compile(r"<reason>(.*?)</reason>", re.DOTALL)
REFS_TAG_RE = re.compile(r"<refs>(.*?)</refs>", re.DOTALL)
VALID_TAG_RE = re.compile(r"<valid>(.*?)</valid>", re.DOTALL | re.IGNORECASE)
SUBSET_TAG_RE = re.compile(r"<subset>(.*?)</subset>", re.DOTALL)
LABEL_RE = re.compile(r"\bB\d+\b")
REF_LINE_RE = re.compile(r"^Product (B\d+): (.*) Price: ([0-9][0-9.,]*)\.$")

_CURRENCY_CHARS = "$€£¥￥,"


@dataclass(frozen=True)
class PromptBundle:
    system: str
    user: str
    mode: str

    def messages(self) -> list[dict[str, str]]:
        return [
            {"role": "system", "content": self.system},
            {"role": "user", "content": self.user},
        ]


@dataclass(frozen=True)
class ParsedPricing:
    price: float
    rationale: str | None
    cited_ref_ids: frozenset[str]


@dataclass(frozen=True)
class ParsedBackward:
    valid: bool
    golden_ids: frozenset[str]
    explanation: str

    def __post_init__(self):
        if self.valid != bool(self.golden_ids):
            raise ValidationError("valid flag must match non-emptiness of golden_ids")


@dataclass(frozen=True)
class PromptTemplates:
    """Template text for every prompt family. Override any entry from files on disk."""

    pricing_task: str = (
        "Task: Predict a price for Product A based on a detailed analysis of a given set of "
        "similar products (Set B). But be mindful that some products may not be true "
        "comparables. Your final price suggestion should be derived from a careful analysis "
        "of primary pricing factors, such as brand, model, condition, specifications, and "
        "version."
    )
    system_price_only: str = (
        "You are a specialist in pricing second-hand products. Please provide the price "
        "suggestion for the listing product A, formatted as <price></price>."
    )
    system_rationale: str = (
        "You are a specialist in pricing second-hand products. Please provide your pricing "
        "rationale and the final predicted price. Wrap the rationale in <reason></reason> "
        "and the price in <price></price>. If specific reference products informed your "
        "estimate, list their labels inside <refs></refs>, comma-separated."
    )
    system_backward: str = (
        "You are a specialist in pricing second-hand products. Answer with "
        "<valid>true</valid> or <valid>false</valid>; when valid, list the matching "
        "reference labels inside <subset></subset>, comma-separated (e.g. "
        "<subset>B1,B5</subset>). Add a brief explanation of your decision."
    )
    system_forward: str = (
        "You are a specialist in pricing second-hand products. Provide a rigorous pricing "
        "rationale wrapped in <reason></reason>, the reference labels you relied on inside "
        "<refs></refs>, and the final price in <price></price>."
    )
    backward_task: str = (
        "Task: For a given product A and its price, identify a subset from the retrieved "
        "product set B that are highly consistent in key attributes such as brand, model, "
        "and condition, and fall within a similar price range. If no such subset can be "
        "found, return False with an explanation. Otherwise, provide the analysis and the "
        "resulting subset."
    )
    forward_task: str = (
        "Task: Based on the provided product data, conduct a pricing analysis for Product A. "
        "This process requires a deep-dive into a subset of similar products identified "
        "through backward reasoning, with a focus on key attributes such as price, brand, "
        "specifications, and model. Ensure rigorous reasoning logic, outputting the pricing "
        "rationale for Product A alongside a suggested price."
    )

    _FILE_FIELDS = (
        "pricing_task", "system_price_only", "system_rationale", "system_backward",
        "system_forward", "backward_task", "forward_task",
    )

    @classmethod
    def from_dir(cls, path) -> "PromptTemplates":
        """Load overrides from `<field>.txt` files; missing files keep defaults."""
        from pathlib import Path

        base = Path(path)
        overrides = {}
        for name in cls._FILE_FIELDS:
            f = base / f"{name}.txt"
            if f.exists():
                overrides[name] = f.read_text(encoding="utf-8").strip()
        return cls(**overrides)


DEFAULT_TEMPLATES = PromptTemplates()


# --- assembly -------------------------------------------------------------------

def _sanitize(text: str) -> str:
    """Single-line form used inside prompts (keeps ref lines machine-parseable)."""
    return " ".join(text.split())


def describe(listing: Listing) -> str:
    """Canonical one-line product block used for Product A and every reference."""
    return _sanitize(f"{listing.title}, {listing.description}, {listing.condition}")


def render_price(price: float) -> str:
    """Render a price with at most two fraction digits and no trailing zeros."""
    if price <= 0:
        raise ValidationError("price must be positive")
    text = f"{price:.2f}".rstrip("0").rstrip(".")
    return text


def labels_for(refs: RetrievalSet) -> list[str]:
    return [f"B{i}" for i in range(1, len(refs.hits) + 1)]


def label_map(refs: RetrievalSet) -> dict[str, str]:
    """Bijection between labels and listing ids, in retrieval rank order."""
    return {f"B{i}": hit.listing_id for i, hit in enumerate(refs.hits, start=1)}


def reference_block(refs: RetrievalSet, listings_by_id: Mapping[str, Listing]) -> str:
    """Numbered reference lines: `Product Bi: <text> Price: <p>.`"""
    lines = []
    for i, hit in enumerate(refs.hits, start=1):
        listing = listings_by_id.get(hit.listing_id)
        if listing is None:
            raise ValidationError(f"retrieved id {hit.listing_id!r} not found in pool")
        lines.append(f"Product B{i}: {describe(listing)} Price: {render_price(hit.price)}.")
    return "\n".join(lines)


def assemble_pricing_prompt(query: Listing, refs: RetrievalSet,
                            mode: str, listings_by_id: Mapping[str, Listing],
                            templates: PromptTemplates = DEFAULT_TEMPLATES) -> PromptBundle:
    """Pricing prompt: similarity criteria, query block, numbered references.

    An empty reference set is only legal in the no-retrieval ablation, where
    the reference section carries an explicit `(none)` marker.
    """
    if mode not in (MODE_PRICE_ONLY, MODE_RATIONALE):
        raise ValidationError(f"unsupported pricing mode {mode!r}")
    if refs.hits:
        ref_section = reference_block(refs, listings_by_id)
    else:
        ref_section = "(none)"
    user = (
        f"{templates.pricing_task}\n"
        "Input:\n"
        f"Product A: {describe(query)}\n"
        "Retrieved Products:\n"
        f"{ref_section}"
    )
    system = templates.system_price_only if mode == MODE_PRICE_ONLY else templates.system_rationale
    return PromptBundle(system=system, user=user, mode=mode)


def assemble_backward_prompt(query: Listing, refs: RetrievalSet, true_price: float,
                             listings_by_id: Mapping[str, Listing],
                             templates: PromptTemplates = DEFAULT_TEMPLATES) -> PromptBundle:
    if not refs.hits:
        raise ValidationError("backward reasoning requires a non-empty retrieval set")
    user = (
        f"{templates.backward_task}\n"
        "Input:\n"
        f"Product A: {describe(query)}\n"
        "Retrieved Products:\n"
        f"{reference_block(refs, listings_by_id)}\n"
        f"Price of Product A: {render_price(true_price)}"
    )
    return PromptBundle(system=templates.system_backward, user=user, mode=MODE_BACKWARD)


def assemble_forward_prompt(query: Listing, refs: RetrievalSet, golden_ids: Iterable[str],
                            true_price: float, backward_cot: str,
                            listings_by_id: Mapping[str, Listing],
                            templates: PromptTemplates = DEFAULT_TEMPLATES) -> PromptBundle:
    """Forward prompt with all four context elements; golden set must be non-empty."""
    golden = sorted(set(golden_ids), key=_label_sort_key)
    if not golden:
        raise ValidationError("forward reasoning requires a non-empty golden subset")
    known = set(labels_for(refs))
    unknown = [g for g in golden if g not in known]
    if unknown:
        raise ValidationError(f"golden labels not present in refs: {', '.join(unknown)}")
    backward_block = _sanitize(backward_cot) if backward_cot.strip() else "(no analysis text)"
    user = (
        f"{templates.forward_task}\n"
        "Input:\n"
        f"Product A: {describe(query)}\n"
        "Retrieved Products:\n"
        f"{reference_block(refs, listings_by_id)}\n"
        f"Price of Product A: {render_price(true_price)}\n"
        f"Backward Reasoning: {backward_block} Golden subset: {', '.join(golden)}."
    )
    return PromptBundle(system=templates.system_forward, user=user, mode=MODE_FORWARD)


def _label_sort_key(label: str) -> tuple[int, str]:
    m = re.fullmatch(r"B(\d+)", label)
    return (int(m.group(1)), label) if m else (1 << 30, label)


# --- parsing --------------------------------------------------------------------

def parse_price(text: str) -> float:
    """Extract the price from the unique `<price>` tag.

    Accepts integers and decimals; strips whitespace, commas, and common
    currency glyphs. Zero tags, multiple tags, or non-positive content are
    parse errors.
    """
    matches = PRICE_TAG_RE.findall(text)
    if len(matches) != 1:
        raise ParseError(f"expected exactly one <price> tag, found {len(matches)}")
    raw = matches[0].strip()
    cleaned = "".join(ch for ch in raw if ch not in _CURRENCY_CHARS).strip()
    try:
        value = float(cleaned)
    except ValueError:
        raise ParseError(f"price content is not numeric: {raw!r}") from None
    if not (math.isfinite(value) and value > 0):
        raise ParseError(f"price must be positive and finite, got {raw!r}")
    return value


def _split_labels(raw: str) -> list[str]:
    return [part.strip() for part in re.split(r"[,\s]+", raw) if part.strip()]


def parse_golden_subset(text: str, known_labels: Iterable[str]) -> ParsedBackward:
    """Parse a backward-reasoning answer into a validity flag and label set.

    `valid=false` (or an empty subset) yields an empty golden set; labels that
    were never in the prompt are a parse error rather than silently dropped —
    they would corrupt the training data.
    """
    known = set(known_labels)
    valid_match = VALID_TAG_RE.search(text)
    subset_match = SUBSET_TAG_RE.search(text)
    if valid_match is None and subset_match is None:
        raise ParseError("no <valid> or <subset> tag in backward answer")

    explanation = SUBSET_TAG_RE.sub("", VALID_TAG_RE.sub("", text)).strip()

    if valid_match is not None:
        flag_text = valid_match.group(1).strip().lower()
        if flag_text not in ("true", "false"):
            raise ParseError(f"<valid> must be true or false, got {flag_text!r}")
        if flag_text == "false":
            return ParsedBackward(valid=False, golden_ids=frozenset(), explanation=explanation)

    labels = _split_labels(subset_match.group(1)) if subset_match else []
    unknown = sorted(set(labels) - known)
    if unknown:
        raise ParseError(f"unknown label {', '.join(unknown)}")
    golden = frozenset(labels)
    if not golden:
        return ParsedBackward(valid=False, golden_ids=frozenset(), explanation=explanation)
    return ParsedBackward(valid=True, golden_ids=golden, explanation=explanation)


def parse_refs(rationale: str, known_labels: Iterable[str]) -> frozenset[str]:
    """Labels cited by a rationale: `<refs>` tag first, label scan as fallback."""
    known = set(known_labels)
    tag = REFS_TAG_RE.search(rationale)
    if tag is not None:
        return frozenset(label for label in _split_labels(tag.group(1)) if label in known)
    return frozenset(label for label in LABEL_RE.findall(rationale) if label in known)


def parse_pricing_answer(text: str, known_labels: Iterable[str], mode: str) -> ParsedPricing:
    """Parse a pricing answer; the rationale is required in rationale mode."""
    price = parse_price(text)
    rationale = None
    cited: frozenset[str] = frozenset()
    reason_match = REASON_TAG_RE.search(text)
    if mode == MODE_RATIONALE:
        if reason_match is None:
            raise ParseError("missing <reason> tag in rationale-and-price answer")
        rationale = reason_match.group(1).strip()
        cited = parse_refs(text, known_labels)
    elif reason_match is not None:
        rationale = reason_match.group(1).strip()
        cited = parse_refs(text, known_labels)
    return ParsedPricing(price=price, rationale=rationale, cited_ref_ids=cited)


def parse_reference_lines(prompt_user: str) -> list[tuple[str, str, float]]:
    """Recover (label, text, price) triples from a prompt's reference block.

    Inverse of `reference_block`; used by mock models and audit tooling.
    """
    out = []
    for line in prompt_user.splitlines():
        m = REF_LINE_RE.match(line.strip())
        if m:
            out.append((m.group(1), m.group(2), float(m.group(3).replace(",", ""))))
    return out


def parse_query_block(prompt_user: str) -> str:
    for line in prompt_user.splitlines():
        if line.startswith("Product A: "):
            return line[len("Product A: "):]
    raise ParseError("prompt has no 'Product A:' block")


def parse_true_price(prompt_user: str) -> float:
    for line in prompt_user.splitlines():
        if line.startswith("Price of Product A: "):
            return float(line[len("Price of Product A: "):].strip())
    raise ParseError("prompt has no 'Price of Product A:' line")
