"""Deterministic in-process completion backends.

These let every pipeline stage — including entropy gating and PR sweeps —
run end-to-end with zero network access. The median pricer is the workhorse:
it answers every prompt family by reading the reference block back out of
the prompt, so its answers are a pure function of the prompt text.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass
from typing import Callable, Sequence

from .datagen import jaro
from .errors import ValidationError
from .llm_gateway import DecodingParams, Generation, synthesize_generation
from .prompting import (
    MODE_BACKWARD,
    MODE_FORWARD,
    PromptBundle,
    parse_query_block,
    parse_reference_lines,
    parse_true_price,
    render_price,
)


def _normalize(text: str) -> str:
    return " ".join(text.lower().split())


@dataclass
class MedianPricerModel:
    """Prices by the median of the references matching the query text.

    The per-digit distribution of the emitted price widens monotonically with
    the relative price dispersion (coefficient of variation) of the retrieved
    set: chance = 0.5 + 0.5 / (1 + dispersion_to_entropy * cv), so zero
    dispersion is answered with full confidence and high dispersion tends to
    the maximum-entropy answer.
    """

    dispersion_to_entropy: float = 1.0
    match_threshold: float = 0.9
    fallback_price: float = 1.0
    model_id: str = "mock-median-pricer"

    def golden_labels(self, query_text: str, refs: Sequence[tuple[str, str, float]]) -> list[str]:
        """References judged identical to the query: exact text match, then Jaro."""
        want = _normalize(query_text)
        exact = [label for label, text, _ in refs if _normalize(text) == want]
        if exact:
            return exact
        return [label for label, text, _ in refs
                if jaro(_normalize(text), want) >= self.match_threshold]

    def _price_chance(self, prices: Sequence[float]) -> float:
        if len(prices) < 2:
            return 1.0
        mean = statistics.fmean(prices)
        if mean == 0:
            return 1.0
        cv = statistics.pstdev(prices) / mean
        return 0.5 + 0.5 / (1.0 + self.dispersion_to_entropy * cv)

    def complete(self, prompt: PromptBundle, params: DecodingParams) -> Generation:
        refs = parse_reference_lines(prompt.user)
        query_text = parse_query_block(prompt.user)
        golden = self.golden_labels(query_text, refs)

        if prompt.mode == MODE_BACKWARD:
            if golden:
                text = (f"<valid>true</valid><subset>{','.join(golden)}</subset> "
                        "These references match the query in brand, model, and condition.")
            else:
                text = "<valid>false</valid> No retrieved product matches the key attributes."
            return synthesize_generation(text, self.model_id)

        if prompt.mode == MODE_FORWARD:
            true_price = parse_true_price(prompt.user)
            labels = golden or [label for label, _, _ in refs]
            text = (
                f"<reason>Anchoring on {', '.join(labels)}, the comparable units support "
                f"the listed price level.</reason>"
                f"<refs>{','.join(labels)}</refs>"
                f"<price>{render_price(true_price)}</price>"
            )
            return synthesize_generation(text, self.model_id)

        # pricing modes
        if not refs:
            text = self._render_answer(self.fallback_price, [], prompt.mode)
            return synthesize_generation(text, self.model_id, price_token_chance=0.5)
        anchor = golden or [label for label, _, _ in refs]
        by_label = {label: price for label, _, price in refs}
        price = statistics.median(by_label[label] for label in anchor)
        chance = self._price_chance([price for _, _, price in refs])
        text = self._render_answer(price, anchor, prompt.mode)
        return synthesize_generation(
            text, self.model_id,
            price_token_chance=None if chance >= 1.0 else chance)

    def _render_answer(self, price: float, labels: list[str], mode: str) -> str:
        rendered = render_price(price)
        if mode == "price-only":
            return f"<price>{rendered}</price>"
        if labels:
            reason = (f"<reason>Comparable listings {', '.join(labels)} cluster around "
                      f"{rendered}.</reason><refs>{','.join(labels)}</refs>")
        else:
            reason = "<reason>No market references were retrieved; estimate is uninformed.</reason>"
        return f"{reason}<price>{rendered}</price>"


class ScriptedModel:
    """Plays back canned responses.

    `script` is either a sequence of response strings (consumed in order; not
    thread-safe) or a callable of the prompt bundle returning a string or a
    (string, price_token_chance) pair for entropy control.
    """

    def __init__(self, script: Sequence[str] | Callable[[PromptBundle], str | tuple[str, float]],
                 model_id: str = "mock-scripted"):
        self.model_id = model_id
        self._callable = script if callable(script) else None
        self._queue = None if callable(script) else list(script)

    def complete(self, prompt: PromptBundle, params: DecodingParams) -> Generation:
        if self._callable is not None:
            result = self._callable(prompt)
        else:
            if not self._queue:
                raise ValidationError("scripted model ran out of responses")
            result = self._queue.pop(0)
        if isinstance(result, tuple):
            text, chance = result
            return synthesize_generation(text, self.model_id, price_token_chance=chance)
        return synthesize_generation(result, self.model_id)


class EchoModel:
    """Returns the user prompt verbatim; handy for exercising parse failures."""

    def __init__(self, model_id: str = "mock-echo"):
        self.model_id = model_id

    def complete(self, prompt: PromptBundle, params: DecodingParams) -> Generation:
        return synthesize_generation(prompt.user, self.model_id)
