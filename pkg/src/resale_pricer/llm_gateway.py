"""Uniform contract to chat-completion endpoints that expose token logprobs.

A backend is anything with `complete(bundle, params) -> Generation`; the HTTP
endpoint here talks the OpenAI-compatible chat-completions JSON (the de facto
interface for both open and closed models), and `mocks.py` provides
deterministic in-process backends for tests and offline evaluation.
"""

from __future__ import annotations

import logging
import math
import os
import re
import time
from dataclasses import dataclass
from typing import Protocol

from .errors import CapabilityError, TransportError, ValidationError
from .prompting import PromptBundle

logger = logging.getLogger(__name__)

_PROB_SUM_TOLERANCE = 1e-9


@dataclass(frozen=True)
class DecodingParams:
    """Decoding defaults: greedy, long budget, top-20 alternatives per token."""

    temperature: float = 0.0
    max_tokens: int = 8192
    top_logprobs: int = 20

    def __post_init__(self):
        if self.temperature < 0:
            raise ValidationError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValidationError("max_tokens must be >= 1")
        if self.top_logprobs < 1:
            raise ValidationError("top_logprobs must be >= 1")


@dataclass(frozen=True)
class TokenLogprob:
    token: str
    start: int
    end: int
    logprob: float
    top_alternatives: tuple[tuple[str, float], ...]


@dataclass(frozen=True)
class Generation:
    """Model output with per-token top-k log-probability views."""

    text: str
    tokens: tuple[TokenLogprob, ...]
    model_id: str

    def __post_init__(self):
        cursor = 0
        for tok in self.tokens:
            if tok.start != cursor or tok.end < tok.start:
                raise ValidationError("token spans must be contiguous and non-overlapping")
            if self.text[tok.start:tok.end] != tok.token:
                raise ValidationError(f"token text mismatch at span {tok.start}:{tok.end}")
            if tok.logprob > 0:
                raise ValidationError("chosen logprob must be <= 0")
            if all(alt != tok.token for alt, _ in tok.top_alternatives):
                raise ValidationError(f"alternatives for {tok.token!r} must include the chosen token")
            total = sum(math.exp(lp) for _, lp in tok.top_alternatives)
            if total > 1.0 + _PROB_SUM_TOLERANCE:
                raise ValidationError(f"alternative probabilities sum to {total} > 1")
            cursor = tok.end
        if cursor != len(self.text):
            raise ValidationError("token spans must cover the full text")


class CompletionBackend(Protocol):
    def complete(self, prompt: PromptBundle, params: DecodingParams) -> Generation: ...


def complete(prompt: PromptBundle, params: DecodingParams,
             target: CompletionBackend) -> Generation:
    """Run one completion against an endpoint or mock."""
    if not prompt.user.strip():
        raise ValidationError("prompt must be non-empty")
    return target.complete(prompt, params)


# --- deterministic tokenizer used by in-process backends --------------------------

_TAG_OR_CHUNK_RE = re.compile(
    r"</?(?:price|reason|refs|valid|subset)>"  # markup tags stay whole
    r"|\d"                                       # digits one at a time
    r"|\s+"
    r"|[^\s\d<]+"
    r"|<"
)


def tokenize_for_mock(text: str) -> list[tuple[str, int, int]]:
    """Split text into contiguous (token, start, end) spans covering it exactly.

    Digits are single-character tokens so a generated price spans several
    tokens, mirroring how real tokenizers split numbers.
    """
    spans = []
    cursor = 0
    for m in _TAG_OR_CHUNK_RE.finditer(text):
        if m.start() != cursor:
            spans.append((text[cursor:m.start()], cursor, m.start()))
        spans.append((m.group(0), m.start(), m.end()))
        cursor = m.end()
    if cursor != len(text):
        spans.append((text[cursor:], cursor, len(text)))
    return spans


def synthesize_generation(text: str, model_id: str,
                          price_token_chance: float | None = None,
                          alt_digit: str = "9") -> Generation:
    """Build a Generation from raw text with deterministic distributions.

    Non-digit tokens are emitted with probability 1. When
    `price_token_chance` p < 1 is given, each digit token inside a
    `<price>` tag gets the binary distribution {p, 1-p}, so its entropy is
    the binary entropy of p.
    """
    spans = tokenize_for_mock(text)
    price_ranges = [(m.start(1), m.end(1)) for m in re.finditer(r"<price>(.*?)</price>", text, re.DOTALL)]

    def in_price(start: int, end: int) -> bool:
        return any(start < hi and end > lo for lo, hi in price_ranges)

    tokens = []
    for tok, start, end in spans:
        is_price_digit = tok.isdigit() and in_price(start, end)
        if is_price_digit and price_token_chance is not None and price_token_chance < 1.0:
            p = min(max(price_token_chance, 1e-9), 1.0 - 1e-9)
            alt = alt_digit if alt_digit != tok else ("0" if tok != "0" else "1")
            alternatives = ((tok, math.log(p)), (alt, math.log(1.0 - p)))
            logprob = math.log(p)
        else:
            alternatives = ((tok, 0.0),)
            logprob = 0.0
        tokens.append(TokenLogprob(token=tok, start=start, end=end,
                                   logprob=logprob, top_alternatives=alternatives))
    return Generation(text=text, tokens=tuple(tokens), model_id=model_id)


# --- HTTP endpoint -----------------------------------------------------------------


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model_id: str
    api_key_env: str = "LLM_API_KEY"
    timeout_s: float = 60.0
    max_attempts: int = 3
    backoff_s: float = 0.5
    max_concurrency: int = 4


class HttpChatEndpoint:
    """OpenAI-compatible chat-completions client with bounded retry.

    Retries (exponential backoff, max 3 attempts) apply only to transport
    failures and 5xx; anything else surfaces immediately. An endpoint that
    answers without logprobs raises CapabilityError so the pipeline can mark
    confidence unavailable instead of inventing entropies.
    """

    def __init__(self, config: EndpointConfig, transport=None):
        import httpx
        import threading

        self.config = config
        headers = {}
        api_key = os.environ.get(config.api_key_env)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = httpx.Client(base_url=config.base_url, timeout=config.timeout_s,
                                    headers=headers, transport=transport)
        self._semaphore = threading.Semaphore(config.max_concurrency)

    def complete(self, prompt: PromptBundle, params: DecodingParams) -> Generation:
        payload = {
            "model": self.config.model_id,
            "messages": prompt.messages(),
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
            "logprobs": True,
            "top_logprobs": params.top_logprobs,
        }
        data = self._post_with_retry(payload)
        return self._parse_response(data)

    def _post_with_retry(self, payload: dict) -> dict:
        import httpx

        last_error = "unknown"
        for attempt in range(1, self.config.max_attempts + 1):
            if attempt > 1:
                time.sleep(self.config.backoff_s * 2 ** (attempt - 2))
            try:
                with self._semaphore:
                    resp = self._client.post("/chat/completions", json=payload)
            except httpx.TransportError as exc:
                last_error = f"transport failure: {exc}"
                logger.warning("completion attempt %d failed: %s", attempt, last_error)
                continue
            if resp.status_code >= 500:
                last_error = f"server error {resp.status_code}"
                logger.warning("completion attempt %d failed: %s", attempt, last_error)
                continue
            if resp.status_code != 200:
                raise TransportError(f"endpoint returned {resp.status_code}: {resp.text[:200]}",
                                     attempts=attempt, retryable=False)
            return resp.json()
        raise TransportError(last_error, attempts=self.config.max_attempts, retryable=True)

    def _parse_response(self, data: dict) -> Generation:
        try:
            choice = data["choices"][0]
            text = choice["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise CapabilityError(f"malformed chat-completions response: {exc}") from exc
        logprobs = (choice.get("logprobs") or {}).get("content")
        if not logprobs:
            raise CapabilityError("endpoint returned no token logprobs", text=text)
        tokens = []
        cursor = 0
        for entry in logprobs:
            tok = entry["token"]
            end = cursor + len(tok)
            if text[cursor:end] != tok:
                raise ValidationError("endpoint tokens do not reconstruct the text")
            chosen_lp = min(float(entry["logprob"]), 0.0)
            alts = [(alt["token"], min(float(alt["logprob"]), 0.0))
                    for alt in entry.get("top_logprobs", [])]
            if all(t != tok for t, _ in alts):
                alts.append((tok, chosen_lp))
            tokens.append(TokenLogprob(token=tok, start=cursor, end=end,
                                       logprob=chosen_lp, top_alternatives=tuple(alts)))
            cursor = end
        if cursor != len(text):
            raise ValidationError("endpoint tokens do not cover the full text")
        return Generation(text=text, tokens=tuple(tokens),
                          model_id=data.get("model", self.config.model_id))
