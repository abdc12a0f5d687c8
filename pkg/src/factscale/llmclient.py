"""Clients for the three remote model roles: generator, embedder, judge.

All roles speak OpenAI-compatible HTTP (/chat/completions, /completions,
/embeddings). Every request/response pair is recorded in the content-addressed
cache before the result is returned, so re-running an unchanged batch makes
zero network calls.
"""

from __future__ import annotations

import os
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Sequence

import httpx

from .errors import (
    AuthError,
    CapabilityError,
    ConfigError,
    ContextOverflowError,
    PreconditionError,
    ResponseParseError,
    TransportError,
)
from .store import ResponseCache

JUDGE_QUESTION = (
    "Does the prediction refer to the same real-world entity as the gold answer? "
    "Respond only with 0 (no) or 1 (yes)."
)


@dataclass(frozen=True)
class SamplingParams:
    """Decoding parameters serialized verbatim into request bodies."""

    temperature: float = 0.7
    top_p: float = 0.8
    max_tokens: int = 4096
    stop_sequences: tuple[str, ...] = ()
    seed: int | None = None

    def __post_init__(self):
        if self.temperature < 0:
            raise PreconditionError("temperature must be >= 0")
        if not (0 < self.top_p <= 1):
            raise PreconditionError("top_p must be in (0, 1]")
        if self.max_tokens < 1:
            raise PreconditionError("max_tokens must be positive")

    def to_dict(self) -> dict:
        out = {
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_tokens": self.max_tokens,
        }
        if self.stop_sequences:
            out["stop"] = list(self.stop_sequences)
        if self.seed is not None:
            out["seed"] = self.seed
        return out

    def replace(self, **kwargs) -> "SamplingParams":
        current = {
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_tokens": self.max_tokens,
            "stop_sequences": self.stop_sequences,
            "seed": self.seed,
        }
        current.update(kwargs)
        return SamplingParams(**current)


@dataclass(frozen=True)
class GenerationResult:
    """One completion plus token accounting."""

    text: str
    finish_reason: str  # stop | length | other
    completion_tokens: int
    model_id: str
    cached: bool = False
    retries: int = 0


@dataclass(frozen=True)
class EndpointConfig:
    """One named remote endpoint: base URL, model, credentials, capabilities."""

    name: str
    base_url: str
    model: str
    api_key_env: str | None = None
    supports_chat: bool = True
    supports_completions: bool = False
    supports_embeddings: bool = False
    max_in_flight: int = 8
    max_attempts: int = 3
    backoff_base: float = 1.0
    timeout: float = 120.0

    def api_key(self) -> str | None:
        if self.api_key_env is None:
            return None
        key = os.environ.get(self.api_key_env)
        if not key:
            raise ConfigError(
                f"endpoint {self.name!r} needs API key from unset env var {self.api_key_env!r}"
            )
        return key


def render_judge_prompt(
    predicted: str, gold_answers: Sequence[str], question: str | None = None
) -> str:
    """The entity-equivalence judge prompt.

    Gold answers are rendered as a bracketed quoted list, the prediction on
    its own line, then the fixed yes/no instruction. ``question`` is an
    opt-in extension prepended as its own line; the default prompt carries no
    question text.
    """
    lines = []
    if question is not None:
        lines.append(f"question: {question}")
    lines.append(f"gold: {list(gold_answers)!r}")
    lines.append(f"predicted: {predicted}")
    return "\n".join(lines) + f"\n\n{JUDGE_QUESTION}"


class LlmClient:
    """HTTP client for one endpoint, with retry, caching and an in-flight bound.

    Thread-safe: batch drivers share one client across workers; concurrency
    is capped by the endpoint's ``max_in_flight``.
    """

    def __init__(
        self,
        endpoint: EndpointConfig,
        cache: ResponseCache | None = None,
        transport: httpx.BaseTransport | None = None,
    ):
        self.endpoint = endpoint
        self.cache = cache
        headers = {}
        key = endpoint.api_key()
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._http = httpx.Client(
            base_url=endpoint.base_url.rstrip("/"),
            headers=headers,
            timeout=endpoint.timeout,
            transport=transport,
        )
        self._slots = threading.BoundedSemaphore(endpoint.max_in_flight)
        self._stats_lock = threading.Lock()
        self.stats = {"requests": 0, "cache_hits": 0, "retries": 0}

    def close(self) -> None:
        self._http.close()

    def __enter__(self) -> "LlmClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- transport ---------------------------------------------------------

    def _bump(self, name: str, by: int = 1) -> None:
        with self._stats_lock:
            self.stats[name] += by

    def _classify_response(self, resp: httpx.Response) -> None:
        if resp.status_code < 400:
            return
        detail = ""
        code = ""
        try:
            err = resp.json().get("error", {})
            detail = err.get("message", "")
            code = err.get("code", "") or err.get("type", "")
        except Exception:
            detail = resp.text[:200]
        msg = f"HTTP {resp.status_code} from {self.endpoint.name}: {detail}"
        if resp.status_code in (401, 403):
            raise AuthError(msg, status=resp.status_code)
        if resp.status_code == 429:
            raise TransportError(msg, status=429, retryable=True)
        if resp.status_code >= 500:
            raise TransportError(msg, status=resp.status_code, retryable=True)
        if code == "context_length_exceeded" or "context length" in detail.lower():
            raise ContextOverflowError(msg, status=resp.status_code)
        raise TransportError(msg, status=resp.status_code, retryable=False)

    def _post_with_retry(self, path: str, body: dict) -> tuple[dict, int]:
        """POST once per attempt with exponential backoff; returns (json, retries)."""
        attempts = max(1, self.endpoint.max_attempts)
        last: Exception | None = None
        for attempt in range(attempts):
            if attempt > 0:
                self._bump("retries")
                delay = self.endpoint.backoff_base * (2 ** (attempt - 1))
                time.sleep(delay + random.uniform(0, delay * 0.1))
            try:
                self._bump("requests")
                with self._slots:
                    resp = self._http.post(path, json=body)
                self._classify_response(resp)
                try:
                    return resp.json(), attempt
                except ValueError as exc:
                    raise ResponseParseError(
                        f"non-JSON response from {self.endpoint.name}"
                    ) from exc
            except (httpx.TimeoutException, httpx.TransportError) as exc:
                last = TransportError(
                    f"transport failure talking to {self.endpoint.name}: {exc}", retryable=True
                )
            except TransportError as exc:
                if not exc.retryable:
                    raise
                last = exc
        assert last is not None
        raise last

    def _cached_post(
        self, path: str, body: dict, role: str, salt: str | None
    ) -> tuple[dict, bool, int]:
        """Cache-through POST: returns (response_json, was_cached, retries)."""
        if self.cache is None:
            data, retries = self._post_with_retry(path, body)
            return data, False, retries
        key = ResponseCache.key(role, self.endpoint.model, body, salt)
        hit = self.cache.get(key)
        if hit is not None:
            self._bump("cache_hits")
            return hit, True, 0
        data, retries = self._post_with_retry(path, body)
        self.cache.put(key, role, self.endpoint.model, body, data)
        return data, False, retries

    # -- generation ----------------------------------------------------------

    @staticmethod
    def _finish_reason(raw: str | None) -> str:
        if raw in ("stop", "length"):
            return raw
        return "other"

    def _parse_completion(
        self, data: dict, text_key: str, cached: bool, retries: int
    ) -> GenerationResult:
        try:
            choice = data["choices"][0]
            if text_key == "message":
                text = choice["message"]["content"]
            else:
                text = choice["text"]
            usage = data.get("usage", {})
            return GenerationResult(
                text=text or "",
                finish_reason=self._finish_reason(choice.get("finish_reason")),
                completion_tokens=int(usage.get("completion_tokens", 0)),
                model_id=data.get("model", self.endpoint.model),
                cached=cached,
                retries=retries,
            )
        except (KeyError, IndexError, TypeError) as exc:
            raise ResponseParseError(
                f"malformed completion body from {self.endpoint.name}: {exc!r}"
            ) from exc

    def generate(
        self,
        prompt_or_messages: str | list[dict],
        params: SamplingParams,
        cache_salt: str | None = None,
    ) -> GenerationResult:
        """Run one generation; raw-text prompts are wrapped as a single user
        message on chat endpoints."""
        if isinstance(prompt_or_messages, str):
            if not prompt_or_messages:
                raise PreconditionError("prompt must be non-empty")
            if self.endpoint.supports_chat:
                messages = [{"role": "user", "content": prompt_or_messages}]
                return self._chat(messages, params, cache_salt)
            if self.endpoint.supports_completions:
                return self.complete(prompt_or_messages, params, cache_salt)
            raise CapabilityError(f"endpoint {self.endpoint.name!r} supports no generation API")
        if not prompt_or_messages or not any(m.get("content") for m in prompt_or_messages):
            raise PreconditionError("messages must be non-empty")
        if not self.endpoint.supports_chat:
            raise CapabilityError(f"endpoint {self.endpoint.name!r} does not support chat")
        return self._chat(prompt_or_messages, params, cache_salt)

    def _chat(
        self, messages: list[dict], params: SamplingParams, salt: str | None
    ) -> GenerationResult:
        body = {"model": self.endpoint.model, "messages": messages, **params.to_dict()}
        data, cached, retries = self._cached_post("/chat/completions", body, "chat", salt)
        return self._parse_completion(data, "message", cached, retries)

    def complete(
        self, prompt: str, params: SamplingParams, cache_salt: str | None = None
    ) -> GenerationResult:
        """Raw text completion; required for decoding-time continuation."""
        if not prompt:
            raise PreconditionError("prompt must be non-empty")
        if not self.endpoint.supports_completions:
            raise CapabilityError(
                f"endpoint {self.endpoint.name!r} does not support raw completions"
            )
        body = {"model": self.endpoint.model, "prompt": prompt, **params.to_dict()}
        data, cached, retries = self._cached_post("/completions", body, "completions", salt=cache_salt)
        return self._parse_completion(data, "text", cached, retries)

    # -- embeddings ------------------------------------------------------------

    def embed(self, texts: Sequence[str], batch_size: int = 128) -> list[list[float]]:
        """One vector per input text, order-aligned, all of equal dimension.

        Each text is cached individually (keyed by model + text) so shared
        gold answers are embedded once per run family.
        """
        if not texts:
            raise PreconditionError("texts must be non-empty")
        if any(not t for t in texts):
            raise PreconditionError("every text must be non-empty")
        if not self.endpoint.supports_embeddings:
            raise CapabilityError(
                f"endpoint {self.endpoint.name!r} does not support embeddings"
            )
        vectors: dict[str, list[float]] = {}
        if self.cache is not None:
            for text in set(texts):
                key = ResponseCache.key("embeddings", self.endpoint.model, {"input": text})
                hit = self.cache.get(key)
                if hit is not None:
                    self._bump("cache_hits")
                    vectors[text] = hit["embedding"]
        missing = [t for t in dict.fromkeys(texts) if t not in vectors]
        for start in range(0, len(missing), batch_size):
            chunk = missing[start : start + batch_size]
            body = {"model": self.endpoint.model, "input": chunk}
            data, _ = self._post_with_retry("/embeddings", body)
            try:
                rows = sorted(data["data"], key=lambda r: r["index"])
                embeddings = [row["embedding"] for row in rows]
            except (KeyError, TypeError) as exc:
                raise ResponseParseError(
                    f"malformed embeddings body from {self.endpoint.name}"
                ) from exc
            if len(embeddings) != len(chunk):
                raise ResponseParseError("embeddings response count does not match input")
            for text, vec in zip(chunk, embeddings):
                vectors[text] = vec
                if self.cache is not None:
                    key = ResponseCache.key("embeddings", self.endpoint.model, {"input": text})
                    self.cache.put(
                        key, "embeddings", self.endpoint.model, {"input": text},
                        {"embedding": vec},
                    )
        out = [vectors[t] for t in texts]
        dims = {len(v) for v in out}
        if len(dims) > 1:
            raise ResponseParseError(f"embedding dimensions differ: {sorted(dims)}")
        return out

    # -- judging -----------------------------------------------------------------

    def judge_equivalence(
        self,
        predicted: str,
        gold_answers: Sequence[str],
        question: str | None = None,
    ) -> str:
        """Ask whether prediction and gold denote the same entity.

        Returns "yes", "no", or — after one re-ask with the identical prompt
        still fails to parse — "unparseable".
        """
        if not predicted:
            raise PreconditionError("predicted answer must be non-empty")
        if not gold_answers:
            raise PreconditionError("gold_answers must be non-empty")
        prompt = render_judge_prompt(predicted, gold_answers, question)
        params = SamplingParams(temperature=0.0, top_p=1.0, max_tokens=8)
        for salt in (None, "judge-retry"):
            reply = self.generate(prompt, params, cache_salt=salt).text.strip()
            if reply == "1":
                return "yes"
            if reply == "0":
                return "no"
        return "unparseable"
