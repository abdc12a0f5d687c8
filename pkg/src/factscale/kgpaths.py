"""Wikidata grounding: Freebase-to-Wikidata alignment, two-hop path
extraction over SPARQL, and linearization of paths for prompt injection.

Queries are built from fixed templates (placeholders ``$FREEBASE_ENTITY``,
``$SOURCE_ENTITY``, ``$TARGET_ENTITY``); the two-hop template resolves
English-preferred labels through the endpoint's label service. A one-hop
fallback query runs when no two-hop path exists; paths produced that way are
flagged in their metadata.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import httpx

from .errors import PreconditionError, ResponseParseError, TransportError

WD_ENTITY_PREFIX = "http://www.wikidata.org/entity/"

ALIGN_QUERY_TEMPLATE = (
    "SELECT ?wikientity \n"
    "WHERE\n"
    "{?wikientity wdt:P646 $FREEBASE_ENTITY}"
)

LABEL_SERVICE_CLAUSE = (
    'SERVICE wikibase:label { bd:serviceParam wikibase:language "[AUTO_LANGUAGE],mul,en". }'
)

TWO_HOP_QUERY_TEMPLATE = (
    "SELECT ?p1 ?p1Label ?o1 ?o1Label ?p2 ?p2Label \n"
    "WHERE\n"
    "{wd:$SOURCE_ENTITY ?p1  ?o1.\n"
    "?o1 ?p2 wd:$TARGET_ENTITY}\n"
    + LABEL_SERVICE_CLAUSE
)

ONE_HOP_QUERY_TEMPLATE = (
    "SELECT ?p1 ?p1Label \n"
    "WHERE\n"
    "{wd:$SOURCE_ENTITY ?p1 wd:$TARGET_ENTITY}\n"
    + LABEL_SERVICE_CLAUSE
)

LABEL_QUERY_TEMPLATE = "SELECT ?label \nWHERE\n{wd:$ENTITY rdfs:label ?label}"

_FREEBASE_DOT_RE = re.compile(r"^m\.[0-9a-z_]+$")
_FREEBASE_SLASH_RE = re.compile(r"^/m/[0-9a-z_]+$")
_WIKIDATA_RE = re.compile(r"^Q\d+$")

DEFAULT_MAX_PATHS = 5
DEFAULT_MAX_LINES = 12


def to_slash_form(freebase_id: str) -> str:
    """Normalize a Freebase id to the slash form stored in Wikidata's P646."""
    if _FREEBASE_SLASH_RE.match(freebase_id):
        return freebase_id
    if _FREEBASE_DOT_RE.match(freebase_id):
        return "/m/" + freebase_id[2:]
    raise PreconditionError(f"not a Freebase id: {freebase_id!r}")


def to_dot_form(freebase_id: str) -> str:
    return "m." + to_slash_form(freebase_id)[3:]


def build_alignment_query(freebase_id: str) -> str:
    literal = json.dumps(to_slash_form(freebase_id))
    return ALIGN_QUERY_TEMPLATE.replace("$FREEBASE_ENTITY", literal)


def _check_qid(qid: str) -> str:
    if not _WIKIDATA_RE.match(qid):
        raise PreconditionError(f"not a Wikidata entity id: {qid!r}")
    return qid


def build_two_hop_query(source: str, target: str) -> str:
    return TWO_HOP_QUERY_TEMPLATE.replace("$SOURCE_ENTITY", _check_qid(source)).replace(
        "$TARGET_ENTITY", _check_qid(target)
    )


def build_one_hop_query(source: str, target: str) -> str:
    return ONE_HOP_QUERY_TEMPLATE.replace("$SOURCE_ENTITY", _check_qid(source)).replace(
        "$TARGET_ENTITY", _check_qid(target)
    )


@dataclass(frozen=True)
class EntityAlignment:
    """A Freebase id paired with the Wikidata entity that declares it via P646."""

    freebase_id: str
    wikidata_id: str

    def __post_init__(self):
        to_slash_form(self.freebase_id)
        _check_qid(self.wikidata_id)


@dataclass(frozen=True)
class KgPath:
    """A connected entity/relation path with labels and IRIs in parallel."""

    hops: tuple[tuple[str, str, str], ...]
    hop_ids: tuple[tuple[str, str, str], ...]
    hop_count: int
    fallback: bool = False  # produced by the one-hop fallback query

    def __post_init__(self):
        if self.hop_count < 1:
            raise PreconditionError("hop_count must be >= 1")
        if not (len(self.hops) == len(self.hop_ids) == self.hop_count):
            raise PreconditionError("hops and hop_ids must both have hop_count entries")
        for i in range(self.hop_count - 1):
            if self.hop_ids[i][2] != self.hop_ids[i + 1][0]:
                raise PreconditionError(
                    f"path disconnected between hop {i} and {i + 1}: "
                    f"{self.hop_ids[i][2]} != {self.hop_ids[i + 1][0]}"
                )

    def to_dict(self) -> dict:
        return {
            "hops": [list(h) for h in self.hops],
            "hop_ids": [list(h) for h in self.hop_ids],
            "fallback": self.fallback,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "KgPath":
        hops = tuple(tuple(h) for h in obj["hops"])
        return cls(
            hops=hops,
            hop_ids=tuple(tuple(h) for h in obj["hop_ids"]),
            hop_count=len(hops),
            fallback=obj.get("fallback", False),
        )


def linearize(paths: Sequence[KgPath], max_lines: int = DEFAULT_MAX_LINES) -> str:
    """Render paths one hop per line as "subject, predicate, object".

    Hops of one path stay in order and paths follow each other, capped at
    ``max_lines`` lines in total with no trailing newline.
    """
    if not paths:
        raise PreconditionError("paths must be non-empty")
    if max_lines < 1:
        raise PreconditionError("max_lines must be positive")
    lines = []
    for path in paths:
        for subject, predicate, obj in path.hops:
            lines.append(f"{subject}, {predicate}, {obj}")
    return "\n".join(lines[:max_lines])


class TokenBucket:
    """Simple thread-safe rate limiter (requests per second)."""

    def __init__(self, rate: float, capacity: float | None = None):
        if rate <= 0:
            raise PreconditionError("rate must be positive")
        self.rate = rate
        self.capacity = capacity if capacity is not None else rate
        self._tokens = self.capacity
        self._stamp = time.monotonic()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = time.monotonic()
                self._tokens = min(self.capacity, self._tokens + (now - self._stamp) * self.rate)
                self._stamp = now
                if self._tokens >= 1:
                    self._tokens -= 1
                    return
                wait = (1 - self._tokens) / self.rate
            time.sleep(wait)


class SparqlClient:
    """SPARQL-over-HTTP client with rate limiting, retries, and a JSONL cache.

    The on-disk cache is keyed by a hash of (endpoint, query); within one run
    repeated queries are served from memory, so alignment lookups are stable
    after their first success.
    """

    def __init__(
        self,
        endpoint_url: str,
        cache_path: str | Path | None = None,
        rate: float = 5.0,
        max_attempts: int = 3,
        backoff_base: float = 1.0,
        timeout: float = 60.0,
        transport: httpx.BaseTransport | None = None,
        user_agent: str = "factscale/0.1 (research toolkit)",
    ):
        self.endpoint_url = endpoint_url
        self.max_attempts = max_attempts
        self.backoff_base = backoff_base
        self._bucket = TokenBucket(rate)
        self._http = httpx.Client(
            timeout=timeout,
            transport=transport,
            headers={"Accept": "application/sparql-results+json", "User-Agent": user_agent},
        )
        self._cache_path = Path(cache_path) if cache_path else None
        self._cache: dict[str, list[dict]] = {}
        self._cache_lock = threading.Lock()
        self.stats = {"requests": 0, "cache_hits": 0}
        if self._cache_path and self._cache_path.is_file():
            with open(self._cache_path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        entry = json.loads(line)
                        self._cache[entry["key"]] = entry["bindings"]

    def close(self) -> None:
        self._http.close()

    def _key(self, query: str) -> str:
        return hashlib.sha256(f"{self.endpoint_url}\0{query}".encode("utf-8")).hexdigest()

    def _remember(self, key: str, query: str, bindings: list[dict]) -> None:
        with self._cache_lock:
            self._cache[key] = bindings
            if self._cache_path:
                self._cache_path.parent.mkdir(parents=True, exist_ok=True)
                with open(self._cache_path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"key": key, "query": query, "bindings": bindings}) + "\n")

    def query(self, sparql: str) -> list[dict]:
        """Run a query and return its result bindings (cached)."""
        key = self._key(sparql)
        with self._cache_lock:
            if key in self._cache:
                self.stats["cache_hits"] += 1
                return self._cache[key]
        last: Exception | None = None
        for attempt in range(max(1, self.max_attempts)):
            if attempt > 0:
                time.sleep(self.backoff_base * (2 ** (attempt - 1)))
            self._bucket.acquire()
            self.stats["requests"] += 1
            try:
                if len(sparql) < 2000:
                    resp = self._http.get(
                        self.endpoint_url, params={"query": sparql, "format": "json"}
                    )
                else:
                    resp = self._http.post(
                        self.endpoint_url, data={"query": sparql, "format": "json"}
                    )
            except (httpx.TimeoutException, httpx.TransportError) as exc:
                last = TransportError(f"SPARQL transport failure: {exc}", retryable=True)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = TransportError(
                    f"SPARQL endpoint returned HTTP {resp.status_code}",
                    status=resp.status_code,
                    retryable=True,
                )
                continue
            if resp.status_code >= 400:
                raise TransportError(
                    f"SPARQL endpoint returned HTTP {resp.status_code}: {resp.text[:200]}",
                    status=resp.status_code,
                    retryable=False,
                )
            try:
                bindings = resp.json()["results"]["bindings"]
            except (ValueError, KeyError) as exc:
                raise ResponseParseError(f"malformed SPARQL results body: {exc!r}") from exc
            self._remember(key, sparql, bindings)
            return bindings
        assert last is not None
        raise last


def _binding_value(binding: dict, var: str) -> str | None:
    cell = binding.get(var)
    return cell.get("value") if cell else None


def _local_name(iri: str) -> str:
    return iri.rsplit("/", 1)[-1].rsplit("#", 1)[-1]


def _label_or_local(binding: dict, var: str) -> str | None:
    value = _binding_value(binding, var)
    if value is None:
        return None
    label = _binding_value(binding, f"{var}Label")
    if label and label != value:
        return label
    return _local_name(value)


def align_freebase_to_wikidata(
    freebase_id: str, client: SparqlClient
) -> EntityAlignment | None:
    """Find the Wikidata entity whose P646 value is this Freebase id.

    Returns the first match in endpoint order, or None when no entity
    declares the id.
    """
    slash = to_slash_form(freebase_id)  # also validates the pattern
    bindings = client.query(build_alignment_query(slash))
    for binding in bindings:
        value = _binding_value(binding, "wikientity")
        if value is None:
            continue
        qid = _local_name(value)
        if _WIKIDATA_RE.match(qid):
            return EntityAlignment(freebase_id=slash, wikidata_id=qid)
    return None


def entity_label(qid: str, client: SparqlClient) -> str:
    """English-preferred rdfs:label for an entity, falling back to the id."""
    bindings = client.query(LABEL_QUERY_TEMPLATE.replace("$ENTITY", _check_qid(qid)))
    by_lang: dict[str, str] = {}
    for binding in bindings:
        cell = binding.get("label")
        if cell:
            by_lang.setdefault(cell.get("xml:lang", ""), cell["value"])
    for lang in ("en", "mul"):
        if lang in by_lang:
            return by_lang[lang]
    if by_lang:
        return next(iter(by_lang.values()))
    return qid


def extract_paths(
    source: str,
    target: str,
    client: SparqlClient,
    max_paths: int = DEFAULT_MAX_PATHS,
) -> list[KgPath]:
    """Two-hop paths source -> intermediate -> target with resolved labels.

    Results keep the endpoint's order, deduplicated on hop IRIs and truncated
    to ``max_paths``. When no two-hop path exists, a one-hop fallback query
    runs and its paths carry ``fallback=True``. No connecting path at all
    yields an empty list.
    """
    _check_qid(source)
    _check_qid(target)
    if max_paths < 1:
        raise PreconditionError("max_paths must be positive")
    source_iri = WD_ENTITY_PREFIX + source
    target_iri = WD_ENTITY_PREFIX + target
    source_label = entity_label(source, client)
    target_label = entity_label(target, client)

    paths: list[KgPath] = []
    seen: set[tuple] = set()
    for binding in client.query(build_two_hop_query(source, target)):
        p1 = _binding_value(binding, "p1")
        o1 = _binding_value(binding, "o1")
        p2 = _binding_value(binding, "p2")
        if not (p1 and o1 and p2):
            continue
        hop_ids = ((source_iri, p1, o1), (o1, p2, target_iri))
        if hop_ids in seen:
            continue
        seen.add(hop_ids)
        o1_label = _label_or_local(binding, "o1")
        paths.append(
            KgPath(
                hops=(
                    (source_label, _label_or_local(binding, "p1"), o1_label),
                    (o1_label, _label_or_local(binding, "p2"), target_label),
                ),
                hop_ids=hop_ids,
                hop_count=2,
            )
        )
        if len(paths) >= max_paths:
            return paths
    if paths:
        return paths
    for binding in client.query(build_one_hop_query(source, target)):
        p1 = _binding_value(binding, "p1")
        if not p1:
            continue
        hop_ids = ((source_iri, p1, target_iri),)
        if hop_ids in seen:
            continue
        seen.add(hop_ids)
        paths.append(
            KgPath(
                hops=((source_label, _label_or_local(binding, "p1"), target_label),),
                hop_ids=hop_ids,
                hop_count=1,
                fallback=True,
            )
        )
        if len(paths) >= max_paths:
            break
    return paths


def load_paths_file(path: str | Path) -> dict[str, list[KgPath]]:
    """Read a per-question paths JSONL: {"question_id", "paths": [...]}."""
    out: dict[str, list[KgPath]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            out[obj["question_id"]] = [KgPath.from_dict(p) for p in obj.get("paths", [])]
    return out


def write_paths_file(paths_by_question: dict[str, list[KgPath]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid, paths in paths_by_question.items():
            fh.write(
                json.dumps(
                    {"question_id": qid, "paths": [p.to_dict() for p in paths]},
                    ensure_ascii=False,
                )
                + "\n"
            )
