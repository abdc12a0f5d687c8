"""Parsing of raw generations into structured reasoning traces, plus
corpus-level statistics over parsed traces.

A reasoning trace is a generation of the form ``<think>...</think>`` followed
by an answer segment that states the final answer inside ``\\boxed{...}``.
Parsing is fuzz-safe: arbitrary UTF-8 input degrades to absent fields, never
an exception.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Protocol

from .errors import JoinMismatchError, PreconditionError

if TYPE_CHECKING:  # pragma: no cover
    from .scoring import ScoreRecord

THINK_OPEN = "<think>"
THINK_CLOSE = "</think>"
BOXED_KEY = "\\boxed{"


def extract_boxed(text: str) -> tuple[str | None, bool]:
    """Content of the last ``\\boxed{...}`` in ``text``, with balanced braces.

    Returns ``(content, warning)``. ``content`` is None when no boxed
    expression exists; ``warning`` is True when the final boxed expression is
    unbalanced or empty after trimming.
    """
    start = text.rfind(BOXED_KEY)
    if start == -1:
        return None, False
    i = start + len(BOXED_KEY)
    depth = 1
    out = []
    while i < len(text):
        ch = text[i]
        if ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                content = "".join(out).strip()
                return (content, False) if content else (None, True)
        out.append(ch)
        i += 1
    return None, True  # ran off the end with unbalanced braces


@dataclass(frozen=True)
class ParsedGeneration:
    """Structural fields extracted from one raw generation."""

    think_text: str | None
    answer_text: str
    boxed_answer: str | None
    parse_warning: bool = False


def parse_trace(raw: str) -> ParsedGeneration:
    """Split a raw generation into think segment, answer segment and boxed answer.

    ``think_text`` is the content of the first well-formed
    ``<think>...</think>`` pair; without one, the whole input is the answer
    segment. ``boxed_answer`` is the last boxed expression anywhere in the
    input (models often restate the answer; the final statement wins).
    """
    if not raw:
        raise PreconditionError("raw generation must be non-empty")
    think = None
    answer = raw
    open_idx = raw.find(THINK_OPEN)
    if open_idx != -1:
        close_idx = raw.find(THINK_CLOSE, open_idx + len(THINK_OPEN))
        if close_idx != -1:
            think = raw[open_idx + len(THINK_OPEN) : close_idx].strip()
            answer = raw[close_idx + len(THINK_CLOSE) :]
    answer = answer.strip()
    boxed, warning = extract_boxed(raw)
    return ParsedGeneration(
        think_text=think, answer_text=answer, boxed_answer=boxed, parse_warning=warning
    )


def fallback_prediction(answer_text: str) -> str:
    """Last non-empty line of the answer segment, used when no boxed answer exists."""
    for line in reversed(answer_text.splitlines()):
        if line.strip():
            return line.strip()
    return ""


# --- tokenizers --------------------------------------------------------------


class Tokenizer(Protocol):
    """Anything that can count tokens."""

    name: str

    def count_tokens(self, text: str) -> int: ...


class WhitespaceTokenizer:
    """Fallback tokenizer: one token per whitespace-separated unit."""

    name = "whitespace"

    def count_tokens(self, text: str) -> int:
        return len(text.split())


class SubwordTokenizer:
    """Greedy longest-match subword tokenizer over a plain vocabulary.

    Loads a JSON list of subword pieces; each whitespace-delimited word is
    consumed left to right by the longest matching piece, unknown characters
    costing one token each. This gives subword-scale counts without
    depending on any model distribution.
    """

    def __init__(self, pieces: Iterable[str], name: str = "subword"):
        self.name = name
        self._pieces = {p for p in pieces if p}
        if not self._pieces:
            raise PreconditionError("subword vocabulary is empty")
        self._max_len = max(len(p) for p in self._pieces)

    @classmethod
    def load(cls, path: str | Path) -> "SubwordTokenizer":
        path = Path(path)
        pieces = json.loads(path.read_text(encoding="utf-8"))
        return cls(pieces, name=f"subword:{path.name}")

    @classmethod
    def vendored(cls) -> "SubwordTokenizer":
        """The small vocabulary shipped with the package."""
        return cls.load(Path(__file__).parent / "data" / "subword_vocab.json")

    def count_tokens(self, text: str) -> int:
        total = 0
        for word in text.lower().split():
            i = 0
            while i < len(word):
                for length in range(min(self._max_len, len(word) - i), 0, -1):
                    if word[i : i + length] in self._pieces:
                        i += length
                        break
                else:
                    i += 1  # unknown character, one token
                total += 1
        return total


def count_tokens(text: str, tokenizer: Tokenizer | None = None) -> int:
    """Token count of ``text`` under ``tokenizer`` (whitespace fallback by default)."""
    return (tokenizer or WhitespaceTokenizer()).count_tokens(text)


# --- trace records ------------------------------------------------------------


@dataclass
class ReasoningTrace:
    """One persisted model generation, parsed into structured segments."""

    question_id: str
    sample_index: int
    enhanced: bool
    raw_text: str
    answer_text: str
    think_tokens: int
    answer_tokens: int
    model_id: str
    params: dict = field(default_factory=dict)
    think_text: str | None = None
    boxed_answer: str | None = None
    budget: int | None = None
    parse_warning: bool = False

    @property
    def prediction(self) -> str:
        """Boxed answer when available, else the last non-empty answer line."""
        if self.boxed_answer is not None:
            return self.boxed_answer
        return fallback_prediction(self.answer_text)

    @property
    def fallback_extraction(self) -> bool:
        return self.boxed_answer is None

    @classmethod
    def from_generation(
        cls,
        question_id: str,
        raw_text: str,
        model_id: str,
        *,
        sample_index: int = 0,
        enhanced: bool = False,
        params: dict | None = None,
        tokenizer: Tokenizer | None = None,
        budget: int | None = None,
    ) -> "ReasoningTrace":
        parsed = parse_trace(raw_text)
        tok = tokenizer or WhitespaceTokenizer()
        return cls(
            question_id=question_id,
            sample_index=sample_index,
            enhanced=enhanced,
            raw_text=raw_text,
            think_text=parsed.think_text,
            answer_text=parsed.answer_text,
            boxed_answer=parsed.boxed_answer,
            think_tokens=tok.count_tokens(parsed.think_text or ""),
            answer_tokens=tok.count_tokens(parsed.answer_text),
            model_id=model_id,
            params=dict(params or {}),
            budget=budget,
            parse_warning=parsed.parse_warning,
        )

    def to_dict(self) -> dict:
        out = {
            "question_id": self.question_id,
            "sample_index": self.sample_index,
            "enhanced": self.enhanced,
            "raw_text": self.raw_text,
            "answer_text": self.answer_text,
            "think_tokens": self.think_tokens,
            "answer_tokens": self.answer_tokens,
            "model_id": self.model_id,
            "params": self.params,
        }
        if self.think_text is not None:
            out["think_text"] = self.think_text
        if self.boxed_answer is not None:
            out["boxed_answer"] = self.boxed_answer
        if self.budget is not None:
            out["budget"] = self.budget
        if self.parse_warning:
            out["parse_warning"] = True
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "ReasoningTrace":
        return cls(
            question_id=obj["question_id"],
            sample_index=obj["sample_index"],
            enhanced=obj["enhanced"],
            raw_text=obj["raw_text"],
            answer_text=obj["answer_text"],
            think_tokens=obj["think_tokens"],
            answer_tokens=obj["answer_tokens"],
            model_id=obj["model_id"],
            params=obj.get("params", {}),
            think_text=obj.get("think_text"),
            boxed_answer=obj.get("boxed_answer"),
            budget=obj.get("budget"),
            parse_warning=obj.get("parse_warning", False),
        )


@dataclass(frozen=True)
class TraceStats:
    """Corpus-level statistics over a set of traces joined with their scores."""

    total_samples: int
    avg_reasoning_length: float
    avg_answer_length: float
    accuracy: dict[str, float]


def compute_stats(
    traces: Iterable[ReasoningTrace], scores: Iterable["ScoreRecord"]
) -> TraceStats:
    """Mean think/answer token lengths and per-metric accuracy.

    Traces and scores must join one-to-one on (question_id, sample_index);
    orphans on either side raise :class:`JoinMismatchError`.
    """
    trace_list = list(traces)
    score_map = {(s.question_id, s.sample_index): s for s in scores}
    if not trace_list:
        raise PreconditionError("cannot compute statistics over zero traces")
    trace_keys = {(t.question_id, t.sample_index) for t in trace_list}
    orphan_traces = sorted(trace_keys - score_map.keys())
    orphan_scores = sorted(score_map.keys() - trace_keys)
    if orphan_traces or orphan_scores:
        raise JoinMismatchError(
            f"{len(orphan_traces)} traces without scores, "
            f"{len(orphan_scores)} scores without traces "
            f"(first few: {(orphan_traces + orphan_scores)[:5]})",
            orphans=orphan_traces + orphan_scores,
        )
    n = len(trace_list)
    avg_think = sum(t.think_tokens for t in trace_list) / n
    avg_answer = sum(t.answer_tokens for t in trace_list) / n
    joined = [score_map[(t.question_id, t.sample_index)] for t in trace_list]
    accuracy: dict[str, float] = {}
    if any(s.em_verdict is not None for s in joined):
        accuracy["em"] = sum(1 for s in joined if s.em_verdict) / n
    if any(s.semsim_score is not None for s in joined):
        accuracy["semsim"] = sum(1 for s in joined if s.semsim_verdict) / n
    if any(s.judge_verdict != "skipped" for s in joined):
        accuracy["judge"] = sum(1 for s in joined if s.judge_verdict == "yes") / n
    return TraceStats(
        total_samples=n,
        avg_reasoning_length=avg_think,
        avg_answer_length=avg_answer,
        accuracy=accuracy,
    )
