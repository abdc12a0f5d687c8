"""Per-trace factual verdicts: exact match, semantic similarity, and
LLM-as-a-judge entity equivalence.

Exact match accepts normalized equality or contiguous word-subsequence
containment in either direction, so "Roman Catholics" matches the gold
"Roman Catholic" without letting "art" match "Artaud". Semantic similarity
takes the maximum cosine against all golds with a strict > 0.5 acceptance.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

from .corpus import normalize_answer
from .errors import PreconditionError
from .llmclient import LlmClient
from .store import Store
from .traceparse import ReasoningTrace

log = logging.getLogger(__name__)

SEMSIM_THRESHOLD = 0.5
METRICS = ("em", "semsim", "judge")
EMPTY_PREDICTION_SCORE = -1.0


@dataclass
class ScoreRecord:
    """Verdicts of the selected metrics for one trace.

    Metrics that were not run are None (em/semsim) or "skipped" (judge);
    ``semsim_verdict`` is always consistent with ``semsim_score > 0.5``.
    """

    question_id: str
    sample_index: int
    prediction: str
    em_verdict: bool | None = None
    semsim_score: float | None = None
    semsim_verdict: bool = False
    judge_verdict: str = "skipped"  # yes | no | unparseable | skipped
    fallback_extraction: bool = False
    model_id: str = ""
    enhanced: bool = False
    budget: int | None = None

    def __post_init__(self):
        expected = self.semsim_score is not None and self.semsim_score > SEMSIM_THRESHOLD
        if self.semsim_verdict != expected:
            raise PreconditionError(
                f"semsim_verdict {self.semsim_verdict} inconsistent with score {self.semsim_score}"
            )
        if self.judge_verdict not in ("yes", "no", "unparseable", "skipped"):
            raise PreconditionError(f"bad judge verdict {self.judge_verdict!r}")

    def to_dict(self) -> dict:
        out = {
            "question_id": self.question_id,
            "sample_index": self.sample_index,
            "prediction": self.prediction,
            "em": self.em_verdict,
            "semsim": self.semsim_score,
            "semsim_verdict": self.semsim_verdict,
            "judge": self.judge_verdict,
            "fallback_extraction": self.fallback_extraction,
            "model_id": self.model_id,
            "enhanced": self.enhanced,
        }
        if self.budget is not None:
            out["budget"] = self.budget
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "ScoreRecord":
        return cls(
            question_id=obj["question_id"],
            sample_index=obj["sample_index"],
            prediction=obj["prediction"],
            em_verdict=obj.get("em"),
            semsim_score=obj.get("semsim"),
            semsim_verdict=obj.get("semsim_verdict", False),
            judge_verdict=obj.get("judge", "skipped"),
            fallback_extraction=obj.get("fallback_extraction", False),
            model_id=obj.get("model_id", ""),
            enhanced=obj.get("enhanced", False),
            budget=obj.get("budget"),
        )

    def correct_under(self, metric: str) -> bool:
        if metric == "em":
            return bool(self.em_verdict)
        if metric == "semsim":
            return self.semsim_verdict
        if metric == "judge":
            return self.judge_verdict == "yes"
        raise PreconditionError(f"unknown metric {metric!r}")


def _is_word_subsequence(needle: list[str], haystack: list[str]) -> bool:
    if not needle or len(needle) > len(haystack):
        return False
    return any(
        haystack[i : i + len(needle)] == needle for i in range(len(haystack) - len(needle) + 1)
    )


def exact_match(prediction: str, gold_answers: Sequence[str]) -> bool:
    """Normalized equality or bidirectional contiguous word-subsequence match."""
    if not gold_answers:
        raise PreconditionError("gold_answers must be non-empty")
    pred_words = normalize_answer(prediction).split()
    if not pred_words:
        return False
    for gold in gold_answers:
        gold_words = normalize_answer(gold).split()
        if not gold_words:
            continue
        if pred_words == gold_words:
            return True
        if _is_word_subsequence(pred_words, gold_words):
            return True
        if _is_word_subsequence(gold_words, pred_words):
            return True
    return False


def cosine(a: Sequence[float], b: Sequence[float]) -> float:
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    if na == 0 or nb == 0:
        return 0.0
    return dot / (na * nb)


def semantic_match(
    prediction: str, gold_answers: Sequence[str], embedder: LlmClient
) -> tuple[float, bool]:
    """Max cosine similarity between the prediction and any gold answer.

    One-to-many: the highest similarity is kept; the verdict is strictly
    greater than 0.5. An empty prediction short-circuits to a sentinel score
    of -1.0 and a false verdict without calling the embedder.
    """
    if not gold_answers:
        raise PreconditionError("gold_answers must be non-empty")
    if not prediction:
        return EMPTY_PREDICTION_SCORE, False
    vectors = embedder.embed([prediction, *gold_answers])
    pred_vec, gold_vecs = vectors[0], vectors[1:]
    score = max(cosine(pred_vec, g) for g in gold_vecs)
    return score, score > SEMSIM_THRESHOLD


def judge_match(
    prediction: str,
    gold_answers: Sequence[str],
    judge: LlmClient | None,
    question: str | None = None,
) -> str:
    """Entity-equivalence verdict, or "skipped" when judging is disabled."""
    if judge is None:
        return "skipped"
    if not prediction:
        return "no"
    return judge.judge_equivalence(prediction, gold_answers, question=question)


def score_trace(
    trace: ReasoningTrace,
    gold_answers: Sequence[str],
    metrics: Sequence[str],
    embedder: LlmClient | None = None,
    judge: LlmClient | None = None,
    question: str | None = None,
) -> ScoreRecord:
    """Run the selected metrics on one trace."""
    unknown = set(metrics) - set(METRICS)
    if unknown:
        raise PreconditionError(f"unknown metrics {sorted(unknown)}")
    prediction = trace.prediction
    em = exact_match(prediction, gold_answers) if "em" in metrics else None
    semsim_score: float | None = None
    semsim_verdict = False
    if "semsim" in metrics:
        if embedder is None:
            raise PreconditionError("semsim metric selected but no embedder configured")
        semsim_score, semsim_verdict = semantic_match(prediction, gold_answers, embedder)
    verdict = "skipped"
    if "judge" in metrics:
        if judge is None:
            raise PreconditionError("judge metric selected but no judge configured")
        verdict = judge_match(prediction, gold_answers, judge, question=question)
    return ScoreRecord(
        question_id=trace.question_id,
        sample_index=trace.sample_index,
        prediction=prediction,
        em_verdict=em,
        semsim_score=semsim_score,
        semsim_verdict=semsim_verdict,
        judge_verdict=verdict,
        fallback_extraction=trace.fallback_extraction,
        model_id=trace.model_id,
        enhanced=trace.enhanced,
        budget=trace.budget,
    )


def score_run(
    store: Store,
    gold_by_question: dict[str, Sequence[str]],
    metrics: Sequence[str] = ("em",),
    embedder: LlmClient | None = None,
    judge: LlmClient | None = None,
    questions_by_id: dict[str, str] | None = None,
    judge_sees_question: bool = False,
    max_workers: int = 8,
    cancel=None,
    **trace_filters,
) -> dict:
    """Score every stored trace matching ``trace_filters``; resumable.

    Already-scored (question_id, sample_index, model_id, budget) tuples are
    skipped; per-trace metric failures are recorded and do not abort the
    batch. Returns ``{"completed", "failed", "cached"}``.
    """
    traces = [
        ReasoningTrace.from_dict(obj) for obj in store.iter_records("traces", **trace_filters)
    ]
    done = store.existing_keys(
        "scores", ("question_id", "sample_index", "model_id", "budget")
    )
    summary = {"completed": 0, "failed": 0, "cached": 0}
    todo: list[ReasoningTrace] = []
    for trace in traces:
        key = (trace.question_id, trace.sample_index, trace.model_id, trace.budget)
        if key in done:
            summary["cached"] += 1
        elif trace.question_id not in gold_by_question:
            log.warning("no gold answers for question %s; skipping", trace.question_id)
            summary["failed"] += 1
        else:
            todo.append(trace)

    def one(trace: ReasoningTrace) -> ScoreRecord | None:
        if cancel is not None and cancel.is_set():
            return None
        question = None
        if judge_sees_question and questions_by_id:
            question = questions_by_id.get(trace.question_id)
        return score_trace(
            trace,
            gold_by_question[trace.question_id],
            metrics,
            embedder=embedder,
            judge=judge,
            question=question,
        )

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        for trace, outcome in zip(todo, pool.map(_swallow(one), todo)):
            if outcome is None:
                continue  # cancelled
            record, err = outcome
            if err is not None:
                log.error("scoring failed for %s/%s: %s", trace.question_id, trace.sample_index, err)
                summary["failed"] += 1
            else:
                store.append("scores", record.to_dict())
                summary["completed"] += 1
    return summary


def _swallow(fn):
    """Wrap a worker so exceptions become values; keeps pool.map ordering."""

    def inner(item):
        try:
            result = fn(item)
        except Exception as exc:  # noqa: BLE001 - per-item isolation is the contract
            return None, exc
        if result is None:
            return None
        return result, None

    return inner
