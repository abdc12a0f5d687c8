"""Decoding-time budget forcing: bounding thinking length by forcing the
end-of-thinking delimiter (maximum) or suppressing it and injecting a
continuation word (minimum).

The controller drives a raw-completions endpoint: each step resends the
prompt plus everything generated so far and inspects the new chunk for the
end-of-thinking delimiter. Token decisions use the backend's reported
completion counts where a chunk maps one-to-one onto thinking; when a chunk
must be split at a delimiter the split is estimated with a local tokenizer,
and both counts land in the budget log.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field

from .corpus import QuestionRecord
from .distill import build_prompt
from .errors import CapabilityError, PreconditionError
from .llmclient import LlmClient, SamplingParams
from .store import Store
from .traceparse import ReasoningTrace, Tokenizer, WhitespaceTokenizer

log = logging.getLogger(__name__)

DEFAULT_BUDGETS = (256, 512, 1024, 2048, 4096, 8192)
DEFAULT_END_DELIMITER = "</think>"
DEFAULT_FORCE_ANSWER_SUFFIX = "\n<|im_start|>answer\nAnswer:"
DEFAULT_CONTINUATION_WORD = "Wait"
BOUND_MODES = ("max", "min", "both")


@dataclass(frozen=True)
class BudgetPolicy:
    """Thinking-token bounds and the strings used to enforce them."""

    max_think_tokens: int | None = None
    min_think_tokens: int | None = None
    end_delimiter: str = DEFAULT_END_DELIMITER
    force_answer_suffix: str = DEFAULT_FORCE_ANSWER_SUFFIX
    continuation_word: str = DEFAULT_CONTINUATION_WORD
    max_continuations: int = 4

    def __post_init__(self):
        if self.max_think_tokens is None and self.min_think_tokens is None:
            raise PreconditionError("at least one of max/min think bounds must be set")
        for bound in (self.max_think_tokens, self.min_think_tokens):
            if bound is not None and bound < 1:
                raise PreconditionError("think-token bounds must be positive")
        if (
            self.max_think_tokens is not None
            and self.min_think_tokens is not None
            and self.min_think_tokens > self.max_think_tokens
        ):
            raise PreconditionError("min_think_tokens must not exceed max_think_tokens")
        if not self.end_delimiter:
            raise PreconditionError("end_delimiter must be non-empty")


@dataclass
class BudgetLog:
    """Every request, cut and injection made while enforcing a policy."""

    events: list[dict] = field(default_factory=list)
    think_tokens: int = 0
    answer_tokens: int = 0
    continuations: int = 0
    forced_answer: bool = False

    def record(self, kind: str, **details) -> None:
        self.events.append({"kind": kind, **details})

    def to_dict(self) -> dict:
        return {
            "events": self.events,
            "think_tokens": self.think_tokens,
            "answer_tokens": self.answer_tokens,
            "continuations": self.continuations,
            "forced_answer": self.forced_answer,
        }


def generate_with_budget(
    prompt: str,
    policy: BudgetPolicy,
    params: SamplingParams,
    generator: LlmClient,
    local_tokenizer: Tokenizer | None = None,
    cache_salt: str | None = None,
) -> tuple[str, BudgetLog]:
    """Generate with thinking-token bounds enforced; returns (raw_text, log).

    Maximum bound: the thinking phase is requested with the remaining budget
    as its token cap; exhausting it without the delimiter appends the
    delimiter plus the answer-forcing suffix and requests the answer.
    Minimum bound: a delimiter arriving early is cut, the continuation word
    is appended, and thinking resumes, at most ``max_continuations`` times.
    When neither bound binds the output is byte-identical to plain
    generation.
    """
    if not generator.endpoint.supports_completions:
        raise CapabilityError(
            f"budget forcing needs raw-completion continuation; endpoint "
            f"{generator.endpoint.name!r} does not support it"
        )
    local = local_tokenizer or WhitespaceTokenizer()
    budget_log = BudgetLog()
    accumulated = ""
    salt_step = 0

    def step_salt() -> str:
        nonlocal salt_step
        salt_step += 1
        base = f"{cache_salt}:" if cache_salt else ""
        return f"{base}step:{salt_step}"

    while True:
        if policy.max_think_tokens is not None:
            cap = policy.max_think_tokens - budget_log.think_tokens
            if cap <= 0:
                # budget consumed across continuations; force the answer now
                accumulated += policy.end_delimiter + policy.force_answer_suffix
                budget_log.forced_answer = True
                budget_log.record("forced_answer", reason="budget_exhausted")
                break
        else:
            cap = params.max_tokens
        result = generator.complete(
            prompt + accumulated,
            params.replace(max_tokens=cap, stop_sequences=()),
            cache_salt=step_salt(),
        )
        chunk = result.text
        budget_log.record(
            "think_request",
            backend_tokens=result.completion_tokens,
            local_tokens=local.count_tokens(chunk),
            finish_reason=result.finish_reason,
        )
        delim_idx = chunk.find(policy.end_delimiter)
        if delim_idx == -1:
            budget_log.think_tokens += result.completion_tokens
            if result.finish_reason == "length":
                # thinking ran out of budget before closing; force the answer
                accumulated += chunk + policy.end_delimiter + policy.force_answer_suffix
                budget_log.forced_answer = True
                budget_log.record(
                    "forced_answer",
                    reason="length" if policy.max_think_tokens is not None else "generation_cap",
                )
                break
            # natural end without a delimiter: nothing left to continue
            accumulated += chunk
            budget_log.record("natural_end", delimiter_seen=False)
            return accumulated, budget_log
        before = chunk[:delim_idx]
        before_tokens = local.count_tokens(before)
        if (
            policy.min_think_tokens is not None
            and budget_log.think_tokens + before_tokens < policy.min_think_tokens
            and budget_log.continuations < policy.max_continuations
        ):
            # delimiter arrived too early: cut it and push for more thinking
            accumulated += before + policy.continuation_word
            budget_log.think_tokens += before_tokens + local.count_tokens(
                policy.continuation_word
            )
            budget_log.continuations += 1
            budget_log.record(
                "wait_injection",
                at_think_tokens=budget_log.think_tokens,
                dropped_text_chars=len(chunk) - delim_idx - len(policy.end_delimiter),
            )
            continue
        # thinking closed within bounds; keep the chunk as generated
        budget_log.think_tokens += before_tokens
        accumulated += chunk
        after = chunk[delim_idx + len(policy.end_delimiter) :]
        budget_log.answer_tokens += local.count_tokens(after)
        if result.finish_reason == "stop":
            budget_log.record("natural_end", delimiter_seen=True)
            return accumulated, budget_log
        budget_log.record("answer_continuation", reason="chunk_capped_mid_answer")
        break

    # answer phase: continue from the accumulated context
    result = generator.complete(
        prompt + accumulated,
        params.replace(max_tokens=params.max_tokens),
        cache_salt=step_salt(),
    )
    accumulated += result.text
    budget_log.answer_tokens += result.completion_tokens
    budget_log.record(
        "answer_request",
        backend_tokens=result.completion_tokens,
        finish_reason=result.finish_reason,
    )
    return accumulated, budget_log


def policy_for_budget(budget: int, bound: str = "max", **overrides) -> BudgetPolicy:
    """A per-budget policy for sweep runs: max-only by default."""
    if bound not in BOUND_MODES:
        raise PreconditionError(f"bound must be one of {BOUND_MODES}")
    kwargs = dict(overrides)
    if bound in ("max", "both"):
        kwargs["max_think_tokens"] = budget
    if bound in ("min", "both"):
        kwargs["min_think_tokens"] = budget
    return BudgetPolicy(**kwargs)


def sweep_budgets(
    records: list[QuestionRecord],
    budgets: list[int],
    params: SamplingParams,
    generator: LlmClient,
    store: Store,
    bound: str = "max",
    tokenizer: Tokenizer | None = None,
    max_workers: int = 8,
    cancel=None,
    **policy_overrides,
) -> dict:
    """One budget-tagged trace per (question, budget); resumable.

    Budgets must be strictly increasing. Each question walks its budgets
    sequentially while questions run concurrently.
    """
    if not budgets:
        raise PreconditionError("budgets must be non-empty")
    if any(b2 <= b1 for b1, b2 in zip(budgets, budgets[1:])):
        raise PreconditionError(f"budgets must be strictly increasing, got {budgets}")
    model_id = generator.endpoint.model
    done = store.existing_keys(
        "traces", ("question_id", "budget"), enhanced=False, model_id=model_id
    )
    summary = {"completed": 0, "failed": 0, "cached": 0}

    def one_question(record: QuestionRecord, pending: list[int]) -> tuple[int, int]:
        completed = failed = 0
        prompt = build_prompt(record.question)
        for budget in pending:
            if cancel is not None and cancel.is_set():
                break
            policy = policy_for_budget(budget, bound, **policy_overrides)
            try:
                raw, budget_log = generate_with_budget(
                    prompt,
                    policy,
                    params,
                    generator,
                    local_tokenizer=tokenizer,
                    cache_salt=f"budget:{budget}",
                )
                trace = ReasoningTrace.from_generation(
                    question_id=record.id,
                    raw_text=raw,
                    model_id=model_id,
                    enhanced=False,
                    params=params.to_dict(),
                    tokenizer=tokenizer,
                    budget=budget,
                )
                obj = trace.to_dict()
                obj["model_id"] = model_id
                obj["budget_log"] = budget_log.to_dict()
                store.append("traces", obj)
                completed += 1
            except Exception as exc:  # noqa: BLE001 - per-item isolation
                log.error("budget run failed for %s at %d: %s", record.id, budget, exc)
                failed += 1
        return completed, failed

    todo: list[tuple[QuestionRecord, list[int]]] = []
    for record in records:
        pending = [b for b in budgets if (record.id, b) not in done]
        summary["cached"] += len(budgets) - len(pending)
        if pending:
            todo.append((record, pending))

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        futures = {}
        for record, pending in todo:
            if cancel is not None and cancel.is_set():
                break
            futures[pool.submit(one_question, record, pending)] = record.id
        for future in as_completed(futures):
            completed, failed = future.result()
            summary["completed"] += completed
            summary["failed"] += failed
    return summary
