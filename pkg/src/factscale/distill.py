"""Prompt construction and batch collection of reasoning traces.

Two prompt forms exist: the plain form (question plus the boxed-answer
instruction) and the KG-enhanced form, which splices a linearized graph
between the question and the instruction with a fixed connective sentence.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field

from .corpus import QuestionRecord
from .errors import PreconditionError
from .kgpaths import DEFAULT_MAX_LINES, KgPath, linearize
from .llmclient import LlmClient, SamplingParams
from .store import Store
from .traceparse import ReasoningTrace, Tokenizer

log = logging.getLogger(__name__)

BOXED_INSTRUCTION = "Put your final answer within \\boxed{}."
KG_CONNECTIVE = (
    "While answering the question, make use of the following linearised graph "
    "as an inspiration in your reasoning, not as the only answer:"
)


def build_prompt(question: str, paths_text: str | None = None) -> str:
    """Render the generation prompt for one question.

    With ``paths_text`` the enhanced form is produced; without it (or with an
    empty string) the plain form is. Callers are expected to warn when an
    enhanced run falls back to the plain form for lack of paths.
    """
    if not question:
        raise PreconditionError("question must be non-empty")
    if paths_text:
        return f"{question}\n\n{KG_CONNECTIVE}\n\n{paths_text}. \n\n{BOXED_INSTRUCTION}"
    return f"{question}\n\n{BOXED_INSTRUCTION}"


@dataclass
class DistillJob:
    """A batch of questions to collect traces for."""

    records: list[QuestionRecord]
    enhanced: bool = False
    paths_per_question: dict[str, list[KgPath]] | None = None
    params: SamplingParams = field(default_factory=SamplingParams)
    samples_per_question: int = 1
    max_path_lines: int = DEFAULT_MAX_LINES

    def __post_init__(self):
        if self.samples_per_question < 1:
            raise PreconditionError("samples_per_question must be >= 1")
        if self.enhanced:
            if self.paths_per_question is None:
                raise PreconditionError("enhanced job needs paths_per_question")
            missing = [r.id for r in self.records if r.id not in self.paths_per_question]
            if missing:
                raise PreconditionError(
                    f"enhanced job lacks a path entry for questions {missing[:5]}"
                )

    def prompt_for(self, record: QuestionRecord) -> str:
        paths_text = None
        if self.enhanced:
            paths = self.paths_per_question.get(record.id) or []
            if paths:
                paths_text = linearize(paths, self.max_path_lines)
            else:
                log.warning(
                    "question %s has no KG paths; falling back to the plain prompt", record.id
                )
        return build_prompt(record.question, paths_text)


def run_distillation(
    job: DistillJob,
    generator: LlmClient,
    store: Store,
    tokenizer: Tokenizer | None = None,
    max_workers: int = 8,
    cancel=None,
) -> dict:
    """Collect one trace per (question, sample_index), resumably.

    Already-persisted pairs are skipped and counted as cached; a question
    whose generation fails after retries is recorded as failed without
    aborting the batch. Traces are appended in completion order.
    """
    model_id = generator.endpoint.model
    done = store.existing_keys(
        "traces",
        ("question_id", "sample_index"),
        enhanced=job.enhanced,
        model_id=model_id,
        budget=None,
    )
    summary = {"completed": 0, "failed": 0, "cached": 0}
    work: list[tuple[QuestionRecord, int]] = []
    for record in job.records:
        for sample_index in range(job.samples_per_question):
            if (record.id, sample_index) in done:
                summary["cached"] += 1
            else:
                work.append((record, sample_index))

    def one(record: QuestionRecord, sample_index: int) -> ReasoningTrace:
        prompt = job.prompt_for(record)
        result = generator.generate(prompt, job.params, cache_salt=f"sample:{sample_index}")
        return ReasoningTrace.from_generation(
            question_id=record.id,
            raw_text=result.text,
            model_id=result.model_id,
            sample_index=sample_index,
            enhanced=job.enhanced,
            params=job.params.to_dict(),
            tokenizer=tokenizer,
        )

    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        futures = {}
        for record, sample_index in work:
            if cancel is not None and cancel.is_set():
                break
            futures[pool.submit(one, record, sample_index)] = (record.id, sample_index)
        for future in as_completed(futures):
            qid, sample_index = futures[future]
            try:
                trace = future.result()
            except Exception as exc:  # noqa: BLE001 - per-question isolation
                log.error("generation failed for %s sample %d: %s", qid, sample_index, exc)
                summary["failed"] += 1
                continue
            record_dict = trace.to_dict()
            # model_id may echo a backend alias; key resumes on the configured model
            record_dict["model_id"] = model_id
            store.append("traces", record_dict)
            summary["completed"] += 1
    return summary
