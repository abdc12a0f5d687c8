"""QA corpus ingestion: canonical question records and per-dataset importers.

Every benchmark is converted to one canonical JSONL schema, one object per
line::

    {"id": str, "dataset": str, "split": str, "question": str,
     "gold_answers": [str, ...], "answer_entity_ids": [str, ...]?}

The main gold answer comes first; aliases follow. Scoring accepts a match
against any entry, so the main/alias distinction is positional only.
"""

from __future__ import annotations

import json
import re
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .errors import DatasetFormatError, DuplicateIdError, PreconditionError

DATASETS = ("cwq", "exaqt", "grailqa", "lcquad2", "mintaka", "webqsp", "custom")
SPLITS = ("train", "dev", "test")

_WS_RE = re.compile(r"\s+")


@dataclass(frozen=True)
class QuestionRecord:
    """One benchmark question with its gold answers.

    ``gold_answers`` is non-empty with the main answer first and aliases
    after. ``answer_entity_ids`` optionally carries KB identifiers
    (Freebase ``m.``/``/m/`` or Wikidata ``Q`` prefixed).
    """

    id: str
    dataset: str
    question: str
    gold_answers: tuple[str, ...]
    split: str
    answer_entity_ids: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise DatasetFormatError(
                f"unknown dataset {self.dataset!r}, expected one of {DATASETS}", field="dataset"
            )
        if self.split not in SPLITS:
            raise DatasetFormatError(
                f"unknown split {self.split!r}, expected one of {SPLITS}", field="split"
            )
        if not self.id:
            raise DatasetFormatError("empty id", field="id")
        if not self.question:
            raise DatasetFormatError("empty question", field="question")
        if not self.gold_answers:
            raise DatasetFormatError("gold_answers must be non-empty", field="gold_answers")
        if any(not a for a in self.gold_answers):
            raise DatasetFormatError(
                "gold_answers contains an empty string", field="gold_answers"
            )

    def to_dict(self) -> dict:
        out = {
            "id": self.id,
            "dataset": self.dataset,
            "split": self.split,
            "question": self.question,
            "gold_answers": list(self.gold_answers),
        }
        if self.answer_entity_ids is not None:
            out["answer_entity_ids"] = list(self.answer_entity_ids)
        return out


def normalize_answer(text: str) -> str:
    """Canonicalize an answer string for comparison.

    NFKC-normalized, lowercased, whitespace collapsed, and surrounding
    punctuation stripped. Internal punctuation is kept so answers like
    "UTC−10:00" survive intact. Idempotent.
    """
    text = unicodedata.normalize("NFKC", text).lower()
    text = _WS_RE.sub(" ", text).strip()
    # strip punctuation only at the edges, then re-trim whitespace exposed by it
    while text and unicodedata.category(text[0]).startswith("P"):
        text = text[1:].lstrip()
    while text and unicodedata.category(text[-1]).startswith("P"):
        text = text[:-1].rstrip()
    return text


def _record_from_obj(obj: dict, dataset: str, split: str, line: int) -> QuestionRecord:
    if not isinstance(obj, dict):
        raise DatasetFormatError("record is not a JSON object", line=line)
    for key in ("id", "question", "gold_answers"):
        if key not in obj:
            raise DatasetFormatError("missing required field", line=line, field=key)
    for key in ("dataset", "split"):
        expected = dataset if key == "dataset" else split
        if key in obj and obj[key] != expected:
            raise DatasetFormatError(
                f"record declares {obj[key]!r} but file was loaded as {expected!r}",
                line=line,
                field=key,
            )
    golds = obj["gold_answers"]
    if not isinstance(golds, list) or not all(isinstance(g, str) for g in golds):
        raise DatasetFormatError("must be a list of strings", line=line, field="gold_answers")
    entity_ids = obj.get("answer_entity_ids")
    if entity_ids is not None and (
        not isinstance(entity_ids, list) or not all(isinstance(e, str) for e in entity_ids)
    ):
        raise DatasetFormatError(
            "must be a list of strings", line=line, field="answer_entity_ids"
        )
    try:
        return QuestionRecord(
            id=str(obj["id"]),
            dataset=dataset,
            split=split,
            question=obj["question"],
            gold_answers=tuple(golds),
            answer_entity_ids=tuple(entity_ids) if entity_ids is not None else None,
        )
    except DatasetFormatError as exc:
        raise DatasetFormatError(str(exc), line=line) from exc


def load_dataset(path: str | Path, dataset: str, split: str) -> list[QuestionRecord]:
    """Load canonical question records from a JSONL (or JSON array) file.

    Order is preserved. Malformed records raise :class:`DatasetFormatError`
    naming the line and field; a repeated id raises :class:`DuplicateIdError`.
    """
    path = Path(path)
    if not path.is_file():
        raise DatasetFormatError(f"no such file: {path}")
    text = path.read_text(encoding="utf-8")
    records: list[QuestionRecord] = []
    if text.lstrip().startswith("["):
        try:
            objs = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"invalid JSON: {exc}") from exc
        enumerated = list(enumerate(objs, start=1))
    else:
        enumerated = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                enumerated.append((lineno, json.loads(line)))
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"invalid JSON: {exc.msg}", line=lineno) from exc
    seen: set[str] = set()
    for lineno, obj in enumerated:
        rec = _record_from_obj(obj, dataset, split, lineno)
        if rec.id in seen:
            raise DuplicateIdError(
                f"duplicate id {rec.id!r} within ({dataset}, {split})", line=lineno, field="id"
            )
        seen.add(rec.id)
        records.append(rec)
    return records


def write_dataset(records: Iterable[QuestionRecord], path: str | Path) -> int:
    """Write records as canonical JSONL (UTF-8, LF). Returns the count."""
    path = Path(path)
    n = 0
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), ensure_ascii=False) + "\n")
            n += 1
    return n


# --- upstream importers ----------------------------------------------------
#
# Each benchmark ships in its own schema; these adapters map one upstream
# record to the canonical form. They are best-effort over the commonly
# distributed file layouts and raise DatasetFormatError naming the missing
# field when a record does not fit.


def _require(obj: dict, key: str) -> object:
    if key not in obj:
        raise DatasetFormatError("missing field in upstream record", field=key)
    return obj[key]


def _dedup(answers: Iterable[str]) -> list[str]:
    seen, out = set(), []
    for a in answers:
        a = a.strip()
        if a and a not in seen:
            seen.add(a)
            out.append(a)
    return out


def _import_cwq(obj: dict) -> tuple[str, str, list[str], list[str]]:
    qid = str(_require(obj, "ID"))
    question = _require(obj, "question")
    answers, entity_ids = [], []
    for ans in obj.get("answers", []):
        if ans.get("answer"):
            answers.append(ans["answer"])
        answers.extend(ans.get("aliases", []))
        if ans.get("answer_id"):
            entity_ids.append(ans["answer_id"])
    return qid, question, answers, entity_ids


def _import_webqsp(obj: dict) -> tuple[str, str, list[str], list[str]]:
    qid = str(_require(obj, "QuestionId"))
    question = obj.get("ProcessedQuestion") or _require(obj, "RawQuestion")
    answers, entity_ids = [], []
    for parse in obj.get("Parses", []):
        for ans in parse.get("Answers", []):
            name = ans.get("EntityName") or ans.get("AnswerArgument")
            if name:
                answers.append(name)
            if ans.get("AnswerType") == "Entity" and ans.get("AnswerArgument"):
                entity_ids.append(ans["AnswerArgument"])
    return qid, question, answers, entity_ids


def _import_grailqa(obj: dict) -> tuple[str, str, list[str], list[str]]:
    qid = str(_require(obj, "qid"))
    question = _require(obj, "question")
    answers, entity_ids = [], []
    for ans in obj.get("answer", []):
        name = ans.get("entity_name") or ans.get("answer_argument")
        if name:
            answers.append(str(name))
        if ans.get("answer_type") == "Entity" and ans.get("answer_argument"):
            entity_ids.append(ans["answer_argument"])
    return qid, question, answers, entity_ids


def _import_lcquad2(obj: dict) -> tuple[str, str, list[str], list[str]]:
    qid = str(_require(obj, "uid"))
    question = obj.get("question") or obj.get("NNQT_question")
    if not question:
        raise DatasetFormatError("missing field in upstream record", field="question")
    answers = [str(a) for a in obj.get("answers", obj.get("answer", []))]
    return qid, question, answers, []


def _import_mintaka(obj: dict) -> tuple[str, str, list[str], list[str]]:
    qid = str(_require(obj, "id"))
    question = _require(obj, "question")
    answers, entity_ids = [], []
    ans = obj.get("answer", {})
    if ans.get("answerType") == "entity":
        for ent in ans.get("answer") or []:
            label = (ent.get("label") or {}).get("en")
            if label:
                answers.append(label)
            if ent.get("name"):
                entity_ids.append(ent["name"])
    elif ans.get("answer") is not None:
        answers.extend(str(a) for a in ans["answer"])
    if ans.get("mention"):
        answers.append(str(ans["mention"]))
    return qid, question, answers, entity_ids


def _import_exaqt(obj: dict) -> tuple[str, str, list[str], list[str]]:
    qid = str(_require(obj, "Id"))
    question = _require(obj, "Question")
    answers, entity_ids = [], []
    for ans in obj.get("Answer", []):
        label = ans.get("WikidataLabel") or ans.get("AnswerArgument")
        if label:
            answers.append(str(label))
        if ans.get("WikidataQid"):
            entity_ids.append(ans["WikidataQid"])
    return qid, question, answers, entity_ids


_IMPORTERS = {
    "cwq": _import_cwq,
    "webqsp": _import_webqsp,
    "grailqa": _import_grailqa,
    "lcquad2": _import_lcquad2,
    "mintaka": _import_mintaka,
    "exaqt": _import_exaqt,
}


def from_upstream(obj: dict, dataset: str, split: str) -> QuestionRecord:
    """Convert one upstream benchmark record to a canonical QuestionRecord."""
    if dataset == "custom":
        raise PreconditionError("dataset 'custom' has no upstream importer; use canonical JSONL")
    if dataset not in _IMPORTERS:
        raise PreconditionError(f"no importer for dataset {dataset!r}")
    qid, question, answers, entity_ids = _IMPORTERS[dataset](obj)
    answers = _dedup(answers)
    if not answers:
        raise DatasetFormatError(f"record {qid!r} has no usable gold answers")
    return QuestionRecord(
        id=qid,
        dataset=dataset,
        split=split,
        question=question,
        gold_answers=tuple(answers),
        answer_entity_ids=tuple(entity_ids) if entity_ids else None,
    )
