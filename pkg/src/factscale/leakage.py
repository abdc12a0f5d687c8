"""Train/test overlap analysis between question corpora.

For every unordered corpus pair (self-pairs included) three statistics are
computed over the full cross product of questions: the number of pairs whose
embedding cosine exceeds a threshold, the number of exact (lowercased,
trimmed) string matches, and the mean pairwise cosine. Similarity reduces to
a blocked matrix product over L2-normalized embeddings, so corpora of tens
of thousands of questions stay desk-scale.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import QuestionRecord
from .errors import PreconditionError
from .llmclient import LlmClient

DEFAULT_THRESHOLD = 0.90
_BLOCK = 1024


@dataclass(frozen=True)
class OverlapReport:
    """Pairwise overlap statistics, keyed by corpus-name pairs in input order."""

    names: tuple[str, ...]
    pair_counts: dict[tuple[str, str], int]
    exact_counts: dict[tuple[str, str], int]
    avg_pairwise: dict[tuple[str, str], float]
    threshold: float

    def _lookup(self, table: dict, a: str, b: str):
        if (a, b) in table:
            return table[(a, b)]
        return table[(b, a)]

    def high_similarity(self, a: str, b: str) -> int:
        return self._lookup(self.pair_counts, a, b)

    def exact(self, a: str, b: str) -> int:
        return self._lookup(self.exact_counts, a, b)

    def average(self, a: str, b: str) -> float:
        return self._lookup(self.avg_pairwise, a, b)

    def to_dict(self) -> dict:
        pairs = []
        for (a, b), count in self.pair_counts.items():
            pairs.append(
                {
                    "a": a,
                    "b": b,
                    "high_similarity_pairs": count,
                    "exact_matches": self.exact_counts[(a, b)],
                    "avg_cosine": self.avg_pairwise[(a, b)],
                }
            )
        return {"threshold": self.threshold, "names": list(self.names), "pairs": pairs}

    def matrix_csv(self, statistic: str) -> str:
        """Square heatmap-ready CSV for one statistic."""
        tables = {
            "high_similarity_pairs": self.pair_counts,
            "exact_matches": self.exact_counts,
            "avg_cosine": self.avg_pairwise,
        }
        if statistic not in tables:
            raise PreconditionError(f"unknown statistic {statistic!r}")
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["", *self.names])
        for a in self.names:
            writer.writerow([a, *(self._lookup(tables[statistic], a, b) for b in self.names)])
        return buf.getvalue()


def _normalized_embeddings(
    questions: Sequence[str], embedder: LlmClient, batch_size: int
) -> np.ndarray:
    vectors = embedder.embed(list(questions), batch_size=batch_size)
    mat = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return mat / norms


def overlap_analysis(
    corpora: Sequence[tuple[str, Sequence[QuestionRecord]]],
    embedder: LlmClient,
    threshold: float = DEFAULT_THRESHOLD,
    batch_size: int = 128,
) -> OverlapReport:
    """Cross-corpus similarity, exact-match and mean-cosine statistics.

    Requires at least two corpora, each non-empty; every question is embedded
    exactly once. Statistics are symmetric in the corpus pair.
    """
    if len(corpora) < 2:
        raise PreconditionError("need at least two corpora")
    for name, records in corpora:
        if not records:
            raise PreconditionError(f"corpus {name!r} is empty")
        if any(not r.question for r in records):
            raise PreconditionError(f"corpus {name!r} contains an empty question")
    names = tuple(name for name, _ in corpora)
    if len(set(names)) != len(names):
        raise PreconditionError("corpus names must be distinct")

    questions = {name: [r.question for r in records] for name, records in corpora}
    embeddings = {
        name: _normalized_embeddings(questions[name], embedder, batch_size) for name in names
    }
    lowered = {
        name: [q.strip().lower() for q in questions[name]] for name in names
    }

    pair_counts: dict[tuple[str, str], int] = {}
    exact_counts: dict[tuple[str, str], int] = {}
    avg_pairwise: dict[tuple[str, str], float] = {}
    for i, a in enumerate(names):
        for b in names[i:]:
            mat_a, mat_b = embeddings[a], embeddings[b]
            above = 0
            total = 0.0
            for start in range(0, mat_a.shape[0], _BLOCK):
                block = mat_a[start : start + _BLOCK] @ mat_b.T
                above += int((block > threshold).sum())
                total += float(block.sum())
            n_pairs = mat_a.shape[0] * mat_b.shape[0]
            counts_b = {}
            for q in lowered[b]:
                counts_b[q] = counts_b.get(q, 0) + 1
            exact = sum(counts_b.get(q, 0) for q in lowered[a])
            pair_counts[(a, b)] = above
            exact_counts[(a, b)] = exact
            avg_pairwise[(a, b)] = total / n_pairs
    return OverlapReport(
        names=names,
        pair_counts=pair_counts,
        exact_counts=exact_counts,
        avg_pairwise=avg_pairwise,
        threshold=threshold,
    )
