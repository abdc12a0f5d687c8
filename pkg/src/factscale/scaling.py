"""Parallel-scaling aggregation: unbiased pass@k plus Monte Carlo any@k and
consensus@k over per-question answer sets.

pass@k is the unbiased estimator 1 - C(n-c, k)/C(n, k) for the probability
that at least one of k samples drawn from n (c of them correct) is correct.
any@k generalizes it to arbitrary correctness vectors by simulation;
consensus@k scores the majority-vote answer among the k sampled, counting
ties as correct whenever any maximal cluster holds a correct answer.
"""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass
from math import comb
from typing import Callable, Iterable, Sequence

import numpy as np

from .corpus import normalize_answer
from .errors import PreconditionError, RaggedSamplesError

DEFAULT_KS = (1, 2, 4, 8, 16)
DEFAULT_TRIALS = 100
AGGREGATION_METRICS = ("pass", "any", "consensus")


def pass_at_k(n: int, c: int, k: int) -> float:
    """Unbiased pass@k from n samples with c correct.

    Python's arbitrary-precision ``comb`` keeps the binomial ratio exact, so
    no overflow-guarding product form is needed. When fewer than k samples
    are incorrect the estimate is exactly 1.
    """
    if not (0 <= c <= n):
        raise PreconditionError(f"need 0 <= c <= n, got c={c}, n={n}")
    if not (1 <= k <= n):
        raise PreconditionError(f"need 1 <= k <= n, got k={k}, n={n}")
    if n - c < k:
        return 1.0
    return 1.0 - comb(n - c, k) / comb(n, k)


def _subseed(seed: int, question_id: str) -> int:
    """Stable per-question sub-seed so questions can be processed in any order."""
    digest = hashlib.sha256(f"{seed}:{question_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass(frozen=True)
class AnswerSet:
    """All sampled answers for one question with per-sample correctness."""

    question_id: str
    answers: tuple[str, ...]
    correctness: tuple[bool, ...]
    n: int

    @classmethod
    def make(
        cls, question_id: str, answers: Sequence[str], correctness: Sequence[bool]
    ) -> "AnswerSet":
        if len(answers) != len(correctness):
            raise PreconditionError("answers and correctness must have equal length")
        if not answers:
            raise PreconditionError("answer set must be non-empty")
        return cls(
            question_id=question_id,
            answers=tuple(answers),
            correctness=tuple(correctness),
            n=len(answers),
        )


@dataclass(frozen=True)
class ScalingEstimate:
    """One point on a test-time-scaling curve."""

    k: int
    metric: str
    value: float
    trials: int
    seed: int

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "metric": self.metric,
            "value": self.value,
            "trials": self.trials,
            "seed": self.seed,
        }


def any_at_k(
    answer_set: AnswerSet, k: int, trials: int = DEFAULT_TRIALS, seed: int = 0
) -> float:
    """Probability that at least one of k sampled answers is correct.

    k = n is the exact indicator; k < n averages over ``trials`` uniform
    draws of k answers without replacement.
    """
    n = answer_set.n
    if not (1 <= k <= n):
        raise PreconditionError(f"need 1 <= k <= n, got k={k}, n={n}")
    if trials < 1:
        raise PreconditionError("trials must be >= 1")
    correct = np.asarray(answer_set.correctness, dtype=bool)
    if k == n:
        return 1.0 if correct.any() else 0.0
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(trials):
        idx = rng.choice(n, size=k, replace=False)
        if correct[idx].any():
            hits += 1
    return hits / trials


def _majority_correct(
    keys: Sequence[object], correct: Sequence[bool], indices: Iterable[int]
) -> bool:
    """Tie rule: correct iff any maximal-count answer cluster holds a correct answer."""
    chosen = list(indices)
    counts = Counter(keys[i] for i in chosen)
    top = max(counts.values())
    winners = {key for key, cnt in counts.items() if cnt == top}
    return any(correct[i] for i in chosen if keys[i] in winners)


def _cluster_keys(
    answers: Sequence[str],
    equivalence: Callable[[str], object] | None,
    pairwise: Callable[[str, str], bool] | None,
) -> list[object]:
    """Map each answer to a cluster key, by canonicalization or pairwise merging."""
    if pairwise is None:
        key_fn = equivalence or normalize_answer
        return [key_fn(a) for a in answers]
    # union-find over pairwise equivalence (e.g. judge-based clustering)
    parent = list(range(len(answers)))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(len(answers)):
        for j in range(i + 1, len(answers)):
            if find(i) != find(j) and pairwise(answers[i], answers[j]):
                parent[find(j)] = find(i)
    return [find(i) for i in range(len(answers))]


def consensus_at_k(
    answer_set: AnswerSet,
    k: int,
    trials: int = DEFAULT_TRIALS,
    seed: int = 0,
    equivalence: Callable[[str], object] | None = None,
    pairwise: Callable[[str, str], bool] | None = None,
) -> float:
    """Accuracy of majority voting among k sampled answers, ties counted correct.

    Answers are clustered by ``equivalence`` (default: equality of normalized
    strings) or, when ``pairwise`` is given, by transitively merging pairs the
    predicate accepts. k = n is computed exactly in a single deterministic
    pass; k < n is a Monte Carlo mean over ``trials`` draws.
    """
    n = answer_set.n
    if not (1 <= k <= n):
        raise PreconditionError(f"need 1 <= k <= n, got k={k}, n={n}")
    if trials < 1:
        raise PreconditionError("trials must be >= 1")
    keys = _cluster_keys(answer_set.answers, equivalence, pairwise)
    correct = answer_set.correctness
    if k == n:
        return 1.0 if _majority_correct(keys, correct, range(n)) else 0.0
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(trials):
        idx = rng.choice(n, size=k, replace=False)
        if _majority_correct(keys, correct, idx):
            hits += 1
    return hits / trials


def aggregate_runs(
    answer_sets: Sequence[AnswerSet],
    ks: Sequence[int] = DEFAULT_KS,
    trials: int = DEFAULT_TRIALS,
    seed: int = 0,
    equivalence: Callable[[str], object] | None = None,
    pairwise: Callable[[str, str], bool] | None = None,
) -> list[ScalingEstimate]:
    """Dataset-level scaling curves: mean over questions of per-question values.

    Every question must carry the same number of samples n; ks beyond n are
    rejected. Per-question randomness is seeded by a stable hash of
    (seed, question_id) so results do not depend on question order.
    """
    if not answer_sets:
        raise PreconditionError("no answer sets to aggregate")
    n = answer_sets[0].n
    offenders = [s.question_id for s in answer_sets if s.n != n]
    if offenders:
        raise RaggedSamplesError(
            f"questions with sample counts differing from n={n}: {offenders[:10]}",
            offenders=offenders,
        )
    if not ks:
        raise PreconditionError("ks must be non-empty")
    for k in ks:
        if not (1 <= k <= n):
            raise PreconditionError(f"k={k} outside 1..n with n={n}")
    estimates = []
    for k in ks:
        passes, anys, cons = [], [], []
        for aset in answer_sets:
            sub = _subseed(seed, aset.question_id)
            c = sum(aset.correctness)
            passes.append(pass_at_k(aset.n, c, k))
            anys.append(any_at_k(aset, k, trials=trials, seed=sub))
            cons.append(
                consensus_at_k(
                    aset, k, trials=trials, seed=sub, equivalence=equivalence, pairwise=pairwise
                )
            )
        m = len(answer_sets)
        estimates.append(ScalingEstimate(k, "pass", sum(passes) / m, trials, seed))
        estimates.append(ScalingEstimate(k, "any", sum(anys) / m, trials, seed))
        estimates.append(ScalingEstimate(k, "consensus", sum(cons) / m, trials, seed))
    return estimates
