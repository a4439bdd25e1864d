"""Clip rankers and samplers. Ties always break toward the lower clip index."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .distill import predictive_entropy, softened_softmax
from .exceptions import ConfigError

SCORE_KINDS = ("confidence", "neg_entropy", "true_class_prob", "none")


@dataclass(frozen=True)
class RankedClipList:
    indices: tuple[int, ...]
    scores: tuple[float, ...]
    score_kind: str = "none"

    def __post_init__(self):
        if self.score_kind not in SCORE_KINDS:
            raise ValueError(f"unknown score kind {self.score_kind!r}")

    def top(self, k: int) -> "RankedClipList":
        return RankedClipList(self.indices[:k], self.scores[:k], self.score_kind)

    def score_of(self, index: int) -> float:
        return self.scores[self.indices.index(index)]

    def to_json(self, video_id: str) -> str:
        return json.dumps({"video_id": video_id, "indices": list(self.indices),
                           "scores": list(self.scores), "score_kind": self.score_kind})


@dataclass(frozen=True)
class SelectionPlan:
    teacher_clips: tuple[int, ...]
    student_clips: tuple[int, ...]

    def __post_init__(self):
        if set(self.teacher_clips) & set(self.student_clips):
            raise ValueError("teacher and student clip sets overlap")

    @property
    def k(self) -> int:
        return len(self.teacher_clips) + len(self.student_clips)


def rank_scores(scores, score_kind: str, k: int | None = None) -> RankedClipList:
    """Sort descending by score, ascending index on ties; keep the first ``k``."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    order = np.lexsort((np.arange(len(s)), -s))
    if k is not None:
        order = order[:k]
    return RankedClipList(tuple(int(i) for i in order), tuple(float(s[i]) for i in order), score_kind)


def _check_k(n: int, k: int) -> None:
    if k < 0:
        raise ConfigError("K must be >= 0")
    if k > n:
        raise ConfigError(f"K={k} exceeds the number of clips N={n}")


def sample_random(n: int, k: int, seed) -> tuple[int, ...]:
    """K distinct indices drawn uniformly without replacement, sorted."""
    _check_k(n, k)
    rng = np.random.default_rng(seed)
    return tuple(sorted(int(i) for i in rng.choice(n, size=k, replace=False)))


def sample_equidistant(n: int, k: int) -> tuple[int, ...]:
    _check_k(n, k)
    return tuple((i * n) // k for i in range(k))


def sample_oracle(true_class_probs, k: int) -> RankedClipList:
    """Top-K clips by the teacher's probability for the ground-truth class."""
    p = np.asarray(true_class_probs, dtype=np.float64)
    _check_k(len(p), k)
    return rank_scores(p, "true_class_prob", k)


def confidence_scores(student_out) -> np.ndarray:
    """z~ = sigmoid(confidence logit) per clip."""
    logit = np.asarray(student_out.confidence_logit, dtype=np.float64)
    return 1.0 / (1.0 + np.exp(-logit))


def class_entropies(class_logits) -> np.ndarray:
    p = softened_softmax(np.asarray(class_logits, dtype=np.float64), 1.0)
    return predictive_entropy(p).numpy()


def rank_by_confidence(student, clips) -> RankedClipList:
    from .nets import student_forward

    return rank_scores(confidence_scores(student_forward(student, clips)), "confidence")


def rank_by_entropy(student, clips) -> RankedClipList:
    """Most certain clips first: score = -H(softmax(class logits))."""
    from .nets import student_forward

    return rank_scores(-class_entropies(student_forward(student, clips).class_logits), "neg_entropy")


def make_selection_plan(confidence: RankedClipList, entropy: RankedClipList, k: int, k_s: int) -> SelectionPlan:
    """Top-K by confidence, then hand the K_s lowest-entropy candidates to the student."""
    n = len(confidence.indices)
    _check_k(n, k)
    if not 0 <= k_s <= k:
        raise ConfigError(f"K_s={k_s} must lie in [0, K={k}]")
    candidates = confidence.indices[:k]
    neg_h = dict(zip(entropy.indices, entropy.scores))
    missing = [c for c in candidates if c not in neg_h]
    if missing:
        raise ConfigError(f"entropy list lacks clips {missing}")
    by_certainty = sorted(candidates, key=lambda c: (-neg_h[c], c))
    student = set(by_certainty[:k_s])
    return SelectionPlan(
        teacher_clips=tuple(c for c in candidates if c not in student),
        student_clips=tuple(c for c in by_certainty[:k_s]),
    )


def export_rankings(rows: Iterable[tuple[str, RankedClipList]], path: str | os.PathLike) -> Path:
    path = Path(path)
    path.write_text("".join(r.to_json(vid) + "\n" for vid, r in rows), encoding="utf-8")
    return path
