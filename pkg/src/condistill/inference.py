"""Video-level prediction under dense, top-K and divided-workload regimes."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
from sklearn.metrics import roc_auc_score

from . import sampling
from .distill import predictive_entropy, softened_softmax
from .exceptions import ConfigError
from .nets import ClipNet, profile, student_forward, teacher_forward
from .videodata import ClipSet, Video, segment, stack_clips

REGIMES = ("dense", "topk", "divided")
SAMPLERS = ("random", "equidistant", "oracle", "confidence", "entropy")
LEARNED_SAMPLERS = ("confidence", "entropy")


@dataclass
class VideoPrediction:
    class_probs: np.ndarray
    predicted_class: int
    clips_used: object  # SelectionPlan or tuple of clip indices
    flops_spent: int
    wall_time: float


@lru_cache(maxsize=32)
def _flops(descriptor_json: str) -> int:
    return profile(json.loads(descriptor_json)).flops_per_clip


def clip_flops(net: ClipNet) -> int:
    return _flops(json.dumps(net.descriptor, sort_keys=True))


def _clips_of(video, clip_length: int) -> np.ndarray:
    if isinstance(video, Video):
        return stack_clips(segment(video, clip_length))
    clips = np.asarray(video, dtype=np.float32)
    if clips.ndim != 5:
        raise ValueError(f"expected clips of shape (N, L, 3, H, W), got {clips.shape}")
    return clips


def _teacher_probs(teacher: ClipNet, clips: np.ndarray, indices) -> np.ndarray:
    # Ascending index order keeps the teacher batch identical across regimes.
    idx = sorted(indices)
    logits = teacher_forward(teacher, clips[idx]).double()
    return dict(zip(idx, softened_softmax(logits, 1.0).numpy()))


def _aggregate(vectors: list[np.ndarray], weights: list[float] | None = None) -> np.ndarray:
    v = np.stack(vectors)
    if weights is None:
        return v.mean(axis=0)
    w = np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if not total > 0:
        return v.mean(axis=0)
    return (w[:, None] * v).sum(axis=0) / total


def _finish(probs: np.ndarray, used, flops: int, t0: float) -> VideoPrediction:
    return VideoPrediction(probs, int(np.argmax(probs)), used, int(flops), time.perf_counter() - t0)


def predict_dense(teacher: ClipNet, video) -> VideoPrediction:
    """Mean teacher softmax over all N clips."""
    t0 = time.perf_counter()
    clips = _clips_of(video, teacher.input_shape[1])
    n = len(clips)
    probs = _teacher_probs(teacher, clips, range(n))
    return _finish(_aggregate([probs[i] for i in range(n)]), tuple(range(n)), n * clip_flops(teacher), t0)


def select_clips(
    sampler: str,
    clips: np.ndarray,
    k: int,
    student: ClipNet | None = None,
    teacher: ClipNet | None = None,
    label: int | None = None,
    seed=None,
):
    """Pick K clips. Returns (indices, student output or None, extra teacher probs, flops)."""
    n = len(clips)
    if k > n:
        raise ConfigError(f"K={k} exceeds the number of clips N={n}")
    if sampler == "random":
        if seed is None:
            raise ConfigError("random sampler needs a seed")
        return sampling.sample_random(n, k, seed), None, None, 0
    if sampler == "equidistant":
        return sampling.sample_equidistant(n, k), None, None, 0
    if sampler == "oracle":
        if label is None or teacher is None:
            raise ConfigError("oracle sampler needs the teacher and the true label")
        probs = _teacher_probs(teacher, clips, range(n))
        ranked = sampling.sample_oracle([probs[i][label] for i in range(n)], k)
        return ranked.indices, None, probs, n * clip_flops(teacher)
    if sampler in LEARNED_SAMPLERS:
        if student is None:
            raise ConfigError(f"{sampler} sampler needs a student")
        out = student_forward(student, clips)
        if sampler == "confidence":
            ranked = sampling.rank_scores(sampling.confidence_scores(out), "confidence")
        else:
            ranked = sampling.rank_scores(-sampling.class_entropies(out.class_logits), "neg_entropy")
        return ranked.indices[:k], out, None, n * clip_flops(student)
    raise ConfigError(f"unknown sampler {sampler!r}")


def predict_topk(
    teacher: ClipNet,
    student: ClipNet | None,
    video,
    k: int,
    sampler: str = "confidence",
    label: int | None = None,
    seed=None,
    weighted: bool = False,
) -> VideoPrediction:
    """Teacher classifies the K selected clips; plain mean of their softmax.

    ``weighted=True`` weights teacher outputs by the student's confidence
    instead (confidence sampler only).
    """
    t0 = time.perf_counter()
    clips = _clips_of(video, teacher.input_shape[1])
    chosen, out, cached, flops = select_clips(sampler, clips, k, student, teacher, label, seed)
    if k == 0:
        raise ConfigError("K must be >= 1 for prediction")
    probs = cached if cached is not None else _teacher_probs(teacher, clips, chosen)
    if cached is None:
        flops += k * clip_flops(teacher)
    order = sorted(chosen)
    weights = None
    if weighted:
        if out is None or sampler != "confidence":
            raise ConfigError("weighted aggregation requires the confidence sampler")
        z = sampling.confidence_scores(out)
        weights = [z[i] for i in order]
    return _finish(_aggregate([probs[i] for i in order], weights), tuple(chosen), flops, t0)


def predict_divided(teacher: ClipNet, student: ClipNet, video, k: int, k_s: int) -> VideoPrediction:
    """Split the top-K confident clips between student (K_s) and teacher (K - K_s).

    Teacher clips are weighted by z~, student clips by 1 - H / log C; the
    weights are renormalised over all K contributions.
    """
    t0 = time.perf_counter()
    clips = _clips_of(video, teacher.input_shape[1])
    n = len(clips)
    if k > n:
        raise ConfigError(f"K={k} exceeds the number of clips N={n}")
    if not 0 <= k_s <= k:
        raise ConfigError(f"K_s={k_s} must lie in [0, K={k}]")
    if k == 0:
        raise ConfigError("K must be >= 1 for prediction")
    out = student_forward(student, clips)
    z = sampling.confidence_scores(out)
    s_probs = softened_softmax(out.class_logits.double(), 1.0)
    entropy = predictive_entropy(s_probs).numpy()
    plan = sampling.make_selection_plan(
        sampling.rank_scores(z, "confidence"), sampling.rank_scores(-entropy, "neg_entropy"), k, k_s
    )
    flops = n * clip_flops(student) + len(plan.teacher_clips) * clip_flops(teacher)
    vectors, weights = [], []
    if plan.teacher_clips:
        t_probs = _teacher_probs(teacher, clips, plan.teacher_clips)
        for i in sorted(plan.teacher_clips):
            vectors.append(t_probs[i])
            weights.append(z[i])
    h_max = math.log(s_probs.shape[-1])
    s_np = s_probs.numpy()
    for i in sorted(plan.student_clips):
        vectors.append(s_np[i])
        weights.append(max(0.0, 1.0 - entropy[i] / h_max))
    return _finish(_aggregate(vectors, weights), plan, flops, t0)


# ---------------------------------------------------------------------------
# Split evaluation


@dataclass
class MetricsRecord:
    regime: str
    sampler: str
    K: int
    K_s: int
    top1: float
    mean_flops: float
    mean_wall_s: float
    auroc: float
    seed: int | str
    dataset_hash: str
    method: str = ""
    median_wall_s: float = float("nan")

    def to_row(self) -> dict:
        return asdict(self)


@dataclass
class ClipDiagnostics:
    """Per-clip teacher correctness and student confidence over a split."""

    teacher_correct: np.ndarray
    confidence: np.ndarray | None

    def auroc(self) -> float:
        if self.confidence is None or len(np.unique(self.teacher_correct)) < 2:
            return float("nan")
        return float(roc_auc_score(self.teacher_correct, self.confidence))


def clip_diagnostics(teacher: ClipNet, student: ClipNet | None, clip_set: ClipSet, batch_size: int = 256) -> ClipDiagnostics:
    correct, conf = [], []
    for lo in range(0, len(clip_set), batch_size):
        x = clip_set.volumes[lo : lo + batch_size]
        pred = teacher_forward(teacher, x).argmax(dim=1).numpy()
        correct.append(pred == clip_set.labels[lo : lo + batch_size])
        if student is not None and "confidence" in student.heads:
            conf.append(sampling.confidence_scores(student_forward(student, x)))
    return ClipDiagnostics(np.concatenate(correct).astype(np.int64), np.concatenate(conf) if conf else None)


def auroc(scores, positives) -> float:
    positives = np.asarray(positives)
    if len(np.unique(positives)) < 2:
        return float("nan")
    return float(roc_auc_score(positives, np.asarray(scores, dtype=np.float64)))


def evaluate_split(
    regime: str,
    teacher: ClipNet,
    student: ClipNet | None,
    clip_set: ClipSet,
    sampler: str = "confidence",
    k: int | None = None,
    k_s: int = 0,
    seed: int = 0,
    dataset_hash: str = "",
    method: str = "",
    weighted: bool = False,
    diagnostics: ClipDiagnostics | None = None,
) -> MetricsRecord:
    """Top-1 accuracy and mean cost of one regime over every video of a split."""
    if regime not in REGIMES:
        raise ConfigError(f"unknown regime {regime!r}")
    if regime != "dense" and sampler not in SAMPLERS:
        raise ConfigError(f"unknown sampler {sampler!r}")
    if regime == "divided" and student is None:
        raise ConfigError("divided regime needs a confidence student")
    correct, flops, walls = [], [], []
    last_k = k
    for v_i, rows in enumerate(clip_set.video_slices()):
        rows = rows[np.argsort(clip_set.clip_index[rows], kind="stable")]
        clips = clip_set.volumes[rows]
        label = int(clip_set.labels[rows[0]])
        n = len(clips)
        kk = n if (k is None or regime == "dense") else min(k, n)
        last_k = kk
        if regime == "dense":
            pred = predict_dense(teacher, clips)
        elif regime == "topk":
            pred = predict_topk(teacher, student, clips, kk, sampler, label=label,
                                seed=(seed, int(clip_set.video_index[rows[0]])), weighted=weighted)
        else:
            pred = predict_divided(teacher, student, clips, kk, min(k_s, kk))
        correct.append(pred.predicted_class == label)
        flops.append(pred.flops_spent)
        walls.append(pred.wall_time)
    if diagnostics is None and student is not None and "confidence" in student.heads:
        diagnostics = clip_diagnostics(teacher, student, clip_set)
    return MetricsRecord(
        regime=regime,
        sampler="all" if regime == "dense" else sampler,
        K=int(last_k) if last_k is not None else 0,
        K_s=int(k_s) if regime == "divided" else 0,
        top1=float(np.mean(correct)),
        mean_flops=float(np.mean(flops)),
        mean_wall_s=float(np.mean(walls)),
        auroc=diagnostics.auroc() if diagnostics is not None else float("nan"),
        seed=seed,
        dataset_hash=dataset_hash,
        method=method,
        median_wall_s=float(np.median(walls)),
    )
