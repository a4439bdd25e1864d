"""Pseudo-confidence labels and the distillation objectives.

All losses take batched torch tensors (B, C) / (B,) and return the batch mean,
so autograd supplies gradients with respect to the student's class logits and
confidence logit. Plain Python sequences and numpy arrays are accepted and
promoted to float64 tensors.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

from .exceptions import ConfigError, ManifestError, NumericError

EPS = 1e-12


@dataclass
class LossConfig:
    tau: float = 0.9
    lam: float = 1.5
    mu: float = 1.5
    conf_weight: float = 0.5  # ST-Conf confidence penalty

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError("tau must be > 0")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.mu < 1:
            raise ConfigError("mu must be >= 1")
        if self.conf_weight < 0:
            raise ConfigError("conf_weight must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)


def _t(x, like: torch.Tensor | None = None) -> torch.Tensor:
    if torch.is_tensor(x):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype)


def _batched(x: torch.Tensor) -> torch.Tensor:
    return x[None] if x.ndim == 1 else x


# ---------------------------------------------------------------------------
# Distributions


def softened_softmax(logits, tau: float) -> torch.Tensor:
    """softmax(logits / tau) along the last axis, max-subtracted."""
    if not tau > 0:
        raise ConfigError("tau must be > 0")
    s = _t(logits)
    if not torch.isfinite(s).all():
        raise NumericError("non-finite logits")
    z = s / tau
    z = z - z.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def predictive_entropy(probs) -> torch.Tensor:
    """H(p) = -sum p log p in nats; 0 log 0 taken as 0."""
    p = _t(probs)
    return -(torch.xlogy(p, p)).sum(dim=-1)


def mix_teacher_targets(p_teacher, z_tilde, z) -> torch.Tensor:
    """Blend the softened teacher distribution with the uniform one.

    z = 1: z_tilde * p + (1 - z_tilde) * U
    z = 0: (1 - z_tilde) * p + z_tilde * U
    with U the uniform categorical vector 1/C.
    """
    p = _t(p_teacher)
    zt = _t(z_tilde, like=p)
    zz = _t(z, like=p)
    C = p.shape[-1]
    w = zz * zt + (1 - zz) * (1 - zt)  # weight on the teacher distribution
    if p.ndim > 1:
        w = w.reshape(*w.shape, *([1] * (p.ndim - w.ndim)))
    return w * p + (1 - w) / C


# ---------------------------------------------------------------------------
# Pseudo labels


def pseudo_labels_from_probs(probs, labels) -> np.ndarray:
    """z_i = 1 iff argmax(p_i) == y_i; ties resolve to the lowest class index."""
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    y = np.atleast_1d(np.asarray(labels))
    return (np.argmax(p, axis=1) == y).astype(np.int64)


@dataclass
class PseudoLabelRow:
    video_id: str
    clip_index: int
    z: int
    teacher_top1: int
    teacher_prob_true_class: float


class PseudoLabelTable:
    """Per-clip pseudo labels keyed by (video id, clip index)."""

    def __init__(self, rows: list[PseudoLabelRow]):
        self.rows = list(rows)
        self._index = {(r.video_id, r.clip_index): r for r in self.rows}

    def __len__(self) -> int:
        return len(self.rows)

    def __getitem__(self, key: tuple[str, int]) -> PseudoLabelRow:
        return self._index[key]

    def __eq__(self, other) -> bool:
        return isinstance(other, PseudoLabelTable) and self.rows == other.rows

    def lookup(self, video_ids, clip_indices) -> np.ndarray:
        try:
            return np.array([self._index[(v, int(c))].z for v, c in zip(video_ids, clip_indices)], dtype=np.int64)
        except KeyError as exc:
            raise ManifestError(f"pseudo-label table has no row for clip {exc.args[0]}") from None

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        lines = [json.dumps(asdict(r), sort_keys=True) for r in self.rows]
        path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PseudoLabelTable":
        rows = []
        for ln in Path(path).read_text(encoding="utf-8").splitlines():
            if ln.strip():
                rows.append(PseudoLabelRow(**json.loads(ln)))
        return cls(rows)


def make_pseudo_labels(teacher, clip_set, batch_size: int = 256) -> PseudoLabelTable:
    """Label every clip with the teacher's correctness.

    ``clip_set`` is a :class:`~condistill.videodata.ClipSet` or a manifest.
    """
    from .nets import teacher_forward
    from .videodata import DatasetManifest, load_clip_set

    if isinstance(clip_set, DatasetManifest):
        clip_set = load_clip_set(clip_set)
    probs = []
    for lo in range(0, len(clip_set), batch_size):
        logits = teacher_forward(teacher, clip_set.volumes[lo : lo + batch_size])
        probs.append(softened_softmax(logits.double(), 1.0).numpy())
    p = np.concatenate(probs) if probs else np.zeros((0, 1))
    z = pseudo_labels_from_probs(p, clip_set.labels) if len(p) else np.zeros(0, dtype=np.int64)
    rows = [
        PseudoLabelRow(
            video_id=clip_set.video_ids[clip_set.video_index[i]],
            clip_index=int(clip_set.clip_index[i]),
            z=int(z[i]),
            teacher_top1=int(np.argmax(p[i])),
            teacher_prob_true_class=float(p[i, clip_set.labels[i]]),
        )
        for i in range(len(p))
    ]
    return PseudoLabelTable(rows)


# ---------------------------------------------------------------------------
# Losses


class LossParts(NamedTuple):
    total: torch.Tensor
    kd: torch.Tensor
    conf: torch.Tensor


def kd_loss(target, student_soft, tau: float) -> torch.Tensor:
    """tau^2 * KL(target || student), mean over the batch."""
    t = _batched(_t(target))
    s = _batched(_t(student_soft, like=t))
    kl = (torch.xlogy(t, t) - t * torch.log(s.clamp_min(EPS))).sum(dim=-1)
    out = tau**2 * kl.mean()
    if not torch.isfinite(out):
        raise NumericError("kd_loss is not finite")
    return out


def confidence_bce(z_tilde, z, mu: float) -> torch.Tensor:
    """-[mu z log z~ + (1 - z) log(1 - z~)], mean over the batch."""
    zt = _t(z_tilde)
    hi = 1 - max(EPS, torch.finfo(zt.dtype).eps)
    zt = zt.clamp(EPS, hi)
    zz = _t(z, like=zt)
    return -(mu * zz * torch.log(zt) + (1 - zz) * torch.log(1 - zt)).mean()


def confidence_bce_from_logit(conf_logit, z, mu: float) -> torch.Tensor:
    """:func:`confidence_bce` of sigmoid(logit), evaluated in log space.

    Same floor (log 1e-12) on both log terms; stays finite in float32 when
    the confidence saturates.
    """
    x = _t(conf_logit)
    zz = _t(z, like=x)
    floor = math.log(EPS)
    log_p = F.logsigmoid(x).clamp_min(floor)
    log_q = F.logsigmoid(-x).clamp_min(floor)
    return -(mu * zz * log_p + (1 - zz) * log_q).mean()


def condi_sr_loss(teacher_logits, student_out, z, config: LossConfig) -> LossParts:
    """Confidence-modulated distillation plus weighted confidence BCE.

    The mixed teacher target is a constant for differentiation: the confidence
    logit only receives gradient through the BCE term.
    """
    class_logits, conf_logit = _t(student_out[0]), _t(student_out[1])
    t_logits = _t(teacher_logits, like=class_logits)
    if t_logits.shape != class_logits.shape:
        raise ConfigError(f"teacher logits {tuple(t_logits.shape)} vs student {tuple(class_logits.shape)}")
    z_tilde = torch.sigmoid(conf_logit)
    with torch.no_grad():
        target = mix_teacher_targets(softened_softmax(t_logits, config.tau), z_tilde, z)
    kd = kd_loss(target, softened_softmax(class_logits, config.tau), config.tau)
    conf = confidence_bce_from_logit(conf_logit, z, config.mu)
    return LossParts(kd + config.lam * conf, kd, conf)


def naive_bce_loss(student_out, z, mu: float) -> torch.Tensor:
    """Confidence BCE alone; class logits are ignored."""
    return confidence_bce_from_logit(student_out[1], z, mu)


def st_ent_loss(teacher_logits, student_out, tau: float) -> torch.Tensor:
    """Plain soft-label distillation; the confidence head is left untrained."""
    class_logits = _t(student_out[0])
    t_soft = softened_softmax(_t(teacher_logits, like=class_logits), tau).detach()
    return kd_loss(t_soft, softened_softmax(class_logits, tau), tau)


def st_conf_loss(student_out, labels, conf_weight: float) -> torch.Tensor:
    """Learned self-confidence by hint interpolation.

    p' = c * softmax(logits) + (1 - c) * onehot(y); loss = -log p'_y - w log c.
    """
    class_logits, conf_logit = _t(student_out[0]), _t(student_out[1])
    p = softened_softmax(class_logits, 1.0)
    c = torch.sigmoid(conf_logit).clamp(EPS, 1 - EPS)
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    onehot = F.one_hot(y, p.shape[-1]).to(p.dtype)
    cc = c.reshape(*c.shape, 1)
    p_mix = cc * p + (1 - cc) * onehot
    task = -torch.log((p_mix * onehot).sum(dim=-1).clamp_min(EPS))
    return (task - conf_weight * torch.log(c)).mean()
