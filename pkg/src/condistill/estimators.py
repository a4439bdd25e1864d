"""scikit-learn style wrappers around the teacher, the student and video inference.

The estimators take clip arrays (n_clips, L, 3, H, W) and integer class
indices, so they slot into ``cross_val_score``, ``clone`` and friends::

    teacher = ClipClassifier(num_classes=6).fit(X_train, y_train)
    student = ConfidenceStudent(teacher=teacher).fit(X_train, y_train)
    video_clf = VideoClassifier(teacher, student, regime="topk", k=3).fit()
    video_clf.predict(videos)
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import inference, nets, sampling, trainer
from .distill import LossConfig, pseudo_labels_from_probs, softened_softmax
from .exceptions import ConfigError
from .validation import check_clips, check_labels, check_videos


def _batched_forward(fn, net, X: np.ndarray, batch_size: int = 256):
    outs = [fn(net, X[lo : lo + batch_size]) for lo in range(0, len(X), batch_size)]
    return outs


class ClipClassifier(ClassifierMixin, BaseEstimator):
    """Teacher clip classifier trained with cross-entropy.

    Parameters
    ----------
    num_classes : int, optional
        Number of classes. Inferred as ``max(y) + 1`` when omitted.
    epochs, base_lr, batch_size, momentum, seed
        SGD schedule; the learning rate is divided by 1.25 every epoch.
    descriptor : dict, optional
        Architecture descriptor; defaults to the reference teacher sized to
        the training clips.
    """

    def __init__(self, num_classes=None, epochs=15, base_lr=0.05, batch_size=32, momentum=0.9, seed=0, descriptor=None):
        self.num_classes = num_classes
        self.epochs = epochs
        self.base_lr = base_lr
        self.batch_size = batch_size
        self.momentum = momentum
        self.seed = seed
        self.descriptor = descriptor

    def fit(self, X, y):
        X = check_clips(X)
        n_classes = self.num_classes or int(np.max(y)) + 1
        y = check_labels(y, len(X), n_classes)
        L, _, H, _ = X.shape[1:]
        descriptor = self.descriptor or nets.reference_teacher(n_classes, L, H)
        cfg = trainer.TrainConfig("teacher", self.epochs, self.base_lr, self.batch_size, self.seed,
                                  momentum=self.momentum)
        with trainer.deterministic(self.seed):
            net = nets.build(descriptor, seed=self.seed)
            self.log_ = trainer.fit_teacher(net, X, y, cfg)
        self.net_ = net
        self.classes_ = np.arange(n_classes)
        self.profile_ = nets.profile(descriptor)
        return self

    @classmethod
    def from_checkpoint(cls, ckpt: nets.ParameterCheckpoint) -> "ClipClassifier":
        est = cls(num_classes=ckpt.descriptor["num_classes"], descriptor=ckpt.descriptor)
        est.net_ = ckpt.to_net()
        est.classes_ = np.arange(ckpt.descriptor["num_classes"])
        est.profile_ = nets.profile(ckpt.descriptor)
        return est

    def _clips(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        L, C3, H, W = (self.net_.input_shape[1], 3, *self.net_.input_shape[2:])
        return check_clips(X, (L, C3, H, W))

    def decision_function(self, X) -> np.ndarray:
        X = self._clips(X)
        return torch.cat(_batched_forward(nets.teacher_forward, self.net_, X)).double().numpy()

    def predict_proba(self, X) -> np.ndarray:
        return softened_softmax(self.decision_function(X), 1.0).numpy()

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]


class ConfidenceStudent(ClassifierMixin, BaseEstimator):
    """Lightweight student with class and teacher-confidence heads.

    ``method`` selects the objective: ``"condi-sr"`` (confidence-modulated
    distillation plus weighted BCE), ``"st-ent"``, ``"st-conf"`` or
    ``"naive-bce"``. The teacher is a fitted :class:`ClipClassifier`; it is
    never modified.
    """

    def __init__(self, teacher=None, method="condi-sr", tau=0.9, lam=1.5, mu=1.5, conf_weight=0.5,
                 epochs=10, base_lr=0.05, batch_size=32, momentum=0.9, seed=0, descriptor=None):
        self.teacher = teacher
        self.method = method
        self.tau = tau
        self.lam = lam
        self.mu = mu
        self.conf_weight = conf_weight
        self.epochs = epochs
        self.base_lr = base_lr
        self.batch_size = batch_size
        self.momentum = momentum
        self.seed = seed
        self.descriptor = descriptor

    def _config(self) -> trainer.TrainConfig:
        if self.method not in trainer.STUDENT_METHODS:
            raise ConfigError(f"method must be one of {trainer.STUDENT_METHODS}, got {self.method!r}")
        loss = LossConfig(self.tau, self.lam, self.mu, self.conf_weight)
        return trainer.TrainConfig(self.method, self.epochs, self.base_lr, self.batch_size, self.seed,
                                   loss, self.momentum)

    def fit(self, X, y, z=None):
        """Fit on clips ``X`` with labels ``y``.

        ``z`` overrides the pseudo-confidence labels, which otherwise come
        from the teacher's argmax on ``X``.
        """
        cfg = self._config()
        if self.teacher is None:
            raise ConfigError("ConfidenceStudent needs a fitted teacher")
        check_is_fitted(self.teacher, "net_")
        X = self.teacher._clips(X)
        n_classes = len(self.teacher.classes_)
        y = check_labels(y, len(X), n_classes)
        t_logits = torch.as_tensor(self.teacher.decision_function(X), dtype=torch.float32)
        if z is None:
            z = pseudo_labels_from_probs(t_logits.numpy(), y)
        else:
            z = check_labels(z, len(X), 2)
        L, _, H, _ = X.shape[1:]
        descriptor = self.descriptor or nets.reference_student(n_classes, L, H)
        with trainer.deterministic(self.seed):
            net = nets.build(descriptor, seed=self.seed)
            self.log_ = trainer.fit_student(net, X, y, t_logits, z, cfg)
        self.net_ = net
        self.classes_ = np.arange(n_classes)
        self.profile_ = nets.profile(descriptor)
        return self

    @classmethod
    def from_checkpoint(cls, ckpt: nets.ParameterCheckpoint, **params) -> "ConfidenceStudent":
        est = cls(descriptor=ckpt.descriptor, **params)
        est.net_ = ckpt.to_net()
        est.classes_ = np.arange(ckpt.descriptor["num_classes"])
        est.profile_ = nets.profile(ckpt.descriptor)
        return est

    def _outputs(self, X) -> nets.StudentOutput:
        check_is_fitted(self, "net_")
        L, H, W = self.net_.input_shape[1:]
        X = check_clips(X, (L, 3, H, W))
        outs = _batched_forward(nets.student_forward, self.net_, X)
        return nets.StudentOutput(torch.cat([o.class_logits for o in outs]),
                                  torch.cat([o.confidence_logit for o in outs]))

    def decision_function(self, X) -> np.ndarray:
        return self._outputs(X).class_logits.double().numpy()

    def predict_proba(self, X) -> np.ndarray:
        return softened_softmax(self.decision_function(X), 1.0).numpy()

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def predict_confidence(self, X) -> np.ndarray:
        """Estimated probability that the teacher classifies each clip correctly."""
        return sampling.confidence_scores(self._outputs(X))

    def predict_entropy(self, X) -> np.ndarray:
        return sampling.class_entropies(self._outputs(X).class_logits)

    def transform(self, X) -> np.ndarray:
        """Per-clip (confidence, entropy) features."""
        out = self._outputs(X)
        return np.column_stack([sampling.confidence_scores(out), sampling.class_entropies(out.class_logits)])


class VideoClassifier(ClassifierMixin, BaseEstimator):
    """Video-level prediction from clip models.

    ``regime`` is ``"dense"`` (all clips, teacher only), ``"topk"`` (teacher on
    K clips picked by ``sampler``) or ``"divided"`` (top-K by confidence, K_s
    of them classified by the student). Fitting only validates the models;
    both must already be trained.
    """

    def __init__(self, teacher=None, student=None, regime="topk", sampler="confidence", k=3, k_s=0,
                 seed=0, weighted=False):
        self.teacher = teacher
        self.student = student
        self.regime = regime
        self.sampler = sampler
        self.k = k
        self.k_s = k_s
        self.seed = seed
        self.weighted = weighted

    def fit(self, videos=None, y=None):
        if self.regime not in inference.REGIMES:
            raise ConfigError(f"regime must be one of {inference.REGIMES}")
        if self.regime != "dense" and self.sampler not in inference.SAMPLERS:
            raise ConfigError(f"sampler must be one of {inference.SAMPLERS}")
        if self.teacher is None:
            raise ConfigError("VideoClassifier needs a fitted teacher")
        check_is_fitted(self.teacher, "net_")
        needs_student = self.regime == "divided" or (
            self.regime == "topk" and self.sampler in inference.LEARNED_SAMPLERS)
        if needs_student:
            if self.student is None:
                raise ConfigError(f"{self.regime}/{self.sampler} needs a fitted student")
            check_is_fitted(self.student, "net_")
        if self.k is not None and self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.regime == "divided" and not 0 <= self.k_s <= self.k:
            raise ConfigError("k_s must lie in [0, k]")
        self.classes_ = self.teacher.classes_
        return self

    def predict_videos(self, videos, y=None) -> list[inference.VideoPrediction]:
        check_is_fitted(self, "classes_")
        shape = (self.teacher.net_.input_shape[1], 3, *self.teacher.net_.input_shape[2:])
        videos = check_videos(videos, shape)
        if self.sampler == "oracle" and self.regime == "topk" and y is None:
            raise ConfigError("the oracle sampler needs the true labels")
        student = self.student.net_ if self.student is not None else None
        preds = []
        for i, clips in enumerate(videos):
            k = len(clips) if self.k is None else min(self.k, len(clips))
            if self.regime == "dense":
                p = inference.predict_dense(self.teacher.net_, clips)
            elif self.regime == "topk":
                p = inference.predict_topk(self.teacher.net_, student, clips, k, self.sampler,
                                           label=None if y is None else int(y[i]),
                                           seed=(self.seed, i), weighted=self.weighted)
            else:
                p = inference.predict_divided(self.teacher.net_, student, clips, k, min(self.k_s, k))
            preds.append(p)
        return preds

    def predict_proba(self, videos, y=None) -> np.ndarray:
        return np.stack([p.class_probs for p in self.predict_videos(videos, y)])

    def predict(self, videos, y=None) -> np.ndarray:
        return self.classes_[[p.predicted_class for p in self.predict_videos(videos, y)]]

    def score(self, videos, y, sample_weight=None) -> float:
        y = np.asarray(y)
        pred = self.predict(videos, y if self.sampler == "oracle" else None)
        return float(np.average(pred == y, weights=sample_weight))
