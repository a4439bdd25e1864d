"""Confidence distillation for clip selection in video classification.

A frozen teacher clip classifier labels every training clip with whether it
classified it correctly. A small student learns both the class and that
confidence, then ranks clips at inference time so the teacher only looks at
the most informative ones, or so the work is split between the two.
"""

from .bench import ExperimentSpec, ReportTable, render_report, run_experiment
from .distill import LossConfig, PseudoLabelTable, make_pseudo_labels
from .estimators import ClipClassifier, ConfidenceStudent, VideoClassifier
from .exceptions import CheckpointError, CondistillError, ConfigError, DataError, NumericError
from .inference import MetricsRecord, evaluate_split, predict_dense, predict_divided, predict_topk
from .nets import ModelProfile, ParameterCheckpoint, profile, reference_student, reference_teacher
from .trainer import TrainConfig, distill_student, train_teacher
from .videodata import generate_corpus, load_corpus, segment

__version__ = "0.1.0"

__all__ = [
    "CheckpointError", "ClipClassifier", "CondistillError", "ConfidenceStudent", "ConfigError",
    "DataError", "ExperimentSpec", "LossConfig", "MetricsRecord", "ModelProfile", "NumericError",
    "ParameterCheckpoint", "PseudoLabelTable", "ReportTable", "TrainConfig", "VideoClassifier",
    "distill_student", "evaluate_split", "generate_corpus", "load_corpus", "make_pseudo_labels",
    "predict_dense", "predict_divided", "predict_topk", "profile", "reference_student",
    "reference_teacher", "render_report", "run_experiment", "segment", "train_teacher",
]
