import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from condistill import inference, nets
from condistill.estimators import ClipClassifier, ConfidenceStudent, VideoClassifier
from condistill.exceptions import ConfigError, NumericError


@pytest.fixture(scope="module")
def fitted(tiny_clips):
    X, y = tiny_clips.volumes, tiny_clips.labels
    teacher = ClipClassifier(num_classes=4, epochs=1).fit(X, y)
    student = ConfidenceStudent(teacher=teacher, epochs=1).fit(X, y)
    return teacher, student


def videos_of(clip_set):
    slices = clip_set.video_slices()
    return [clip_set.volumes[r] for r in slices], np.array([clip_set.labels[r[0]] for r in slices])


def test_get_params_and_clone():
    est = ConfidenceStudent(method="st-ent", lam=0.5, epochs=3)
    assert est.get_params()["lam"] == 0.5
    twin = clone(est)
    assert twin.get_params() == est.get_params() and twin is not est
    assert clone(VideoClassifier(k=5)).k == 5


def test_teacher_fit_predict(fitted, tiny_clips):
    teacher, _ = fitted
    X = tiny_clips.volumes
    proba = teacher.predict_proba(X)
    assert proba.shape == (len(X), 4) and np.allclose(proba.sum(1), 1, atol=1e-9)
    assert (teacher.predict(X) == proba.argmax(1)).all()
    assert 0 <= teacher.score(X, tiny_clips.labels) <= 1
    assert teacher.predict(X[0]).shape == (1,)  # a single clip is promoted


def test_teacher_matches_trainer_pipeline(fitted, tiny_models, tiny_clips):
    teacher, _ = fitted
    t_ckpt, _, _ = tiny_models
    assert nets.ParameterCheckpoint.from_net(teacher.net_, 0).digest() == t_ckpt.digest()


def test_student_outputs(fitted, tiny_clips):
    _, student = fitted
    X = tiny_clips.volumes
    feats = student.transform(X)
    assert feats.shape == (len(X), 2)
    assert np.allclose(feats[:, 0], student.predict_confidence(X))
    assert ((feats[:, 0] > 0) & (feats[:, 0] < 1)).all()
    assert ((feats[:, 1] >= 0) & (feats[:, 1] <= np.log(4) + 1e-9)).all()


def test_student_explicit_z(fitted, tiny_clips):
    teacher, _ = fitted
    z = np.ones(len(tiny_clips), dtype=int)
    s = ConfidenceStudent(teacher=teacher, method="naive-bce", epochs=1).fit(tiny_clips.volumes, tiny_clips.labels, z=z)
    assert s.log_.records[0].kd == 0.0


def test_not_fitted():
    with pytest.raises(NotFittedError):
        ClipClassifier().predict(np.zeros((1, 8, 3, 16, 16)))
    with pytest.raises(NotFittedError):
        ConfidenceStudent(teacher=ClipClassifier()).fit(np.zeros((1, 8, 3, 16, 16)), [0])


def test_validation_errors(fitted):
    teacher, _ = fitted
    with pytest.raises(ValueError):
        teacher.predict(np.zeros((2, 8, 3, 8, 8)))
    with pytest.raises(ValueError):
        teacher.predict(np.zeros((2, 8, 16, 16)))
    bad = np.zeros((1, 8, 3, 16, 16))
    bad[0, 0, 0, 0, 0] = np.nan
    with pytest.raises(NumericError):
        teacher.predict(bad)
    with pytest.raises(ValueError):
        ClipClassifier(epochs=1).fit(np.zeros((3, 8, 3, 16, 16)), [0, 1])
    with pytest.raises(ValueError):
        ClipClassifier(epochs=1).fit(np.zeros((2, 8, 3, 16, 16)), [0.5, 1])
    with pytest.raises(ConfigError):
        ConfidenceStudent(teacher=teacher, method="mse").fit(np.zeros((2, 8, 3, 16, 16)), [0, 1])


def test_video_classifier_dense_equals_predict_dense(fitted, tiny_clips):
    teacher, _ = fitted
    videos, y = videos_of(tiny_clips)
    clf = VideoClassifier(teacher, regime="dense").fit()
    expected = np.stack([inference.predict_dense(teacher.net_, v).class_probs for v in videos])
    assert np.allclose(clf.predict_proba(videos), expected, atol=1e-12)
    assert clf.score(videos, y) == np.mean(expected.argmax(1) == y)


def test_video_classifier_regimes(fitted, tiny_clips):
    teacher, student = fitted
    videos, y = videos_of(tiny_clips)
    for params in (dict(regime="topk", sampler="confidence", k=2), dict(regime="divided", k=2, k_s=1),
                   dict(regime="topk", sampler="random", k=1, seed=3)):
        clf = VideoClassifier(teacher, student, **params).fit()
        proba = clf.predict_proba(videos)
        assert np.allclose(proba.sum(1), 1, atol=1e-9)
    oracle = VideoClassifier(teacher, None, regime="topk", sampler="oracle", k=1).fit()
    with pytest.raises(ConfigError):
        oracle.predict(videos)
    assert 0 <= oracle.score(videos, y) <= 1


@pytest.mark.parametrize("params", [
    dict(regime="sparse"), dict(sampler="loudest"), dict(k=0), dict(regime="divided", k=2, k_s=3),
    dict(regime="topk", sampler="confidence", student=None),
])
def test_video_classifier_config_errors(fitted, params):
    teacher, student = fitted
    kwargs = dict(teacher=teacher, student=student)
    kwargs.update(params)
    with pytest.raises(ConfigError):
        VideoClassifier(**kwargs).fit()


def test_from_checkpoint(tiny_models, tiny_clips):
    t_ckpt, s_ckpt, _ = tiny_models
    teacher = ClipClassifier.from_checkpoint(t_ckpt)
    student = ConfidenceStudent.from_checkpoint(s_ckpt, teacher=teacher)
    X = tiny_clips.volumes[:3]
    assert np.allclose(teacher.decision_function(X), nets.teacher_forward(t_ckpt.to_net(), X).double().numpy())
    assert student.predict_confidence(X).shape == (3,)
