import numpy as np
import pytest
import torch

from condistill import nets, trainer, videodata
from condistill.distill import make_pseudo_labels

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """12 videos, 4 classes, 3 clips each. For plumbing, not learning."""
    d = tmp_path_factory.mktemp("tiny")
    return videodata.generate_corpus(d, 12, 4, 24, frame_size=16, corrupt_prob=0.3, seed=3, clip_length=8)


@pytest.fixture(scope="session")
def tiny_clips(tiny_corpus):
    return videodata.load_clip_set(tiny_corpus)


@pytest.fixture(scope="session")
def tiny_models(tiny_corpus, tiny_clips):
    """One-epoch teacher and ConDi-SR student on the tiny corpus."""
    t_cfg = trainer.TrainConfig("teacher", epochs=1, base_lr=0.05, seed=0)
    t_ckpt, _ = trainer.train_teacher(t_cfg, tiny_clips)
    table = make_pseudo_labels(t_ckpt.to_net(), tiny_clips)
    s_cfg = trainer.TrainConfig("condi-sr", epochs=1, base_lr=0.05, seed=0)
    s_ckpt, _ = trainer.distill_student(s_cfg, t_ckpt, table, tiny_clips)
    return t_ckpt, s_ckpt, table


@pytest.fixture(scope="session")
def small_trained(tmp_path_factory):
    """Teacher and ConDi-SR student trained long enough to learn something.

    160 train / 40 test videos, 4 classes, 6 clips per video.
    """
    root = tmp_path_factory.mktemp("small")
    train = videodata.generate_corpus(root / "train", 160, 4, 48, 16, 0.3, seed=21, clip_length=8)
    test = videodata.generate_corpus(root / "test", 40, 4, 48, 16, 0.3, seed=22, clip_length=8)
    train_clips = videodata.load_clip_set(train)
    t_cfg = trainer.TrainConfig("teacher", epochs=8, base_lr=0.05, seed=0)
    t_ckpt, t_log = trainer.train_teacher(t_cfg, train_clips)
    table = make_pseudo_labels(t_ckpt.to_net(), train_clips)
    s_cfg = trainer.TrainConfig("condi-sr", epochs=8, base_lr=0.05, seed=0)
    s_ckpt, s_log = trainer.distill_student(s_cfg, t_ckpt, table, train_clips)
    return {
        "train": train, "test": test, "test_clips": videodata.load_clip_set(test),
        "teacher": t_ckpt, "student": s_ckpt, "teacher_log": t_log, "student_log": s_log,
    }


def random_clips(n, shape=(8, 3, 16, 16), seed=0):
    return np.random.default_rng(seed).random((n, *shape), dtype=np.float32)
