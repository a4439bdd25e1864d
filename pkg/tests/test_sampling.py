import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from condistill import nets, sampling
from condistill.exceptions import ConfigError
from condistill.sampling import (
    RankedClipList, SelectionPlan, make_selection_plan, rank_scores, sample_equidistant, sample_oracle,
    sample_random,
)


# -- random / equidistant -----------------------------------------------------------


@pytest.mark.example
def test_random_k_equals_n():
    assert sample_random(6, 6, seed=4) == tuple(range(6))


@pytest.mark.example
def test_random_same_seed():
    assert sample_random(20, 5, seed=9) == sample_random(20, 5, seed=9)
    assert sample_random(20, 5, seed=(1, 2)) == sample_random(20, 5, seed=(1, 2))


def test_random_uniform_frequencies():
    draws = 10_000
    counts = np.zeros(8)
    for s in range(draws):
        counts[sample_random(8, 1, seed=s)[0]] += 1
    sigma = math.sqrt(draws * (1 / 8) * (7 / 8))
    assert np.all(np.abs(counts - draws / 8) < 3 * sigma), counts


@pytest.mark.example
@pytest.mark.parametrize("n,k,expected", [(10, 5, (0, 2, 4, 6, 8)), (7, 3, (0, 2, 4)), (5, 5, (0, 1, 2, 3, 4))])
def test_equidistant_examples(n, k, expected):
    assert sample_equidistant(n, k) == expected


def test_k_larger_than_n():
    for fn in (lambda: sample_random(3, 4, 0), lambda: sample_equidistant(3, 4), lambda: sample_oracle([0.1] * 3, 4)):
        with pytest.raises(ConfigError):
            fn()


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 40), st.data())
def test_samplers_return_k_distinct_valid_indices(n, data):
    k = data.draw(st.integers(0, n))
    seed = data.draw(st.integers(0, 2**32 - 1))
    for idx in (sample_random(n, k, seed), sample_equidistant(n, k)):
        assert len(idx) == k == len(set(idx))
        assert all(0 <= i < n for i in idx)
    assert sample_equidistant(n, k) == sample_equidistant(n, k)


# -- oracle -------------------------------------------------------------------------


@pytest.mark.example
def test_oracle_example():
    assert sample_oracle([0.9, 0.2, 0.7], 2).indices == (0, 2)
    full = sample_oracle([0.3, 0.9, 0.1, 0.5], 4)
    assert full.indices == (1, 3, 0, 2) and full.score_kind == "true_class_prob"


def oracle_best_mean(p, k):
    """Brute force: the maximum mean over all size-k subsets."""
    return max(np.mean([p[i] for i in c]) for c in itertools.combinations(range(len(p)), k))


def test_oracle_subset_optimal_exhaustive():
    rng = np.random.default_rng(0)
    for n in range(1, 9):
        for k in range(1, min(n, 4) + 1):
            for _ in range(5):
                p = rng.random(n)
                if rng.random() < 0.3:  # exercise ties
                    p = np.round(p, 1)
                chosen = sample_oracle(p, k).indices
                assert np.mean(p[list(chosen)]) == pytest.approx(oracle_best_mean(p, k), abs=1e-12)


# -- ranking ----------------------------------------------------------------------------


@pytest.mark.example
def test_rank_ties_keep_index_order():
    assert rank_scores([0.4] * 5, "confidence").indices == (0, 1, 2, 3, 4)


@pytest.mark.example
def test_rank_order():
    r = rank_scores([0.1, 0.9, 0.5], "confidence")
    assert r.indices == (1, 2, 0)
    assert r.score_of(2) == 0.5
    assert r.top(1).indices == (1,)


@pytest.mark.example
def test_entropy_ranking_examples():
    logits = np.log(np.array([[0.25] * 4, [1.0, 1e-30, 1e-30, 1e-30], [0.5, 0.25, 0.25, 1e-300]]))
    h = sampling.class_entropies(logits)
    assert h[0] == pytest.approx(math.log(4), abs=1e-12) and h[0] == pytest.approx(1.386294, abs=1e-6)
    assert h[1] == pytest.approx(0.0, abs=1e-12)
    assert h[2] == pytest.approx(1.039721, abs=1e-6)
    assert rank_scores(-h, "neg_entropy").indices[0] == 1


def test_unknown_score_kind():
    with pytest.raises(ValueError):
        RankedClipList((0,), (1.0,), "loudness")


def test_rank_by_confidence_and_entropy_on_net():
    net = nets.build(nets.reference_student(4, 8, 16), seed=0)
    clips = np.random.default_rng(0).random((5, 8, 3, 16, 16), dtype=np.float32)
    out = nets.student_forward(net, clips)
    rc = sampling.rank_by_confidence(net, clips)
    re = sampling.rank_by_entropy(net, clips)
    assert sorted(rc.indices) == list(range(5)) == sorted(re.indices)
    assert rc.indices == rank_scores(sampling.confidence_scores(out), "confidence").indices
    assert np.all(np.diff(rc.scores) <= 0) and np.all(np.diff(re.scores) <= 0)


@pytest.mark.example
def test_trained_confidence_ranks_clean_clips_first(small_trained):
    clip_set = small_trained["test_clips"]
    student = small_trained["student"].to_net()
    clean_ranks, corrupt_ranks = [], []
    for rows in clip_set.video_slices():
        ranked = sampling.rank_by_confidence(student, clip_set.volumes[rows])
        position = {c: r for r, c in enumerate(ranked.indices)}
        for j, row in enumerate(rows):
            (corrupt_ranks if clip_set.corrupted[row] else clean_ranks).append(position[j])
    assert np.mean(clean_ranks) < np.mean(corrupt_ranks)


# -- selection plans -------------------------------------------------------------------------


def _plan(conf_order, entropies, k, k_s):
    n = len(entropies)
    conf_scores = np.empty(n)
    conf_scores[list(conf_order)] = np.linspace(1, 0, n)
    return make_selection_plan(rank_scores(conf_scores, "confidence"),
                               rank_scores(-np.asarray(entropies), "neg_entropy"), k, k_s)


@pytest.mark.example
def test_plan_hand_trace():
    plan = _plan([4, 1, 3, 0, 2], [0.2, 0.9, 0.1, 0.5, 0.3], k=3, k_s=1)
    # candidates {4, 1, 3}; clip 4 has the lowest entropy among them (0.3)
    assert plan.student_clips == (4,)
    assert set(plan.teacher_clips) == {1, 3}


@pytest.mark.example
def test_plan_endpoints():
    ent = [0.2, 0.9, 0.1, 0.5, 0.3]
    p0 = _plan([4, 1, 3, 0, 2], ent, 3, 0)
    assert p0.student_clips == () and p0.teacher_clips == (4, 1, 3)
    pk = _plan([4, 1, 3, 0, 2], ent, 3, 3)
    assert pk.teacher_clips == () and set(pk.student_clips) == {4, 1, 3}


def test_plan_errors():
    with pytest.raises(ConfigError):
        _plan([0, 1, 2], [0.1, 0.2, 0.3], 4, 0)
    with pytest.raises(ConfigError):
        _plan([0, 1, 2], [0.1, 0.2, 0.3], 2, 3)
    with pytest.raises(ValueError):
        SelectionPlan((1, 2), (2,))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 12), st.data())
def test_plan_partitions_top_k(n, data):
    conf = data.draw(st.lists(st.floats(0, 1), min_size=n, max_size=n))
    ent = data.draw(st.lists(st.floats(0, 3), min_size=n, max_size=n))
    k = data.draw(st.integers(0, n))
    c_list = rank_scores(conf, "confidence")
    e_list = rank_scores([-e for e in ent], "neg_entropy")
    top = set(c_list.indices[:k])
    for k_s in range(k + 1):
        plan = make_selection_plan(c_list, e_list, k, k_s)
        assert len(plan.student_clips) == k_s and plan.k == k
        assert set(plan.student_clips) | set(plan.teacher_clips) == top
        assert not set(plan.student_clips) & set(plan.teacher_clips)
        if plan.student_clips and plan.teacher_clips:
            assert max(ent[i] for i in plan.student_clips) <= min(ent[i] for i in plan.teacher_clips)


def test_export_rankings(tmp_path):
    path = sampling.export_rankings([("v0", rank_scores([0.2, 0.8], "confidence"))], tmp_path / "r.jsonl")
    row = json.loads(path.read_text().splitlines()[0])
    assert row == {"video_id": "v0", "indices": [1, 0], "scores": [0.8, 0.2], "score_kind": "confidence"}
