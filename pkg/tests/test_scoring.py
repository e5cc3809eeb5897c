import logging
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from sklearn.metrics import normalized_mutual_info_score

from oracles import brute_auc, brute_eer, brute_recall
from pseudodist.errors import ConfigError, DataError, MetricError
from pseudodist.models import DistanceConfig, EncoderConfig, init_models
from pseudodist.numeric import make_rng
from pseudodist.scoring import (
    Trial, compute_auc, compute_eer, cosine_rows, d_cluster_assign, generate_trials, kmeans, nmi,
    operating_points, recall_at_k, roc_report, score_trials, trial_labels,
)


def scores_labels(tgt, non):
    return np.r_[tgt, non], np.r_[np.ones(len(tgt), int), np.zeros(len(non), int)]


# trials


def test_all_pairs_trials():
    trials = generate_trials([0, 0, 1, 1])
    assert len(trials) == 6
    assert trial_labels(trials).sum() == 2
    assert all(t.enroll_ids[0] < t.test_id for t in trials)


def test_sampled_trials_are_balanced_and_distinct():
    labels = np.repeat(np.arange(5), 20)
    trials = generate_trials(labels, "sampled", n=100, target_fraction=0.5, rng=make_rng(0))
    assert trial_labels(trials).sum() == 50
    keys = {tuple(sorted((t.enroll_ids[0], t.test_id))) for t in trials}
    assert len(keys) == 100
    for t in trials:
        assert (labels[t.enroll_ids[0]] == labels[t.test_id]) == bool(t.label)


def test_sampled_trials_impossible_balance():
    with pytest.raises(ConfigError):
        generate_trials([0, 0, 1, 1], "sampled", n=10, rng=make_rng(0))


def test_single_class_all_pairs_warns(caplog):
    with caplog.at_level(logging.WARNING):
        trials = generate_trials([3, 3, 3])
    assert all(t.label == 1 for t in trials)
    assert "EER is undefined" in caplog.text


def test_trial_validation():
    with pytest.raises(DataError):
        Trial((), 0, 1)
    with pytest.raises(DataError):
        Trial((0,), 1, 2)


# scoring


def test_cosine_basics():
    a = np.array([[1.0, 2.0], [1.0, 0.0]])
    b = np.array([[1.0, 2.0], [0.0, 3.0]])
    np.testing.assert_allclose(cosine_rows(a, b), [1.0, 0.0], atol=1e-15)


def test_score_trials_on_fresh_bundle():
    bundle = init_models(EncoderConfig(3, 3), DistanceConfig(3, 1, 4), 2, 0)
    x = make_rng(0).normal(size=(5, 3))
    trials = [Trial((0,), 1, 1), Trial((2, 3), 4, 0)]
    scored = score_trials(bundle, x, trials)
    assert [s.score_e2e for s in scored] == [0.5, 0.5]
    for s in scored:
        assert s.score_fused == s.score_e2e + s.score_cos
    z = x @ bundle.encoder[0][0].value
    expected = np.mean(cosine_rows(z[[2, 3]], z[[4, 4]]))
    assert scored[1].score_cos == pytest.approx(expected)
    with pytest.raises(DataError):
        score_trials(bundle, x, [Trial((0,), 9, 1)])


# EER / AUC


def test_eer_simple_cases():
    assert compute_eer(*scores_labels([0.9, 0.8], [0.1, 0.2]))[0] == 0.0
    assert compute_eer(*scores_labels([0.3, 0.5, 0.7], [0.3, 0.5, 0.7]))[0] == 0.5
    s, l = scores_labels([0.8, 0.4, 0.6], [0.5, 0.3, 0.7])
    assert compute_eer(s, l)[0] == pytest.approx(1 / 3, abs=1e-15)
    assert brute_eer(s, l) == Fraction(1, 3)


def test_eer_threshold_separates_perfectly():
    eer, thr = compute_eer(*scores_labels([0.9, 0.8], [0.1, 0.2]))
    assert 0.2 <= thr <= 0.8


def test_operating_points_ends():
    thr, far, miss = operating_points(*scores_labels([1.0, 2.0], [0.0]))
    assert thr[0] == -np.inf and thr[-1] == np.inf
    assert (far[0], miss[0]) == (1.0, 0.0)
    assert (far[-1], miss[-1]) == (0.0, 1.0)
    assert np.all(np.diff(far) <= 0) and np.all(np.diff(miss) >= 0)


def test_auc_cases():
    assert compute_auc(*scores_labels([0.9, 0.8], [0.1, 0.2])) == 0.0
    assert compute_auc(*scores_labels([0.8, 0.4], [0.6, 0.2])) == 0.25
    assert compute_auc(*scores_labels([0.5, 0.5], [0.5])) == 0.5


def test_metric_errors():
    with pytest.raises(MetricError):
        compute_eer([0.1, 0.2], [1, 1])
    with pytest.raises(MetricError):
        compute_auc([np.nan, 0.2], [1, 0])


@settings(max_examples=60)
@given(st.lists(st.integers(0, 6), min_size=1, max_size=15),
       st.lists(st.integers(0, 6), min_size=1, max_size=15))
def test_eer_and_auc_match_oracles_with_ties(tgt, non):
    s, l = scores_labels(np.array(tgt) / 3.0, np.array(non) / 3.0)
    assert compute_eer(s, l)[0] == pytest.approx(float(brute_eer(s, l)), abs=1e-12)
    assert compute_auc(s, l) == float(1 - brute_auc(s, l))


@settings(max_examples=40)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=30), st.integers(0, 2**31))
def test_metrics_invariant_under_monotone_maps(values, seed):
    s = np.array(values)
    l = make_rng(seed).integers(0, 2, size=len(s))
    l[0], l[1] = 0, 1
    for f in (np.exp, lambda v: 3 * v + 1, lambda v: 1 / (1 + np.exp(-v))):
        t = f(s)
        # only strictly order-preserving maps that keep distinct values distinct qualify
        if len(np.unique(t)) != len(np.unique(s)):
            continue
        assert compute_eer(t, l)[0] == pytest.approx(compute_eer(s, l)[0], abs=1e-12)
        assert compute_auc(t, l) == compute_auc(s, l)


def test_roc_report_consistent():
    s, l = scores_labels([0.8, 0.4, 0.6], [0.5, 0.3, 0.7])
    rep = roc_report(s, l)
    assert rep.eer == compute_eer(s, l)[0]
    assert rep.one_minus_auc == compute_auc(s, l)
    assert len(rep.thresholds) == len(rep.far) == len(rep.miss) == 7


# retrieval and clustering


def test_recall_simple_cases():
    z = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert recall_at_k([0, 0, 1], [1], embeddings=z)[1] == pytest.approx(2 / 3)
    assert recall_at_k([0, 1, 2, 3], [1, 2, 3], embeddings=np.eye(4)) == {1: 0.0, 2: 0.0, 3: 0.0}


def test_recall_hand_configuration():
    z = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 0.9], [-1.0, 0.0], [0.7, 0.7]])
    labels = np.array([0, 1, 1, 0, 2, 2])
    sim = (z / np.linalg.norm(z, axis=1, keepdims=True))
    sim = sim @ sim.T
    ks = [1, 2, 3, 5]
    got = recall_at_k(labels, ks, embeddings=z)
    assert got == brute_recall(sim, labels, ks)
    assert got == {1: 0.0, 2: 0.0, 3: 0.5, 5: 1.0}


def test_recall_arguments():
    with pytest.raises(ConfigError):
        recall_at_k([0, 1], [1])
    with pytest.raises(ConfigError):
        recall_at_k([0, 1], [2], embeddings=np.eye(2))


def test_kmeans_k_equals_n():
    x = make_rng(0).normal(size=(6, 2))
    assign, centroids, inertia = kmeans(x, 6)
    assert sorted(assign) == list(range(6)) and inertia == 0.0


def test_kmeans_separated_blobs():
    rng = make_rng(1)
    x = np.vstack([rng.normal(size=(30, 2)) * 0.1, rng.normal(size=(30, 2)) * 0.1 + 10])
    assign, _, _ = kmeans(x, 2, seed=4)
    assert len(set(assign[:30])) == 1 and len(set(assign[30:])) == 1
    assert assign[0] != assign[-1]
    doubled, _, _ = kmeans(np.vstack([x, x]), 2, seed=4)
    assert nmi(doubled, np.r_[assign, assign]) == 1.0


def test_nmi_cases():
    labels = np.array([0, 0, 1, 1, 2, 2])
    assert nmi(np.array([5, 5, 3, 3, 9, 9]), labels) == pytest.approx(1.0)
    assert nmi(np.zeros(6, int), labels) == 0.0
    assert nmi(np.zeros(6, int), np.zeros(6, int)) == 0.0
    rng = make_rng(2)
    a, y = rng.integers(0, 5, 20_000), rng.integers(0, 5, 20_000)
    assert nmi(a, y) < 0.002


@settings(max_examples=50)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=40))
def test_nmi_matches_sklearn(pairs):
    a, y = np.array(pairs).T
    # sklearn scores two constant partitions as 1; here any constant partition gives 0
    assume(len(set(a)) > 1 and len(set(y)) > 1)
    ref = normalized_mutual_info_score(y, a, average_method="geometric")
    assert nmi(a, y) == pytest.approx(ref, abs=1e-10)


def test_d_cluster_assign_ties_go_to_first():
    bundle = init_models(EncoderConfig(2, 2), DistanceConfig(2, 1, 4), 2, 0)
    z = make_rng(0).normal(size=(5, 2))
    assert list(d_cluster_assign(bundle, z, np.eye(2))) == [0] * 5
    assert list(d_cluster_assign(bundle, z, np.ones((1, 2)))) == [0] * 5
