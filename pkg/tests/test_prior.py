import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

from pfcluster.errors import ConfigError, InputError
from pfcluster.prior import (
    MAX_CONDITION,
    GmmHypothesis,
    PriorConfig,
    gmm_posterior,
    make_training_stream,
    sample_hypothesis,
    sample_stream_task,
    sample_task,
)


def test_config_json_round_trip_and_keys():
    cfg = PriorConfig(c_range=(2, 4), warp_prob=0.25, seed=9)
    doc = json.loads(cfg.to_json())
    assert set(doc) == {"c_range", "d_range", "n_range", "sep_scale", "cov_scale", "warp_prob", "seed"}
    assert PriorConfig.from_json(cfg.to_json()) == cfg


def test_config_rejects_unknown_key_and_bad_ranges():
    with pytest.raises(ConfigError, match="c_rnage"):
        PriorConfig.from_dict({"c_rnage": [2, 3]})
    with pytest.raises(ConfigError):
        PriorConfig(c_range=(5, 2))
    with pytest.raises(ConfigError):
        PriorConfig(warp_prob=1.5)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_sampled_covariances_are_well_conditioned(seed):
    h = sample_hypothesis(np.random.default_rng(seed), PriorConfig())
    for F in h.cov_factors:
        assert np.allclose(F, np.tril(F))
        assert np.linalg.cond(F @ F.T) <= MAX_CONDITION * (1 + 1e-9)
    assert h.weights.sum() == pytest.approx(1.0)
    assert set(np.unique(h.component_labels)) == set(range(h.n_clusters))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_context_covers_every_present_cluster(seed):
    task = sample_stream_task(seed, 0, PriorConfig(n_range=(64, 128)))
    present = set(np.unique(task.labels))
    assert set(np.unique(task.labels[task.context_idx])) == present
    assert np.unique(task.context_idx).size == task.k
    assert task.n_clusters <= task.k < task.n


def test_zero_weight_component_yields_single_label():
    h = GmmHypothesis([1.0, 0.0], np.array([[0.0], [5.0]]), np.array([[[1.0]], [[1.0]]]))
    task = sample_task(np.random.default_rng(0), h, 40, 3)
    assert np.unique(task.labels).size == 1


def test_context_too_small_for_present_clusters():
    h = GmmHypothesis([0.5, 0.5], np.array([[0.0], [5.0]]), np.array([[[1.0]], [[1.0]]]))
    with pytest.raises((ConfigError, InputError)):
        sample_task(np.random.default_rng(0), h, 40, 1)


def test_label_permutation_is_symmetric():
    cfg = PriorConfig(c_range=(2, 2), d_range=(1, 2), n_range=(64, 64))
    wins = 0
    trials = 2000
    for i in range(trials):
        task = sample_stream_task(1, i, cfg)
        counts = np.bincount(task.labels, minlength=2)
        wins += counts[0] > counts[1]
    # binomial(2000, 1/2) has sd ~ 0.011 of the rate
    assert abs(wins / trials - 0.5) < 0.05


def test_posterior_symmetric_midpoint():
    h = GmmHypothesis([0.5, 0.5], np.array([[-1.0, 0.0], [1.0, 0.0]]), np.array([np.eye(2), np.eye(2)]))
    np.testing.assert_allclose(gmm_posterior(h, np.zeros(2)), [0.5, 0.5], atol=1e-15)


def test_posterior_matches_scipy_densities():
    rng = np.random.default_rng(4)
    h = sample_hypothesis(rng, PriorConfig(d_range=(3, 3), c_range=(3, 3)))
    x = h.means[rng.integers(h.n_components, size=10)] + 0.3 * rng.normal(size=(10, 3))
    logd = np.stack([np.log(w) + multivariate_normal(m, F @ F.T).logpdf(x)
                     for w, m, F in zip(h.weights, h.means, h.cov_factors)], axis=1)
    resp = np.exp(logd - logsumexp(logd, axis=1, keepdims=True))
    expected = np.zeros((10, h.n_clusters))
    for j, c in enumerate(h.component_labels):
        expected[:, c] += resp[:, j]
    np.testing.assert_allclose(gmm_posterior(h, x), expected, atol=1e-10)


def test_posterior_far_point_is_one_hot():
    h = GmmHypothesis([0.5, 0.5], np.array([[0.0], [10.0]]), np.array([[[0.1]], [[0.1]]]))
    p = gmm_posterior(h, np.array([10.0]))
    assert p[1] == pytest.approx(1.0)


def test_permuted_hypothesis_matches_task_labels():
    task = sample_stream_task(5, 3, PriorConfig(warp_prob=0.0))
    post = gmm_posterior(task.hypothesis, task.latent)
    # the posterior mode agrees with the sampled label far more often than chance
    assert (post.argmax(axis=1) == task.labels).mean() > 0.8


def test_stream_is_deterministic_per_index():
    cfg = PriorConfig()
    a, b = sample_stream_task(3, 17, cfg), sample_stream_task(3, 17, cfg)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.context_idx, b.context_idx)
    s1 = make_training_stream(np.random.default_rng(0), cfg)
    s2 = make_training_stream(np.random.default_rng(0), cfg)
    for _ in range(3):
        assert np.array_equal(next(s1).X, next(s2).X)


def test_warp_applies_to_observed_points_only():
    cfg = PriorConfig(warp_prob=1.0)
    task = sample_stream_task(2, 0, cfg)
    assert task.hypothesis.warped
    assert not np.allclose(task.X, task.latent)
    np.testing.assert_allclose(task.hypothesis.apply_warp(task.latent.copy()), task.X)


def test_cluster_count_is_uniform():
    from scipy.stats import chisquare

    rng = np.random.default_rng(11)
    counts = np.bincount([sample_hypothesis(rng, PriorConfig()).n_clusters for _ in range(2000)], minlength=11)[2:]
    assert chisquare(counts).pvalue > 0.01


def test_stream_context_size_is_uniform_per_cluster_count():
    from scipy.stats import chisquare

    cfg = PriorConfig(c_range=(3, 3), n_range=(40, 40))
    ks = np.array([sample_stream_task(5, i, cfg).k for i in range(1500)])
    assert ks.min() >= 3 and ks.max() <= 20
    assert chisquare(np.bincount(ks, minlength=21)[3:]).pvalue > 0.01


def test_single_component_sample_mean():
    h = GmmHypothesis([1.0], np.array([[2.0, -1.0]]), np.array([np.diag([0.5, 2.0])]))
    task = sample_task(np.random.default_rng(42), h, 400, 5)
    sd = np.array([0.5, 2.0])
    assert np.all(np.abs(task.X.mean(axis=0) - h.means[0]) < 5 * sd / np.sqrt(400))
