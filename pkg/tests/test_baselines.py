import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.cluster.hierarchy import linkage
from sklearn.cluster import DBSCAN
from sklearn.metrics import adjusted_rand_score

from pfcluster.baselines import (
    BaselineSpec,
    DBSCANClusterer,
    KMeansPP,
    dbscan,
    kmeans_fit,
    ward_agglomerative,
    ward_merges,
)
from pfcluster.errors import ConfigError, InputError

from oracles import ward_oracle


def test_ward_matches_exhaustive_oracle():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(int(rng.integers(2, 9)), 2))
        got, want = ward_merges(X), ward_oracle(X)
        assert [m[:2] for m in got] == [m[:2] for m in want]
        np.testing.assert_allclose([m[2] for m in got], [m[2] for m in want], rtol=1e-9, atol=1e-12)


def test_ward_heights_match_scipy():
    X = np.random.default_rng(0).normal(size=(40, 3))
    ours = np.sqrt(2.0 * np.array([m[2] for m in ward_merges(X)]))
    np.testing.assert_allclose(np.sort(ours), np.sort(linkage(X, "ward")[:, 2]), rtol=1e-9)


def test_ward_cut_and_errors():
    X = np.array([[0.0], [0.1], [5.0], [5.1], [10.0]])
    assert ward_agglomerative(X, 3).tolist() == [0, 0, 1, 1, 2]
    with pytest.raises(InputError):
        ward_agglomerative(X, 6)


@pytest.mark.filterwarnings("ignore:The number of unique classes")
@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 1000), eps=st.sampled_from([0.2, 0.5, 1.0]), min_pts=st.integers(1, 6))
def test_dbscan_core_partition_matches_sklearn(seed, eps, min_pts):
    X = np.random.default_rng(seed).normal(size=(60, 2))
    ours = dbscan(X, eps, min_pts)
    ref = DBSCAN(eps=eps, min_samples=min_pts).fit(X)
    core = np.zeros(60, dtype=bool)
    core[ref.core_sample_indices_] = True
    # border points may legitimately go to either neighbouring cluster
    assert np.array_equal(ours == -1, ref.labels_ == -1)
    if core.any():
        assert adjusted_rand_score(ref.labels_[core], ours[core]) == pytest.approx(1.0)


def test_dbscan_all_noise_and_errors():
    X = np.arange(5, dtype=float)[:, None] * 10
    assert np.all(dbscan(X, 1.0, 2) == -1)
    with pytest.raises(InputError):
        dbscan(X, 0.0, 2)


def test_kmeans_inertia_never_increases():
    X = np.random.default_rng(3).normal(size=(300, 2))
    fit = kmeans_fit(X, 5, seed=1)
    assert all(b <= a + 1e-9 for a, b in zip(fit.inertia_history, fit.inertia_history[1:]))
    assert np.bincount(fit.labels, minlength=5).min() > 0


def test_kmeans_is_seeded_and_separates_blobs():
    rng = np.random.default_rng(0)
    X = np.vstack([rng.normal(size=(50, 2)), rng.normal(size=(50, 2)) + 20])
    a, b = kmeans_fit(X, 2, seed=4), kmeans_fit(X, 2, seed=4)
    assert np.array_equal(a.labels, b.labels)
    assert adjusted_rand_score(np.repeat([0, 1], 50), a.labels) == 1.0
    with pytest.raises(InputError):
        kmeans_fit(X[:1], 2)


def test_kmeans_duplicate_points():
    X = np.zeros((6, 2))
    X[0] = 1.0
    fit = kmeans_fit(X, 3, seed=0)
    assert set(fit.labels.tolist()) <= {0, 1, 2}
    assert fit.inertia == pytest.approx(0.0)


def test_baseline_spec():
    assert BaselineSpec("dbscan", eps=0.3, min_pts=5).params() == "eps=0.3;min_pts=5"
    with pytest.raises(ConfigError):
        BaselineSpec("spectral")
    with pytest.raises(ConfigError):
        BaselineSpec("kmeans")


def test_estimators():
    X = np.random.default_rng(1).normal(size=(30, 2))
    km = KMeansPP(n_clusters=3).fit(X)
    assert np.array_equal(km.predict(X), km.labels_)
    assert KMeansPP(n_clusters=3).get_params() == {"n_clusters": 3, "seed": 0, "max_iter": 300}
    assert DBSCANClusterer(eps=10.0).fit_predict(X).tolist() == [0] * 30
