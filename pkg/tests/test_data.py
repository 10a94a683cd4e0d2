import gzip

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.decomposition import PCA

from pfcluster.data import (
    TOY_CLUSTERS,
    TOY_KINDS,
    Dataset,
    PCAProjector,
    ToySpec,
    gen_toy,
    idx_header,
    load_mnist_idx,
    load_points,
    mnist_protocol,
    pca_eigenvalues,
    pca_project,
    read_matrix,
    subsample,
    subsample_indices,
    write_dataset_csv,
    write_idx,
    write_matrix,
)
from pfcluster.errors import (
    ConfigError,
    DimensionMismatchError,
    FormatError,
    InputError,
    MagicMismatchError,
    TruncatedFileError,
)


@pytest.mark.parametrize("kind", TOY_KINDS)
def test_toy_shapes_and_balance(kind):
    ds = gen_toy(ToySpec(kind, n=301, seed=2))
    assert ds.X.shape == (301, 2)
    counts = np.bincount(ds.true_labels)
    assert counts.size == (1 if kind == "uniform" else TOY_CLUSTERS[kind])
    assert counts.max() - counts.min() <= 1
    again = gen_toy(ToySpec(kind, n=301, seed=2))
    assert np.array_equal(ds.X, again.X)


def test_noise_free_geometry():
    circles = gen_toy(ToySpec("circles", n=100, noise=0.0))
    r = np.linalg.norm(circles.X, axis=1)
    np.testing.assert_allclose(r, np.where(circles.true_labels == 0, 1.0, 0.5))
    moons = gen_toy(ToySpec("moons", n=100, noise=0.0))
    upper = moons.X[moons.true_labels == 0]
    np.testing.assert_allclose(np.linalg.norm(upper, axis=1), 1.0)
    assert gen_toy(ToySpec("uniform", n=50)).X.min() >= 0


def test_toy_spec_validation():
    with pytest.raises(ConfigError):
        ToySpec("spirals")
    with pytest.raises(ConfigError):
        ToySpec("moons", noise=-1)


def _images(n=12):
    rng = np.random.default_rng(0)
    return rng.integers(0, 256, size=(n, 28, 28)).astype(np.uint8), rng.integers(0, 10, n).astype(np.uint8)


def test_idx_round_trip_plain_and_gzip(tmp_path):
    imgs, labs = _images()
    write_idx(tmp_path / "i", imgs)
    write_idx(tmp_path / "l", labs)
    ds = load_mnist_idx(tmp_path / "i", tmp_path / "l")
    np.testing.assert_array_equal(ds.X, imgs.reshape(12, -1).astype(np.float32) / 255)
    np.testing.assert_array_equal(ds.true_labels, labs)
    (tmp_path / "i.gz").write_bytes(gzip.compress((tmp_path / "i").read_bytes()))
    assert idx_header(tmp_path / "i.gz") == (12, 28, 28)
    assert np.array_equal(load_mnist_idx(tmp_path / "i.gz", tmp_path / "l").X, ds.X)


def test_idx_errors(tmp_path):
    imgs, labs = _images()
    write_idx(tmp_path / "i", imgs)
    write_idx(tmp_path / "l", labs)
    write_idx(tmp_path / "short", labs[:5])
    raw = (tmp_path / "i").read_bytes()
    (tmp_path / "cut").write_bytes(raw[:-3])
    with pytest.raises(MagicMismatchError):
        load_mnist_idx(tmp_path / "l", tmp_path / "l")
    with pytest.raises(TruncatedFileError):
        load_mnist_idx(tmp_path / "cut", tmp_path / "l")
    with pytest.raises(DimensionMismatchError):
        load_mnist_idx(tmp_path / "i", tmp_path / "short")


def test_pca_eigenvalues_match_dense_solver():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(200, 8)) * np.arange(1, 9)
    Xc = X - X.mean(0)
    dense = np.sort(np.linalg.eigvalsh(Xc.T @ Xc / 199))[::-1]
    np.testing.assert_allclose(pca_eigenvalues(X, 8, iters=2000, tol=1e-12), dense, rtol=1e-6)


def test_pca_projection_matches_sklearn_up_to_sign():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(300, 10)) @ rng.normal(size=(10, 10))
    ours, basis = pca_project(X, 4)
    ref = PCA(4).fit_transform(X)
    np.testing.assert_allclose(np.abs(ours), np.abs(ref), atol=1e-5)
    np.testing.assert_allclose(basis.T @ basis, np.eye(4), atol=1e-6)
    with pytest.raises(InputError):
        pca_project(X, 11)


def test_pca_transformer():
    X = np.random.default_rng(2).normal(size=(50, 5))
    proj = PCAProjector(n_components=2).fit(X)
    np.testing.assert_allclose(proj.transform(X), pca_project(X, 2)[0])


@settings(max_examples=40, deadline=None)
@given(n=st.integers(10, 200), frac=st.floats(0, 1), seed=st.integers(0, 99))
def test_stratified_subsample_quotas(n, frac, seed):
    labels = np.random.default_rng(seed).integers(0, 4, n)
    n_sub = int(frac * n)
    idx = subsample_indices(n, n_sub, seed, labels)
    assert idx.size == n_sub == np.unique(idx).size
    full, part = np.bincount(labels, minlength=4), np.bincount(labels[idx], minlength=4)
    assert np.all(np.abs(part - full * n_sub / n) < 1 + 1e-9)


def test_subsample_errors_and_unlabeled():
    with pytest.raises(InputError):
        subsample_indices(5, 6, 0)
    ds = subsample(Dataset(np.arange(20.0)[:, None]), 5, seed=1)
    assert ds.X.shape == (5, 1) and ds.true_labels is None


def test_mnist_protocol_shape(tmp_path):
    rng = np.random.default_rng(0)
    ds = Dataset(rng.random((120, 40)), np.repeat(np.arange(10), 12))
    out = mnist_protocol(ds, n_sub=60, d_out=16)
    assert out.X.shape == (60, 16)
    assert np.all(np.bincount(out.true_labels) == 6)


def test_csv_round_trip(tmp_path):
    ds = gen_toy(ToySpec("blobs", n=20))
    write_dataset_csv(ds, tmp_path / "d.csv")
    back = load_points(tmp_path / "d.csv")
    np.testing.assert_array_equal(back.X, ds.X)
    np.testing.assert_array_equal(back.true_labels, ds.true_labels)
    (tmp_path / "bad.csv").write_text("f0,f1\n1,2\n3,x\n")
    with pytest.raises(FormatError):
        load_points(tmp_path / "bad.csv")


def test_binary_matrix_round_trip(tmp_path):
    X = np.random.default_rng(0).normal(size=(7, 3)).astype(np.float32)
    write_matrix(tmp_path / "m.bin", X)
    np.testing.assert_array_equal(read_matrix(tmp_path / "m.bin"), X)
    assert load_points(tmp_path / "m.bin").X.shape == (7, 3)
    raw = (tmp_path / "m.bin").read_bytes()
    (tmp_path / "cut.bin").write_bytes(raw[:-4])
    with pytest.raises(TruncatedFileError):
        read_matrix(tmp_path / "cut.bin")
    with pytest.raises(MagicMismatchError):
        read_matrix(_write(tmp_path / "x.bin", b"JUNKJUNKJUNK"))


def _write(path, raw):
    path.write_bytes(raw)
    return path
