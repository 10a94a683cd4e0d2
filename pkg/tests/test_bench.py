import xml.etree.ElementTree as ET

import numpy as np
import pytest

from pfcluster.bench import (
    BENCH_HEADER,
    SuiteConfig,
    anchor_order,
    anchors,
    emit_grid_svg,
    emit_scatter_svg,
    k_sweep,
    one_swap_diff,
    run_suite,
    stability_probe,
    write_bench_csv,
    write_stability_csv,
    write_sweep_csv,
)
from pfcluster.data import Dataset, ToySpec, gen_toy
from pfcluster.errors import ConfigError, InputError
from pfcluster.prior import PriorConfig

SVG = "{http://www.w3.org/2000/svg}"


def test_anchor_order_is_balanced_and_nested():
    labels = np.array([0] * 10 + [1] * 3 + [2] * 7)
    order = anchor_order(labels, seed=4)
    assert sorted(order.tolist()) == list(range(20))
    assert sorted(labels[order[:6]].tolist()) == [0, 0, 1, 1, 2, 2]
    for k in (1, 5, 9):
        assert np.array_equal(anchors(labels, k, 4), order[:k])
    assert not np.array_equal(anchor_order(labels, 5), order)
    with pytest.raises(InputError):
        anchors(labels, 20, 0)


def test_suite_rows_and_order(tiny_model):
    cfg = SuiteConfig(datasets=("moons", "uniform"), n=60, algorithms=("pfn", "kmeans", "ward", "dbscan"),
                      pfn_ks=(0, 10), timing_repeats=1)
    recs = run_suite(cfg, tiny_model)
    assert len(recs) == 2 * (3 + 2)
    assert [r.algorithm for r in recs[:5]] == ["kmeans", "ward", "dbscan", "pfn", "pfn"]
    text = write_bench_csv(recs)
    lines = text.splitlines()
    assert lines[0] == ",".join(BENCH_HEADER)
    assert all(len(l.split(",")) == len(BENCH_HEADER) for l in lines[1:])


def test_suite_is_reproducible_apart_from_time(tiny_model):
    cfg = SuiteConfig(datasets=("blobs",), n=50, pfn_ks=(5,), timing_repeats=1)

    def strip(text):
        return [line.rsplit(",", 1)[0] for line in text.splitlines()]

    assert strip(write_bench_csv(run_suite(cfg, tiny_model))) == strip(write_bench_csv(run_suite(cfg, tiny_model)))


def test_suite_config_errors():
    with pytest.raises(ConfigError):
        SuiteConfig(algorithms=("spectral",))
    with pytest.raises(ConfigError):
        SuiteConfig(datasets=("mnist",))
    with pytest.raises(InputError):
        run_suite(SuiteConfig(datasets=("blobs",), n=30), None)


def test_k_sweep(tiny_model):
    ds = gen_toy(ToySpec("moons", n=80))
    rows = k_sweep(tiny_model, ds, [2, 10, 20], seeds=[0, 1])
    assert [r.k for r in rows] == [2, 10, 20]
    assert all(0 <= r.mean_v <= 1 and r.n_seeds == 2 for r in rows)
    assert write_sweep_csv(rows).splitlines()[0] == "k,mean_v,sd_v,n_seeds"
    with pytest.raises(InputError):
        k_sweep(tiny_model, ds, [10, 5], seeds=[0])


def test_zero_swap_is_zero(tiny_model):
    rng = np.random.default_rng(0)
    X = rng.normal(size=(20, 2))
    y = np.arange(8) % 2
    assert one_swap_diff(tiny_model, X, y, 8, 2, None) == 0.0
    same = one_swap_diff(tiny_model, X, y, 8, 2, (3, X[3].copy(), int(y[3])))
    assert same == 0.0
    assert one_swap_diff(tiny_model, X, y, 8, 2, (3, X[3] + 5.0, 1 - int(y[3]))) > 0.0


def test_stability_probe_report(tiny_model):
    prior = PriorConfig(c_range=(2, 3), d_range=(1, 2))
    rep = stability_probe(tiny_model, prior, ks=(5, 10), probes_per_k=4, n_queries=8)
    assert rep.ks == (5, 10) and len(rep.median_diff) == 2
    assert all(0.0 <= m <= x <= 1.0 for m, x in zip(rep.median_diff, rep.max_diff))
    assert np.isfinite(rep.slope)
    assert write_stability_csv(rep).splitlines()[0] == "k,median_diff,max_diff"
    again = stability_probe(tiny_model, prior, ks=(5, 10), probes_per_k=4, n_queries=8)
    assert again.median_diff == rep.median_diff


def test_scatter_svg_three_points(tmp_path):
    ds = Dataset(np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 0.5]]), None, "tiny")
    svg = emit_scatter_svg(ds, [0, 1, -1], tmp_path / "s.svg", algorithm="kmeans", v=0.5)
    root = ET.fromstring(svg)
    circles = root.findall(f".//{SVG}circle")
    assert len(circles) == 3
    assert circles[2].get("fill") == "#bbbbbb"
    assert "V=0.500" in svg
    assert (tmp_path / "s.svg").read_text() == svg
    assert emit_scatter_svg(ds, [0, 1, -1], algorithm="kmeans", v=0.5) == svg


def test_svg_rejects_high_dimensional_data():
    with pytest.raises(InputError):
        emit_scatter_svg(Dataset(np.zeros((3, 3))), [0, 0, 0])


def test_grid_svg_layout():
    ds = gen_toy(ToySpec("blobs", n=10))
    svg = emit_grid_svg([[(ds, ds.true_labels, "a"), (ds, ds.true_labels, "b")], [(ds, ds.true_labels, "c")]])
    root = ET.fromstring(svg)
    assert root.get("width") == "480" and root.get("height") == "480"
    assert len(root.findall(f".//{SVG}circle")) == 30
