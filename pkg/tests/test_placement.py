import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import squareform

from conftest import chain_doc
from dsse.loadgen import gaussian_variation, sample_scenarios
from dsse.netmodel import from_dict
from dsse.placement import (
    CorrelationMatrix, cluster_features, heatmap_svg, observed_phases, poi, recommend_placement, spearman_matrix,
)
from dsse.powerflow import batch_solve
from dsse.smdsim import SmdSite


def _labels(n):
    return [(f"b{i}", "A") for i in range(n)]


def test_spearman_monotone_and_reversed(rng):
    x = rng.standard_normal(50)
    c = spearman_matrix(np.column_stack([x, x ** 3, -x]), _labels(3)).rho
    assert c[0, 1] == pytest.approx(1.0) and c[0, 2] == pytest.approx(-1.0)


def test_spearman_rank_formula():
    d2 = (0 ** 2 + 1 ** 2 + 1 ** 2 + 0 ** 2)
    expected = 1 - 6 * d2 / (4 * (16 - 1))
    c = spearman_matrix(np.array([[1, 1], [2, 3], [3, 2], [4, 4]], float), _labels(2)).rho
    assert expected == 0.8 and c[0, 1] == pytest.approx(expected)


def test_spearman_constant_column_is_undefined(rng):
    data = np.column_stack([rng.standard_normal(10), np.ones(10)])
    with pytest.warns(UserWarning):
        c = spearman_matrix(data, _labels(2))
    assert c.defined.tolist() == [True, False]


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_spearman_invariant_under_increasing_maps(seed):
    x = np.random.default_rng(seed).standard_normal((40, 4))
    y = x.copy()
    y[:, 0] = np.exp(y[:, 0])
    y[:, 2] = y[:, 2] ** 3 + 5 * y[:, 2]
    assert np.array_equal(spearman_matrix(x, _labels(4)).rho, spearman_matrix(y, _labels(4)).rho)


def test_block_matrix_clusters():
    rho = np.array([[1, .99, .1], [.99, 1, .1], [.1, .1, 1]])
    assert cluster_features(rho, 0.9) == [[0, 1], [2]]


def test_all_ones_single_cluster():
    assert cluster_features(np.ones((5, 5)), 0.9) == [[0, 1, 2, 3, 4]]


def _partition(clusters):
    return sorted(tuple(sorted(c)) for c in clusters)


@given(st.integers(0, 10_000), st.floats(0.3, 0.95))
@settings(max_examples=40, deadline=None)
def test_matches_scipy_average_linkage(seed, threshold):
    r = np.random.default_rng(seed)
    base = r.standard_normal((60, 3))
    data = base[:, r.integers(0, 3, 9)] + r.uniform(0.05, 1.0, 9) * r.standard_normal((60, 9))
    rho = spearman_matrix(data, _labels(9)).rho
    ours = cluster_features(rho, threshold)
    z = linkage(squareform(1 - np.abs(rho), checks=False), method="average")
    ids = fcluster(z, t=1 - threshold, criterion="distance")
    ref = [list(np.flatnonzero(ids == k)) for k in np.unique(ids)]
    assert _partition(ours) == _partition(ref)


@given(st.integers(0, 10_000), st.permutations(range(8)))
@settings(max_examples=25, deadline=None)
def test_cluster_order_invariance(seed, perm):
    r = np.random.default_rng(seed)
    data = r.standard_normal((30, 2))[:, r.integers(0, 2, 8)] + 0.3 * r.standard_normal((30, 8))
    rho = spearman_matrix(data, _labels(8)).rho
    perm = np.array(perm)
    a = cluster_features(rho, 0.8)
    b = cluster_features(rho[np.ix_(perm, perm)], 0.8)
    assert _partition(a) == _partition([[int(perm[i]) for i in c] for c in b])


def test_poi_chain_without_zip():
    net = from_dict(chain_doc(3, loads=[("B1", 10.0, 1.0), ("B2", 10.0, 1.0)]))
    assert observed_phases(net, SmdSite("B1", ("B1", "B2"))) == {("B1", "A"), ("B2", "A")}


def test_poi_chain_with_zip():
    net = from_dict(chain_doc(3, loads=[("B2", 10.0, 1.0)]))
    assert poi(net, SmdSite("B0", ("B0", "B1"))) == 3
    assert poi(net, SmdSite("B0", ("B0", "B1")), use_zip=False) == 2


def test_poi_three_phase():
    net = from_dict(chain_doc(2, phases=("A", "B", "C"), loads=[("B1", 10.0, 1.0)]))
    assert poi(net, SmdSite("B0", ("B0", "B1"))) == 6


def test_single_bus_network():
    doc = chain_doc(1)
    net = from_dict(doc)
    plan = recommend_placement(net, np.zeros((5, 1)))
    assert len(plan.clusters) == 1 and len(plan.placement) == 1


@pytest.fixture(scope="module")
def toy():
    # B1 is a zero-injection bus; by hand: POI(B0-B1) = 3, POI(B1-B2) = 3, POI(B2-B3) = 2
    net = from_dict(chain_doc(4, loads=[("B2", 50.0, 10.0), ("B3", 50.0, 10.0)]))
    res = batch_solve(net, sample_scenarios(gaussian_variation(net), None, 200, seed=0))
    return net, res


def test_toy_poi_by_hand(toy):
    net, _ = toy
    assert [poi(net, SmdSite(f, (f, t))) for f, t in [("B0", "B1"), ("B1", "B2"), ("B2", "B3")]] == [3, 3, 2]


def test_k_beyond_cluster_count_takes_next_best(toy):
    net, res = toy
    with pytest.warns(UserWarning):
        plan = recommend_placement(net, res.vang, threshold=0.01, k=2)
    assert len(plan.clusters) == 1
    # the source angle is constant, so the cluster's own pick must meter B1..B3
    assert [s.label for s in plan.placement.sites] == ["B1-B2", "B0-B1"]


@pytest.fixture(scope="module")
def s1_small(ieee34):
    res = batch_solve(ieee34, sample_scenarios(gaussian_variation(ieee34), None, 1000, seed=5))
    return res


def test_one_site_per_cluster(ieee34, s1_small):
    for thr in (0.9, 0.97, 0.99):
        with pytest.warns(UserWarning):
            plan = recommend_placement(ieee34, s1_small.vang, threshold=thr, cross_check=False)
        cl = [plan.cluster_of(s.bus) for s in plan.placement.sites]
        assert len(set(cl)) == len(cl) == len(plan.clusters)


def test_plan_serializes(ieee34, s1_small, tmp_path):
    with pytest.warns(UserWarning):
        plan = recommend_placement(ieee34, s1_small.vang)
    plan.save(tmp_path / "plan.json")
    import json
    doc = json.loads((tmp_path / "plan.json").read_text())
    assert doc["excluded"] == ["800.A"]
    assert len(doc["sites"]) == len(doc["clusters"])


def test_heatmap_svg(rng):
    corr = CorrelationMatrix(tuple(_labels(4)), np.corrcoef(rng.standard_normal((4, 20))))
    root = ET.fromstring(heatmap_svg(corr, title="angles"))
    rects = [e for e in root.iter() if e.tag.endswith("rect")]
    assert len(rects) == 16 + 21
