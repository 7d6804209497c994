import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from embrec.errors import ConfigError, FormatError, IntegrityError
from embrec.retrieval import (RetrievalConfig, allocate_budget, build_index, exhaustive_knn,
                              kmeans_fit, load_index, retrieve, save_index)


def _unit(x):
    x = np.asarray(x, dtype=np.float64)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _corpus(n=200, d=8, seed=0):
    rng = np.random.default_rng(seed)
    return [f"it{i:04d}" for i in range(n)], _unit(rng.standard_normal((n, d))).astype(np.float32)


# ---------------------------------------------------------------------------
# k-means

def test_kmeans_two_pairs():
    x = np.array([[0, 0], [0, 1], [10, 0], [10, 1]], dtype=np.float64)
    fit = kmeans_fit(x, 2, seed=0)
    got = sorted(map(tuple, np.round(fit.centroids, 9)))
    assert got == [(0.0, 0.5), (10.0, 0.5)]


def test_kmeans_one_cluster_per_point():
    x = np.random.default_rng(1).standard_normal((7, 3))
    fit = kmeans_fit(x, 7, seed=0)
    assert fit.inertia_history[-1] == pytest.approx(0.0, abs=1e-12)
    assert sorted(fit.assignments.tolist()) == list(range(7))


def test_kmeans_inertia_non_increasing_and_deterministic():
    x = np.random.default_rng(2).standard_normal((500, 4))
    a = kmeans_fit(x, 10, seed=3)
    b = kmeans_fit(x, 10, seed=3)
    h = a.inertia_history
    assert all(y <= x_ + 1e-9 for x_, y in zip(h, h[1:]))
    assert np.array_equal(a.assignments, b.assignments)
    assert np.bincount(a.assignments, minlength=10).min() > 0


def test_kmeans_rejects_bad_k():
    with pytest.raises(ConfigError):
        kmeans_fit(np.zeros((3, 2)), 4)
    with pytest.raises(ConfigError):
        kmeans_fit(np.zeros((3, 2)), 0)


def test_kmeans_duplicates_still_fill_clusters():
    x = np.zeros((6, 2))
    fit = kmeans_fit(x, 3, seed=0)
    assert np.bincount(fit.assignments, minlength=3).min() > 0


# ---------------------------------------------------------------------------
# budget

def test_budget_examples():
    assert allocate_budget([0.0, 0.0], 10) == [5, 5]
    assert allocate_budget(np.log([2 / 3, 1 / 3]), 9) == [6, 3]
    assert allocate_budget(np.log([0.5, 0.3, 0.2]), 10) == [5, 3, 2]
    over = allocate_budget(np.log([0.55, 0.25, 0.20]), 10)
    assert over == [6, 3, 2] and sum(over) == 11


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.integers(1, 60))
def test_budget_covers_n(aff, N):
    m = allocate_budget(aff, N)
    assert len(m) == len(aff) and sum(m) >= N and min(m) >= 0
    w = np.exp(np.array(aff) - max(aff))
    w /= w.sum()
    # never more than one above the exact share
    assert all(mi <= math.ceil(wi * N) + 1 for mi, wi in zip(m, w))


# ---------------------------------------------------------------------------
# retrieval

def test_config_validation():
    with pytest.raises(ConfigError):
        RetrievalConfig(N=0).validate()
    with pytest.raises(ConfigError) as ei:
        RetrievalConfig(M=5).validate(3)
    assert ei.value.field == "M"
    assert RetrievalConfig().cluster_count(5000) == 500


def test_single_cluster_equals_exhaustive():
    ids, embs = _corpus()
    idx = build_index(ids, embs, 1, tau=0.1)
    rng = np.random.default_rng(5)
    for _ in range(10):
        u = _unit(rng.standard_normal(8))
        got = retrieve(idx, u, RetrievalConfig(N=15, M=1))
        assert got.items == exhaustive_knn(ids, embs, u, 15)


def test_m_one_is_knn_inside_nearest_cluster():
    ids, embs = _corpus()
    idx = build_index(ids, embs, 8, tau=0.1)
    u = _unit(np.ones(8))
    res = retrieve(idx, u, RetrievalConfig(N=5, M=1))
    k = res.probed[0]
    assert set(res.clusters) == {k}
    assert res.items == exhaustive_knn(idx.member_ids[k], idx.member_embs[k], u, 5)


def test_three_probes_span_three_clusters():
    # five tight, well separated blobs of 30 items each
    rng = np.random.default_rng(0)
    centers = np.eye(8)[:5]
    embs = _unit(np.repeat(centers, 30, axis=0) + 0.05 * rng.standard_normal((150, 8))).astype(np.float32)
    ids = [f"b{i:03d}" for i in range(150)]
    idx = build_index(ids, embs, 5, tau=1.0, seed=0)
    u = _unit([1.0, 0.9, 0.8, 0, 0, 0, 0, 0])
    res = retrieve(idx, u, RetrievalConfig(N=12, M=3))
    assert len(set(res.clusters)) == 3 and len(res.items) == 12 and not res.shortfall


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 20), st.integers(1, 6))
def test_output_sorted_sized_and_diverse(seed, N, M):
    ids, embs = _corpus(120, 6, seed=1)
    idx = build_index(ids, embs, 8, tau=0.1)
    u = _unit(np.random.default_rng(seed).standard_normal(6))
    res = retrieve(idx, u, RetrievalConfig(N=N, M=M))
    scores = [s for _, s in res.items]
    assert scores == sorted(scores, reverse=True)
    sizes = [len(idx.member_ids[k]) for k in res.probed]
    # a cluster smaller than its budget is not topped up from elsewhere
    found = sum(min(s, m) for s, m in zip(sizes, res.budget))
    assert len(set(res.ids)) == len(res.items) == min(N, found)
    assert res.shortfall == (found < N)
    if N >= M and all(s >= m for s, m in zip(sizes, res.budget)):
        assert len(set(res.clusters)) == M


def test_shortfall_flag():
    ids, embs = _corpus(6, 4)
    idx = build_index(ids, embs, 3, tau=0.1)
    res = retrieve(idx, _unit(np.ones(4)), RetrievalConfig(N=10, M=1))
    assert res.shortfall and len(res.items) < 10


def test_exhaustive_examples():
    ids, embs = _corpus(5, 3)
    u = _unit(np.ones(3))
    full = exhaustive_knn(ids, embs, u, 50)
    assert len(full) == 5 and [s for _, s in full] == sorted((s for _, s in full), reverse=True)
    assert exhaustive_knn(["x"], embs[:1], u, 3)[0][0] == "x"


# ---------------------------------------------------------------------------
# persistence

def test_index_round_trip(tmp_path):
    ids, embs = _corpus(50, 4)
    idx = build_index(ids, embs, 5, tau=0.25, built_at=1234)
    p = tmp_path / "x.ecix"
    save_index(idx, p)
    got = load_index(p)
    assert got.tau == 0.25 and got.built_at == 1234 and got.member_ids == idx.member_ids
    assert np.array_equal(got.centroids, idx.centroids)
    assert all(np.array_equal(a, b) for a, b in zip(got.member_embs, idx.member_embs))
    save_index(got, tmp_path / "y.ecix")
    assert (tmp_path / "y.ecix").read_bytes() == p.read_bytes()


def test_index_corruption(tmp_path):
    ids, embs = _corpus(20, 4)
    p = tmp_path / "x.ecix"
    save_index(build_index(ids, embs, 2, tau=0.1), p)
    data = p.read_bytes()
    (tmp_path / "t").write_bytes(data[:-5])
    with pytest.raises(IntegrityError) as ei:
        load_index(tmp_path / "t")
    assert ei.value.offset is not None
    (tmp_path / "m").write_bytes(b"ECIX0" + data[5:])
    with pytest.raises(FormatError):
        load_index(tmp_path / "m")
    # flip a centroid float so it no longer matches the member mean
    bad = bytearray(data)
    bad[5 + 32 + 3] ^= 0x01  # an exponent bit: scales the first coordinate by 4 or 1/4
    (tmp_path / "c").write_bytes(bytes(bad))
    with pytest.raises(IntegrityError):
        load_index(tmp_path / "c")


def test_every_item_in_exactly_one_cluster():
    ids, embs = _corpus(300, 8)
    idx = build_index(ids, embs, 30, tau=0.1)
    flat = [i for m in idx.member_ids for i in m]
    assert sorted(flat) == sorted(ids) and len(idx) == 300
    for k in range(idx.K):
        assert np.allclose(idx.member_embs[k].mean(0), idx.centroids[k], atol=1e-6)
