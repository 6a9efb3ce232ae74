"""Descriptor search, pair re-ranking, and index persistence."""

import numpy as np
import pytest
import torch

from placerec import retrieval
from placerec.backbone import PairBackbone, tiny_config
from placerec.retrieval import (DescriptorIndex, RankedList,
                                extract_descriptors, knn_search, load_index,
                                rerank_pairs, save_index,
                                symmetric_pair_scores, two_stage_query)


def _unit(mat):
    mat = np.asarray(mat, dtype=np.float32)
    return mat / np.linalg.norm(mat, axis=1, keepdims=True)


def _index(n=8, dim=16, seed=0, with_dense=False, grid=(2, 2), dense_dim=8):
    g = np.random.default_rng(seed)
    ids = [f"db{i}" for i in range(n)]
    dense = None
    if with_dense:
        dense = {i_: g.normal(size=(grid[0] * grid[1], dense_dim))
                 .astype(np.float32) for i_ in ids}
    return DescriptorIndex(matrix=_unit(g.normal(size=(n, dim))), ids=ids,
                           dense_store=dense, grid=grid)


# --- kNN ---------------------------------------------------------------------

def test_knn_matches_brute_force():
    index = _index(n=50, dim=8, seed=1)
    g = np.random.default_rng(2)
    queries = _unit(g.normal(size=(9, 8)))
    results = knn_search(index, queries, n=10)
    sims = queries @ index.matrix.T
    for qi, rl in enumerate(results):
        want = np.argsort(-sims[qi], kind="stable")[:10]
        assert rl.top_ids() == [index.ids[j] for j in want]
        scores = [s for _, s in rl.candidates]
        assert scores == sorted(scores, reverse=True)


def test_knn_tie_prefers_lower_database_index():
    row = _unit([[1.0, 0.0]])[0]
    matrix = np.stack([row, row, row])  # exact duplicates
    index = DescriptorIndex(matrix=matrix, ids=["a", "b", "c"])
    (rl,) = knn_search(index, row[None], n=3)
    assert rl.top_ids() == ["a", "b", "c"]


def test_knn_input_validation():
    index = _index(n=4)
    with pytest.raises(ValueError):
        knn_search(index, index.matrix[:1], n=5)
    empty = DescriptorIndex(matrix=np.zeros((0, 4), dtype=np.float32), ids=[])
    with pytest.raises(ValueError):
        knn_search(empty, np.zeros((1, 4)), n=1)
    with pytest.raises(ValueError):
        DescriptorIndex(matrix=np.zeros((2, 4), np.float32), ids=["x", "x"])


# --- extraction --------------------------------------------------------------

def test_extract_descriptors_unit_norm_and_dense(tiny_model):
    images = torch.randn(5, 3, 64, 64)
    index = extract_descriptors(tiny_model, images, [f"i{k}" for k in range(5)])
    norms = np.linalg.norm(index.matrix, axis=1)
    assert np.allclose(norms, 1.0, atol=1e-5)
    assert index.grid == (8, 8)
    assert index.dense_store["i3"].shape == (64, 128)
    with pytest.raises(ValueError):
        extract_descriptors(tiny_model, images, ["only_one"])
    with pytest.raises(ValueError):
        extract_descriptors(tiny_model, torch.randn(1, 3, 32, 32), ["a"])


# --- re-ranking --------------------------------------------------------------

def test_symmetric_scores_invariant_under_role_swap(tiny_model):
    g = np.random.default_rng(3)
    a = g.normal(size=(64, 128)).astype(np.float32)
    b = g.normal(size=(64, 128)).astype(np.float32)
    ab = symmetric_pair_scores(tiny_model, a, [b], (8, 8))[0]
    ba = symmetric_pair_scores(tiny_model, b, [a], (8, 8))[0]
    assert ab == ba


def test_rerank_orders_by_score_and_keeps_tie_order(tiny_model, monkeypatch):
    index = _index(n=6, with_dense=True, grid=(8, 8), dense_dim=128)
    pool = RankedList("q", [(f"db{i}", 1.0 - 0.1 * i) for i in range(4)],
                      "global")
    fixed = {"db0": 1.0, "db1": 3.0, "db2": 1.0, "db3": 3.0}
    monkeypatch.setattr(
        retrieval, "symmetric_pair_scores",
        lambda model, q, feats, grid, batch_size=16: np.array(
            [fixed[i] for i in pool.top_ids()]))
    out = rerank_pairs(tiny_model, index, index.dense_store["db0"], pool)
    # ties (db1/db3 and db0/db2) keep their global-stage relative order
    assert out.top_ids() == ["db1", "db3", "db0", "db2"]
    assert out.stage == "refined"


def test_rerank_uses_score_cache(tiny_model):
    index = _index(n=4, with_dense=True, grid=(8, 8), dense_dim=128)
    pool = RankedList("q", [("db0", 0.9), ("db1", 0.8)], "global")
    cache = {"db0": 5.0, "db1": 4.0}  # fully primed: no forward pass needed
    out = rerank_pairs(tiny_model, index, index.dense_store["db0"], pool,
                       score_cache=cache)
    assert out.candidates == [("db0", 5.0), ("db1", 4.0)]


def test_rerank_requires_dense_store(tiny_model):
    index = _index(n=4, with_dense=False)
    pool = RankedList("q", [("db0", 0.9)], "global")
    with pytest.raises(ValueError):
        rerank_pairs(tiny_model, index, np.zeros((64, 128)), pool)


def test_two_stage_query_singleton_pool_matches_global(tiny_model):
    images = torch.randn(6, 3, 64, 64)
    index = extract_descriptors(tiny_model, images,
                                [f"i{k}" for k in range(6)])
    q = torch.randn(3, 64, 64)
    g, r = two_stage_query(tiny_model, index, q, n=1, query_id="q")
    assert r.top_ids() == g.top_ids()
    g2, r2 = two_stage_query(tiny_model, index, q, n=3, refine=False)
    assert r2 is None and len(g2.candidates) == 3


# --- persistence -------------------------------------------------------------

def test_index_round_trip(tmp_path):
    index = _index(n=5, with_dense=True)
    out = str(tmp_path / "idx")
    save_index(index, out)
    loaded = load_index(out)
    assert loaded.ids == index.ids
    assert np.array_equal(loaded.matrix, index.matrix)
    assert loaded.grid == index.grid
    for key in index.ids:
        assert np.array_equal(loaded.dense_store[key], index.dense_store[key])


def test_index_version_check(tmp_path):
    index = _index(n=2)
    out = str(tmp_path / "idx")
    save_index(index, out)
    import json
    meta = json.load(open(f"{out}/meta.json"))
    meta["version"] = 99
    json.dump(meta, open(f"{out}/meta.json", "w"))
    with pytest.raises(ValueError):
        load_index(out)


def test_dense_storage_bytes(tmp_path):
    index = _index(n=3, with_dense=True, grid=(2, 2), dense_dim=8)
    out = str(tmp_path / "idx")
    save_index(index, out)
    sizes = retrieval.dense_storage_bytes(out)
    assert len(sizes) == 3
    assert all(v >= 4 * 2 * 2 * 8 for v in sizes.values())
    assert retrieval.dense_storage_bytes(str(tmp_path / "missing")) == {}
