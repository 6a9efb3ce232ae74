"""Two-stage retrieval: exhaustive descriptor search, then pair re-ranking.

Stage one ranks the database by dot product of unit-norm descriptors.
Stage two re-scores the top-N pool with the pair classifier in both
orders (the decoder is asymmetric) and sums the pre-sigmoid logits.
All tie-breaking is deterministic: lower database index first in stage
one, prior order retained in stage two.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .backbone import PairBackbone, TokenGrid

INDEX_VERSION = 1


@dataclass
class DescriptorIndex:
    matrix: np.ndarray  # (K, global_dim) float32, unit rows
    ids: list
    dense_store: dict | None = None  # id -> (num_patches, dim) array
    grid: tuple = (0, 0)

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("database ids must be unique")


@dataclass
class RankedList:
    query_id: object
    candidates: list  # ordered (id, score), scores non-increasing
    stage: str  # "global" | "refined"

    def top_ids(self, n: int | None = None) -> list:
        cands = self.candidates if n is None else self.candidates[:n]
        return [c[0] for c in cands]


@torch.no_grad()
def extract_descriptors(model: PairBackbone, images: torch.Tensor, ids: list,
                        store_dense: bool = True, batch_size: int = 32,
                        dense_dtype=np.float32) -> DescriptorIndex:
    """Encode images into an index of unit-norm descriptors, optionally
    keeping the dense patch features needed for re-ranking."""
    if images.shape[0] != len(ids):
        raise ValueError("one id per image required")
    if images.shape[-1] != model.cfg.image_size:
        raise ValueError(
            f"images are {images.shape[-1]}px but model expects "
            f"{model.cfg.image_size}px; re-preprocess")
    model.eval()
    rows, dense_store = [], {} if store_dense else None
    grid = (0, 0)
    for start in range(0, images.shape[0], batch_size):
        chunk = images[start:start + batch_size]
        dense, cls = model.encode(chunk)
        rows.append(model.project_global(cls).numpy())
        grid = (dense.grid_h, dense.grid_w)
        if store_dense:
            feats = dense.tokens.numpy().astype(dense_dtype)
            for i, key in enumerate(ids[start:start + batch_size]):
                dense_store[key] = feats[i]
    return DescriptorIndex(matrix=np.concatenate(rows).astype(np.float32),
                           ids=list(ids), dense_store=dense_store, grid=grid)


def knn_search(index: DescriptorIndex, queries: np.ndarray, n: int,
               query_ids: list | None = None) -> list:
    """Top-n database entries per query by descending similarity.

    Ties resolve to the lower database index (stable sort on -similarity).
    """
    if index.matrix.shape[0] == 0:
        raise ValueError("empty database")
    if n > index.matrix.shape[0]:
        raise ValueError(f"n={n} exceeds database size {index.matrix.shape[0]}")
    queries = np.atleast_2d(queries)
    if query_ids is None:
        query_ids = list(range(queries.shape[0]))
    sims = queries @ index.matrix.T
    order = np.argsort(-sims, axis=1, kind="stable")[:, :n]
    results = []
    for qi, qid in enumerate(query_ids):
        cands = [(index.ids[j], float(sims[qi, j])) for j in order[qi]]
        results.append(RankedList(query_id=qid, candidates=cands, stage="global"))
    return results


def _as_token_grid(feats: torch.Tensor, grid: tuple) -> TokenGrid:
    return TokenGrid(tokens=feats, grid_h=grid[0], grid_w=grid[1],
                     n_special=0, provenance="encoder_dense")


@torch.no_grad()
def symmetric_pair_scores(model: PairBackbone, query_dense: np.ndarray,
                          candidate_denses: list, grid: tuple,
                          batch_size: int = 16) -> np.ndarray:
    """score_j = pair_score(q, d_j) + pair_score(d_j, q), pre-sigmoid."""
    model.eval()
    dtype = next(model.parameters()).dtype
    q = torch.as_tensor(np.asarray(query_dense), dtype=dtype)
    scores = []
    for start in range(0, len(candidate_denses), batch_size):
        chunk = candidate_denses[start:start + batch_size]
        d = torch.as_tensor(np.stack(chunk), dtype=dtype)
        qb = q[None].expand(d.shape[0], -1, -1)
        fwd = model.pair_score(_as_token_grid(qb, grid), _as_token_grid(d, grid))
        bwd = model.pair_score(_as_token_grid(d, grid), _as_token_grid(qb, grid))
        scores.append((fwd + bwd).numpy())
    return np.concatenate(scores)


def rerank_pairs(model: PairBackbone, index: DescriptorIndex,
                 query_dense: np.ndarray, global_list: RankedList,
                 score_cache: dict | None = None,
                 batch_size: int = 16) -> RankedList:
    """Reorder a global candidate pool by symmetrized pair-classifier score.

    Ties keep the global-stage relative order (stable sort). An optional
    score_cache maps candidate id -> score so nested top-N sweeps reuse
    forward passes.
    """
    if index.dense_store is None:
        raise ValueError("index lacks dense features; rebuild with store_dense=True")
    cand_ids = global_list.top_ids()
    missing = [cid for cid in cand_ids
               if score_cache is None or cid not in score_cache]
    if missing:
        feats = [index.dense_store[cid] for cid in missing]
        fresh = symmetric_pair_scores(model, query_dense, feats, index.grid,
                                      batch_size)
        if score_cache is None:
            score_cache = {}
        score_cache.update(zip(missing, fresh.tolist()))
    scores = np.array([score_cache[cid] for cid in cand_ids])
    order = np.argsort(-scores, kind="stable")
    cands = [(cand_ids[j], float(scores[j])) for j in order]
    return RankedList(query_id=global_list.query_id, candidates=cands,
                      stage="refined")


@torch.no_grad()
def two_stage_query(model: PairBackbone, index: DescriptorIndex,
                    query_image: torch.Tensor, n: int,
                    query_id=None, refine: bool = True
                    ) -> tuple[RankedList, RankedList | None]:
    """kNN then pair re-ranking for one query image; returns both stages."""
    model.eval()
    dense, cls = model.encode(query_image[None])
    desc = model.project_global(cls).numpy()
    global_list = knn_search(index, desc, n, [query_id])[0]
    if not refine:
        return global_list, None
    refined = rerank_pairs(model, index, dense.tokens[0].numpy(), global_list)
    return global_list, refined


# --- persistence -----------------------------------------------------------

def save_index(index: DescriptorIndex, out_dir: str,
               dense_dtype: str = "float32") -> None:
    """Persist as a directory: descriptor matrix, id table, per-image dense
    shards, and a versioned meta file."""
    os.makedirs(out_dir, exist_ok=True)
    np.save(os.path.join(out_dir, "descriptors.npy"), index.matrix)
    with open(os.path.join(out_dir, "ids.json"), "w") as fh:
        json.dump(list(index.ids), fh)
    meta = {"version": INDEX_VERSION, "grid": list(index.grid),
            "dense_dtype": dense_dtype,
            "has_dense": index.dense_store is not None}
    if index.dense_store is not None:
        dense_dir = os.path.join(out_dir, "dense")
        os.makedirs(dense_dir, exist_ok=True)
        for i, key in enumerate(index.ids):
            arr = index.dense_store[key].astype(np.dtype(dense_dtype))
            np.save(os.path.join(dense_dir, f"{i:06d}.npy"), arr)
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh)


def load_index(in_dir: str) -> DescriptorIndex:
    with open(os.path.join(in_dir, "meta.json")) as fh:
        meta = json.load(fh)
    if meta["version"] != INDEX_VERSION:
        raise ValueError(f"unsupported index version {meta['version']}")
    matrix = np.load(os.path.join(in_dir, "descriptors.npy"))
    with open(os.path.join(in_dir, "ids.json")) as fh:
        ids = json.load(fh)
    dense_store = None
    if meta["has_dense"]:
        dense_store = {}
        for i, key in enumerate(ids):
            arr = np.load(os.path.join(in_dir, "dense", f"{i:06d}.npy"))
            dense_store[key] = arr.astype(np.float32)
    return DescriptorIndex(matrix=matrix, ids=ids, dense_store=dense_store,
                           grid=tuple(meta["grid"]))


def dense_storage_bytes(index_dir: str) -> dict:
    """Per-image persisted dense-feature sizes, from the files themselves."""
    dense_dir = os.path.join(index_dir, "dense")
    if not os.path.isdir(dense_dir):
        return {}
    out = {}
    for name in sorted(os.listdir(dense_dir)):
        out[name] = os.path.getsize(os.path.join(dense_dir, name))
    return out
