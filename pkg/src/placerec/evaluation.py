"""Recall@N evaluation, top-N sweeps, and compute/storage profiling."""

import csv
import os
import statistics
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import retrieval

DEFAULT_TOLERANCE_M = 10.0  # synthetic-world default; real sets carry their own


@dataclass
class GroundTruth:
    positives: dict  # query_id -> set of db ids
    excluded: list  # query ids with zero positives (kept out of the denominator)


@dataclass
class RecallReport:
    dataset: str
    stage: str
    recalls: dict = field(default_factory=dict)  # N -> fraction
    timing: dict = field(default_factory=dict)  # name -> ms
    storage_mb_per_image: float | None = None
    num_queries: int = 0
    excluded_queries: int = 0


def build_ground_truth(db_positions: np.ndarray, db_ids: list,
                       query_positions: np.ndarray, query_ids: list,
                       tolerance: float = DEFAULT_TOLERANCE_M) -> GroundTruth:
    """Positive iff planar distance <= tolerance meters."""
    db_positions = np.asarray(db_positions, dtype=np.float64)
    query_positions = np.asarray(query_positions, dtype=np.float64)
    dists = np.linalg.norm(
        query_positions[:, None, :] - db_positions[None, :, :], axis=2)
    positives, excluded = {}, []
    for qi, qid in enumerate(query_ids):
        hits = {db_ids[j] for j in np.nonzero(dists[qi] <= tolerance)[0]}
        if hits:
            positives[qid] = hits
        else:
            excluded.append(qid)
    return GroundTruth(positives=positives, excluded=excluded)


def recall_at_n(ranked_lists: list, gt: GroundTruth, ns: list,
                dataset: str = "", stage: str = "") -> RecallReport:
    """Fraction of queries whose top-N contains a positive, per N.

    Queries without ground-truth positives are excluded from the
    denominator and reported.
    """
    scored = [rl for rl in ranked_lists if rl.query_id in gt.positives]
    for n in ns:
        for rl in scored:
            if n > len(rl.candidates):
                raise ValueError(
                    f"N={n} exceeds ranked list length {len(rl.candidates)}")
    report = RecallReport(dataset=dataset, stage=stage, num_queries=len(scored),
                          excluded_queries=len(gt.excluded))
    for n in sorted(ns):
        hits = sum(1 for rl in scored
                   if gt.positives[rl.query_id] & set(rl.top_ids(n)))
        report.recalls[n] = hits / len(scored) if scored else 0.0
    return report


@torch.no_grad()
def evaluate_two_stage(model, index, query_images: torch.Tensor,
                       query_ids: list, gt: GroundTruth, top_n: int,
                       ns: list, dataset: str = "synthetic"
                       ) -> tuple[RecallReport, RecallReport]:
    """Run both retrieval stages over a query set and score each."""
    global_lists, refined_lists = [], []
    for qi, qid in enumerate(query_ids):
        g, r = retrieval.two_stage_query(model, index, query_images[qi],
                                         top_n, query_id=qid)
        global_lists.append(g)
        refined_lists.append(r)
    ns_ok = [n for n in ns if n <= top_n]
    return (recall_at_n(global_lists, gt, ns_ok, dataset, "global"),
            recall_at_n(refined_lists, gt, ns_ok, dataset, "refined"))


@torch.no_grad()
def sweep_topn(model, index, query_images: torch.Tensor, query_ids: list,
               gt: GroundTruth, ns: list, dataset: str = "synthetic") -> list:
    """Refined Recall@1 as the re-ranked pool grows.

    Pair scores are cached per query, so candidates shared between nested
    pools are scored once.
    """
    max_n = max(ns)
    points = {n: [] for n in ns}
    for qi, qid in enumerate(query_ids):
        dense, cls = model.encode(query_images[qi][None])
        desc = model.project_global(cls).numpy()
        global_list = retrieval.knn_search(index, desc, max_n, [qid])[0]
        cache: dict = {}
        for n in sorted(ns):
            pool = retrieval.RankedList(qid, global_list.candidates[:n], "global")
            refined = retrieval.rerank_pairs(model, index,
                                             dense.tokens[0].numpy(), pool,
                                             score_cache=cache)
            points[n].append(refined)
    curve = []
    for n in sorted(ns):
        rep = recall_at_n(points[n], gt, [1], dataset, f"refined@pool{n}")
        curve.append((n, rep.recalls[1]))
    return curve


@torch.no_grad()
def profile_compute(model, index, query_images: torch.Tensor,
                    index_dir: str | None = None, pool_n: int = 5,
                    repeats: int = 5) -> dict:
    """Median per-query encode/match and per-pair refine timings, plus
    persisted dense-feature storage when an index directory is given."""
    model.eval()
    q = query_images[0][None]
    model.encode(q)  # warmup
    enc_ms, match_ms, refine_ms = [], [], []
    for _ in range(repeats):
        t0 = time.perf_counter()
        dense, cls = model.encode(q)
        desc = model.project_global(cls).numpy()
        enc_ms.append((time.perf_counter() - t0) * 1e3)

        t0 = time.perf_counter()
        glist = retrieval.knn_search(index, desc, pool_n)[0]
        match_ms.append((time.perf_counter() - t0) * 1e3)

        if index.dense_store is not None:
            feats = [index.dense_store[c] for c in glist.top_ids()]
            t0 = time.perf_counter()
            retrieval.symmetric_pair_scores(model, dense.tokens[0].numpy(),
                                            feats, index.grid)
            refine_ms.append((time.perf_counter() - t0) * 1e3 / len(feats))
    out = {"encode_ms_per_query": statistics.median(enc_ms),
           "match_ms_per_query": statistics.median(match_ms)}
    if refine_ms:
        out["refine_ms_per_pair"] = statistics.median(refine_ms)
    if index_dir is not None:
        sizes = retrieval.dense_storage_bytes(index_dir)
        if sizes:
            out["storage_mb_per_image"] = statistics.mean(sizes.values()) / 2**20
    return out


def emit_report(reports: list, out_dir: str,
                sweep_curves: dict | None = None) -> dict:
    """Write a CSV recall table and, when sweep data is given, an R@1-vs-N
    plot. Returns the paths written."""
    os.makedirs(out_dir, exist_ok=True)
    if not reports:
        raise ValueError("nothing to report")
    ns = sorted({n for rep in reports for n in rep.recalls})
    csv_path = os.path.join(out_dir, "recall.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset", "stage"] + [f"R@{n}" for n in ns]
                        + ["queries", "excluded", "storage_mb_per_image"])
        for rep in reports:
            writer.writerow(
                [rep.dataset, rep.stage]
                + [f"{rep.recalls[n]:.6f}" if n in rep.recalls else "" for n in ns]
                + [rep.num_queries, rep.excluded_queries,
                   "" if rep.storage_mb_per_image is None
                   else f"{rep.storage_mb_per_image:.4f}"])
    paths = {"csv": csv_path}
    if sweep_curves:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for name, curve in sweep_curves.items():
            xs, ys = zip(*curve)
            ax.plot(xs, ys, marker="o", label=name)
        ax.set_xlabel("re-ranked candidates N")
        ax.set_ylabel("Recall@1")
        ax.legend()
        fig.tight_layout()
        plot_path = os.path.join(out_dir, "recall_vs_topn.png")
        fig.savefig(plot_path, dpi=120)
        plt.close(fig)
        paths["plot"] = plot_path
    return paths


def read_report_csv(path: str) -> list:
    """Reparse an emitted CSV into RecallReports (round-trip check)."""
    reports = []
    with open(path) as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            rep = RecallReport(dataset=row["dataset"], stage=row["stage"],
                               num_queries=int(row["queries"]),
                               excluded_queries=int(row["excluded"]))
            for key, value in row.items():
                if key.startswith("R@") and value != "":
                    rep.recalls[int(key[2:])] = float(value)
            if row["storage_mb_per_image"]:
                rep.storage_mb_per_image = float(row["storage_mb_per_image"])
            reports.append(rep)
    return reports
