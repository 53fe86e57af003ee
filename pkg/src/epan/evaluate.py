"""Retrieval metrics: pairwise distances, CMC / mAP under the Market1501
protocol, and the stripe-wise block distance matrix used to visualize
alignment.

Protocol per query: sort the gallery by ascending distance with stable
index-order tie-breaking, drop gallery entries sharing both pid and camid
with the query, drop junk (pid -1); CMC at rank k is the fraction of valid
queries whose first correct match appears within the top k, and AP averages
precision at each relevant rank. Queries left without any relevant gallery
entry are excluded and counted.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import DimensionError, EvaluationError


@dataclass
class EvalReport:
    cmc: np.ndarray  # index k-1 -> CMC at rank k
    map: float
    per_query_ap: np.ndarray
    num_valid_queries: int
    metric: str

    def rank(self, k: int) -> float:
        return float(self.cmc[k - 1])


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def distance_matrix(query, gallery, metric: str = "euclidean") -> np.ndarray:
    """Pairwise [nq, ng] distances between descriptor rows.

    ``euclidean`` is the plain L2 distance; ``cosine`` is 1 - cosine
    similarity on L2-normalized rows, with zero-norm rows flagged and treated
    as maximally distant.
    """
    q = _as_array(query).astype(np.float64)
    g = _as_array(gallery).astype(np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise DimensionError(f"descriptor dims differ: {q.shape} vs {g.shape}")
    if metric == "euclidean":
        sq = (q * q).sum(1)[:, None] + (g * g).sum(1)[None, :] - 2.0 * (q @ g.T)
        return np.sqrt(np.maximum(sq, 0.0))
    if metric == "cosine":
        qn = np.linalg.norm(q, axis=1)
        gn = np.linalg.norm(g, axis=1)
        qz, gz = qn == 0.0, gn == 0.0
        if qz.any() or gz.any():
            warnings.warn("cosine distance: zero-norm descriptor rows "
                          "treated as maximal distance", RuntimeWarning)
        sim = (q / np.where(qz, 1.0, qn)[:, None]) @ (g / np.where(gz, 1.0, gn)[:, None]).T
        dist = 1.0 - sim
        dist[qz, :] = 2.0
        dist[:, gz] = 2.0
        return dist
    raise DimensionError(f"unknown metric {metric!r}")


def evaluate(
    distmat,
    q_pids,
    q_camids,
    g_pids,
    g_camids,
    k_max: int = 10,
    metric: str = "euclidean",
) -> EvalReport:
    """CMC curve and mAP of a query-by-gallery distance matrix."""
    dist = _as_array(distmat)
    q_pids = np.asarray(q_pids)
    q_camids = np.asarray(q_camids)
    g_pids = np.asarray(g_pids)
    g_camids = np.asarray(g_camids)
    nq, ng = dist.shape
    if q_pids.shape != (nq,) or q_camids.shape != (nq,):
        raise DimensionError("query id arrays do not match the distance matrix")
    if g_pids.shape != (ng,) or g_camids.shape != (ng,):
        raise DimensionError("gallery id arrays do not match the distance matrix")

    cmc_acc = np.zeros(k_max)
    aps = []
    skipped = 0
    for qi in range(nq):
        order = np.argsort(dist[qi], kind="stable")
        pids = g_pids[order]
        cams = g_camids[order]
        # Market filter: same identity seen by the same camera is not a match
        # candidate; junk entries never count.
        keep = ~(((pids == q_pids[qi]) & (cams == q_camids[qi])) | (pids == -1))
        matches = (pids[keep] == q_pids[qi]) & (q_pids[qi] != -1)
        num_rel = int(matches.sum())
        if num_rel == 0:
            skipped += 1
            continue
        first = int(np.flatnonzero(matches)[0])
        if first < k_max:
            cmc_acc[first:] += 1.0
        ranks = np.flatnonzero(matches) + 1
        precisions = np.arange(1, num_rel + 1) / ranks
        aps.append(precisions.sum() / num_rel)
    num_valid = nq - skipped
    if num_valid == 0:
        raise EvaluationError("no query has a relevant gallery entry after filtering")
    per_query_ap = np.asarray(aps)
    return EvalReport(
        cmc=cmc_acc / num_valid,
        map=float(per_query_ap.mean()),
        per_query_ap=per_query_ap,
        num_valid_queries=num_valid,
        metric=metric,
    )


def write_report_csv(path, report: EvalReport) -> None:
    """CSV of rank,cmc rows followed by a map line."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "cmc"])
        for k, value in enumerate(report.cmc, start=1):
            writer.writerow([k, repr(float(value))])
        writer.writerow(["map", repr(report.map)])


def block_distance_matrix(feat_a, feat_b, nblocks: int = 8) -> np.ndarray:
    """Stripe-to-stripe Euclidean distances between two feature maps.

    Each [C,H,W] map is split into ``nblocks`` horizontal stripes; a stripe's
    descriptor is its channel-wise spatial mean, L2-normalized. Entry (i, j)
    is the distance between stripe i of A and stripe j of B.
    """
    a = _as_array(feat_a)
    b = _as_array(feat_b)
    for name, f in (("A", a), ("B", b)):
        if f.ndim != 3:
            raise DimensionError(f"feature map {name} must be [C,H,W], got {f.shape}")
        if f.shape[1] % nblocks:
            raise DimensionError(
                f"feature map {name} height {f.shape[1]} not divisible by {nblocks}"
            )

    def stripes(f):
        c, h, _ = f.shape
        parts = f.reshape(c, nblocks, h // nblocks, -1).mean(axis=(2, 3)).T  # [n, C]
        norms = np.linalg.norm(parts, axis=1, keepdims=True)
        return parts / np.where(norms == 0.0, 1.0, norms)

    sa, sb = stripes(a), stripes(b)
    sq = ((sa * sa).sum(1)[:, None] + (sb * sb).sum(1)[None, :] - 2.0 * sa @ sb.T)
    return np.sqrt(np.maximum(sq, 0.0))


def write_block_matrix_csv(path, matrix: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in matrix:
            writer.writerow([repr(float(v)) for v in row])
