"""Exact Euclidean top-k search over catalog identity embeddings.

Distances use the expansion ``|q|^2 - 2 q.v + |v|^2`` in float64 with
precomputed row norms, clamped at zero before the square root. Queries are
processed in fixed-size blocks so the arithmetic for any query does not
depend on how many worker threads run.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyPoolError, ShapeError, ValidationError
from .ingest import Catalog, EmbeddingMatrix, iter_records, write_records

BLOCK = 256


class SearchIndex:
    """Immutable exhaustive index.

    ``vectors`` keeps the float32 rows; ``norms`` holds their squared norms.
    """

    def __init__(self, ids: Sequence[str], vectors: np.ndarray, categories: Sequence[str]):
        vectors = np.ascontiguousarray(vectors, dtype=np.float32)
        if vectors.ndim != 2 or vectors.shape[0] != len(ids):
            raise ShapeError(f"{len(ids)} ids for vectors of shape {vectors.shape}")
        self.ids: tuple[str, ...] = tuple(ids)
        self.vectors = vectors
        self.vectors.setflags(write=False)
        self._v64 = vectors.astype(np.float64)
        self.norms = np.einsum("ij,ij->i", self._v64, self._v64)
        self.norms.setflags(write=False)
        self.category_of: dict[str, str] = dict(zip(self.ids, categories))
        # Position of each row in ascending-id order; the tie-break key.
        order = sorted(range(len(self.ids)), key=self.ids.__getitem__)
        self._id_rank = np.empty(len(self.ids), dtype=np.int64)
        self._id_rank[order] = np.arange(len(self.ids))
        self._by_category: dict[str, np.ndarray] = {}
        cats = np.array(list(categories), dtype=object)
        for c in sorted(set(self.category_of.values())):
            self._by_category[c] = np.flatnonzero(cats == c)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def rows_for(self, category: str | None) -> np.ndarray | None:
        """Row subset for a category filter; ``None`` means all rows."""
        if category is None:
            return None
        return self._by_category.get(category, np.zeros(0, dtype=np.int64))


def build_index(embeddings: EmbeddingMatrix, catalog: Catalog) -> SearchIndex:
    missing = [i for i in embeddings.ids if i not in catalog]
    if missing:
        raise ValidationError(f"embedding id {missing[0]!r} is not in the catalog ({len(missing)} missing)")
    return SearchIndex(embeddings.ids, embeddings.data, [catalog.category_of(i) for i in embeddings.ids])


def _topk_block(index: SearchIndex, queries: np.ndarray, k: int, rows: np.ndarray | None):
    """Top-k for a block of queries against ``rows`` (all rows if None)."""
    vec = index._v64 if rows is None else index._v64[rows]
    nrm = index.norms if rows is None else index.norms[rows]
    rank = index._id_rank if rows is None else index._id_rank[rows]
    q = queries.astype(np.float64)
    qn = np.einsum("ij,ij->i", q, q)
    d2 = qn[:, None] - 2.0 * (q @ vec.T) + nrm[None, :]
    np.maximum(d2, 0.0, out=d2)
    dist = np.sqrt(d2)
    n = dist.shape[1]
    kk = min(k, n)
    if kk < n:
        kth = np.partition(dist, kk - 1, axis=1)[:, kk - 1]
    else:
        kth = np.full(dist.shape[0], np.inf)
    out_pos, out_dist = [], []
    for r in range(dist.shape[0]):
        # Keep every candidate tied with the k-th distance so the id tie-break is exact.
        cand = np.flatnonzero(dist[r] <= kth[r])
        order = cand[np.lexsort((rank[cand], dist[r, cand]))][:kk]
        out_pos.append(order if rows is None else rows[order])
        out_dist.append(dist[r, order])
    return out_pos, out_dist


def search_topk(index: SearchIndex, query, k: int, category_filter: str | None = None) -> list[tuple[str, float]]:
    """The ``k`` nearest identities to ``query``, nearest first.

    Equal distances are ordered by ascending id.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    q = np.asarray(query, dtype=np.float64).reshape(1, -1)
    if q.shape[1] != index.dim:
        raise ShapeError(f"query dim {q.shape[1]} does not match index dim {index.dim}")
    rows = index.rows_for(category_filter)
    if len(index) == 0 or (rows is not None and rows.size == 0):
        raise EmptyPoolError(
            "index is empty" if len(index) == 0 else f"no identities of category {category_filter!r}"
        )
    pos, dist = _topk_block(index, q, k, rows)
    return [(index.ids[p], float(d)) for p, d in zip(pos[0], dist[0])]


@dataclass
class RetrievalMatrix:
    """Candidate ids and aligned feature distances, one row per instance.

    Rows may be shorter than ``k`` when a filtered pool is small, and empty
    for rows listed in ``errors``.
    """

    instance_ids: list[str]
    candidates: list[list[str]]
    distances: list[np.ndarray]
    k: int
    errors: dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.instance_ids)

    def row(self, instance_id: str) -> int:
        return self.instance_ids.index(instance_id)

    def subset(self, rows: Sequence[int]) -> "RetrievalMatrix":
        return RetrievalMatrix(
            [self.instance_ids[r] for r in rows],
            [list(self.candidates[r]) for r in rows],
            [np.array(self.distances[r], dtype=np.float64) for r in rows],
            self.k,
            {i: e for i, e in self.errors.items() if i in {self.instance_ids[r] for r in rows}},
        )

    def to_records(self) -> list[dict]:
        return [
            {"instance": i, "candidates": list(c), "distances": [float(x) for x in d]}
            for i, c, d in zip(self.instance_ids, self.candidates, self.distances)
        ]


def batch_search(
    index: SearchIndex,
    queries: np.ndarray | EmbeddingMatrix,
    k: int,
    use_category_filter: bool = False,
    categories: Sequence[str] | None = None,
    instance_ids: Sequence[str] | None = None,
    threads: int = 1,
) -> RetrievalMatrix:
    """Search every query row; row ``i`` equals ``search_topk`` for query ``i``.

    ``categories`` is required when filtering. Rows whose pool is empty are
    left empty and reported in ``errors`` instead of aborting the batch.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if isinstance(queries, EmbeddingMatrix):
        if instance_ids is None:
            instance_ids = queries.ids
        queries = queries.data
    queries = np.asarray(queries)
    if queries.ndim != 2 or (queries.shape[0] and queries.shape[1] != index.dim):
        raise ShapeError(f"queries of shape {queries.shape} do not match index dim {index.dim}")
    n = queries.shape[0]
    instance_ids = [str(i) for i in range(n)] if instance_ids is None else list(instance_ids)
    if use_category_filter and (categories is None or len(categories) != n):
        raise ValueError("category filtering needs one category per query")

    cand: list[list[str]] = [[] for _ in range(n)]
    dists: list[np.ndarray] = [np.zeros(0) for _ in range(n)]
    errors: dict[str, str] = {}

    groups: dict[str | None, np.ndarray] = {}
    if use_category_filter:
        cats = np.array(list(categories), dtype=object)
        for c in sorted(set(categories)):
            groups[c] = np.flatnonzero(cats == c)
    else:
        groups[None] = np.arange(n)

    jobs = []
    for cat, qrows in groups.items():
        rows = index.rows_for(cat)
        if len(index) == 0 or (rows is not None and rows.size == 0):
            msg = "index is empty" if len(index) == 0 else f"no identities of category {cat!r}"
            for r in qrows:
                errors[instance_ids[r]] = msg
            continue
        for start in range(0, qrows.size, BLOCK):
            jobs.append((qrows[start : start + BLOCK], rows))

    def work(job):
        qrows, rows = job
        return qrows, _topk_block(index, queries[qrows], k, rows)

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            done = list(pool.map(work, jobs))
    else:
        done = [work(j) for j in jobs]
    for qrows, (pos, dist) in done:
        for r, p, d in zip(qrows, pos, dist):
            cand[r] = [index.ids[x] for x in p]
            dists[r] = d
    errors = {i: errors[i] for i in instance_ids if i in errors}
    return RetrievalMatrix(instance_ids, cand, dists, k, errors)


def write_retrieval(path: str | Path, results: RetrievalMatrix) -> None:
    write_records(path, results.to_records())


def load_retrieval(path: str | Path) -> RetrievalMatrix:
    ids, cand, dist = [], [], []
    for _, rec in iter_records(path):
        ids.append(rec["instance"])
        cand.append(list(rec["candidates"]))
        dist.append(np.array(rec["distances"], dtype=np.float64))
    k = max((len(c) for c in cand), default=0)
    return RetrievalMatrix(ids, cand, dist, k)
