"""Pseudo-attributes from category-constrained k-means.

Cross-category distance is infinite, so no cluster can mix categories and
global k-means decomposes into one independent Lloyd run per category.
"""

from __future__ import annotations

import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import BudgetError, FormatError, ShapeError
from .ingest import (
    Catalog,
    EmbeddingMatrix,
    iter_records,
    load_embedding_file,
    read_sidecar,
    write_embedding_file,
    write_records,
    write_sidecar,
)


def constrained_distance(f_i, y_i: str, f_j, y_j: str) -> float:
    """Euclidean distance within a category, ``inf`` across categories."""
    f_i = np.asarray(f_i, dtype=np.float64)
    f_j = np.asarray(f_j, dtype=np.float64)
    if f_i.shape != f_j.shape:
        raise ShapeError(f"vector shapes differ: {f_i.shape} vs {f_j.shape}")
    if y_i != y_j:
        return math.inf
    return float(np.linalg.norm(f_i - f_j))


def _category_counts(catalog) -> dict[str, int]:
    if isinstance(catalog, Catalog):
        return catalog.category_counts()
    if isinstance(catalog, Mapping):
        return {c: int(n) for c, n in sorted(catalog.items()) if n > 0}
    counts: dict[str, int] = {}
    for c in catalog:
        counts[c] = counts.get(c, 0) + 1
    return dict(sorted(counts.items()))


def allocate_cluster_budget(catalog, k_total: int) -> dict[str, int]:
    """Split ``k_total`` clusters over categories by largest remainder.

    ``catalog`` may be a :class:`Catalog`, a ``category -> count`` mapping or
    an iterable of per-identity categories. Every non-empty category gets at
    least one cluster and never more clusters than identities.
    """
    counts = _category_counts(catalog)
    if k_total < len(counts):
        raise BudgetError(f"k_total={k_total} is smaller than the {len(counts)} non-empty categories")
    total = sum(counts.values())
    if k_total > total:
        raise BudgetError(f"k_total={k_total} exceeds the {total} identities available")

    quota = {c: k_total * n / total for c, n in counts.items()}
    alloc = {c: min(counts[c], max(1, math.floor(quota[c]))) for c in counts}
    while sum(alloc.values()) < k_total:
        open_ = [c for c in counts if alloc[c] < counts[c]]
        best = min(open_, key=lambda c: (-(quota[c] - alloc[c]), c))
        alloc[best] += 1
    while sum(alloc.values()) > k_total:
        over = [c for c in counts if alloc[c] > 1]
        worst = min(over, key=lambda c: (-(alloc[c] - quota[c]), c))
        alloc[worst] -= 1
    return alloc


def category_rng(seed: int, category: str) -> np.random.Generator:
    """Per-category stream, independent of scheduling order."""
    return np.random.default_rng(seed ^ zlib.crc32(category.encode("utf-8")))


def kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding; returns a ``(k, d)`` float64 array of chosen rows."""
    n = points.shape[0]
    if not 1 <= k <= n:
        raise BudgetError(f"cannot seed {k} centroids from {n} points")
    chosen = [int(rng.integers(n))]
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            # All remaining points coincide with a centroid.
            free = np.setdiff1d(np.arange(n), chosen)
            nxt = int(free[rng.integers(free.size)])
        chosen.append(nxt)
        d2 = np.minimum(d2, ((points - points[nxt]) ** 2).sum(axis=1))
    return points[chosen].astype(np.float64)


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    pn = np.einsum("ij,ij->i", points, points)
    cn = np.einsum("ij,ij->i", centroids, centroids)
    return np.maximum(pn[:, None] - 2.0 * points @ centroids.T + cn[None, :], 0.0)


def _repair_empty(points, labels, centroids) -> None:
    k = centroids.shape[0]
    for j in range(k):
        sizes = np.bincount(labels, minlength=k)
        if sizes[j]:
            continue
        donor = int(np.argmax(sizes))
        members = np.flatnonzero(labels == donor)
        far = members[np.argmax(((points[members] - centroids[donor]) ** 2).sum(axis=1))]
        labels[far] = j
        centroids[j] = points[far]


@dataclass
class LloydResult:
    labels: np.ndarray
    centroids: np.ndarray
    cost: float
    history: list[float]
    iterations: int


def lloyd(points: np.ndarray, init: np.ndarray, max_iters: int = 100, tol: float = 1e-6) -> LloydResult:
    """Plain Lloyd iterations from the given centroids.

    Stops when assignments repeat, the relative cost decrease drops below
    ``tol``, or after ``max_iters`` rounds. ``history`` holds the cost after
    every centroid update.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    points = np.asarray(points, dtype=np.float64)
    centroids = np.array(init, dtype=np.float64)
    k = centroids.shape[0]
    labels = None
    history: list[float] = []
    it = 0
    for it in range(1, max_iters + 1):
        new = np.argmin(_sq_dists(points, centroids), axis=1)
        _repair_empty(points, new, centroids)
        sums = np.zeros_like(centroids)
        np.add.at(sums, new, points)
        centroids = sums / np.bincount(new, minlength=k)[:, None]
        cost = float(((points - centroids[new]) ** 2).sum())
        history.append(cost)
        same = labels is not None and np.array_equal(new, labels)
        small = len(history) > 1 and history[-2] - cost <= tol * history[-2]
        labels = new
        if same or small:
            break
    return LloydResult(labels, centroids, history[-1], history, it)


@dataclass
class AttributeAssignment:
    labels: dict[str, int]
    centroids: np.ndarray
    centroid_category: list[str]
    cost: float
    cost_history: dict[str, list[float]] = field(default_factory=dict)

    @property
    def k_total(self) -> int:
        return len(self.centroid_category)

    def label_array(self, ids: Sequence[str]) -> np.ndarray:
        return np.array([self.labels[i] for i in ids], dtype=np.int64)


def cluster_attributes(
    X: EmbeddingMatrix,
    categories,
    budget: Mapping[str, int],
    seed: int = 0,
    max_iters: int = 100,
    tol: float = 1e-6,
    threads: int = 1,
    n_init: int = 4,
) -> AttributeAssignment:
    """Run category-constrained k-means over the rows of ``X``.

    ``categories`` maps identity id to category (a :class:`Catalog` works).
    Each category runs ``n_init`` seeded k-means++ restarts and keeps the
    lowest-cost one. Attribute indices are laid out category by category in
    sorted order.
    """
    if n_init < 1:
        raise ValueError("n_init must be >= 1")
    lookup = categories.category_of if isinstance(categories, Catalog) else categories.__getitem__
    members: dict[str, list[int]] = {}
    for row, identity_id in enumerate(X.ids):
        members.setdefault(lookup(identity_id), []).append(row)
    for cat in members:
        if budget.get(cat, 0) < 1:
            raise BudgetError(f"category {cat!r} has identities but no cluster budget")
    for cat, k in budget.items():
        if k > 0 and not members.get(cat):
            raise BudgetError(f"category {cat!r} has budget {k} but no identities")
        if k > len(members.get(cat, ())):
            raise BudgetError(f"category {cat!r}: budget {k} exceeds {len(members.get(cat, ()))} identities")

    order = sorted(c for c in budget if budget[c] > 0)
    data = X.data.astype(np.float64)

    def run(cat: str) -> LloydResult:
        pts = data[members[cat]]
        rng = category_rng(seed, cat)
        best = None
        for _ in range(n_init):
            res = lloyd(pts, kmeans_pp_init(pts, budget[cat], rng), max_iters=max_iters, tol=tol)
            if best is None or res.cost < best.cost:
                best = res
        return best

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, order))
    else:
        results = [run(c) for c in order]

    labels: dict[str, int] = {}
    centroids = []
    centroid_category: list[str] = []
    history = {}
    cost = 0.0
    for cat, res in zip(order, results):
        offset = len(centroid_category)
        for row, lab in zip(members[cat], res.labels):
            labels[X.ids[row]] = offset + int(lab)
        centroids.append(res.centroids)
        centroid_category.extend([cat] * res.centroids.shape[0])
        history[cat] = res.history
        cost += res.cost
    labels = {i: labels[i] for i in X.ids}
    cents = np.vstack(centroids) if centroids else np.zeros((0, X.dim))
    return AttributeAssignment(labels, cents, centroid_category, cost, history)


def save_assignment(assignment: AttributeAssignment, labels_path, centroids_path) -> None:
    write_records(labels_path, ({"id": i, "attribute": a} for i, a in assignment.labels.items()))
    ids = tuple(f"__attr.{i}" for i in range(assignment.k_total))
    write_embedding_file(centroids_path, EmbeddingMatrix(ids, assignment.centroids))
    write_sidecar(
        Path(str(centroids_path) + ".json"),
        {"kind": "attributes", "centroid_category": assignment.centroid_category, "cost": assignment.cost},
    )


def load_assignment(labels_path, centroids_path) -> AttributeAssignment:
    labels = {}
    for lineno, rec in iter_records(labels_path):
        try:
            labels[str(rec["id"])] = int(rec["attribute"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"line {lineno}: bad attribute record") from exc
    cents = load_embedding_file(centroids_path)
    meta = read_sidecar(Path(str(centroids_path) + ".json"))
    return AttributeAssignment(
        labels, cents.data.astype(np.float64), list(meta["centroid_category"]), float(meta["cost"])
    )
