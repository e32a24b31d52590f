"""Greedy context re-ranking of per-image retrieval results.

Output column ``j`` is one furniture set: an anchor (the remaining candidate
with the smallest scaled feature distance over all instances), then one
candidate per remaining instance minimizing

    D = alpha * DF_scaled + (1 - alpha) * min_{c in set} dist(C(candidate), C(c))

where ``dist`` is cosine distance between context vectors. Every chosen cell
is removed from its instance's pool before the next column.

Feature distances are min-max scaled per instance row to [0, 1] first so
``alpha`` mixes two quantities on comparable scales; a constant row scales
to all zeros.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .context import COS_EPS, ContextModel, context_distance
from .errors import ConfigError, ContractError, PoolExhausted
from .index import RetrievalMatrix
from .ingest import InstanceQuery, iter_records, write_records


@dataclass(frozen=True)
class RerankConfig:
    alpha: float = 0.5
    k_out: int = 10
    missing_context_penalty: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.k_out < 1:
            raise ConfigError("k_out must be >= 1")


@dataclass
class RerankedMatrix(RetrievalMatrix):
    """Re-ranked candidates plus, per cell, the source column and D value."""

    source_columns: list[list[int]] = field(default_factory=list)
    scores: list[list[float]] = field(default_factory=list)

    def to_records(self) -> list[dict]:
        recs = super().to_records()
        for rec, src, sc in zip(recs, self.source_columns, self.scores):
            rec["source_columns"] = list(src)
            rec["scores"] = [float(x) for x in sc]
        return recs


def scale_row(df) -> np.ndarray:
    """Min-max scale one row of feature distances to [0, 1]."""
    df = np.asarray(df, dtype=np.float64)
    if df.size == 0:
        return df.copy()
    lo, hi = df.min(), df.max()
    if hi == lo:
        return np.zeros_like(df)
    return (df - lo) / (hi - lo)


def incremental_distance(
    df_scaled: float,
    candidate_context: np.ndarray | None,
    chosen_contexts: Sequence[np.ndarray | None],
    alpha: float,
    missing_context_penalty: float = 1.0,
) -> float:
    """Mixed feature/context distance of one candidate given the current set.

    ``None`` marks an identity without a context vector. A candidate without
    one, or a set whose members all lack one, gets the penalty as its context
    term.
    """
    if len(chosen_contexts) == 0:
        raise ContractError("incremental distance needs at least one chosen item")
    known = [c for c in chosen_contexts if c is not None]
    if candidate_context is None or not known:
        ctx = missing_context_penalty
    else:
        ctx = min(context_distance(candidate_context, c) for c in known)
    return alpha * df_scaled + (1.0 - alpha) * ctx


def _row_context(model: ContextModel, ids: Sequence[str]) -> list[np.ndarray | None]:
    return [model.vectors[model.position(i)] if i in model else None for i in ids]


def _context_terms(cands: np.ndarray, has: np.ndarray, chosen: list, penalty: float) -> np.ndarray:
    """Vectorized min cosine distance from each candidate to the chosen set."""
    known = [c for c in chosen if c is not None]
    out = np.full(cands.shape[0], penalty)
    if not known or not has.any():
        return out
    K = np.array(known)
    num = cands[has] @ K.T
    den = np.linalg.norm(cands[has], axis=1)[:, None] * np.linalg.norm(K, axis=1)[None, :] + COS_EPS
    dist = 1.0 - num / den
    dist[(cands[has][:, None, :] == K[None, :, :]).all(axis=2)] = 0.0  # same identity as a chosen item
    out[has] = dist.min(axis=1)
    return out


def rerank(results: RetrievalMatrix, context_model: ContextModel, config: RerankConfig) -> RerankedMatrix:
    """Re-rank the rows of one image's retrieval matrix into coherent sets.

    Within an instance, ties in D go to the smaller raw feature distance and
    then the smaller id. Raises :class:`PoolExhausted` if ``k_out`` exceeds a
    row's candidate count; the input is never modified.
    """
    n = len(results)
    if n == 0:
        raise ContractError("rerank needs at least one instance")
    alpha, k_out = config.alpha, config.k_out
    penalty = config.missing_context_penalty

    cand = [list(c) for c in results.candidates]
    raw = [np.asarray(d, dtype=np.float64) for d in results.distances]
    scaled = [scale_row(d) for d in raw]
    ctx = [_row_context(context_model, c) for c in cand]
    dim = context_model.dim
    ctx_mat = [np.array([v if v is not None else np.zeros(dim) for v in row]).reshape(len(row), dim) for row in ctx]
    has = [np.array([v is not None for v in row], dtype=bool) for row in ctx]
    remaining = [np.ones(len(c), dtype=bool) for c in cand]

    out_c: list[list[str]] = [[] for _ in range(n)]
    out_d: list[list[float]] = [[] for _ in range(n)]
    out_src: list[list[int]] = [[] for _ in range(n)]
    out_s: list[list[float]] = [[] for _ in range(n)]

    def argmin_slot(i: int, score: np.ndarray) -> int:
        slots = np.flatnonzero(remaining[i])
        return min(slots, key=lambda s: (score[s], raw[i][s], cand[i][s]))

    for col in range(k_out):
        for i in range(n):
            if not remaining[i].any():
                raise PoolExhausted(results.instance_ids[i], col + 1)
        firsts = {i: argmin_slot(i, scaled[i]) for i in range(n)}
        ordered = sorted(
            range(n), key=lambda i: (scaled[i][firsts[i]], raw[i][firsts[i]], cand[i][firsts[i]], i)
        )
        anchor = ordered[0]
        picks = {anchor: (firsts[anchor], float(scaled[anchor][firsts[anchor]]))}
        chosen = [ctx[anchor][firsts[anchor]]]
        for i in ordered[1:]:
            terms = _context_terms(ctx_mat[i], has[i] & remaining[i], chosen, penalty)
            score = alpha * scaled[i] + (1.0 - alpha) * terms
            s = argmin_slot(i, score)
            picks[i] = (s, float(score[s]))
            chosen.append(ctx[i][s])
        for i, (s, d) in picks.items():
            remaining[i][s] = False
            out_c[i].append(cand[i][s])
            out_d[i].append(float(raw[i][s]))
            out_src[i].append(int(s))
            out_s[i].append(d)

    return RerankedMatrix(
        list(results.instance_ids),
        out_c,
        [np.array(d) for d in out_d],
        k_out,
        dict(results.errors),
        out_src,
        out_s,
    )


def group_by_image(results: RetrievalMatrix, queries: Sequence[InstanceQuery]) -> dict[str, list[int]]:
    """Row indices of ``results`` per image id, images in first-seen order."""
    image_of = {q.instance_id: q.image_id for q in queries}
    groups: dict[str, list[int]] = {}
    for r, inst in enumerate(results.instance_ids):
        groups.setdefault(image_of[inst], []).append(r)
    return groups


def rerank_corpus(
    results: RetrievalMatrix,
    queries: Sequence[InstanceQuery],
    context_model: ContextModel,
    config: RerankConfig,
    threads: int = 1,
) -> RerankedMatrix:
    """Re-rank every image independently and reassemble rows in input order."""
    groups = [
        [r for r in rows if results.candidates[r]] for rows in group_by_image(results, queries).values()
    ]
    groups = [g for g in groups if g]

    def work(rows):
        return rows, rerank(results.subset(rows), context_model, config)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, groups))
    else:
        parts = [work(g) for g in groups]

    n = len(results)
    c: list = [[] for _ in range(n)]
    d: list = [np.zeros(0) for _ in range(n)]
    src: list = [[] for _ in range(n)]
    sc: list = [[] for _ in range(n)]
    for rows, part in parts:
        for local, r in enumerate(rows):
            c[r], d[r] = part.candidates[local], part.distances[local]
            src[r], sc[r] = part.source_columns[local], part.scores[local]
    return RerankedMatrix(list(results.instance_ids), c, d, config.k_out, dict(results.errors), src, sc)


def write_reranked(path: str | Path, reranked: RerankedMatrix) -> None:
    write_records(path, reranked.to_records())


def load_reranked(path: str | Path) -> RerankedMatrix:
    ids, cand, dist, src, sc = [], [], [], [], []
    for _, rec in iter_records(path):
        ids.append(rec["instance"])
        cand.append(list(rec["candidates"]))
        dist.append(np.array(rec["distances"], dtype=np.float64))
        src.append(list(rec.get("source_columns", [])))
        sc.append(list(rec.get("scores", [])))
    k = max((len(x) for x in cand), default=0)
    return RerankedMatrix(ids, cand, dist, k, {}, src, sc)
