"""Context embeddings learned from design co-occurrence sets.

Each training example takes one member of a design set as the positive and
the mean of the remaining members as the input; sampled non-members are the
negatives. The objective is a margin ranking hinge over cosine similarity::

    sum_neg max(0, margin - cos(a, pos) + cos(a, neg))
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyCorpusError, FormatError, MissingEntity, SamplingError, ShapeError
from .ingest import (
    DesignSet,
    EmbeddingMatrix,
    load_embedding_file,
    read_sidecar,
    write_embedding_file,
    write_sidecar,
)

COS_EPS = 1e-12


@dataclass
class ContextTrainConfig:
    dim: int = 100
    margin: float = 0.2
    negatives_per_example: int = 5
    learning_rate: float = 0.05
    epochs: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ShapeError("context dim must be >= 1")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.negatives_per_example < 1 or self.learning_rate <= 0 or self.epochs < 0:
            raise ValueError("negatives_per_example and learning_rate must be positive")


class ContextModel:
    """Identity id -> context vector lookup.

    During training ``vectors`` is updated in place; served models are
    l2-normalized and read-only.
    """

    similarity = "cosine"

    def __init__(self, ids: Sequence[str], vectors: np.ndarray):
        vectors = np.array(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(ids) or vectors.shape[1] < 1:
            raise ShapeError(f"{len(ids)} ids for context table of shape {vectors.shape}")
        if not np.isfinite(vectors).all():
            raise ShapeError("context table has non-finite entries")
        self.ids = tuple(ids)
        self.vectors = vectors
        self._pos = {i: n for n, i in enumerate(self.ids)}

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, identity_id: object) -> bool:
        return identity_id in self._pos

    def position(self, identity_id: str) -> int:
        try:
            return self._pos[identity_id]
        except KeyError:
            raise MissingEntity(identity_id) from None

    def frozen(self) -> "ContextModel":
        """Unit-norm, read-only copy for serving."""
        norms = np.linalg.norm(self.vectors, axis=1, keepdims=True)
        served = ContextModel(self.ids, self.vectors / np.maximum(norms, COS_EPS))
        served.vectors.setflags(write=False)
        return served

    def to_matrix(self) -> EmbeddingMatrix:
        return EmbeddingMatrix(self.ids, self.vectors)


def context_lookup(model: ContextModel, identity_id: str) -> np.ndarray:
    """Context vector of ``identity_id``; raises :class:`MissingEntity`."""
    return model.vectors[model.position(identity_id)]


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b) + COS_EPS))


def context_distance(c1, c2) -> float:
    """Cosine distance ``1 - cos``, in [0, 2].

    Identical vectors are exactly 0 apart, so repeated identities tie cleanly
    instead of differing by rounding in the epsilon-guarded quotient.
    """
    c1 = np.asarray(c1, dtype=np.float64)
    c2 = np.asarray(c2, dtype=np.float64)
    if c1.shape != c2.shape:
        raise ShapeError(f"context vectors differ in shape: {c1.shape} vs {c2.shape}")
    if np.array_equal(c1, c2):
        return 0.0
    return 1.0 - cosine(c1, c2)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


class NegativeSampler:
    """Unigram sampler over identity occurrences in the corpus."""

    def __init__(self, sets: Iterable[DesignSet]):
        counts: dict[str, int] = {}
        for s in sets:
            for i in s.items:
                counts[i] = counts.get(i, 0) + 1
        self.vocab = tuple(counts)
        weights = np.array([counts[i] for i in self.vocab], dtype=np.float64)
        self.cdf = np.cumsum(weights / weights.sum()) if weights.size else weights
        self._pos = {i: n for n, i in enumerate(self.vocab)}

    def draw(self, rng: np.random.Generator, exclude: set[str], count: int) -> list[str]:
        if all(v in exclude for v in self.vocab):
            raise SamplingError("every vocabulary item is in the set; no negative can be drawn")
        out: list[str] = []
        while len(out) < count:
            i = int(np.searchsorted(self.cdf, rng.random(), side="right"))
            cand = self.vocab[min(i, len(self.vocab) - 1)]
            if cand not in exclude:
                out.append(cand)
        return out


@dataclass(frozen=True)
class Example:
    context: tuple[str, ...]
    positive: str
    negatives: tuple[str, ...]


def sample_training_example(
    design: DesignSet, rng: np.random.Generator, sampler: NegativeSampler, negatives: int = 5
) -> Example:
    if len(design.items) < 2:
        raise SamplingError(f"design {design.design_id!r} has fewer than 2 items")
    p = int(rng.integers(len(design.items)))
    context = design.items[:p] + design.items[p + 1 :]
    negs = sampler.draw(rng, set(design.items), negatives)
    return Example(context, design.items[p], tuple(negs))


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------


def _cos_and_grads(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    den = na * nb + COS_EPS
    dot = float(a @ b)
    cos = dot / den
    # d/da of dot/(|a||b| + eps)
    ga = b / den - dot * nb * a / (den**2 * max(na, COS_EPS))
    gb = a / den - dot * na * b / (den**2 * max(nb, COS_EPS))
    return cos, ga, gb


def margin_ranking_loss_and_grads(
    model: ContextModel, example: Example, margin: float
) -> tuple[float, dict[int, np.ndarray]]:
    """Hinge loss of one example and its gradient per table row."""
    ctx_rows = [model.position(i) for i in example.context]
    pos_row = model.position(example.positive)
    neg_rows = [model.position(i) for i in example.negatives]
    table = model.vectors
    a = table[ctx_rows].mean(axis=0)

    cos_p, ga_p, gp = _cos_and_grads(a, table[pos_row])
    loss = 0.0
    ga = np.zeros_like(a)
    grads: dict[int, np.ndarray] = {}

    def add(row: int, g: np.ndarray) -> None:
        grads[row] = grads[row] + g if row in grads else g.copy()

    for r in neg_rows:
        cos_n, ga_n, gn = _cos_and_grads(a, table[r])
        h = margin - cos_p + cos_n
        if h > 0:
            loss += h
            ga += ga_n - ga_p
            add(pos_row, -gp)
            add(r, gn)
    if np.any(ga):
        share = ga / len(ctx_rows)
        for r in ctx_rows:
            add(r, share)
    return loss, grads


def margin_ranking_step(model: ContextModel, example: Example, config: ContextTrainConfig) -> float:
    """One SGD update on ``model.vectors``; returns the pre-update loss."""
    loss, grads = margin_ranking_loss_and_grads(model, example, config.margin)
    for row, g in grads.items():
        model.vectors[row] -= config.learning_rate * g
    return loss


def init_context_model(vocab: Sequence[str], dim: int, rng: np.random.Generator) -> ContextModel:
    lim = 1.0 / np.sqrt(dim)
    return ContextModel(vocab, rng.uniform(-lim, lim, size=(len(vocab), dim)))


def train_context_model(
    design_sets: Iterable[DesignSet], config: ContextTrainConfig, return_history: bool = False
):
    """Train on one sampled example per set per epoch, in seeded shuffled order.

    Returns the served (unit-norm) model, and the per-epoch mean loss when
    ``return_history`` is set.
    """
    sets = [s for s in design_sets]
    if not sets:
        raise EmptyCorpusError("no design sets to train on")
    sampler = NegativeSampler(sets)
    rng = np.random.default_rng(config.seed)
    model = init_context_model(sampler.vocab, config.dim, rng)
    history = []
    for _ in range(config.epochs):
        total = 0.0
        for n in rng.permutation(len(sets)):
            ex = sample_training_example(sets[n], rng, sampler, config.negatives_per_example)
            total += margin_ranking_step(model, ex, config)
        history.append(total / len(sets))
    served = model.frozen()
    return (served, history) if return_history else served


def save_context_model(model: ContextModel, path: str | Path, config: ContextTrainConfig | None = None) -> None:
    path = Path(path)
    write_embedding_file(path, model.to_matrix())
    record = {"kind": "context", "dim": model.dim, "similarity": model.similarity}
    if config is not None:
        record["config"] = asdict(config)
    write_sidecar(path.with_name(path.name + ".json"), record)


def load_context_model(path: str | Path) -> ContextModel:
    path = Path(path)
    m = load_embedding_file(path)
    meta_path = path.with_name(path.name + ".json")
    if meta_path.exists():
        meta = read_sidecar(meta_path)
        if int(meta.get("dim", m.dim)) != m.dim:
            raise FormatError("context model dim does not match its header")
    model = ContextModel(m.ids, m.data.astype(np.float64))
    model.vectors.setflags(write=False)
    return model
