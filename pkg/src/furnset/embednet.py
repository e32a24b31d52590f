"""Toy Siamese embedding model trained on pairs of base vectors.

A shared linear projection stands in for the backbone. Two heads sit on
top of it:

* verification: fuse the projected (instance, identity) pair element-wise,
  then a 2-way softmax over (matched, unmatched);
* classification: softmax over pseudo-attributes of the projected instance.

The total loss is ``ratio * CE_verification + weight * CE_classification``
with exact analytic gradients. All arithmetic is float64.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, LabelError, MiningError, ShapeError
from .ingest import EmbeddingMatrix, load_embedding_file, write_embedding_file, write_records

logger = logging.getLogger(__name__)

FUSIONS = ("subtract_relu", "squared_diff")
MATCHED, UNMATCHED = 0, 1


def _check_pair(e1, e2) -> tuple[np.ndarray, np.ndarray]:
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    if e1.shape != e2.shape:
        raise ShapeError(f"cannot fuse shapes {e1.shape} and {e2.shape}")
    return e1, e2


def fuse_subtract_relu(e1, e2) -> np.ndarray:
    e1, e2 = _check_pair(e1, e2)
    return np.maximum(e1 - e2, 0.0)


def fuse_squared_diff(e1, e2) -> np.ndarray:
    e1, e2 = _check_pair(e1, e2)
    return (e1 - e2) ** 2


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def _param(a, shape: tuple[int, ...], name: str) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    if a.shape != shape:
        raise ShapeError(f"{name} must have shape {shape}, got {a.shape}")
    if not np.isfinite(a).all():
        raise ShapeError(f"{name} has non-finite entries")
    return a


@dataclass
class ProjectionModel:
    W: np.ndarray  # (e, d)
    b: np.ndarray  # (e,)

    def __post_init__(self) -> None:
        W = np.array(self.W, dtype=np.float64)
        if W.ndim != 2 or 0 in W.shape:
            raise ShapeError(f"projection must be a non-empty e x d matrix, got {W.shape}")
        self.W = _param(W, W.shape, "W")
        self.b = _param(self.b, (W.shape[0],), "b")

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]

    def __call__(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.W.T + self.b


@dataclass
class VerificationHead:
    V: np.ndarray  # (2, e)
    c: np.ndarray  # (2,)
    fusion: str = "subtract_relu"

    def __post_init__(self) -> None:
        if self.fusion not in FUSIONS:
            raise ConfigError(f"unknown fusion {self.fusion!r}")
        V = np.array(self.V, dtype=np.float64)
        if V.ndim != 2 or V.shape[0] != 2 or V.shape[1] == 0:
            raise ShapeError(f"V must be 2 x e with e >= 1, got {V.shape}")
        self.V = _param(V, V.shape, "V")
        self.c = _param(self.c, (2,), "c")

    def fuse(self, h1, h2) -> np.ndarray:
        return fuse_subtract_relu(h1, h2) if self.fusion == "subtract_relu" else fuse_squared_diff(h1, h2)

    def logits(self, h1, h2) -> np.ndarray:
        return self.fuse(h1, h2) @ self.V.T + self.c


@dataclass
class ClassifierHead:
    U: np.ndarray  # (k_total, e)
    u: np.ndarray  # (k_total,)

    def __post_init__(self) -> None:
        U = np.array(self.U, dtype=np.float64)
        if U.ndim != 2 or 0 in U.shape:
            raise ShapeError(f"U must be k_total x e, got {U.shape}")
        self.U = _param(U, U.shape, "U")
        self.u = _param(self.u, (U.shape[0],), "u")

    @property
    def k_total(self) -> int:
        return self.U.shape[0]


@dataclass
class Heads:
    verification: VerificationHead
    classifier: ClassifierHead


PARAM_NAMES = ("W", "b", "V", "c", "U", "u")


def _params(model: ProjectionModel, heads: Heads) -> dict[str, np.ndarray]:
    return {
        "W": model.W,
        "b": model.b,
        "V": heads.verification.V,
        "c": heads.verification.c,
        "U": heads.classifier.U,
        "u": heads.classifier.u,
    }


@dataclass
class TrainConfig:
    loss_ratio_verification_to_classification: float = 10.0
    classification_weight: float = 1.0
    learning_rate: float = 0.05
    epochs: int = 20
    batch_size: int = 32
    negatives_per_positive: int = 1
    seed: int = 0
    ohnm: bool = True
    mining: str = "hardest"
    fusion: str = "subtract_relu"
    projected_dim: int | None = None

    def __post_init__(self) -> None:
        if self.loss_ratio_verification_to_classification < 0 or self.classification_weight < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.loss_ratio_verification_to_classification == 0 and self.classification_weight == 0:
            raise ConfigError("at least one loss term must have positive weight")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.negatives_per_positive < 1 or self.epochs < 0:
            raise ConfigError("learning_rate, batch_size and negatives_per_positive must be positive")
        if self.mining not in ("hardest", "easiest"):
            raise ConfigError(f"unknown mining mode {self.mining!r}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"unknown fusion {self.fusion!r}")
        if self.projected_dim is not None and self.projected_dim < 1:
            raise ShapeError("projected_dim must be >= 1")

    @property
    def ratio(self) -> float:
        return self.loss_ratio_verification_to_classification


def init_model(
    in_dim: int, k_total: int, rng: np.random.Generator, out_dim: int | None = None, fusion: str = "subtract_relu"
) -> tuple[ProjectionModel, Heads]:
    """Uniform fan-in initialization, zero biases."""
    e = in_dim if out_dim is None else out_dim
    if in_dim < 1 or e < 1 or k_total < 1:
        raise ShapeError("dimensions and attribute count must be >= 1")

    def uni(rows, cols):
        lim = 1.0 / np.sqrt(cols)
        return rng.uniform(-lim, lim, size=(rows, cols))

    model = ProjectionModel(uni(e, in_dim), np.zeros(e))
    heads = Heads(VerificationHead(uni(2, e), np.zeros(2), fusion), ClassifierHead(uni(k_total, e), np.zeros(k_total)))
    return model, heads


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    instances: np.ndarray  # (B, d) base vectors
    identities: np.ndarray  # (B, d) base vectors
    match: np.ndarray  # (B,) 1 = same identity
    attributes: np.ndarray  # (B,) attribute label of the instance

    def __len__(self) -> int:
        return self.match.shape[0]


def _softmax_ce(z: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row cross-entropy and softmax probabilities."""
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z - logsum[:, None]
    return -logp[np.arange(z.shape[0]), target], np.exp(logp)


@dataclass
class LossTerms:
    total: float
    verification: float
    classification: float
    verification_accuracy: float


def forward_and_loss(
    model: ProjectionModel, heads: Heads, batch: Batch, config: TrainConfig, terms: bool = False
):
    """Total loss and analytic gradients for every parameter.

    Returns ``(loss, grads)``; with ``terms=True`` the first element is a
    :class:`LossTerms` with both components.
    """
    B = len(batch)
    if B == 0:
        raise ShapeError("empty batch")
    match = np.asarray(batch.match)
    attrs = np.asarray(batch.attributes)
    if not np.isin(match, (0, 1)).all():
        raise LabelError("match labels must be 0 or 1")
    K = heads.classifier.k_total
    if attrs.min() < 0 or attrs.max() >= K:
        raise LabelError(f"attribute label outside [0, {K})")
    attrs = attrs.astype(np.int64)
    target = np.where(match == 1, MATCHED, UNMATCHED)
    ratio, cw = config.ratio, config.classification_weight
    V, U = heads.verification.V, heads.classifier.U

    xi = np.asarray(batch.instances, dtype=np.float64)
    xj = np.asarray(batch.identities, dtype=np.float64)
    hi, hj = model(xi), model(xj)
    diff = hi - hj
    if heads.verification.fusion == "subtract_relu":
        f = np.maximum(diff, 0.0)
        dfd = (diff > 0).astype(np.float64)
    else:
        f = diff**2
        dfd = 2.0 * diff
    zv = f @ V.T + heads.verification.c
    ce_v, pv = _softmax_ce(zv, target)
    zc = hi @ U.T + heads.classifier.u
    ce_c, pc = _softmax_ce(zc, attrs)
    lv, lc = float(ce_v.mean()), float(ce_c.mean())
    loss = ratio * lv + cw * lc

    gzv = pv.copy()
    gzv[np.arange(B), target] -= 1.0
    gzv *= ratio / B
    gzc = pc.copy()
    gzc[np.arange(B), attrs] -= 1.0
    gzc *= cw / B
    gdiff = (gzv @ V) * dfd
    ghi = gdiff + gzc @ U
    ghj = -gdiff
    grads = {
        "W": ghi.T @ xi + ghj.T @ xj,
        "b": ghi.sum(axis=0) + ghj.sum(axis=0),
        "V": gzv.T @ f,
        "c": gzv.sum(axis=0),
        "U": gzc.T @ hi,
        "u": gzc.sum(axis=0),
    }
    if terms:
        acc = float((np.argmax(zv, axis=1) == target).mean())
        return LossTerms(loss, lv, lc, acc), grads
    return loss, grads


def gradient_check(
    model: ProjectionModel, heads: Heads, batch: Batch, epsilon: float = 1e-5, config: TrainConfig | None = None
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    The error for each parameter array is ``|g_a - g_n| / max(|g_a|, |g_n|)``
    in the Frobenius norm; the maximum over arrays is returned.
    """
    if not 0 < epsilon <= 1e-3:
        raise ValueError("epsilon must be in (0, 1e-3]")
    config = config or TrainConfig()
    _, analytic = forward_and_loss(model, heads, batch, config)
    worst = 0.0
    for name, p in _params(model, heads).items():
        numeric = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + epsilon
            up, _ = forward_and_loss(model, heads, batch, config)
            p[idx] = old - epsilon
            down, _ = forward_and_loss(model, heads, batch, config)
            p[idx] = old
            numeric[idx] = (up - down) / (2 * epsilon)
        scale = max(np.linalg.norm(analytic[name]), np.linalg.norm(numeric))
        if scale > 0:
            worst = max(worst, float(np.linalg.norm(analytic[name] - numeric) / scale))
    return worst


# ---------------------------------------------------------------------------
# Online hard negative mining
# ---------------------------------------------------------------------------


def _id_rank(ids: Sequence[str]) -> np.ndarray:
    rank = np.empty(len(ids), dtype=np.int64)
    rank[sorted(range(len(ids)), key=ids.__getitem__)] = np.arange(len(ids))
    return rank


def _mine_rows(inst: np.ndarray, ident: np.ndarray, gt_rows: np.ndarray, rank: np.ndarray, mode: str) -> np.ndarray:
    """Nearest (or farthest) non-matching identity row for every instance."""
    out = np.empty(inst.shape[0], dtype=np.int64)
    block = max(1, 2_000_000 // max(1, ident.size))
    for start in range(0, inst.shape[0], block):
        q = inst[start : start + block]
        d = ((q[:, None, :] - ident[None, :, :]) ** 2).sum(axis=2)
        rows = np.arange(q.shape[0])
        gts = gt_rows[start : start + block]
        if mode == "hardest":
            d[rows, gts] = np.inf
            best = d.min(axis=1)
        else:
            d[rows, gts] = -np.inf
            best = d.max(axis=1)
        for r in range(q.shape[0]):
            tied = np.flatnonzero(d[r] == best[r])
            out[start + r] = tied[np.argmin(rank[tied])]
    return out


def mine_hard_negatives(
    instance_embs: EmbeddingMatrix,
    identity_embs: EmbeddingMatrix,
    gt_map: Mapping[str, str],
    mode: str = "hardest",
) -> dict[str, str]:
    """Map every instance to its closest non-matching identity.

    Distances are Euclidean in the space the embeddings are given in; ties go
    to the smaller identity id. ``mode="easiest"`` picks the farthest instead.
    """
    if len(identity_embs) < 2:
        raise MiningError("need at least two identities to mine a negative")
    if instance_embs.dim != identity_embs.dim:
        raise ShapeError("instance and identity embeddings differ in dim")
    try:
        gt_rows = np.array([identity_embs.position(gt_map[i]) for i in instance_embs.ids], dtype=np.int64)
    except KeyError as exc:
        raise MiningError(f"ground truth for {exc.args[0]!r} is not among the identities") from exc
    rows = _mine_rows(
        instance_embs.data.astype(np.float64),
        identity_embs.data.astype(np.float64),
        gt_rows,
        _id_rank(identity_embs.ids),
        mode,
    )
    return {i: identity_embs.ids[r] for i, r in zip(instance_embs.ids, rows)}


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: ProjectionModel
    heads: Heads
    metrics: list[dict] = field(default_factory=list)


def _random_negatives(rng, n_ident: int, gt_rows: np.ndarray, count: int) -> np.ndarray:
    neg = rng.integers(n_ident - 1, size=(gt_rows.size, count))
    # Shift past the ground truth so the draw is uniform over non-matches.
    return neg + (neg >= gt_rows[:, None])


def train_embedding_model(
    base_instances: EmbeddingMatrix,
    base_identities: EmbeddingMatrix,
    attributes,
    gt_map: Mapping[str, str],
    config: TrainConfig,
    k_total: int | None = None,
) -> TrainResult:
    """Mini-batch SGD on (instance, identity) pairs.

    ``attributes`` maps identity id to attribute label (an
    ``AttributeAssignment`` works); each instance inherits the label of its
    ground-truth identity. With ``config.ohnm`` the first negative of every
    instance is re-mined at the start of each epoch in the current projected
    space; the rest are drawn uniformly.
    """
    labels = attributes.labels if hasattr(attributes, "labels") else attributes
    if k_total is None:
        k_total = getattr(attributes, "k_total", None) or (max(labels.values()) + 1)
    if base_instances.dim != base_identities.dim:
        raise ShapeError("instance and identity base vectors differ in dim")
    if len(base_identities) < 2:
        raise MiningError("need at least two identities to form negative pairs")
    try:
        gt_rows = np.array([base_identities.position(gt_map[i]) for i in base_instances.ids], dtype=np.int64)
        inst_attr = np.array([labels[gt_map[i]] for i in base_instances.ids], dtype=np.int64)
    except KeyError as exc:
        raise LabelError(f"missing ground truth or attribute for {exc.args[0]!r}") from exc

    rng = np.random.default_rng(config.seed)
    model, heads = init_model(base_instances.dim, k_total, rng, config.projected_dim, config.fusion)
    xi_all = base_instances.data.astype(np.float64)
    xj_all = base_identities.data.astype(np.float64)
    rank = _id_rank(base_identities.ids)
    n_inst, n_ident = xi_all.shape[0], xj_all.shape[0]
    metrics: list[dict] = []
    lr = config.learning_rate

    for epoch in range(config.epochs):
        if config.ohnm:
            mined = _mine_rows(model(xi_all), model(xj_all), gt_rows, rank, config.mining)
            extra = _random_negatives(rng, n_ident, gt_rows, config.negatives_per_positive - 1)
            neg = np.column_stack([mined, extra])
        else:
            neg = _random_negatives(rng, n_ident, gt_rows, config.negatives_per_positive)
        inst_idx = np.concatenate([np.arange(n_inst), np.repeat(np.arange(n_inst), neg.shape[1])])
        ident_idx = np.concatenate([gt_rows, neg.ravel()])
        match = np.concatenate([np.ones(n_inst, dtype=np.int64), np.zeros(neg.size, dtype=np.int64)])
        perm = rng.permutation(inst_idx.size)
        inst_idx, ident_idx, match = inst_idx[perm], ident_idx[perm], match[perm]

        sums = np.zeros(3)
        for start in range(0, inst_idx.size, config.batch_size):
            sl = slice(start, start + config.batch_size)
            batch = Batch(xi_all[inst_idx[sl]], xj_all[ident_idx[sl]], match[sl], inst_attr[inst_idx[sl]])
            t, grads = forward_and_loss(model, heads, batch, config, terms=True)
            sums += len(batch) * np.array([t.total, t.verification, t.classification])
            for name, p in _params(model, heads).items():
                p -= lr * grads[name]
        full = Batch(xi_all[inst_idx], xj_all[ident_idx], match, inst_attr[inst_idx])
        end, _ = forward_and_loss(model, heads, full, config, terms=True)
        mean = sums / inst_idx.size
        metrics.append(
            {
                "epoch": epoch + 1,
                "loss": float(mean[0]),
                "verification_loss": float(mean[1]),
                "classification_loss": float(mean[2]),
                "end_loss": end.total,
                "end_verification_loss": end.verification,
                "end_classification_loss": end.classification,
                "verification_accuracy": end.verification_accuracy,
            }
        )
        logger.debug("epoch %d: %s", epoch + 1, metrics[-1])
    return TrainResult(model, heads, metrics)


def verification_accuracy(model: ProjectionModel, heads: Heads, instances, identities, match) -> float:
    z = heads.verification.logits(model(instances), model(identities))
    pred = np.where(z[:, MATCHED] > z[:, UNMATCHED], 1, 0)
    return float((pred == np.asarray(match)).mean())


def project_embeddings(model: ProjectionModel, X: EmbeddingMatrix) -> EmbeddingMatrix:
    if X.dim != model.in_dim:
        raise ShapeError(f"input dim {X.dim} does not match projection input dim {model.in_dim}")
    return X.with_data(model(X.data))


# ---------------------------------------------------------------------------
# Checkpoints: one embedding file per parameter plus a config record.
# ---------------------------------------------------------------------------


def save_checkpoint(result: TrainResult, directory: str | Path, config: TrainConfig) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, p in _params(result.model, result.heads).items():
        mat = p.reshape(1, -1) if p.ndim == 1 else p
        ids = tuple(f"__{name}.{i}" for i in range(mat.shape[0]))
        write_embedding_file(directory / f"{name}.fse", EmbeddingMatrix(ids, mat))
    record = {"fusion": result.heads.verification.fusion, "config": asdict(config)}
    (directory / "config.json").write_text(json.dumps(record, sort_keys=True) + "\n", encoding="utf-8")
    write_records(directory / "metrics.jsonl", result.metrics)


def load_checkpoint(directory: str | Path) -> tuple[ProjectionModel, Heads]:
    directory = Path(directory)
    record = json.loads((directory / "config.json").read_text(encoding="utf-8"))
    p = {name: load_embedding_file(directory / f"{name}.fse").data.astype(np.float64) for name in PARAM_NAMES}
    model = ProjectionModel(p["W"], p["b"].ravel())
    heads = Heads(
        VerificationHead(p["V"], p["c"].ravel(), record["fusion"]),
        ClassifierHead(p["U"], p["u"].ravel()),
    )
    return model, heads
