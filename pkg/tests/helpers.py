"""Shared synthetic fixtures for the training and retrieval tests."""

from dataclasses import dataclass

import numpy as np

from furnset import attributes, embednet, evaluation, index, whiten
from furnset.pipeline import _train_split
from furnset.synth import SynthConfig, generate_synthetic_dataset

VERDICTS: list[str] = []


class Criterion:
    """Collects named checks and records one PASS/FAIL line when the block ends.

    An exception inside the block is recorded as a failure and re-raised.
    """

    def __init__(self, number, name):
        self.number, self.name = number, name
        self.checks: list[tuple[str, bool]] = []

    def check(self, label, ok):
        self.checks.append((label, bool(ok)))

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        failed = [label for label, ok in self.checks if not ok]
        if exc_type is not None:
            failed.append(f"raised {exc_type.__name__}: {exc}")
        ok = not failed and bool(self.checks)
        detail = "; ".join(failed if failed else [label for label, _ in self.checks])
        line = f"{'PASS' if ok else 'FAIL'}  {self.number:>2}. {self.name}: {detail}"
        VERDICTS.append(line)
        print(line)
        if exc_type is None:
            assert ok, line
        return False


@dataclass
class Prepared:
    dataset: object
    identities: object  # whitened, unit rows
    instances: object
    assignment: object
    train_rows: list
    heldout_rows: list


def prepare(seed, attribute_budget_per_category=None, **synth_kwargs):
    """Generate, whiten, cluster, and split a synthetic corpus."""
    cfg = SynthConfig(seed=seed, **synth_kwargs)
    ds = generate_synthetic_dataset(cfg)
    zca = whiten.fit_zca(ds.identities)
    idn = whiten.whiten_and_normalize(zca, ds.identities)
    ins = whiten.whiten_and_normalize(zca, ds.instances)
    per_cat = attribute_budget_per_category or cfg.attributes_per_category
    budget = attributes.allocate_cluster_budget(ds.catalog, cfg.categories * per_cat)
    asg = attributes.cluster_attributes(idn, ds.catalog, budget, seed=seed)
    train_ids = _train_split(idn.ids, 0.8, seed)
    train = [r for r, q in enumerate(ds.queries) if q.gt_identity in train_ids]
    held = [r for r, q in enumerate(ds.queries) if q.gt_identity not in train_ids]
    return Prepared(ds, idn, ins, asg, train, held)


def train(p, **config_kwargs):
    inst = p.instances.subset([p.dataset.queries[r].instance_id for r in p.train_rows])
    return embednet.train_embedding_model(
        inst, p.identities, p.assignment, p.dataset.gt_map, embednet.TrainConfig(**config_kwargs)
    )


def heldout_pairs(p, seed=99):
    """Held-out instances paired once with their identity and once with a random other one."""
    rng = np.random.default_rng(seed)
    rows = p.heldout_rows
    xi = p.instances.data[rows]
    pos = np.array([p.identities.position(p.dataset.queries[r].gt_identity) for r in rows])
    neg = (pos + rng.integers(1, len(p.identities), size=pos.size)) % len(p.identities)
    X = np.vstack([xi, xi])
    Y = np.vstack([p.identities.data[pos], p.identities.data[neg]])
    match = np.r_[np.ones(len(rows)), np.zeros(len(rows))]
    return X, Y, match


def heldout_verification_accuracy(p, result):
    X, Y, match = heldout_pairs(p)
    return embednet.verification_accuracy(result.model, result.heads, X, Y, match)


def retrieval_accuracy(p, model, rows, k=1):
    """MACC@k of projected, re-normalized retrieval for the given query rows."""

    def embed(X):
        return whiten.l2_normalize(embednet.project_embeddings(model, X))

    idx = index.build_index(embed(p.identities), p.dataset.catalog)
    queries = [p.dataset.queries[r] for r in rows]
    res = index.batch_search(idx, embed(p.instances.subset([q.instance_id for q in queries])), k)
    return evaluation.instance_accuracy(res, queries, [k]).macc[k]
