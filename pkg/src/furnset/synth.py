"""Seeded synthetic datasets with planted structure.

Identities are drawn around well-separated attribute centroids inside each
category; instances are noisy views of their identity. Every identity
belongs to one context group; images and design sets only ever mix
identities of a single group.

Two optional knobs make harder fixtures:

* ``nuisance_dims``: extra coordinates that carry independent noise for
  identities and instances (a cross-domain shift a learned projection can
  suppress);
* ``distractors``: each identity gets twins in other context groups with a
  nearly identical feature vector, so features alone cannot tell them apart
  but context can.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .ingest import (
    Catalog,
    CatalogEntry,
    DesignSet,
    DesignSetCollection,
    EmbeddingMatrix,
    InstanceQuery,
    write_catalog,
    write_design_sets,
    write_embedding_file,
    write_queries,
)

CATEGORY_NAMES = (
    "appliance",
    "bed",
    "cabinet/shelf",
    "chair/stool",
    "curtain",
    "decoration",
    "door",
    "lamp",
    "plant",
    "sofa",
    "table",
)
STYLES = ("modern", "country", "chinese", "industrial", "nordic", "japanese", "classic")


@dataclass
class SynthConfig:
    categories: int = 11
    identities_per_category: int = 40
    attributes_per_category: int = 4
    dim: int = 32
    cluster_sigma: float = 1.0
    centroid_separation: float = 6.0  # minimum centroid distance, in cluster_sigma units
    instance_noise_sigma: float = 0.3
    instances_per_identity: int = 3
    instances_per_image: int = 4
    context_groups: int = 4
    designs: int = 1500
    max_design_size: int = 6
    nuisance_dims: int = 0
    nuisance_sigma: float = 0.0
    distractors: int = 0
    distractor_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        counts = (
            self.categories,
            self.identities_per_category,
            self.attributes_per_category,
            self.dim,
            self.instances_per_identity,
            self.instances_per_image,
            self.context_groups,
            self.designs,
        )
        if any(int(c) < 1 for c in counts):
            raise ConfigError("all counts must be positive")
        sigmas = (self.cluster_sigma, self.instance_noise_sigma, self.nuisance_sigma, self.distractor_sigma)
        if min(sigmas) < 0:
            raise ConfigError("sigmas must be non-negative")
        if self.max_design_size < 2:
            raise ConfigError("max_design_size must be >= 2")
        if self.nuisance_dims < 0 or self.distractors < 0:
            raise ConfigError("nuisance_dims and distractors must be >= 0")
        if self.distractors and self.context_groups < self.distractors + 1:
            raise ConfigError("each distractor family needs its own context group per member")

    @property
    def total_dim(self) -> int:
        return self.dim + self.nuisance_dims


@dataclass
class SyntheticDataset:
    catalog: Catalog
    identities: EmbeddingMatrix
    queries: list[InstanceQuery]
    instances: EmbeddingMatrix
    designs: DesignSetCollection
    truth: dict

    @property
    def gt_map(self) -> dict[str, str]:
        return {q.instance_id: q.gt_identity for q in self.queries}


def category_names(n: int) -> list[str]:
    if n <= len(CATEGORY_NAMES):
        return list(CATEGORY_NAMES[:n])
    return [f"cat{i:02d}" for i in range(n)]


def _separated_centroids(rng, count: int, dim: int, min_dist: float, scale: float) -> np.ndarray:
    out: list[np.ndarray] = []
    for _ in range(count):
        for _attempt in range(1000):
            c = rng.normal(0.0, scale, size=dim)
            if all(np.linalg.norm(c - o) >= min_dist for o in out):
                out.append(c)
                break
        else:
            raise ConfigError(
                f"cannot place {count} centroids {min_dist:g} apart in {dim} dimension(s)"
            )
    return np.array(out)


def generate_synthetic_dataset(config: SynthConfig) -> SyntheticDataset:
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    cats = category_names(cfg.categories)
    sigma = cfg.cluster_sigma
    min_dist = cfg.centroid_separation * sigma
    n_attr = cfg.categories * cfg.attributes_per_category
    # Centroids drawn on a scale of min_dist per axis so rejection rarely fires
    # unless the request is infeasible in low dimension.
    centroids = _separated_centroids(rng, n_attr, cfg.dim, min_dist, max(min_dist, 1e-9))

    family_size = cfg.distractors + 1
    ids: list[str] = []
    entries: list[CatalogEntry] = []
    vectors: list[np.ndarray] = []
    attr_of: dict[str, int] = {}
    group_of: dict[str, int] = {}
    family_of: dict[str, int] = {}
    n_families = 0
    for ci, cat in enumerate(cats):
        n_fam = cfg.identities_per_category // family_size if cfg.distractors else cfg.identities_per_category
        if n_fam < 1:
            raise ConfigError("identities_per_category is smaller than one distractor family")
        for f in range(n_fam):
            attr = ci * cfg.attributes_per_category + f % cfg.attributes_per_category
            base = centroids[attr] + rng.normal(0.0, sigma, size=cfg.dim)
            offset = int(rng.integers(cfg.context_groups))
            for t in range(family_size):
                identity_id = f"id{len(ids):05d}"
                signal = base + (rng.normal(0.0, cfg.distractor_sigma, size=cfg.dim) if cfg.distractors else 0.0)
                nuisance = rng.normal(0.0, cfg.nuisance_sigma, size=cfg.nuisance_dims)
                ids.append(identity_id)
                vectors.append(np.concatenate([signal, nuisance]))
                style = STYLES[int(rng.integers(len(STYLES)))]
                entries.append(CatalogEntry(identity_id, cat, (style,)))
                attr_of[identity_id] = attr
                group_of[identity_id] = (offset + t) % cfg.context_groups
                family_of[identity_id] = n_families
            n_families += 1
    identities = EmbeddingMatrix(tuple(ids), np.array(vectors))
    catalog = Catalog(entries)

    members: dict[int, list[str]] = {g: [] for g in range(cfg.context_groups)}
    for i in ids:
        members[group_of[i]].append(i)
    groups = [g for g in range(cfg.context_groups) if members[g]]

    n_images = max(1, round(len(ids) * cfg.instances_per_identity / cfg.instances_per_image))
    queries: list[InstanceQuery] = []
    inst_vecs: list[np.ndarray] = []
    image_group: dict[str, int] = {}
    id_row = {i: n for n, i in enumerate(ids)}
    for m in range(n_images):
        g = groups[int(rng.integers(len(groups)))]
        image_id = f"img{m:05d}"
        image_group[image_id] = g
        size = min(cfg.instances_per_image, len(members[g]))
        for identity_id in rng.choice(members[g], size=size, replace=False):
            identity_id = str(identity_id)
            v = identities.data[id_row[identity_id]].astype(np.float64)
            signal = v[: cfg.dim] + rng.normal(0.0, cfg.instance_noise_sigma, size=cfg.dim)
            nuisance = rng.normal(0.0, cfg.nuisance_sigma, size=cfg.nuisance_dims)
            instance_id = f"inst{len(queries):06d}"
            queries.append(
                InstanceQuery(instance_id, image_id, catalog.category_of(identity_id), identity_id, len(queries))
            )
            inst_vecs.append(np.concatenate([signal, nuisance]))
    instances = EmbeddingMatrix(
        tuple(q.instance_id for q in queries), np.array(inst_vecs).reshape(len(queries), cfg.total_dim)
    )

    design_sets = []
    eligible = [g for g in groups if len(members[g]) >= 2]
    for n in range(cfg.designs if eligible else 0):
        g = eligible[int(rng.integers(len(eligible)))]
        size = int(rng.integers(2, min(cfg.max_design_size, len(members[g])) + 1))
        items = tuple(str(x) for x in rng.choice(members[g], size=size, replace=False))
        design_sets.append(DesignSet(f"design{n:05d}", items))

    truth = {
        "config": asdict(cfg),
        "attribute": attr_of,
        "group": group_of,
        "family": family_of,
        "image_group": image_group,
    }
    return SyntheticDataset(catalog, identities, queries, instances, DesignSetCollection(tuple(design_sets)), truth)


FILES = {
    "catalog": "catalog.jsonl",
    "identities": "identities.fse",
    "queries": "queries.jsonl",
    "instances": "instances.fse",
    "designs": "designs.jsonl",
    "truth": "truth.json",
}


def write_dataset(dataset: SyntheticDataset, directory: str | Path) -> dict[str, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {k: directory / v for k, v in FILES.items()}
    write_catalog(paths["catalog"], dataset.catalog)
    write_embedding_file(paths["identities"], dataset.identities)
    write_queries(paths["queries"], dataset.queries)
    write_embedding_file(paths["instances"], dataset.instances)
    write_design_sets(paths["designs"], dataset.designs)
    paths["truth"].write_text(json.dumps(dataset.truth, sort_keys=True) + "\n", encoding="utf-8")
    return paths
