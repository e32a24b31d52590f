"""Stage runners shared by the command line and the full pipeline.

Every stage reads its inputs from, and writes its outputs to, a fixed
layout under one work directory, so any stage can be re-run in isolation.
"""

from __future__ import annotations

import json
import logging
import os
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import attributes as attr_mod
from . import context as ctx_mod
from . import embednet, evaluation, index, rerank, synth, whiten
from .errors import ConfigError
from .ingest import (
    EmbeddingMatrix,
    load_catalog,
    load_design_sets,
    load_embedding_file,
    load_queries,
    validate_dataset,
    write_embedding_file,
)

logger = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    work: str = "work"
    data: str | None = None  # input directory; defaults to <work>/data
    seed: int = 0
    threads: int = 1
    # whitening and attributes
    zca_epsilon: float = 1e-5
    cluster_features: str = "whitened"
    k_attributes: int = 150
    # embedding model
    loss_ratio: float = 10.0
    classification_weight: float = 1.0
    learning_rate: float = 0.05
    epochs: int = 20
    batch_size: int = 32
    negatives_per_positive: int = 2  # one mined plus one uniform negative
    ohnm: bool = True
    mining: str = "hardest"
    fusion: str = "subtract_relu"
    projected_dim: int | None = None
    train_fraction: float = 0.8
    # retrieval
    k: int = 10
    category_filter: bool = False
    # context model and re-ranking
    context_dim: int = 100
    context_epochs: int = 10
    context_margin: float = 0.2
    context_negatives: int = 5
    context_learning_rate: float = 0.05
    alpha: float = 0.5
    k_out: int = 10
    missing_context_penalty: float = 1.0
    ks: list[int] = field(default_factory=lambda: [1, 5, 10])
    # synthetic data, forwarded to SynthConfig
    synth: dict = field(default_factory=dict)

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}

    @classmethod
    def from_layers(cls, *layers: dict) -> "PipelineConfig":
        """Later layers override earlier ones; unknown keys are rejected."""
        merged: dict = {}
        names = cls.field_names()
        for layer in layers:
            for key, value in layer.items():
                if key.startswith("synth_"):
                    merged.setdefault("synth", {})
                    merged["synth"] = {**merged["synth"], key[len("synth_") :]: value}
                    continue
                if key not in names:
                    raise ConfigError(f"unknown config key {key!r}")
                if key == "synth":
                    merged["synth"] = {**merged.get("synth", {}), **value}
                else:
                    merged[key] = value
        cfg = cls(**merged)
        if cfg.threads < 1:
            raise ConfigError("threads must be >= 1")
        if cfg.cluster_features not in ("whitened", "raw"):
            raise ConfigError("cluster_features must be 'whitened' or 'raw'")
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)


def load_config_file(path: str | Path) -> dict:
    """Flat key-value JSON object."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    return data


def env_layer() -> dict:
    value = os.environ.get("FSR_THREADS")
    if value is None:
        return {}
    try:
        return {"threads": int(value)}
    except ValueError:
        raise ConfigError(f"FSR_THREADS must be an integer, got {value!r}") from None


class Layout:
    """File locations inside the work directory."""

    def __init__(self, cfg: PipelineConfig):
        self.work = Path(cfg.work)
        self.data = Path(cfg.data) if cfg.data else self.work / "data"

    def __getattr__(self, name: str) -> Path:
        rel = {
            "catalog": ("data", "catalog.jsonl"),
            "identities": ("data", "identities.fse"),
            "queries": ("data", "queries.jsonl"),
            "instances": ("data", "instances.fse"),
            "designs": ("data", "designs.jsonl"),
            "validation": ("work", "validate/report.json"),
            "zca": ("work", "whiten/zca.fse"),
            "white_identities": ("work", "whiten/identities.fse"),
            "white_instances": ("work", "whiten/instances.fse"),
            "attr_labels": ("work", "attributes/attributes.jsonl"),
            "attr_centroids": ("work", "attributes/centroids.fse"),
            "checkpoint": ("work", "embed"),
            "index_vectors": ("work", "index/identities.fse"),
            "results": ("work", "search/results.jsonl"),
            "context_model": ("work", "context/context.fse"),
            "reranked": ("work", "rerank/results.jsonl"),
            "report": ("work", "eval/report.json"),
            "report_table": ("work", "eval/report.tsv"),
            "rerank_report": ("work", "eval/report_rerank.json"),
            "rerank_table": ("work", "eval/report_rerank.tsv"),
        }.get(name)
        if rel is None:
            raise AttributeError(name)
        base = self.data if rel[0] == "data" else self.work
        return base / rel[1]


def _out(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def run_synth(cfg: PipelineConfig, out: str | Path | None = None) -> Path:
    params = {"seed": cfg.seed, **cfg.synth}
    try:
        scfg = synth.SynthConfig(**params)
    except TypeError as exc:
        raise ConfigError(f"bad synth parameter: {exc}") from exc
    target = Path(out) if out else Layout(cfg).data
    synth.write_dataset(synth.generate_synthetic_dataset(scfg), target)
    return target


def run_validate(cfg: PipelineConfig) -> bool:
    lay = Layout(cfg)
    catalog = load_catalog(lay.catalog)
    report = validate_dataset(
        catalog,
        load_embedding_file(lay.identities),
        load_queries(lay.queries, load_embedding_file(lay.instances)),
        load_design_sets(lay.designs),
    )
    _out(lay.validation).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return report.ok


def run_whiten(cfg: PipelineConfig) -> None:
    lay = Layout(cfg)
    ident = load_embedding_file(lay.identities)
    inst = load_embedding_file(lay.instances)
    model = whiten.fit_zca(ident, cfg.zca_epsilon)
    whiten.save_zca(model, _out(lay.zca))
    write_embedding_file(lay.white_identities, whiten.whiten_and_normalize(model, ident))
    write_embedding_file(lay.white_instances, whiten.whiten_and_normalize(model, inst))


def run_cluster(cfg: PipelineConfig) -> attr_mod.AttributeAssignment:
    lay = Layout(cfg)
    catalog = load_catalog(lay.catalog)
    feats = load_embedding_file(lay.white_identities if cfg.cluster_features == "whitened" else lay.identities)
    budget = attr_mod.allocate_cluster_budget(catalog, cfg.k_attributes)
    assignment = attr_mod.cluster_attributes(feats, catalog, budget, seed=cfg.seed, threads=cfg.threads)
    attr_mod.save_assignment(assignment, _out(lay.attr_labels), lay.attr_centroids)
    return assignment


def _train_split(ids, fraction: float, seed: int) -> set[str]:
    """Seeded identity subset used to train the embedding model."""
    if fraction >= 1.0:
        return set(ids)
    return {i for i in ids if (zlib.crc32(f"{seed}:{i}".encode()) % 10_000) < fraction * 10_000}


def train_config(cfg: PipelineConfig) -> embednet.TrainConfig:
    return embednet.TrainConfig(
        loss_ratio_verification_to_classification=cfg.loss_ratio,
        classification_weight=cfg.classification_weight,
        learning_rate=cfg.learning_rate,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        negatives_per_positive=cfg.negatives_per_positive,
        seed=cfg.seed,
        ohnm=cfg.ohnm,
        mining=cfg.mining,
        fusion=cfg.fusion,
        projected_dim=cfg.projected_dim,
    )


def run_train_embed(cfg: PipelineConfig) -> embednet.TrainResult:
    lay = Layout(cfg)
    ident = load_embedding_file(lay.white_identities)
    inst = load_embedding_file(lay.white_instances)
    queries = load_queries(lay.queries, inst)
    assignment = attr_mod.load_assignment(lay.attr_labels, lay.attr_centroids)
    train_ids = _train_split(ident.ids, cfg.train_fraction, cfg.seed)
    rows = [q.instance_id for q in queries if q.gt_identity in train_ids]
    gt_map = {q.instance_id: q.gt_identity for q in queries}
    tcfg = train_config(cfg)
    result = embednet.train_embedding_model(inst.subset(rows), ident, assignment, gt_map, tcfg)
    embednet.save_checkpoint(result, lay.checkpoint, tcfg)
    return result


def _embed(model: embednet.ProjectionModel, X: EmbeddingMatrix) -> EmbeddingMatrix:
    return whiten.l2_normalize(embednet.project_embeddings(model, X))


def run_index(cfg: PipelineConfig) -> None:
    lay = Layout(cfg)
    model, _ = embednet.load_checkpoint(lay.checkpoint)
    write_embedding_file(_out(lay.index_vectors), _embed(model, load_embedding_file(lay.white_identities)))


def run_search(cfg: PipelineConfig) -> index.RetrievalMatrix:
    lay = Layout(cfg)
    catalog = load_catalog(lay.catalog)
    idx = index.build_index(load_embedding_file(lay.index_vectors), catalog)
    model, _ = embednet.load_checkpoint(lay.checkpoint)
    inst = load_embedding_file(lay.white_instances)
    queries = load_queries(lay.queries, inst)
    results = index.batch_search(
        idx,
        _embed(model, inst),
        cfg.k,
        use_category_filter=cfg.category_filter,
        categories=[q.category for q in queries],
        threads=cfg.threads,
    )
    for inst_id, msg in results.errors.items():
        logger.warning("search failed for %s: %s", inst_id, msg)
    index.write_retrieval(_out(lay.results), results)
    return results


def context_config(cfg: PipelineConfig) -> ctx_mod.ContextTrainConfig:
    return ctx_mod.ContextTrainConfig(
        dim=cfg.context_dim,
        margin=cfg.context_margin,
        negatives_per_example=cfg.context_negatives,
        learning_rate=cfg.context_learning_rate,
        epochs=cfg.context_epochs,
        seed=cfg.seed,
    )


def run_train_context(cfg: PipelineConfig, designs: str | Path | None = None) -> ctx_mod.ContextModel:
    lay = Layout(cfg)
    ccfg = context_config(cfg)
    model = ctx_mod.train_context_model(load_design_sets(designs or lay.designs), ccfg)
    ctx_mod.save_context_model(model, _out(lay.context_model), ccfg)
    return model


def run_rerank(cfg: PipelineConfig) -> rerank.RerankedMatrix:
    lay = Layout(cfg)
    results = index.load_retrieval(lay.results)
    queries = load_queries(lay.queries)
    model = ctx_mod.load_context_model(lay.context_model)
    rcfg = rerank.RerankConfig(cfg.alpha, cfg.k_out, cfg.missing_context_penalty)
    out = rerank.rerank_corpus(results, queries, model, rcfg, threads=cfg.threads)
    rerank.write_reranked(_out(lay.reranked), out)
    return out


def _usable_ks(ks, k: int) -> list[int]:
    usable = sorted(x for x in set(ks) if x <= k)
    dropped = sorted(set(ks) - set(usable))
    if dropped:
        logger.warning("skipping k=%s: results only hold %d candidates", dropped, k)
    if not usable:
        raise ConfigError(f"no requested k fits within {k} candidates")
    return usable


def run_eval(cfg: PipelineConfig) -> dict[str, evaluation.EvalReport]:
    lay = Layout(cfg)
    queries = load_queries(lay.queries)
    reports = {}
    for name, res_path, rep_path, table_path in (
        ("retrieval", lay.results, lay.report, lay.report_table),
        ("rerank", lay.reranked, lay.rerank_report, lay.rerank_table),
    ):
        if not res_path.exists():
            continue
        results = index.load_retrieval(res_path)
        report = evaluation.evaluate(results, queries, _usable_ks(cfg.ks, results.k))
        evaluation.write_report(report, _out(rep_path))
        table_path.write_text(report.table(), encoding="utf-8")
        reports[name] = report
    if not reports:
        raise ConfigError(f"no results found under {lay.work}")
    return reports


def run_pipeline(cfg: PipelineConfig) -> bool:
    """Run every stage in order; returns False if validation fails."""
    lay = Layout(cfg)
    if cfg.data is None:
        run_synth(cfg)
    if not run_validate(cfg):
        logger.error("dataset validation failed; see %s", lay.validation)
        return False
    run_whiten(cfg)
    run_cluster(cfg)
    run_train_embed(cfg)
    run_index(cfg)
    run_search(cfg)
    run_train_context(cfg)
    run_rerank(cfg)
    run_eval(cfg)
    return True

