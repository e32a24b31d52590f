"""Retrieval benchmark metrics: per-category top-k accuracy, MACC, set accuracy."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .errors import ConfigError, IoError
from .index import RetrievalMatrix
from .ingest import InstanceQuery

logger = logging.getLogger(__name__)

DEFAULT_KS = (1, 5, 10)


def _check_ks(results: RetrievalMatrix, ks: Sequence[int]) -> list[int]:
    ks = sorted(set(int(k) for k in ks))
    if not ks or ks[0] < 1:
        raise ConfigError("ks must be positive integers")
    if ks[-1] > results.k:
        raise ConfigError(f"k={ks[-1]} exceeds the {results.k} candidates per row")
    return ks


def _hit_ranks(results: RetrievalMatrix, queries: Sequence[InstanceQuery]) -> dict[str, int | None]:
    """1-based rank of the ground truth per instance, ``None`` if absent."""
    by_id = {q.instance_id: q for q in queries}
    ranks: dict[str, int | None] = {}
    for inst, cands in zip(results.instance_ids, results.candidates):
        if inst not in by_id:
            raise ConfigError(f"no query for result row {inst!r}")
        gt = by_id[inst].gt_identity
        ranks[inst] = cands.index(gt) + 1 if gt in cands else None
    return ranks


def _hit(rank: int | None, k: int) -> bool:
    return rank is not None and rank <= k


@dataclass
class InstanceAccuracy:
    per_category: dict[str, dict[int, float]]
    macc: dict[int, float]
    counts: dict[str, int]


def instance_accuracy(
    results: RetrievalMatrix, queries: Sequence[InstanceQuery], ks: Sequence[int] = DEFAULT_KS
) -> InstanceAccuracy:
    """Top-k hit rate per category and its unweighted mean over categories."""
    ks = _check_ks(results, ks)
    ranks = _hit_ranks(results, queries)
    category = {q.instance_id: q.category for q in queries}
    hits: dict[str, dict[int, int]] = {}
    counts: dict[str, int] = {}
    for inst, rank in ranks.items():
        c = category[inst]
        counts[c] = counts.get(c, 0) + 1
        row = hits.setdefault(c, {k: 0 for k in ks})
        for k in ks:
            row[k] += _hit(rank, k)
    per_cat = {c: {k: hits[c][k] / counts[c] for k in ks} for c in sorted(counts)}
    macc = {k: (sum(per_cat[c][k] for c in per_cat) / len(per_cat) if per_cat else 0.0) for k in ks}
    return InstanceAccuracy(per_cat, macc, dict(sorted(counts.items())))


def set_accuracy(
    results: RetrievalMatrix, queries: Sequence[InstanceQuery], ks: Sequence[int] = DEFAULT_KS
) -> tuple[dict[int, float], int]:
    """Fraction of images whose every instance has its gt within its own top-k.

    Returns ``(accuracy per k, images evaluated)``.
    """
    ks = _check_ks(results, ks)
    ranks = _hit_ranks(results, queries)
    images: dict[str, list[str]] = {}
    for q in queries:
        images.setdefault(q.image_id, []).append(q.instance_id)
    correct = {k: 0 for k in ks}
    evaluated = 0
    for image, members in images.items():
        present = [m for m in members if m in ranks]
        if not present:
            logger.warning("image %s has no instances in the results; skipped", image)
            continue
        if len(present) != len(members):
            raise ConfigError(f"image {image!r} is missing {len(members) - len(present)} instance(s) in results")
        evaluated += 1
        for k in ks:
            correct[k] += all(_hit(ranks[m], k) for m in members)
    return {k: (correct[k] / evaluated if evaluated else 0.0) for k in ks}, evaluated


@dataclass
class EvalReport:
    per_category_acc: dict[str, dict[int, float]] = field(default_factory=dict)
    macc: dict[int, float] = field(default_factory=dict)
    set_acc: dict[int, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    images: int = 0

    def to_dict(self) -> dict:
        return {
            "per_category_acc": {c: {str(k): v for k, v in accs.items()} for c, accs in sorted(self.per_category_acc.items())},
            "macc": {str(k): v for k, v in sorted(self.macc.items())},
            "set_acc": {str(k): v for k, v in sorted(self.set_acc.items())},
            "counts": dict(sorted(self.counts.items())),
            "images": self.images,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        def ints(m):
            return {int(k): float(v) for k, v in m.items()}

        return cls(
            {c: ints(a) for c, a in d.get("per_category_acc", {}).items()},
            ints(d.get("macc", {})),
            ints(d.get("set_acc", {})),
            {c: int(n) for c, n in d.get("counts", {}).items()},
            int(d.get("images", 0)),
        )

    def table(self) -> str:
        """Tab-separated per-category rows with one ACC@k column per k."""
        ks = sorted(self.macc)
        lines = ["class\t" + "\t".join(f"ACC@{k}" for k in ks)]
        for c in sorted(self.per_category_acc):
            lines.append(c + "\t" + "\t".join(f"{100 * self.per_category_acc[c][k]:.1f}" for k in ks))
        lines.append("mean\t" + "\t".join(f"{100 * self.macc[k]:.1f}" for k in ks))
        if self.set_acc:
            lines.append("")
            lines.append("\t".join(f"SET ACC@{k}" for k in sorted(self.set_acc)))
            lines.append("\t".join(f"{100 * self.set_acc[k]:.2f}" for k in sorted(self.set_acc)))
        return "\n".join(lines) + "\n"


def evaluate(
    results: RetrievalMatrix, queries: Sequence[InstanceQuery], ks: Sequence[int] = DEFAULT_KS
) -> EvalReport:
    inst = instance_accuracy(results, queries, ks)
    sets, images = set_accuracy(results, queries, ks)
    return EvalReport(inst.per_category, inst.macc, sets, inst.counts, images)


def write_report(report: EvalReport, path: str | Path) -> None:
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write report to {path}: {exc}") from exc


def read_report(path: str | Path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
