"""Canonical on-disk formats: catalog, embedding files, design sets, queries.

All record files are UTF-8, one JSON object per line. Embedding files use a
small binary layout::

    b"FSE1" | u32 rows | u32 dim | rows * (u16 id_len | id bytes | dim * f32)

with every integer and float little-endian and no padding.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import DataError, DuplicateId, FormatError, ParseError, SchemaError

logger = logging.getLogger(__name__)

MAGIC = b"FSE1"
_HEADER = struct.Struct("<4sII")
_IDLEN = struct.Struct("<H")
_F32 = np.dtype("<f4")


# ---------------------------------------------------------------------------
# Embedding matrices
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EmbeddingMatrix:
    """Row-aligned ids and float32 vectors.

    ``data`` is always a read-only ``(len(ids), dim)`` float32 array.
    """

    ids: tuple[str, ...]
    data: np.ndarray

    def __post_init__(self) -> None:
        ids = tuple(self.ids)
        data = np.array(self.data, dtype=np.float32, order="C", copy=True)
        if data.ndim != 2:
            raise FormatError(f"embedding data must be 2-D, got shape {data.shape}")
        if data.shape[1] < 1:
            raise FormatError("embedding dim must be positive")
        if data.shape[0] != len(ids):
            raise FormatError(f"{len(ids)} ids for {data.shape[0]} rows")
        if len(set(ids)) != len(ids):
            seen: set[str] = set()
            for i in ids:
                if i in seen:
                    raise DuplicateId(i)
                seen.add(i)
        bad = ~np.isfinite(data).all(axis=1)
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise DataError(f"non-finite value in row {row} ({ids[row]!r})", row=row)
        data.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "_pos", {k: n for n, k in enumerate(ids)})

    @classmethod
    def empty(cls, dim: int) -> "EmbeddingMatrix":
        return cls((), np.zeros((0, dim), dtype=np.float32))

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, identity_id: object) -> bool:
        return identity_id in self._pos

    def position(self, identity_id: str) -> int:
        return self._pos[identity_id]

    def row(self, identity_id: str) -> np.ndarray:
        return self.data[self._pos[identity_id]]

    def subset(self, ids: Iterable[str]) -> "EmbeddingMatrix":
        ids = list(ids)
        return EmbeddingMatrix(tuple(ids), self.data[[self._pos[i] for i in ids]])

    def with_data(self, data: np.ndarray) -> "EmbeddingMatrix":
        """Same ids, new rows."""
        return EmbeddingMatrix(self.ids, data)

    def equals(self, other: "EmbeddingMatrix") -> bool:
        """Bitwise equality of ids and values."""
        return (
            self.ids == other.ids
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )


def encode_embeddings(matrix: EmbeddingMatrix) -> bytes:
    parts = [_HEADER.pack(MAGIC, len(matrix), matrix.dim)]
    rows = matrix.data.astype(_F32, copy=False)
    for i, identity_id in enumerate(matrix.ids):
        raw = identity_id.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"id too long to encode: {identity_id[:40]!r}...")
        parts.append(_IDLEN.pack(len(raw)))
        parts.append(raw)
        parts.append(rows[i].tobytes())
    return b"".join(parts)


def decode_embeddings(buf: bytes) -> EmbeddingMatrix:
    rows, dim = read_embedding_header(buf)
    width = 4 * dim
    pos = _HEADER.size
    ids: list[str] = []
    out = np.empty((rows, dim), dtype=np.float32)
    for r in range(rows):
        if pos + _IDLEN.size > len(buf):
            raise FormatError(f"truncated payload: header claims {rows} rows, found {r}")
        (n,) = _IDLEN.unpack_from(buf, pos)
        pos += _IDLEN.size
        if pos + n + width > len(buf):
            raise FormatError(f"truncated payload: header claims {rows} rows, found {r}")
        try:
            ids.append(buf[pos : pos + n].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError(f"row {r}: id is not valid UTF-8") from exc
        pos += n
        out[r] = np.frombuffer(buf, dtype=_F32, count=dim, offset=pos)
        pos += width
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after {rows} rows")
    return EmbeddingMatrix(tuple(ids), out)


def read_embedding_header(buf: bytes) -> tuple[int, int]:
    """Return ``(rows, dim)`` after checking the magic and dim."""
    if len(buf) < _HEADER.size:
        raise FormatError("file too short for embedding header")
    magic, rows, dim = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if dim == 0:
        raise FormatError("embedding dim must be positive")
    return rows, dim


def load_embedding_file(path: str | Path) -> EmbeddingMatrix:
    return decode_embeddings(Path(path).read_bytes())


def write_embedding_file(path: str | Path, matrix: EmbeddingMatrix) -> None:
    Path(path).write_bytes(encode_embeddings(matrix))


# ---------------------------------------------------------------------------
# Line-delimited records
# ---------------------------------------------------------------------------


def iter_records(path: str | Path) -> Iterator[tuple[int, dict]]:
    """Yield ``(line_number, record)`` for every non-blank line."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", line=lineno) from exc
            if not isinstance(rec, dict):
                raise ParseError("record is not an object", line=lineno)
            yield lineno, rec


def write_records(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=False))
            fh.write("\n")


def write_sidecar(path: str | Path, record: dict) -> None:
    """One-line JSON metadata record next to a binary artifact."""
    Path(path).write_text(json.dumps(record, sort_keys=True) + "\n", encoding="utf-8")


def read_sidecar(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _field(rec: dict, key: str, kind: type, lineno: int):
    if key not in rec:
        raise ParseError(f"missing field {key!r}", line=lineno)
    value = rec[key]
    if not isinstance(value, kind):
        raise ParseError(f"field {key!r} must be {kind.__name__}", line=lineno)
    return value


def _str_list(rec: dict, key: str, lineno: int, default=None) -> list[str]:
    if key not in rec and default is not None:
        return list(default)
    value = _field(rec, key, list, lineno)
    if not all(isinstance(v, str) for v in value):
        raise ParseError(f"field {key!r} must be a list of strings", line=lineno)
    return value


# ---------------------------------------------------------------------------
# Catalog
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CatalogEntry:
    identity_id: str
    category: str
    style_tags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.category:
            raise SchemaError(f"identity {self.identity_id!r} has an empty category")
        object.__setattr__(self, "style_tags", tuple(self.style_tags))


class Catalog:
    """Ordered, immutable collection of furniture identities."""

    def __init__(self, entries: Iterable[CatalogEntry] = ()):
        self._entries = tuple(entries)
        self._by_id: dict[str, CatalogEntry] = {}
        for e in self._entries:
            if e.identity_id in self._by_id:
                raise DuplicateId(e.identity_id)
            self._by_id[e.identity_id] = e

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[CatalogEntry]:
        return iter(self._entries)

    def __contains__(self, identity_id: object) -> bool:
        return identity_id in self._by_id

    def __getitem__(self, identity_id: str) -> CatalogEntry:
        return self._by_id[identity_id]

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(e.identity_id for e in self._entries)

    def category_of(self, identity_id: str) -> str:
        return self._by_id[identity_id].category

    def categories(self) -> list[str]:
        """Distinct categories, sorted."""
        return sorted({e.category for e in self._entries})

    def category_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for e in self._entries:
            counts[e.category] = counts.get(e.category, 0) + 1
        return dict(sorted(counts.items()))


def load_catalog(path: str | Path) -> Catalog:
    entries = []
    seen: set[str] = set()
    for lineno, rec in iter_records(path):
        identity_id = _field(rec, "id", str, lineno)
        category = _field(rec, "category", str, lineno)
        styles = _str_list(rec, "styles", lineno, default=())
        if identity_id in seen:
            raise DuplicateId(identity_id)
        if not category:
            raise SchemaError(f"line {lineno}: identity {identity_id!r} has an empty category")
        seen.add(identity_id)
        entries.append(CatalogEntry(identity_id, category, tuple(styles)))
    return Catalog(entries)


def write_catalog(path: str | Path, catalog: Catalog) -> None:
    write_records(
        path,
        ({"id": e.identity_id, "category": e.category, "styles": list(e.style_tags)} for e in catalog),
    )


# ---------------------------------------------------------------------------
# Design sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DesignSet:
    design_id: str
    items: tuple[str, ...]

    def __post_init__(self) -> None:
        items = tuple(dict.fromkeys(self.items))
        if len(items) < 2:
            raise SchemaError(f"design {self.design_id!r} has fewer than 2 distinct items")
        object.__setattr__(self, "items", items)


@dataclass(frozen=True)
class DesignSetCollection:
    sets: tuple[DesignSet, ...]
    dropped_singletons: int = 0

    def __len__(self) -> int:
        return len(self.sets)

    def __iter__(self) -> Iterator[DesignSet]:
        return iter(self.sets)

    def vocabulary(self) -> list[str]:
        """Union of all members, in order of first appearance."""
        return list(dict.fromkeys(i for s in self.sets for i in s.items))


def load_design_sets(path: str | Path) -> DesignSetCollection:
    sets = []
    dropped = 0
    for lineno, rec in iter_records(path):
        design_id = _field(rec, "design_id", str, lineno)
        items = tuple(dict.fromkeys(_str_list(rec, "items", lineno)))
        if len(items) < 2:
            dropped += 1
            continue
        sets.append(DesignSet(design_id, items))
    if dropped:
        logger.warning("dropped %d design set(s) with fewer than 2 distinct items", dropped)
    return DesignSetCollection(tuple(sets), dropped)


def write_design_sets(path: str | Path, sets: Iterable[DesignSet]) -> None:
    write_records(path, ({"design_id": s.design_id, "items": list(s.items)} for s in sets))


# ---------------------------------------------------------------------------
# Queries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InstanceQuery:
    instance_id: str
    image_id: str
    category: str
    gt_identity: str
    embedding: int  # row in the companion embedding file


def load_queries(path: str | Path, embeddings: EmbeddingMatrix | None = None) -> list[InstanceQuery]:
    queries = []
    for lineno, rec in iter_records(path):
        queries.append(
            InstanceQuery(
                instance_id=_field(rec, "instance_id", str, lineno),
                image_id=_field(rec, "image_id", str, lineno),
                category=_field(rec, "category", str, lineno),
                gt_identity=_field(rec, "gt", str, lineno),
                embedding=len(queries),
            )
        )
    if embeddings is not None:
        check_query_alignment(queries, embeddings)
    return queries


def check_query_alignment(queries: Sequence[InstanceQuery], embeddings: EmbeddingMatrix) -> None:
    if len(queries) != len(embeddings):
        raise FormatError(f"{len(queries)} queries but {len(embeddings)} instance embeddings")
    for q in queries:
        if embeddings.ids[q.embedding] != q.instance_id:
            raise FormatError(
                f"query {q.instance_id!r} is not aligned with embedding row {q.embedding}"
            )


def write_queries(path: str | Path, queries: Iterable[InstanceQuery]) -> None:
    write_records(
        path,
        (
            {"instance_id": q.instance_id, "image_id": q.image_id, "category": q.category, "gt": q.gt_identity}
            for q in queries
        ),
    )


# ---------------------------------------------------------------------------
# Cross-file validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ValidationReport:
    missing_embeddings: list[str] = field(default_factory=list)
    unknown_query_gt: list[str] = field(default_factory=list)
    unknown_design_items: list[str] = field(default_factory=list)
    query_category_mismatch: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (
            self.missing_embeddings
            or self.unknown_query_gt
            or self.unknown_design_items
            or self.query_category_mismatch
        )

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "missing_embeddings": self.missing_embeddings,
            "unknown_query_gt": self.unknown_query_gt,
            "unknown_design_items": self.unknown_design_items,
            "query_category_mismatch": self.query_category_mismatch,
        }


def validate_dataset(
    catalog: Catalog,
    embeddings: EmbeddingMatrix,
    queries: Sequence[InstanceQuery],
    design_sets: Iterable[DesignSet],
) -> ValidationReport:
    """Cross-check the four inputs; never raises."""
    missing = [e.identity_id for e in catalog if e.identity_id not in embeddings]
    unknown_gt = list(dict.fromkeys(q.gt_identity for q in queries if q.gt_identity not in catalog))
    mismatch = [
        q.instance_id
        for q in queries
        if q.gt_identity in catalog and catalog.category_of(q.gt_identity) != q.category
    ]
    unknown_items = list(
        dict.fromkeys(i for s in design_sets for i in s.items if i not in catalog)
    )
    return ValidationReport(missing, unknown_gt, unknown_items, mismatch)
