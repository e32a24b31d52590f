"""Command-line driver: one subcommand per stage plus ``pipeline``.

Precedence for every setting: command-line flag > config file > FSR_THREADS
(threads only) > built-in default. Exit codes: 0 success, 1 stage or
validation failure (one JSON error line on stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .errors import FormatError, FurnsetError
from .ingest import read_embedding_header

logger = logging.getLogger("furnset")

S = argparse.SUPPRESS


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=S, help="flat JSON config file")
    p.add_argument("--work", default=S, help="work directory for stage artifacts")
    p.add_argument("--data", default=S, help="input data directory (default: <work>/data)")
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--threads", type=int, default=S, help="worker cap (env FSR_THREADS)")
    p.add_argument(
        "--set", dest="overrides", action="append", default=S, metavar="KEY=VALUE",
        help="override any config key; VALUE is parsed as JSON when possible",
    )
    p.add_argument("-v", "--verbose", action="store_true", default=S)


STAGE_FLAGS = {
    "cluster": [("--k-attributes", "k_attributes", int)],
    "train-embed": [
        ("--epochs", "epochs", int),
        ("--loss-ratio", "loss_ratio", float),
        ("--learning-rate", "learning_rate", float),
        ("--fusion", "fusion", str),
        ("--mining", "mining", str),
    ],
    "search": [("--k", "k", int)],
    "train-context": [
        ("--designs", "designs", str),
        ("--context-dim", "context_dim", int),
        ("--context-epochs", "context_epochs", int),
    ],
    "rerank": [("--alpha", "alpha", float), ("--k-out", "k_out", int)],
    "eval": [("--ks", "ks", str)],
}
STAGE_FLAGS["pipeline"] = [f for flags in STAGE_FLAGS.values() for f in flags if f[1] != "designs"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="furnset", description="Furniture set retrieval pipeline")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--out", required=True, help="output directory")

    for name, helptext in (
        ("validate", "cross-check dataset files"),
        ("whiten", "fit ZCA on identities, whiten and normalize both sides"),
        ("cluster", "category-constrained k-means pseudo-attributes"),
        ("train-embed", "train the Siamese projection and heads"),
        ("index", "project identities into the search space"),
        ("search", "exhaustive top-k search for every instance"),
        ("train-context", "train the context embedding on design sets"),
        ("rerank", "context re-ranking per image"),
        ("eval", "instance and set accuracy reports"),
        ("pipeline", "run every stage in order"),
    ):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        for flag, dest, kind in STAGE_FLAGS.get(name, []):
            p.add_argument(flag, dest=dest, type=kind, default=S)
        if name in ("search", "pipeline"):
            p.add_argument("--category-filter", dest="category_filter", action="store_true", default=S)
        if name in ("train-embed", "pipeline"):
            p.add_argument("--no-ohnm", dest="ohnm", action="store_false", default=S)

    p = sub.add_parser("describe", help="summarize any artifact file")
    p.add_argument("path")
    return parser


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(args: argparse.Namespace) -> pipeline.PipelineConfig:
    ns = vars(args)
    file_layer = pipeline.load_config_file(ns["config"]) if "config" in ns else {}
    flags: dict = {}
    for item in ns.get("overrides", []):
        if "=" not in item:
            raise FurnsetError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        flags[key.strip()] = _parse_value(value)
    skip = {"command", "config", "overrides", "verbose", "out", "designs", "path"}
    for key, value in ns.items():
        if key not in skip:
            flags[key] = value
    if "ks" in flags and isinstance(flags["ks"], str):
        flags["ks"] = [int(x) for x in flags["ks"].replace(",", " ").split()]
    return pipeline.PipelineConfig.from_layers(pipeline.env_layer(), file_layer, flags)


def describe_artifact(path: str | Path) -> str:
    """Short summary of an artifact, reading as little of it as possible."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(12)
    if head[:4] == b"FSE1":
        rows, dim = read_embedding_header(head)
        return f"embeddings: {rows} × {dim}"
    try:
        with open(path, encoding="utf-8") as fh:
            first = fh.readline()
            if first.strip() == "{":
                doc = json.loads(first + fh.read())
                return _describe_document(doc)
            rec = json.loads(first)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unrecognized artifact") from exc
    if not isinstance(rec, dict):
        raise FormatError(f"{path}: unrecognized artifact")
    if {"macc", "set_acc"} <= rec.keys():
        return _describe_document(rec)
    if "kind" in rec:
        return f"{rec['kind']} header: " + ", ".join(f"{k}={v}" for k, v in sorted(rec.items()) if k != "kind" and not isinstance(v, (list, dict)))
    records = _stream(path)
    if {"id", "category"} <= rec.keys():
        counts: dict[str, int] = {}
        for r in records:
            counts[r["category"]] = counts.get(r["category"], 0) + 1
        lines = [f"catalog: {sum(counts.values())} identities in {len(counts)} categories"]
        lines += [f"  {c}: {n}" for c, n in sorted(counts.items())]
        return "\n".join(lines)
    if "design_id" in rec:
        sizes = [len(r["items"]) for r in records]
        return f"design sets: {len(sizes)} sets, mean size {sum(sizes) / max(1, len(sizes)):.2f}"
    if "instance_id" in rec:
        images = set()
        n = 0
        for r in records:
            images.add(r["image_id"])
            n += 1
        return f"queries: {n} instances in {len(images)} images"
    if "candidates" in rec:
        n, k = 0, 0
        reranked = "source_columns" in rec
        for r in records:
            n += 1
            k = max(k, len(r["candidates"]))
        return f"{'reranked results' if reranked else 'retrieval results'}: {n} × {k}"
    if "attribute" in rec:
        labels = {r["attribute"] for r in records}
        n = sum(1 for _ in _stream(path))
        return f"attributes: {n} identities in {len(labels)} attributes"
    if "epoch" in rec:
        last = list(records)[-1]
        return f"training metrics: {last['epoch']} epochs, final loss {last['loss']:.4f}"
    raise FormatError(f"{path}: unrecognized artifact")


def _stream(path: Path):
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)


def _describe_document(doc: dict) -> str:
    if {"macc", "set_acc"} <= doc.keys():
        macc = ", ".join(f"MACC@{k}={v:.3f}" for k, v in sorted(doc["macc"].items(), key=lambda kv: int(kv[0])))
        sets = ", ".join(f"SET@{k}={v:.3f}" for k, v in sorted(doc["set_acc"].items(), key=lambda kv: int(kv[0])))
        return f"eval report: {sum(doc.get('counts', {}).values())} instances, {doc.get('images', 0)} images; {macc}; {sets}"
    if "ok" in doc:
        return f"validation report: ok={doc['ok']}"
    raise FormatError("unrecognized JSON document")


def _fail(exc: BaseException) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
    return 1


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "describe":
            print(describe_artifact(args.path))
            return 0
        cfg = resolve_config(args)
        cmd = args.command
        if cmd == "synth":
            pipeline.run_synth(cfg, args.out)
        elif cmd == "validate":
            ok = pipeline.run_validate(cfg)
            print(pipeline.Layout(cfg).validation.read_text(encoding="utf-8"), end="")
            return 0 if ok else 1
        elif cmd == "whiten":
            pipeline.run_whiten(cfg)
        elif cmd == "cluster":
            pipeline.run_cluster(cfg)
        elif cmd == "train-embed":
            pipeline.run_train_embed(cfg)
        elif cmd == "index":
            pipeline.run_index(cfg)
        elif cmd == "search":
            pipeline.run_search(cfg)
        elif cmd == "train-context":
            pipeline.run_train_context(cfg, getattr(args, "designs", None))
        elif cmd == "rerank":
            pipeline.run_rerank(cfg)
        elif cmd == "eval":
            for name, report in pipeline.run_eval(cfg).items():
                print(f"# {name}")
                print(report.table(), end="")
        elif cmd == "pipeline":
            if not pipeline.run_pipeline(cfg):
                return 1
            lay = pipeline.Layout(cfg)
            for name, table in (("retrieval", lay.report_table), ("rerank", lay.rerank_table)):
                print(f"# {name}")
                print(table.read_text(encoding="utf-8"), end="")
        return 0
    except (FurnsetError, OSError, KeyError, ValueError) as exc:
        return _fail(exc)


def run_cli(argv: list[str] | None = None) -> int:
    return main(argv)


if __name__ == "__main__":
    sys.exit(main())
