"""Join emitted trees with runtime type records into a labeled dataset.

The output follows the dataset wire schema exactly; labels are validated
against the prediction pipeline by asking its CLI for the sink table of
each emitted tree, so every emitted label is guaranteed to resolve."""

from __future__ import annotations

import ast
import json
import logging
import subprocess
import sys
import tempfile
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from .astjson import count_nodes, emit_ast, unsupported_constructs
from .runner import DEFAULT_TIMEOUT, run_file

logger = logging.getLogger("iotyper_extractor.build")

# the 21 predictable built-in type classes of the dataset schema
DEFAULT_CLASSES = (
    "int", "str", "float", "NoneType", "module", "tuple", "dict", "list",
    "set", "function", "bool", "bytes", "complex", "type", "object",
    "frozenset", "bytearray", "range", "slice", "generator", "method",
)
FALLBACK_CLASS = "object"
VOCAB_VERSION = "v1"

SINK_QUERY_CMD = ("iotyper", "transform", "--no-restructuring")


class BuildError(Exception):
    pass


@dataclass
class ExtractionJob:
    sources: list
    out_path: str
    run_template: str | None = None
    timeout: float = DEFAULT_TIMEOUT
    classes: tuple = DEFAULT_CLASSES


def query_sinks(root: dict) -> set:
    """Ask the prediction pipeline which (scope, name) pairs its scope
    resolution produces for this tree."""
    with tempfile.TemporaryDirectory(prefix="iotyper-sinks-") as tmp:
        ast_path = Path(tmp) / "ast.json"
        out_path = Path(tmp) / "sinks.json"
        ast_path.write_text(json.dumps(root), encoding="utf-8")
        cmd = list(SINK_QUERY_CMD) + ["--ast", str(ast_path),
                                      "--out", str(out_path)]
        proc = subprocess.run(cmd, capture_output=True)
        if proc.returncode != 0:
            raise BuildError(
                "sink query through the prediction CLI failed: "
                + proc.stderr.decode("utf-8", "replace").strip())
        doc = json.loads(out_path.read_text(encoding="utf-8"))
    return {(s["scope"], s["name"]) for s in doc["sinks"]}


@dataclass
class FileExtraction:
    path: str
    root: dict
    labels: list
    flagged: bool
    detail: str
    remapped: int
    unresolved: int


def extract_file(path: str, classes=DEFAULT_CLASSES,
                 run_template: str | None = None,
                 timeout: float = DEFAULT_TIMEOUT) -> FileExtraction:
    source = Path(path).read_text(encoding="utf-8")
    root = emit_ast(source, filename=str(path))
    result = run_file(path, timeout=timeout, run_template=run_template)
    sinks = query_sinks(root)

    class_set = set(classes)
    labels = []
    remapped = 0
    unresolved = 0
    for (scope, name), type_name in sorted(result.records.items()):
        if (scope, name) not in sinks:
            unresolved += 1
            logger.warning("%s: record (%s, %s) has no occurrence; dropped",
                           path, scope, name)
            continue
        if type_name not in class_set:
            logger.warning("%s: type %r outside the class set; "
                           "mapped to %r", path, type_name, FALLBACK_CLASS)
            type_name = FALLBACK_CLASS
            remapped += 1
        labels.append({"scope": scope, "name": name, "type": type_name})
    return FileExtraction(path=str(path), root=root, labels=labels,
                          flagged=result.flagged, detail=result.detail,
                          remapped=remapped, unresolved=unresolved)


def build_dataset(job: ExtractionJob, report=None) -> dict:
    """Run the whole job and return the dataset document. `report`
    receives the human-readable summary (defaults to stdout)."""
    report = report if report is not None else sys.stdout
    if not job.sources:
        raise BuildError("no source files given")

    parsed = {}
    for path in job.sources:
        source = Path(path).read_text(encoding="utf-8")
        # every file must parse before any execution starts
        root = emit_ast(source, filename=str(path))
        parsed[str(path)] = root

    trees = []
    totals = Counter()
    histogram = Counter()
    for path in job.sources:
        path = str(path)
        source = Path(path).read_text(encoding="utf-8")
        blockers = unsupported_constructs(ast.parse(source, filename=path))
        if blockers:
            logger.warning("%s: skipped (%s)", path, "; ".join(blockers))
            totals["skipped_files"] += 1
            continue
        extraction = extract_file(path, classes=job.classes,
                                  run_template=job.run_template,
                                  timeout=job.timeout)
        if extraction.flagged:
            logger.warning("%s: execution flagged (%s); keeping %d labels",
                           path, extraction.detail, len(extraction.labels))
            totals["flagged_files"] += 1
        trees.append({"path": path, "root": extraction.root,
                      "labels": extraction.labels})
        totals["files"] += 1
        totals["nodes"] += count_nodes(extraction.root)
        totals["labels"] += len(extraction.labels)
        totals["remapped"] += extraction.remapped
        totals["unresolved"] += extraction.unresolved
        histogram.update(lab["type"] for lab in extraction.labels)

    dataset = {"classes": list(job.classes), "vocab_version": VOCAB_VERSION,
               "trees": trees}
    print(f"files: {totals['files']} (skipped {totals['skipped_files']}, "
          f"flagged {totals['flagged_files']})", file=report)
    print(f"total AST nodes: {totals['nodes']}", file=report)
    print(f"labeled identifiers: {totals['labels']} "
          f"(remapped {totals['remapped']}, "
          f"dropped unresolved {totals['unresolved']})", file=report)
    for type_name, count in histogram.most_common():
        print(f"  {type_name:16s} {count}", file=report)
    return dataset


def write_dataset(job: ExtractionJob, report=None) -> None:
    dataset = build_dataset(job, report=report)
    with open(job.out_path, "w", encoding="utf-8") as fh:
        json.dump(dataset, fh)
        fh.write("\n")
