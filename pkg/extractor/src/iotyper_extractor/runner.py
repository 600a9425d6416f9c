"""Execute instrumented benchmarks and collect type records.

Each benchmark runs in its own subprocess with a timeout; the side
channel is a temp file passed through IOTYPER_TYPE_LOG. A crash or
timeout keeps whatever records were flushed and flags the run.
"""

from __future__ import annotations

import json
import os
import shlex
import subprocess
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

from .instrument import TYPE_LOG_ENV, instrument

DEFAULT_TIMEOUT = 60.0


@dataclass
class RunResult:
    records: dict  # (scope, name) -> type name, last observation wins
    flagged: bool
    detail: str = ""
    stdout: bytes = b""
    stderr: bytes = b""


def parse_record_lines(text: str) -> dict:
    records: dict[tuple[str, str], str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        entry = json.loads(line)
        scope = entry["scope"]
        for name, type_name in entry["vars"].items():
            records[(scope, name)] = type_name
    return records


def run_file(source_path: str, timeout: float = DEFAULT_TIMEOUT,
             run_template: str | None = None) -> RunResult:
    """Instrument and execute one benchmark.

    By default the instrumented tree runs directly through this package's
    exec module. With `run_template` the instrumented source is written
    next to a shadow copy and `{file}` in the template is replaced by its
    path, e.g. --run "python {file}".
    """
    source_path = str(source_path)
    with tempfile.TemporaryDirectory(prefix="iotyper-extract-") as tmp:
        log_path = Path(tmp) / "types.jsonl"
        env = dict(os.environ)
        env[TYPE_LOG_ENV] = str(log_path)
        if run_template is None:
            cmd = [sys.executable, "-m", "iotyper_extractor.runmod",
                   source_path]
        else:
            shadow = Path(tmp) / Path(source_path).name
            source = Path(source_path).read_text(encoding="utf-8")
            new_source, _skipped = instrument(source, filename=source_path)
            shadow.write_text(new_source, encoding="utf-8")
            cmd = shlex.split(run_template.replace("{file}", str(shadow)))
        flagged = False
        detail = ""
        try:
            proc = subprocess.run(cmd, env=env, timeout=timeout,
                                  capture_output=True)
            stdout, stderr = proc.stdout, proc.stderr
            if proc.returncode != 0:
                flagged = True
                detail = f"exit code {proc.returncode}"
        except subprocess.TimeoutExpired as exc:
            flagged = True
            detail = f"timeout after {timeout}s"
            stdout = exc.stdout or b""
            stderr = exc.stderr or b""
        text = log_path.read_text(encoding="utf-8") \
            if log_path.exists() else ""
        return RunResult(records=parse_record_lines(text), flagged=flagged,
                         detail=detail, stdout=stdout, stderr=stderr)
