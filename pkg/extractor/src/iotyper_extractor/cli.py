"""Command line: extract a labeled dataset from a directory of programs.

    iotyper-extract --src DIR --run "python {file}" --out dataset.json \
        --timeout 60

Without --run each benchmark's instrumented tree is executed directly in
an isolated subprocess.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .astjson import EmitError
from .build import BuildError, ExtractionJob, write_dataset


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="iotyper-extract",
        description="Build a labeled type dataset by instrumented execution")
    parser.add_argument("--src", required=True,
                        help="directory of .py files, or one file")
    parser.add_argument("--run", default=None,
                        help="command template with a {file} placeholder")
    parser.add_argument("--out", required=True)
    parser.add_argument("--timeout", type=float, default=60.0)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    src = Path(args.src)
    if src.is_dir():
        sources = sorted(str(p) for p in src.rglob("*.py"))
    elif src.is_file():
        sources = [str(src)]
    else:
        print(f"error: {src} does not exist", file=sys.stderr)
        return 1
    job = ExtractionJob(sources=sources, out_path=args.out,
                        run_template=args.run, timeout=args.timeout)
    try:
        write_dataset(job)
    except (BuildError, EmitError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
