"""Subprocess entry point: instrument a file's tree in memory, compile it
and run it as __main__. Keeps execution faithful to the original file
without a source round-trip."""

import ast
import sys

from .instrument import instrument_tree


def main(argv=None) -> int:
    argv = argv if argv is not None else sys.argv[1:]
    if len(argv) != 1:
        print("usage: python -m iotyper_extractor.runmod FILE",
              file=sys.stderr)
        return 2
    path = argv[0]
    with open(path, "r", encoding="utf-8") as fh:
        source = fh.read()
    tree = ast.parse(source, filename=path)
    tree, _skipped = instrument_tree(tree)
    code = compile(tree, path, "exec")
    globals_ns = {"__name__": "__main__", "__file__": path,
                  "__builtins__": __builtins__}
    exec(code, globals_ns)
    return 0


if __name__ == "__main__":
    sys.exit(main())
