"""Insert type-recording calls into a program.

Each function gets a locals() snapshot before every return statement and
at the end of its body; the module gets a globals() snapshot at the end.
Records go to a side-channel file named by the IOTYPER_TYPE_LOG
environment variable, never to standard output, so instrumented programs
keep their observable behavior.

Generator functions are skipped (their implicit returns defeat the
insertion points) and reported.
"""

from __future__ import annotations

import ast
import copy

RECORDER_NAME = "__iotyper_record__"
TYPE_LOG_ENV = "IOTYPER_TYPE_LOG"

_RECORDER_SOURCE = f'''
def {RECORDER_NAME}(scope, variables):
    import json as _json
    import os as _os
    path = _os.environ.get("{TYPE_LOG_ENV}")
    if not path:
        return
    snapshot = {{}}
    for name, value in variables.items():
        if name.startswith("__"):
            continue
        snapshot[name] = type(value).__name__
    with open(path, "a", encoding="utf-8") as handle:
        handle.write(_json.dumps({{"scope": scope, "vars": snapshot}}) + "\\n")
'''


def _record_call(scope: str, variables_fn: str) -> ast.Expr:
    call = ast.Expr(value=ast.Call(
        func=ast.Name(id=RECORDER_NAME, ctx=ast.Load()),
        args=[ast.Constant(value=scope),
              ast.Call(func=ast.Name(id=variables_fn, ctx=ast.Load()),
                       args=[], keywords=[])],
        keywords=[]))
    return call


def _contains_yield(fn) -> bool:
    """True when the function itself is a generator; nested function
    bodies are opaque (a yield in them belongs to the inner function)."""
    def scan(node) -> bool:
        if isinstance(node, (ast.Yield, ast.YieldFrom)):
            return True
        for child in ast.iter_child_nodes(node):
            if isinstance(child, (ast.FunctionDef, ast.AsyncFunctionDef,
                                  ast.Lambda)):
                continue
            if scan(child):
                return True
        return False

    return any(scan(stmt) for stmt in fn.body
               if not isinstance(stmt, (ast.FunctionDef,
                                        ast.AsyncFunctionDef)))


def _insert_before_returns(stmts: list, scope: str) -> list:
    out = []
    for stmt in stmts:
        if isinstance(stmt, ast.Return):
            out.append(_record_call(scope, "locals"))
            out.append(stmt)
            continue
        if isinstance(stmt, (ast.FunctionDef, ast.AsyncFunctionDef,
                             ast.ClassDef)):
            out.append(stmt)  # nested scopes handled by their own visit
            continue
        for field in ("body", "orelse", "finalbody"):
            inner = getattr(stmt, field, None)
            if inner:
                setattr(stmt, field, _insert_before_returns(inner, scope))
        for handler in getattr(stmt, "handlers", []) or []:
            handler.body = _insert_before_returns(handler.body, scope)
        out.append(stmt)
    return out


class _Instrumenter(ast.NodeTransformer):
    def __init__(self, module_scope: str = "<module>"):
        self._scope = [module_scope]
        self.skipped: list[str] = []

    def _visit_function(self, node):
        self._scope.append(node.name)
        scope = "::".join(self._scope)
        self.generic_visit(node)
        if _contains_yield(node):
            self.skipped.append(scope)
        else:
            node.body = _insert_before_returns(node.body, scope)
            node.body.append(_record_call(scope, "locals"))
        self._scope.pop()
        return node

    def visit_FunctionDef(self, node):
        return self._visit_function(node)

    def visit_AsyncFunctionDef(self, node):
        return self._visit_function(node)

    def visit_ClassDef(self, node):
        self._scope.append(node.name)
        self.generic_visit(node)
        self._scope.pop()
        return node


def instrument_tree(tree: ast.Module):
    """Instrument a parsed module in a copy; returns (tree, skipped
    scope paths)."""
    tree = copy.deepcopy(tree)
    worker = _Instrumenter()
    worker.visit(tree)
    recorder = ast.parse(_RECORDER_SOURCE).body
    tree.body = recorder + tree.body
    tree.body.append(_record_call("<module>", "globals"))
    ast.fix_missing_locations(tree)
    return tree, worker.skipped


def instrument(source: str, filename: str = "<source>"):
    """Source-to-source instrumentation; returns (new source, skipped
    scope paths)."""
    tree = ast.parse(source, filename=filename)
    new_tree, skipped = instrument_tree(tree)
    return ast.unparse(new_tree), skipped
