"""Convert Python source into the tree wire format.

Every node is {"id", "kind", "name"?, "children"}. Kinds are the host
parser's node-class names with a few conventions:

  * operator applications use the operator's class name as the node kind
    (BinOp/BoolOp/UnaryOp/Compare collapse into Add, Or, USub, Lt, ...),
  * literals normalize to the classic kinds Num/Str/Bytes/NameConstant,
  * statement lists other than the module body sit under a "block" node,
  * function/class names, parameters and import bindings are emitted as
    Name leaves so scope resolution sees their binding occurrences,
  * references to well-known builtins that are never assigned in the file
    are emitted with the builtin's own kind (a type hint for the models).

Attribute names, decorators, default values and annotations are dropped.
"""

from __future__ import annotations

import ast

BUILTIN_HINTS = frozenset({
    "int", "str", "float", "tuple", "dict", "list", "set", "range",
    "xrange", "len", "reversed",
})


class EmitError(Exception):
    pass


def _bound_names(tree: ast.AST) -> set[str]:
    """Every name the file binds anywhere; used to veto builtin hints."""
    bound: set[str] = set()
    for node in ast.walk(tree):
        if isinstance(node, ast.Name) and isinstance(node.ctx, (ast.Store,
                                                                ast.Del)):
            bound.add(node.id)
        elif isinstance(node, (ast.FunctionDef, ast.AsyncFunctionDef,
                               ast.ClassDef)):
            bound.add(node.name)
        elif isinstance(node, ast.arg):
            bound.add(node.arg)
        elif isinstance(node, ast.alias):
            bound.add(_alias_binding(node))
        elif isinstance(node, ast.ExceptHandler) and node.name:
            bound.add(node.name)
    return bound


def _alias_binding(alias: ast.alias) -> str:
    if alias.asname:
        return alias.asname
    return alias.name.split(".")[0]


def _literal_kind(value) -> str:
    if value is None or isinstance(value, bool):
        return "NameConstant"
    if isinstance(value, (int, float, complex)):
        return "Num"
    if isinstance(value, str):
        return "Str"
    if isinstance(value, bytes):
        return "Bytes"
    if value is Ellipsis:
        return "Ellipsis"
    return "Constant"


class _Emitter:
    def __init__(self, bound: set[str]):
        self._bound = bound
        self._next_id = 0

    def node(self, kind, *children, name=None):
        obj = {"id": self._next_id, "kind": kind}
        self._next_id += 1
        if name is not None:
            obj["name"] = name
        obj["children"] = list(children)
        return obj

    def name_leaf(self, identifier: str):
        return self.node("Name", name=identifier)

    def block(self, statements):
        return self.node("block", *[self.emit(s) for s in statements])

    def maybe_block(self, statements):
        return [self.block(statements)] if statements else []

    def emit_module(self, mod: ast.Module):
        # children are created before the parent in every helper, but the
        # module node id must still be allocated; keep emission order
        # uniform by emitting children first
        children = [self.emit(s) for s in mod.body]
        return self.node("Module", *children)

    def emit(self, node: ast.AST):
        handler = getattr(self, f"_emit_{type(node).__name__}", None)
        if handler is not None:
            return handler(node)
        return self._emit_generic(node)

    # statements ---------------------------------------------------------

    def _emit_FunctionDef(self, node):
        return self._function(node, "FunctionDef")

    def _emit_AsyncFunctionDef(self, node):
        return self._function(node, "AsyncFunctionDef")

    def _function(self, node, kind):
        name = self.name_leaf(node.name)
        args = self._emit_arguments(node.args)
        return self.node(kind, name, args, self.block(node.body))

    def _emit_arguments(self, node):
        params = []
        for arg in list(node.posonlyargs) + list(node.args):
            params.append(self.name_leaf(arg.arg))
        if node.vararg:
            params.append(self.name_leaf(node.vararg.arg))
        for arg in node.kwonlyargs:
            params.append(self.name_leaf(arg.arg))
        if node.kwarg:
            params.append(self.name_leaf(node.kwarg.arg))
        return self.node("arguments", *params)

    def _emit_Lambda(self, node):
        return self.node("Lambda", self._emit_arguments(node.args),
                         self.emit(node.body))

    def _emit_ClassDef(self, node):
        name = self.name_leaf(node.name)
        bases = [self.emit(b) for b in node.bases]
        return self.node("ClassDef", name, *bases, self.block(node.body))

    def _emit_Return(self, node):
        values = [self.emit(node.value)] if node.value else []
        return self.node("Return", *values)

    def _emit_Assign(self, node):
        children = [self.emit(t) for t in node.targets]
        children.append(self.emit(node.value))
        return self.node("Assign", *children)

    def _emit_AugAssign(self, node):
        return self.node("AugAssign", self.emit(node.target),
                         self.node(type(node.op).__name__),
                         self.emit(node.value))

    def _emit_AnnAssign(self, node):
        children = [self.emit(node.target)]
        if node.value:
            children.append(self.emit(node.value))
        return self.node("AnnAssign", *children)

    def _emit_For(self, node, kind="For"):
        children = [self.emit(node.target), self.emit(node.iter),
                    self.block(node.body)]
        children += self.maybe_block(node.orelse)
        return self.node(kind, *children)

    def _emit_AsyncFor(self, node):
        return self._emit_For(node, "AsyncFor")

    def _emit_While(self, node):
        children = [self.emit(node.test), self.block(node.body)]
        children += self.maybe_block(node.orelse)
        return self.node("While", *children)

    def _emit_If(self, node):
        children = [self.emit(node.test), self.block(node.body)]
        children += self.maybe_block(node.orelse)
        return self.node("If", *children)

    def _emit_With(self, node, kind="With"):
        items = [self._emit_withitem(i) for i in node.items]
        return self.node(kind, *items, self.block(node.body))

    def _emit_AsyncWith(self, node):
        return self._emit_With(node, "AsyncWith")

    def _emit_withitem(self, node):
        children = [self.emit(node.context_expr)]
        if node.optional_vars is not None:
            children.append(self.emit(node.optional_vars))
        return self.node("withitem", *children)

    def _emit_Try(self, node):
        children = [self.block(node.body)]
        children += [self._emit_handler(h) for h in node.handlers]
        children += self.maybe_block(node.orelse)
        children += self.maybe_block(node.finalbody)
        return self.node("Try", *children)

    def _emit_handler(self, node):
        children = []
        if node.type is not None:
            children.append(self.emit(node.type))
        if node.name:
            children.append(self.name_leaf(node.name))
        children.append(self.block(node.body))
        return self.node("ExceptHandler", *children)

    def _emit_Import(self, node):
        return self.node("Import", *[self.name_leaf(_alias_binding(a))
                                     for a in node.names])

    def _emit_ImportFrom(self, node):
        names = [self.name_leaf(_alias_binding(a)) for a in node.names
                 if a.name != "*"]
        return self.node("ImportFrom", *names)

    def _emit_Expr(self, node):
        return self.node("Expr", self.emit(node.value))

    def _emit_Delete(self, node):
        return self.node("Delete", *[self.emit(t) for t in node.targets])

    # expressions --------------------------------------------------------

    def _emit_BoolOp(self, node):
        return self.node(type(node.op).__name__,
                         *[self.emit(v) for v in node.values])

    def _emit_BinOp(self, node):
        return self.node(type(node.op).__name__, self.emit(node.left),
                         self.emit(node.right))

    def _emit_UnaryOp(self, node):
        return self.node(type(node.op).__name__, self.emit(node.operand))

    def _emit_Compare(self, node):
        children = [self.emit(node.left)]
        children += [self.emit(c) for c in node.comparators]
        return self.node(type(node.ops[0]).__name__, *children)

    def _emit_Call(self, node):
        children = [self.emit(node.func)]
        children += [self.emit(a) for a in node.args]
        children += [self.node("keyword", self.emit(kw.value))
                     for kw in node.keywords]
        return self.node("Call", *children)

    def _emit_Attribute(self, node):
        return self.node("Attribute", self.emit(node.value))

    def _emit_Subscript(self, node):
        return self.node("Subscript", self.emit(node.value),
                         self.emit(node.slice))

    def _emit_Slice(self, node):
        parts = [self.emit(p) for p in (node.lower, node.upper, node.step)
                 if p is not None]
        return self.node("Slice", *parts)

    def _emit_Starred(self, node):
        return self.node("Starred", self.emit(node.value))

    def _emit_Name(self, node):
        if node.id in BUILTIN_HINTS and node.id not in self._bound:
            return self.node(node.id)
        return self.name_leaf(node.id)

    def _emit_NamedExpr(self, node):
        return self.node("NamedExpr", self.emit(node.target),
                         self.emit(node.value))

    def _emit_Constant(self, node):
        return self.node(_literal_kind(node.value))

    def _emit_Dict(self, node):
        children = []
        for key, value in zip(node.keys, node.values):
            if key is not None:
                children.append(self.emit(key))
            children.append(self.emit(value))
        return self.node("Dict", *children)

    def _emit_comprehension(self, node):
        children = [self.emit(node.target), self.emit(node.iter)]
        children += [self.emit(i) for i in node.ifs]
        return self.node("comprehension", *children)

    def _emit_ListComp(self, node, kind="ListComp"):
        children = [self.emit(node.elt)]
        children += [self._emit_comprehension(g) for g in node.generators]
        return self.node(kind, *children)

    def _emit_SetComp(self, node):
        return self._emit_ListComp(node, "SetComp")

    def _emit_GeneratorExp(self, node):
        return self._emit_ListComp(node, "GeneratorExp")

    def _emit_DictComp(self, node):
        children = [self.emit(node.key), self.emit(node.value)]
        children += [self._emit_comprehension(g) for g in node.generators]
        return self.node("DictComp", *children)

    def _emit_JoinedStr(self, node):
        return self.node("JoinedStr", *[self.emit(v) for v in node.values])

    def _emit_FormattedValue(self, node):
        return self.node("FormattedValue", self.emit(node.value))

    # fallback -----------------------------------------------------------

    def _emit_generic(self, node):
        children = []
        for _field, value in ast.iter_fields(node):
            if isinstance(value, ast.AST):
                if not isinstance(value, (ast.expr_context, ast.operator,
                                          ast.boolop, ast.unaryop, ast.cmpop)):
                    children.append(self.emit(value))
            elif isinstance(value, list) and value \
                    and isinstance(value[0], ast.AST):
                if isinstance(value[0], ast.stmt):
                    children.append(self.block(value))
                else:
                    children.extend(self.emit(v) for v in value
                                    if isinstance(v, ast.AST))
        return self.node(type(node).__name__, *children)


def unsupported_constructs(tree: ast.AST) -> list[str]:
    """Constructs the downstream scoping model refuses."""
    found = []
    for node in ast.walk(tree):
        if isinstance(node, (ast.Global, ast.Nonlocal)):
            found.append(f"{type(node).__name__} at line {node.lineno}")
    return found


def emit_ast_tree(tree: ast.Module) -> dict:
    emitter = _Emitter(_bound_names(tree))
    return emitter.emit_module(tree)


def emit_ast(source: str, filename: str = "<source>") -> dict:
    """Parse and emit; syntax errors carry the file and line."""
    try:
        tree = ast.parse(source, filename=filename)
    except SyntaxError as exc:
        raise EmitError(f"{filename}:{exc.lineno}: {exc.msg}") from exc
    return emit_ast_tree(tree)


def count_nodes(node: dict) -> int:
    return 1 + sum(count_nodes(c) for c in node["children"])
