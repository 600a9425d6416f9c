"""Static analyses run before training/inference.

Three passes: scope resolution (which occurrences of a name belong
together), sink insertion (one shared VAR node per (scope, name) pair,
attached under every occurrence), and restructuring (split oversized
statement blocks into synthetic `ifTrue` groups so no node exceeds the
branching bound).

Restructuring runs before sink insertion: both orderings observe the same
result because sinks attach to Name nodes, whose relative order
restructuring never changes, and restructuring a sink-sharing DAG would be
ill-defined.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

from .astmodel import IDENTIFIER_KIND, VAR_KIND, TreeNode

MODULE_SCOPE = "<module>"
LAMBDA_SCOPE = "<lambda>"

# Kinds holding statement lists; the only nodes restructuring may split.
BLOCK_KINDS = frozenset({"Module", "block", "ifTrue"})

# Kinds that open a new scope for (some of) their children.
_SCOPE_KINDS = frozenset({"FunctionDef", "AsyncFunctionDef", "ClassDef", "Lambda"})

# Kinds a binding target is allowed to descend through; bare Names below
# them bind. Names under e.g. Attribute/Subscript are reads of the base.
_TARGET_WRAPPERS = frozenset({"Tuple", "List", "Starred"})


class UnsupportedConstructError(Exception):
    """Raised for constructs the simplified scoping model excludes."""


class RestructureError(Exception):
    """A non-block node exceeds the branching bound; splitting it would
    change program meaning, so this is a hard error."""


@dataclass(frozen=True)
class SinkNode:
    """Shared prediction-target node for all occurrences of one identifier."""

    sink_id: int
    scope: str
    name: str
    occurrences: tuple[int, ...]
    node: TreeNode


@dataclass(frozen=True)
class AugmentedTree:
    """Tree with sinks attached: a rooted DAG where sinks are the only
    shared nodes and sinks have no children."""

    root: TreeNode
    sinks: tuple[SinkNode, ...]

    def sink_for(self, scope: str, name: str):
        for sink in self.sinks:
            if sink.scope == scope and sink.name == name:
                return sink
        return None


class ScopeTable:
    """Map (scope-path, identifier) -> occurrence node ids, in pre-order of
    first occurrence."""

    def __init__(self):
        self._entries: dict[tuple[str, str], list[int]] = {}

    def add(self, scope: str, name: str, node_id: int) -> None:
        self._entries.setdefault((scope, name), []).append(node_id)

    def __contains__(self, key) -> bool:
        return key in self._entries

    def __len__(self):
        return len(self._entries)

    def __getitem__(self, key) -> tuple[int, ...]:
        return tuple(self._entries[key])

    def items(self):
        return [(k, tuple(v)) for k, v in self._entries.items()]

    def keys(self):
        return list(self._entries.keys())


def _bare_names(node: TreeNode):
    """Names bound by an assignment target subtree."""
    if node.kind == IDENTIFIER_KIND:
        yield node
    elif node.kind in _TARGET_WRAPPERS:
        for child in node.children:
            yield from _bare_names(child)


def _binding_targets(node: TreeNode):
    """Child subtrees of `node` whose bare Names bind in the current scope."""
    kind = node.kind
    children = node.children
    if kind == "Assign":
        return children[:-1]
    if kind in ("AugAssign", "AnnAssign", "For", "AsyncFor", "comprehension"):
        return children[:1]
    if kind == "withitem":
        return children[1:2]
    if kind == "ExceptHandler":
        # children are [type?, Name?, block]; the type expression at index 0
        # is a read even when it is a bare Name
        return tuple(c for c in children[1:] if c.kind == IDENTIFIER_KIND)
    if kind in ("Import", "ImportFrom"):
        return tuple(c for c in children if c.kind == IDENTIFIER_KIND)
    if kind == "arguments":
        return tuple(c for c in children if c.kind == IDENTIFIER_KIND)
    return ()


def _scoped_children(node: TreeNode, scope: str, inner: str):
    """Yield (child, scope-it-is-processed-in) for a scope-opening node.

    The Name naming a function/class is an occurrence in the enclosing
    scope; parameters and the body belong to the new scope. Class bases and
    decorators stay in the enclosing scope. Lambdas put everything inside.
    """
    if node.kind == "Lambda":
        for child in node.children:
            yield child, inner
        return
    for i, child in enumerate(node.children):
        if i == 0 and child.kind == IDENTIFIER_KIND:
            yield child, scope
        elif child.kind == "block" or (
                node.kind != "ClassDef" and child.kind == "arguments"):
            yield child, inner
        else:
            yield child, scope


def _inner_scope_path(node: TreeNode, scope: str) -> str:
    if node.kind == "Lambda":
        return f"{scope}::{LAMBDA_SCOPE}"
    if node.children and node.children[0].kind == IDENTIFIER_KIND:
        return f"{scope}::{node.children[0].identifier}"
    return f"{scope}::<anonymous>"


def resolve_scopes(root: TreeNode) -> ScopeTable:
    """Assign every Name occurrence to exactly one (scope, name) key.

    A name bound anywhere in a function body is local to that function;
    any other occurrence resolves to the module scope. `global` and
    `nonlocal` statements are not modeled and raise
    UnsupportedConstructError.
    """
    bindings: dict[str, set[str]] = {MODULE_SCOPE: set()}

    def collect(node: TreeNode, scope: str) -> None:
        if node.kind in ("Global", "Nonlocal"):
            raise UnsupportedConstructError(
                f"node {node.node_id}: {node.kind} statements are not supported")
        for target in _binding_targets(node):
            for name_node in _bare_names(target):
                bindings[scope].add(name_node.identifier)
        if node.kind in _SCOPE_KINDS:
            inner = _inner_scope_path(node, scope)
            bindings.setdefault(inner, set())
            if node.children and node.children[0].kind == IDENTIFIER_KIND:
                bindings[scope].add(node.children[0].identifier)
            for child, child_scope in _scoped_children(node, scope, inner):
                collect(child, child_scope)
        else:
            for child in node.children:
                collect(child, scope)

    collect(root, MODULE_SCOPE)

    table = ScopeTable()

    def assign(node: TreeNode, scope: str) -> None:
        if node.kind == IDENTIFIER_KIND:
            key_scope = scope if node.identifier in bindings.get(scope, ()) \
                else MODULE_SCOPE
            table.add(key_scope, node.identifier, node.node_id)
        if node.kind in _SCOPE_KINDS:
            inner = _inner_scope_path(node, scope)
            for child, child_scope in _scoped_children(node, scope, inner):
                assign(child, child_scope)
        else:
            for child in node.children:
                assign(child, scope)

    assign(root, MODULE_SCOPE)
    return table


def add_sink_nodes(root: TreeNode, scopes: ScopeTable) -> AugmentedTree:
    """Attach one shared sink per (scope, name) as the last child of each
    of its occurrence Name nodes. Sink ids continue after the tree's ids,
    in first-occurrence order."""
    next_id = itertools.count(root.max_node_id() + 1)
    sinks = []
    sink_of_occurrence: dict[int, TreeNode] = {}
    for (scope, name), occ_ids in scopes.items():
        node = TreeNode(kind=VAR_KIND, node_id=next(next_id))
        sinks.append(SinkNode(sink_id=node.node_id, scope=scope, name=name,
                              occurrences=occ_ids, node=node))
        for occ in occ_ids:
            sink_of_occurrence[occ] = node

    def rebuild(node: TreeNode) -> TreeNode:
        children = tuple(rebuild(c) for c in node.children)
        sink = sink_of_occurrence.get(node.node_id)
        if sink is not None:
            children = children + (sink,)
        if children != node.children:
            return replace(node, children=children)
        return node

    return AugmentedTree(root=rebuild(root), sinks=tuple(sinks))


def detach_sinks(root: TreeNode) -> TreeNode:
    """Inverse of sink attachment: drop VAR children, restoring the input."""
    def rebuild(node: TreeNode) -> TreeNode:
        children = tuple(rebuild(c) for c in node.children if c.kind != VAR_KIND)
        if children != node.children:
            return replace(node, children=children)
        return node
    return rebuild(root)


def restructure(root: TreeNode, max_children: int) -> TreeNode:
    """Bound every fan-out by `max_children`, splitting only statement
    blocks. Consecutive statements are grouped left-to-right into chunks of
    `max_children` wrapped in synthetic `ifTrue` nodes (a trailing single
    statement stays unwrapped), repeating until the bound holds.

    Synthetic blocks introduce no scope, so statement order, Name
    occurrences and their resolution are all preserved. A non-block node
    over the bound is a hard error.
    """
    if max_children < 2:
        raise ValueError(f"max_children must be >= 2, got {max_children}")
    next_id = itertools.count(root.max_node_id() + 1)

    def rebuild(node: TreeNode) -> TreeNode:
        children = tuple(rebuild(c) for c in node.children)
        if len(children) > max_children:
            if node.kind not in BLOCK_KINDS:
                raise RestructureError(
                    f"node {node.node_id} of kind {node.kind!r} has "
                    f"{len(children)} children but is not a statement block")
            children = _split_block(children, max_children, next_id)
        if children != node.children:
            return replace(node, children=children)
        return node

    return rebuild(root)


def _split_block(children, max_children, next_id):
    items = list(children)
    while len(items) > max_children:
        grouped = []
        for i in range(0, len(items), max_children):
            chunk = items[i:i + max_children]
            if len(chunk) == 1:
                grouped.append(chunk[0])
            else:
                grouped.append(TreeNode(kind="ifTrue", node_id=next(next_id),
                                        children=tuple(chunk)))
        items = grouped
    return tuple(items)


def truncate_children(root: TreeNode, max_children: int) -> TreeNode:
    """No-restructuring fallback for the ordered variant: keep only the
    first `max_children` children of every node."""
    def rebuild(node: TreeNode) -> TreeNode:
        children = tuple(rebuild(c) for c in node.children[:max_children])
        if children != node.children:
            return replace(node, children=children)
        return node
    return rebuild(root)


def truncate_augmented(tree: AugmentedTree, max_children: int) -> AugmentedTree:
    """Truncate an already sink-augmented tree. Sinks survive (they are a
    Name node's only child) but lose occurrences that were cut away; a
    sink may end up with no occurrence at all, in which case it receives
    no context and predicts from the biases alone."""
    def rebuild(node: TreeNode) -> TreeNode:
        if node.kind == VAR_KIND:
            return node  # keep sink identity shared
        children = tuple(rebuild(c) for c in node.children[:max_children])
        if children != node.children:
            return replace(node, children=children)
        return node

    new_root = rebuild(tree.root)
    surviving = {n.node_id for n in new_root.walk()}
    sinks = tuple(
        replace(s, occurrences=tuple(o for o in s.occurrences
                                     if o in surviving))
        for s in tree.sinks)
    return AugmentedTree(root=new_root, sinks=sinks)


def augmented_to_json(tree: AugmentedTree) -> dict:
    """JSON view used by the `transform` subcommand: the tree without the
    attached sink children, plus a sinks array describing the sharing."""
    from .astmodel import node_to_json

    return {
        "root": node_to_json(detach_sinks(tree.root)),
        "sinks": [
            {"id": s.sink_id, "scope": s.scope, "name": s.name,
             "occurrences": list(s.occurrences)}
            for s in tree.sinks
        ],
    }
