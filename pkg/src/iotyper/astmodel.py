"""Tree/dataset data model: nodes, vocabulary, type classes, JSON wire format.

The dataset wire format is JSON:

    {"classes": [str x 21], "vocab_version": str,
     "trees": [{"path": str, "root": NODE,
                "labels": [{"scope": str, "name": str, "type": str}]}]}

    NODE = {"id": int, "kind": str, "name": str?, "children": [NODE]}

Scope paths are "<module>" for module globals and "<module>::f" for locals
of function f, with nested scopes joined by "::".
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

IDENTIFIER_KIND = "Name"
VAR_KIND = "VAR"
N_CLASSES = 21

# Built-in type classes predicted by the models. The list is data, not code:
# a dataset may carry any 21 distinct names in its "classes" field.
DEFAULT_CLASSES = (
    "int", "str", "float", "NoneType", "module", "tuple", "dict", "list",
    "set", "function", "bool", "bytes", "complex", "type", "object",
    "frozenset", "bytearray", "range", "slice", "generator", "method",
)

DEFAULT_VOCAB_VERSION = "v1"


class DatasetError(Exception):
    """Base class for dataset parsing/validation failures."""


class DatasetParseError(DatasetError):
    """Malformed JSON. Carries the byte offset of the failure."""

    def __init__(self, message: str, byte_offset: int):
        super().__init__(f"{message} (byte offset {byte_offset})")
        self.byte_offset = byte_offset


class DatasetValidationError(DatasetError):
    """Structurally valid JSON that violates a dataset invariant."""


@dataclass(frozen=True)
class TreeNode:
    """One AST node. Immutable; trees are rebuilt by transforms, not mutated.

    `identifier` is present iff `kind` is the identifier kind ("Name").
    """

    kind: str
    node_id: int
    children: tuple["TreeNode", ...] = ()
    identifier: str | None = None

    def walk(self):
        """Pre-order traversal of the subtree, children in index order."""
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))

    def max_node_id(self) -> int:
        return max(n.node_id for n in self.walk())


@dataclass(frozen=True)
class TypeClass:
    name: str
    index: int


class ClassSet:
    """The fixed set of 21 type classes; index order is the wire order."""

    def __init__(self, names=DEFAULT_CLASSES):
        names = tuple(names)
        if len(names) != N_CLASSES:
            raise DatasetValidationError(
                f"expected exactly {N_CLASSES} classes, got {len(names)}")
        if len(set(names)) != len(names):
            raise DatasetValidationError("duplicate class names")
        self.names = names
        self._index = {name: i for i, name in enumerate(names)}

    def __len__(self):
        return len(self.names)

    def __eq__(self, other):
        return isinstance(other, ClassSet) and self.names == other.names

    def __contains__(self, name):
        return name in self._index

    def index_of(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise DatasetValidationError(f"unknown type class {name!r}") from None

    def classes(self) -> list[TypeClass]:
        return [TypeClass(n, i) for i, n in enumerate(self.names)]


class Vocabulary:
    """Fixed token list; token at position j embeds as row j.

    Two implied rows follow the listed tokens: UNK at |V| and VAR at |V|+1,
    so the embedding matrix has |V|+2 rows.
    """

    def __init__(self, tokens, version: str = DEFAULT_VOCAB_VERSION):
        tokens = tuple(tokens)
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        self.tokens = tokens
        self.version = version
        self._index = {tok: i for i, tok in enumerate(tokens)}

    def __len__(self):
        return len(self.tokens)

    @property
    def unk_index(self) -> int:
        return len(self.tokens)

    @property
    def var_index(self) -> int:
        return len(self.tokens) + 1

    @property
    def n_rows(self) -> int:
        return len(self.tokens) + 2

    def position(self, token: str):
        return self._index.get(token)


def load_default_vocabulary(version: str = DEFAULT_VOCAB_VERSION) -> Vocabulary:
    """Load the vocabulary file shipped with the package."""
    text = resources.files("iotyper").joinpath(f"vocab_{version}.txt").read_text()
    tokens = [line.strip() for line in text.splitlines()
              if line.strip() and not line.startswith("#")]
    return Vocabulary(tokens, version=version)


def token_index(vocab: Vocabulary, node: TreeNode) -> int:
    """Embedding row for a node. Total: unknown kinds map to the UNK row.

    Identifier nodes and sink nodes share the dedicated VAR row.
    """
    if node.kind == IDENTIFIER_KIND or node.kind == VAR_KIND:
        return vocab.var_index
    pos = vocab.position(node.kind)
    return pos if pos is not None else vocab.unk_index


def validate_tree(root: TreeNode) -> list[str]:
    """Check tree invariants; returns one message per violation."""
    violations = []
    seen_ids = set()
    for node in root.walk():
        if node.node_id in seen_ids:
            violations.append(f"node {node.node_id}: duplicate node_id")
        seen_ids.add(node.node_id)
        if node.kind == IDENTIFIER_KIND and node.identifier is None:
            violations.append(f"node {node.node_id}: Name node without identifier")
        if node.kind != IDENTIFIER_KIND and node.identifier is not None:
            violations.append(
                f"node {node.node_id}: identifier on non-Name kind {node.kind!r}")
    return violations


@dataclass(frozen=True)
class Label:
    """Ground-truth type for one identifier in one scope."""

    scope: str
    name: str
    type_name: str
    class_index: int


@dataclass(frozen=True)
class LabeledTree:
    path: str
    root: TreeNode
    labels: tuple[Label, ...] = ()


@dataclass(frozen=True)
class Dataset:
    classes: ClassSet
    vocab_version: str
    trees: tuple[LabeledTree, ...] = ()


def node_from_json(obj) -> TreeNode:
    if not isinstance(obj, dict):
        raise DatasetValidationError(f"node must be an object, got {type(obj).__name__}")
    try:
        node_id = obj["id"]
        kind = obj["kind"]
    except KeyError as exc:
        raise DatasetValidationError(f"node missing field {exc}") from None
    if not isinstance(node_id, int) or not isinstance(kind, str):
        raise DatasetValidationError(f"bad node field types in node {obj.get('id')!r}")
    children = tuple(node_from_json(c) for c in obj.get("children", ()))
    return TreeNode(kind=kind, node_id=node_id, children=children,
                    identifier=obj.get("name"))


def node_to_json(node: TreeNode) -> dict:
    obj = {"id": node.node_id, "kind": node.kind}
    if node.identifier is not None:
        obj["name"] = node.identifier
    obj["children"] = [node_to_json(c) for c in node.children]
    return obj


def parse_dataset(raw) -> Dataset:
    """Parse and validate the dataset wire format.

    Raises DatasetParseError for malformed JSON and DatasetValidationError
    when a tree invariant fails or a label does not resolve to any
    occurrence in its tree.
    """
    if isinstance(raw, bytes):
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DatasetParseError("invalid UTF-8", exc.start) from exc
    else:
        text = raw
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[:exc.pos].encode("utf-8"))
        raise DatasetParseError(exc.msg, offset) from exc

    if not isinstance(doc, dict):
        raise DatasetValidationError("top-level value must be an object")
    classes = ClassSet(doc.get("classes", DEFAULT_CLASSES))
    vocab_version = doc.get("vocab_version", DEFAULT_VOCAB_VERSION)

    trees = []
    for entry in doc.get("trees", ()):
        root = node_from_json(entry["root"])
        violations = validate_tree(root)
        if violations:
            raise DatasetValidationError(
                f"tree {entry.get('path', '?')!r}: " + "; ".join(violations))
        labels = tuple(
            Label(scope=lab["scope"], name=lab["name"], type_name=lab["type"],
                  class_index=classes.index_of(lab["type"]))
            for lab in entry.get("labels", ()))
        tree = LabeledTree(path=entry.get("path", ""), root=root, labels=labels)
        _check_labels_resolve(tree)
        trees.append(tree)
    return Dataset(classes=classes, vocab_version=vocab_version, trees=tuple(trees))


def _check_labels_resolve(tree: LabeledTree) -> None:
    from .transforms import resolve_scopes  # cycle: transforms uses TreeNode

    table = resolve_scopes(tree.root)
    for lab in tree.labels:
        if (lab.scope, lab.name) not in table:
            raise DatasetValidationError(
                f"tree {tree.path!r}: label ({lab.scope!r}, {lab.name!r}) "
                "does not resolve to any occurrence")


def serialize_dataset(dataset: Dataset) -> str:
    doc = {
        "classes": list(dataset.classes.names),
        "vocab_version": dataset.vocab_version,
        "trees": [
            {
                "path": t.path,
                "root": node_to_json(t.root),
                "labels": [
                    {"scope": lab.scope, "name": lab.name, "type": lab.type_name}
                    for lab in t.labels
                ],
            }
            for t in dataset.trees
        ],
    }
    return json.dumps(doc)
