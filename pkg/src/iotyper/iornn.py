"""Inside-outside recursive models over sink-augmented trees.

Two variants share the same two-pass protocol: a bottom-up inside pass
(content of each subtree), then a top-down outside pass (context of each
node) seeded at the root by outside := inside. Sink nodes take part in the
inside pass as shared VAR leaves, computed first; in the outside pass each
occurrence acts as a parent of its sink and the contributions are summed
through the cell's own multi-source aggregation. Class scores come from a
ReLU linear head over each sink's outside state.

The gated variant sums child states, so inside states are invariant to
child order; the positional variant conditions on child positions and is
order sensitive but needs parameters proportional to the branching bound.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .astmodel import ClassSet, Vocabulary, load_default_vocabulary, token_index
from .transforms import AugmentedTree

VARIANT_CHILDSUM = "childsum"
VARIANT_NARY = "nary"
_GATES = ("i", "f", "o", "u")


class ModelError(Exception):
    pass


@dataclass
class NodeState:
    """Per-node state slots, inside filled before outside."""

    inside_h: ad.Tensor = None
    inside_c: ad.Tensor = None
    outside_h: ad.Tensor = None
    outside_c: ad.Tensor = None


@dataclass(frozen=True)
class ModelSpec:
    variant: str
    d_input: int
    d_hidden: int
    max_children: int
    classes: ClassSet
    vocab_version: str
    head: str = "one_layer"
    nary_outside_source: str = "parent_outside"
    siblings_source: str = "inside"
    restructuring: bool = True


class Model:
    """A variant spec plus its parameters and vocabulary."""

    def __init__(self, spec: ModelSpec, vocab: Vocabulary,
                 params: ad.ParameterStore):
        if spec.variant not in (VARIANT_CHILDSUM, VARIANT_NARY):
            raise ModelError(f"unknown variant {spec.variant!r}")
        if vocab.version != spec.vocab_version:
            raise ModelError(
                f"vocabulary version {vocab.version!r} does not match "
                f"model {spec.vocab_version!r}")
        self.spec = spec
        self.vocab = vocab
        self.params = params

    def dumps(self) -> str:
        doc = {
            "variant": self.spec.variant,
            "d_input": self.spec.d_input,
            "d_hidden": self.spec.d_hidden,
            "max_children": self.spec.max_children,
            "classes": list(self.spec.classes.names),
            "vocab_version": self.spec.vocab_version,
            "head": self.spec.head,
            "nary_outside_source": self.spec.nary_outside_source,
            "siblings_source": self.spec.siblings_source,
            "restructuring": self.spec.restructuring,
        }
        doc.update(self.params.to_json_dict())
        return json.dumps(doc)

    @classmethod
    def loads(cls, text: str, vocab: Vocabulary | None = None) -> "Model":
        doc = json.loads(text)
        spec = ModelSpec(
            variant=doc["variant"],
            d_input=doc["d_input"],
            d_hidden=doc["d_hidden"],
            max_children=doc["max_children"],
            classes=ClassSet(doc["classes"]),
            vocab_version=doc["vocab_version"],
            head=doc.get("head", "one_layer"),
            nary_outside_source=doc.get("nary_outside_source", "parent_outside"),
            siblings_source=doc.get("siblings_source", "inside"),
            restructuring=doc.get("restructuring", True),
        )
        if vocab is None:
            vocab = load_default_vocabulary(spec.vocab_version)
        params = ad.ParameterStore.from_json_dict(doc)
        return cls(spec, vocab, params)


def _glorot(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    r = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-r, r, size=(rows, cols))


def _embedding_init(rng: np.random.Generator, rows: int, dim: int) -> np.ndarray:
    # a lookup table is not a linear map: scale rows by the embedding
    # width alone, or a large vocabulary starves the network of input
    r = math.sqrt(6.0 / dim)
    return rng.uniform(-r, r, size=(rows, dim))


def init_model(spec: ModelSpec, vocab: Vocabulary, seed: int) -> Model:
    """Seeded uniform init; the classifier head starts at zero so the
    initial prediction is exactly uniform over the classes."""
    rng = np.random.default_rng(seed)
    p = ad.ParameterStore()
    dm, di = spec.d_hidden, spec.d_input
    p.add("L", _embedding_init(rng, vocab.n_rows, di))
    if spec.variant == VARIANT_CHILDSUM:
        for g in _GATES:
            p.add(f"W_{g}", _glorot(rng, dm, di))
            p.add(f"U_{g}", _glorot(rng, dm, dm))
            p.add(f"b_{g}", np.zeros((dm, 1)))
        for g in _GATES:
            p.add(f"Uo_{g}", _glorot(rng, dm, dm))
            p.add(f"bo_{g}", np.zeros((dm, 1)))
    else:
        p.add("W_in", _glorot(rng, dm, di))
        for k in range(1, spec.max_children + 1):
            p.add(f"U_in_h_{k}", _glorot(rng, dm, dm))
            p.add(f"U_in_c_{k}", _glorot(rng, dm, dm))
        p.add("W_out", _glorot(rng, dm, dm))
        for k in range(1, spec.max_children + 1):
            p.add(f"U_out_h_{k}", _glorot(rng, dm, dm))
            p.add(f"U_out_c_{k}", _glorot(rng, dm, dm))
    if spec.head == "two_layer":
        p.add("W_h", _glorot(rng, dm, dm))
        p.add("b_h", np.zeros((dm, 1)))
    p.add("W_c", np.zeros((len(spec.classes), dm)))
    p.add("b_c", np.zeros((len(spec.classes), 1)))
    return Model(spec, vocab, p)


class _TreeIndex:
    """Deterministic traversal orders and parent/sibling links for one
    augmented tree. Sink nodes are excluded from the tree orders and
    handled through the sinks list."""

    def __init__(self, tree: AugmentedTree):
        self.tree = tree
        self.sink_ids = {s.sink_id for s in tree.sinks}
        self.preorder = []            # non-sink nodes, parents first
        self.parent = {}              # node_id -> (parent TreeNode, child position)
        stack = [tree.root]
        while stack:
            node = stack.pop()
            self.preorder.append(node)
            for pos, child in enumerate(node.children):
                if child.node_id in self.sink_ids:
                    continue
                self.parent[child.node_id] = (node, pos)
            stack.extend(c for c in reversed(node.children)
                         if c.node_id not in self.sink_ids)
        self.postorder = list(reversed(self.preorder))

    def siblings(self, node):
        parent, pos = self.parent[node.node_id]
        return [(i, c) for i, c in enumerate(parent.children)
                if i != pos and c.node_id not in self.sink_ids]


def _gate(tape, act, terms):
    total = terms[0] if len(terms) == 1 else ad.sum_list(tape, terms)
    return act(tape, total)


def inside_pass_childsum(tree: AugmentedTree, model: Model, tape: ad.Tape,
                         index: _TreeIndex | None = None) -> dict[int, NodeState]:
    """Bottom-up gated pass; child hidden states are summed, with one
    forget gate per child."""
    p = model.params
    index = index or _TreeIndex(tree)
    states: dict[int, NodeState] = {}

    def cell(node, child_states):
        x = ad.embed_lookup(tape, p["L"], token_index(model.vocab, node))
        st = NodeState()
        if child_states:
            hs = [cs.inside_h for cs in child_states]
            h_sum = hs[0] if len(hs) == 1 else ad.sum_list(tape, hs)
            i = _gate(tape, ad.sigmoid,
                      [ad.matvec(tape, p["W_i"], x),
                       ad.matvec(tape, p["U_i"], h_sum), p["b_i"]])
            o = _gate(tape, ad.sigmoid,
                      [ad.matvec(tape, p["W_o"], x),
                       ad.matvec(tape, p["U_o"], h_sum), p["b_o"]])
            u = _gate(tape, ad.tanh,
                      [ad.matvec(tape, p["W_u"], x),
                       ad.matvec(tape, p["U_u"], h_sum), p["b_u"]])
            fc = []
            for cs in child_states:
                f_k = _gate(tape, ad.sigmoid,
                            [ad.matvec(tape, p["W_f"], x),
                             ad.matvec(tape, p["U_f"], cs.inside_h), p["b_f"]])
                fc.append(ad.hadamard(tape, f_k, cs.inside_c))
            st.inside_c = ad.add(tape, ad.hadamard(tape, i, u),
                                 fc[0] if len(fc) == 1 else ad.sum_list(tape, fc))
        else:
            i = _gate(tape, ad.sigmoid, [ad.matvec(tape, p["W_i"], x), p["b_i"]])
            o = _gate(tape, ad.sigmoid, [ad.matvec(tape, p["W_o"], x), p["b_o"]])
            u = _gate(tape, ad.tanh, [ad.matvec(tape, p["W_u"], x), p["b_u"]])
            st.inside_c = ad.hadamard(tape, i, u)
        st.inside_h = ad.hadamard(tape, o, ad.tanh(tape, st.inside_c))
        return st

    for sink in tree.sinks:
        states[sink.sink_id] = cell(sink.node, [])
    for node in index.postorder:
        child_states = [_child_state(states, c) for c in node.children]
        states[node.node_id] = cell(node, child_states)
    return states


def _child_state(states, child):
    try:
        return states[child.node_id]
    except KeyError:
        raise ModelError(
            f"internal ordering error: state of node {child.node_id} "
            "not populated before its consumer") from None


def _childsum_outside_cell(model, tape, sources, st: NodeState) -> None:
    """Shared gated cell over (h, c) source pairs for the outside pass;
    sources carry the parent's outside state and the siblings' inside
    states (or, for a sink, its occurrences' outside states)."""
    p = model.params
    hs = [h for h, _ in sources]
    h_sum = hs[0] if len(hs) == 1 else ad.sum_list(tape, hs)
    i = _gate(tape, ad.sigmoid, [ad.matvec(tape, p["Uo_i"], h_sum), p["bo_i"]])
    o = _gate(tape, ad.sigmoid, [ad.matvec(tape, p["Uo_o"], h_sum), p["bo_o"]])
    u = _gate(tape, ad.tanh, [ad.matvec(tape, p["Uo_u"], h_sum), p["bo_u"]])
    fc = []
    for h_k, c_k in sources:
        f_k = _gate(tape, ad.sigmoid,
                    [ad.matvec(tape, p["Uo_f"], h_k), p["bo_f"]])
        fc.append(ad.hadamard(tape, f_k, c_k))
    st.outside_c = ad.add(tape, ad.hadamard(tape, i, u),
                          fc[0] if len(fc) == 1 else ad.sum_list(tape, fc))
    st.outside_h = ad.hadamard(tape, o, ad.tanh(tape, st.outside_c))


def outside_pass_childsum(tree: AugmentedTree, model: Model, tape: ad.Tape,
                          states: dict[int, NodeState],
                          index: _TreeIndex | None = None) -> dict[int, NodeState]:
    """Top-down gated pass. The root's outside state is its inside state;
    every other node aggregates its parent's outside and its siblings'
    inside states; each sink aggregates its occurrences' outside states."""
    index = index or _TreeIndex(tree)
    root_state = states[tree.root.node_id]
    root_state.outside_h = root_state.inside_h
    root_state.outside_c = root_state.inside_c

    for node in index.preorder:
        if node.node_id == tree.root.node_id:
            continue
        parent, _pos = index.parent[node.node_id]
        parent_state = _outside_state(states, parent.node_id)
        sources = [(parent_state.outside_h, parent_state.outside_c)]
        for _i, sib in index.siblings(node):
            sib_state = states[sib.node_id]
            sources.append((sib_state.inside_h, sib_state.inside_c))
        _childsum_outside_cell(model, tape, sources, states[node.node_id])

    for sink in tree.sinks:
        sources = []
        for occ in sink.occurrences:
            occ_state = _outside_state(states, occ)
            sources.append((occ_state.outside_h, occ_state.outside_c))
        if not sources:
            # occurrences all truncated away: a zero source is identical
            # to the empty sum, so the cell runs on its biases alone
            zero = ad.Tensor(np.zeros((model.spec.d_hidden, 1)))
            sources = [(zero, zero)]
        _childsum_outside_cell(model, tape, sources, states[sink.sink_id])
    return states


def _outside_state(states, node_id) -> NodeState:
    st = states[node_id]
    if st.outside_h is None:
        raise ModelError(
            f"internal ordering error: outside state of node {node_id} missing")
    return st


def inside_pass_nary(tree: AugmentedTree, model: Model, tape: ad.Tape,
                     index: _TreeIndex | None = None) -> dict[int, NodeState]:
    """Bottom-up positional pass; child k feeds position-specific weights.
    Nodes over the branching bound are a contract violation."""
    p = model.params
    k_max = model.spec.max_children
    index = index or _TreeIndex(tree)
    states: dict[int, NodeState] = {}

    def cell(node, child_states):
        if len(child_states) > k_max:
            raise ModelError(
                f"node {node.node_id} has {len(child_states)} children, "
                f"over the bound {k_max}; restructuring contract violated")
        x = ad.embed_lookup(tape, p["L"], token_index(model.vocab, node))
        wx = ad.matvec(tape, p["W_in"], x)
        terms_h, terms_c = [wx], [wx]
        for k, cs in enumerate(child_states, start=1):
            terms_h.append(ad.matvec(tape, p[f"U_in_h_{k}"], cs.inside_h))
            terms_c.append(ad.matvec(tape, p[f"U_in_c_{k}"], cs.inside_c))
        st = NodeState()
        st.inside_h = _gate(tape, ad.tanh, terms_h)
        st.inside_c = _gate(tape, ad.tanh, terms_c)
        return st

    for sink in tree.sinks:
        states[sink.sink_id] = cell(sink.node, [])
    for node in index.postorder:
        child_states = [_child_state(states, c) for c in node.children]
        states[node.node_id] = cell(node, child_states)
    return states


def outside_pass_nary(tree: AugmentedTree, model: Model, tape: ad.Tape,
                      states: dict[int, NodeState],
                      index: _TreeIndex | None = None) -> dict[int, NodeState]:
    """Top-down positional pass: the parent's outside state goes through
    the shared outside matrix, siblings through their position's weights.

    Siblings contribute inside states by default; `siblings_source=
    "outside"` uses a sibling's outside state when the traversal has
    already produced it and falls back to its inside state otherwise.
    Sinks aggregate their occurrences' outside states through the
    positional weights, positions cycling past the bound.
    """
    p = model.params
    k_max = model.spec.max_children
    use_outside_sib = model.spec.siblings_source == "outside"
    index = index or _TreeIndex(tree)
    root_state = states[tree.root.node_id]
    root_state.outside_h = root_state.inside_h
    root_state.outside_c = root_state.inside_c

    for node in index.preorder:
        if node.node_id == tree.root.node_id:
            continue
        parent, _pos = index.parent[node.node_id]
        parent_state = _outside_state(states, parent.node_id)
        terms_h = [ad.matvec(tape, p["W_out"], parent_state.outside_h)]
        terms_c = [ad.matvec(tape, p["W_out"], parent_state.outside_c)]
        for i, sib in index.siblings(node):
            sib_state = states[sib.node_id]
            if use_outside_sib and sib_state.outside_h is not None:
                h_k, c_k = sib_state.outside_h, sib_state.outside_c
            else:
                h_k, c_k = sib_state.inside_h, sib_state.inside_c
            k = i % k_max + 1
            terms_h.append(ad.matvec(tape, p[f"U_out_h_{k}"], h_k))
            terms_c.append(ad.matvec(tape, p[f"U_out_c_{k}"], c_k))
        st = states[node.node_id]
        st.outside_h = _gate(tape, ad.tanh, terms_h)
        st.outside_c = _gate(tape, ad.tanh, terms_c)

    for sink in tree.sinks:
        terms_h, terms_c = [], []
        for j, occ in enumerate(sink.occurrences):
            occ_state = _outside_state(states, occ)
            k = j % k_max + 1
            terms_h.append(ad.matvec(tape, p[f"U_out_h_{k}"], occ_state.outside_h))
            terms_c.append(ad.matvec(tape, p[f"U_out_c_{k}"], occ_state.outside_c))
        if not terms_h:
            # occurrences all truncated away: the empty sum is zero
            zero = ad.Tensor(np.zeros((model.spec.d_hidden, 1)))
            terms_h, terms_c = [zero], [zero]
        st = states[sink.sink_id]
        st.outside_h = _gate(tape, ad.tanh, terms_h)
        st.outside_c = _gate(tape, ad.tanh, terms_c)
    return states


def classify(model: Model, outside_h: ad.Tensor, tape: ad.Tape) -> ad.Tensor:
    """ReLU linear head over a sink's outside state; logits are >= 0."""
    p = model.params
    h = outside_h
    if model.spec.head == "two_layer":
        h = ad.relu(tape, ad.add(tape, ad.matvec(tape, p["W_h"], h), p["b_h"]))
    return ad.relu(tape, ad.add(tape, ad.matvec(tape, p["W_c"], h), p["b_c"]))


@dataclass
class ForwardResult:
    tape: ad.Tape
    states: dict[int, NodeState]
    logits: dict[int, ad.Tensor]


def forward(model: Model, tree: AugmentedTree,
            tape: ad.Tape | None = None) -> ForwardResult:
    """Inside pass, outside pass, then a logit vector per sink, all on one
    tape."""
    tape = tape if tape is not None else ad.Tape()
    index = _TreeIndex(tree)
    if model.spec.variant == VARIANT_CHILDSUM:
        states = inside_pass_childsum(tree, model, tape, index)
        outside_pass_childsum(tree, model, tape, states, index)
    else:
        states = inside_pass_nary(tree, model, tape, index)
        outside_pass_nary(tree, model, tape, states, index)
    logits = {}
    for sink in tree.sinks:
        logits[sink.sink_id] = classify(model, states[sink.sink_id].outside_h, tape)
    return ForwardResult(tape=tape, states=states, logits=logits)


def tree_loss(model: Model, tree: AugmentedTree, labeled: dict[int, int],
              tape: ad.Tape | None = None) -> tuple[ad.Tape, ad.Tensor, ForwardResult]:
    """Mean cross-entropy over the labeled sinks of one tree."""
    if not labeled:
        raise ModelError("tree_loss: no labeled sinks")
    result = forward(model, tree, tape)
    tape = result.tape
    losses = [ad.softmax_cross_entropy(tape, result.logits[sid], cls)
              for sid, cls in labeled.items()]
    total = losses[0] if len(losses) == 1 else ad.sum_list(tape, losses)
    loss = ad.scale(tape, total, 1.0 / len(losses))
    return tape, loss, result
