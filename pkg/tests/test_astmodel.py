import json

import pytest

from iotyper.astmodel import (DEFAULT_CLASSES, ClassSet, DatasetParseError,
                              DatasetValidationError, TreeNode, Vocabulary,
                              load_default_vocabulary, node_from_json,
                              node_to_json, parse_dataset, serialize_dataset,
                              token_index, validate_tree)
from treeutil import NodeFactory, fig1a_dataset_json, fig1a_tree


def test_default_vocabulary_shape():
    vocab = load_default_vocabulary()
    assert len(set(vocab.tokens)) == len(vocab.tokens)
    assert vocab.unk_index == len(vocab)
    assert vocab.var_index == len(vocab) + 1
    assert vocab.n_rows == len(vocab) + 2


def test_class_set_is_a_bijection_over_21_names():
    classes = ClassSet()
    assert len(classes) == 21
    by_index = sorted(classes.classes(), key=lambda c: c.index)
    assert [c.index for c in by_index] == list(range(21))
    assert len({c.name for c in by_index}) == 21


def test_class_set_rejects_wrong_count_and_duplicates():
    with pytest.raises(DatasetValidationError):
        ClassSet(("int", "str"))
    bad = list(DEFAULT_CLASSES)
    bad[1] = "int"
    with pytest.raises(DatasetValidationError):
        ClassSet(bad)


class TestTokenIndex:
    def test_known_token_maps_to_its_position(self):
        vocab = load_default_vocabulary()
        node = TreeNode(kind=vocab.tokens[0], node_id=0)
        assert token_index(vocab, node) == 0
        node = TreeNode(kind="Assign", node_id=1)
        assert token_index(vocab, node) == vocab.tokens.index("Assign")

    def test_identifier_maps_to_var_row(self):
        vocab = load_default_vocabulary()
        node = TreeNode(kind="Name", node_id=0, identifier="a")
        assert token_index(vocab, node) == vocab.var_index

    def test_sink_maps_to_var_row(self):
        vocab = load_default_vocabulary()
        node = TreeNode(kind="VAR", node_id=0)
        assert token_index(vocab, node) == vocab.var_index

    def test_unknown_kind_maps_to_unk_row(self):
        vocab = load_default_vocabulary()
        node = TreeNode(kind="FancyNewNode", node_id=0)
        assert token_index(vocab, node) == vocab.unk_index

    def test_total_and_deterministic(self):
        vocab = Vocabulary(("Module", "Assign", "Num"))
        for kind in ("Module", "Assign", "Num", "Name", "VAR", "???"):
            node = TreeNode(kind=kind, node_id=0,
                            identifier="x" if kind == "Name" else None)
            assert token_index(vocab, node) == token_index(vocab, node)


class TestValidateTree:
    def test_wellformed_tree_is_clean(self):
        assert validate_tree(fig1a_tree()) == []

    def test_duplicate_node_id(self):
        dup = TreeNode(kind="Module", node_id=7, children=(
            TreeNode(kind="Num", node_id=7),))
        violations = validate_tree(dup)
        assert len(violations) == 1
        assert "7" in violations[0]

    def test_name_without_identifier(self):
        bad = TreeNode(kind="Module", node_id=0, children=(
            TreeNode(kind="Name", node_id=1),))
        violations = validate_tree(bad)
        assert len(violations) == 1
        assert "1" in violations[0]

    def test_identifier_on_non_name(self):
        bad = TreeNode(kind="Num", node_id=3, identifier="x")
        assert len(validate_tree(bad)) == 1


class TestParseDataset:
    def test_fig1a_parses_with_three_labels(self):
        ds = parse_dataset(fig1a_dataset_json().encode())
        assert len(ds.trees) == 1
        assert len(ds.trees[0].labels) == 3
        assert {lab.type_name for lab in ds.trees[0].labels} == {"int"}

    def test_empty_tree_list(self):
        raw = json.dumps({"classes": list(DEFAULT_CLASSES),
                          "vocab_version": "v1", "trees": []})
        ds = parse_dataset(raw)
        assert ds.trees == ()

    def test_bare_trees_key_defaults_classes_and_version(self):
        ds = parse_dataset(b'{"trees": []}')
        assert ds.trees == ()
        assert ds.classes.names == DEFAULT_CLASSES
        assert ds.vocab_version == "v1"

    def test_malformed_json_reports_byte_offset(self):
        with pytest.raises(DatasetParseError) as err:
            parse_dataset(b'{"classes": [')
        assert err.value.byte_offset >= 0

    def test_unknown_class_name(self):
        doc = json.loads(fig1a_dataset_json())
        doc["trees"][0]["labels"][0]["type"] = "wibble"
        with pytest.raises(DatasetValidationError, match="wibble"):
            parse_dataset(json.dumps(doc))

    def test_unresolvable_label_names_scope_and_identifier(self):
        doc = json.loads(fig1a_dataset_json())
        doc["trees"][0]["labels"].append(
            {"scope": "<module>", "name": "z", "type": "int"})
        with pytest.raises(DatasetValidationError, match="z"):
            parse_dataset(json.dumps(doc))

    def test_invalid_tree_rejected(self):
        doc = json.loads(fig1a_dataset_json())
        doc["trees"][0]["root"]["children"][0]["id"] = \
            doc["trees"][0]["root"]["id"]
        with pytest.raises(DatasetValidationError):
            parse_dataset(json.dumps(doc))


def test_serialization_round_trip():
    ds = parse_dataset(fig1a_dataset_json())
    again = parse_dataset(serialize_dataset(ds))
    assert again == ds


def test_node_json_round_trip_preserves_structure():
    tree = fig1a_tree()
    assert node_from_json(node_to_json(tree)) == tree


def test_node_json_keeps_child_order():
    n = NodeFactory()
    tree = n("Tuple", n("Num"), n("Str"), n("Name", name="q"))
    kinds = [c.kind for c in node_from_json(node_to_json(tree)).children]
    assert kinds == ["Num", "Str", "Name"]
