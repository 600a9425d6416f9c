"""Command-line entry point: train, predict, evaluate, transform.

Exit codes: 0 success, 1 input parse/validation failure, 2 training
divergence, 3 vocabulary version mismatch. Reports embed no timestamps
unless --timestamps is given, so identical inputs reproduce identical
output bytes.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime, timezone

from . import iornn, training, transforms
from .astmodel import (Dataset, DatasetError, LabeledTree, node_from_json,
                       parse_dataset, validate_tree)
from .autodiff import softmax
from .iornn import Model
from .training import TrainConfig

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_DIVERGED = 2
EXIT_VOCAB_MISMATCH = 3

logger = logging.getLogger("iotyper.cli")


class VocabMismatch(Exception):
    pass


def _read_bytes(path: str) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def _write_text(path: str | None, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
        if not text.endswith("\n"):
            sys.stdout.write("\n")
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
            if not text.endswith("\n"):
                fh.write("\n")


def _config_from_args(args) -> TrainConfig:
    d_hidden = args.d_hidden
    if d_hidden is None:
        d_hidden = 15 if args.variant == "childsum" else 10
    return TrainConfig(
        variant=args.variant,
        d_input=args.d_input,
        d_hidden=d_hidden,
        max_children=args.max_children,
        epochs=args.epochs,
        learning_rate=args.lr,
        l2=args.l2,
        seed=args.seed,
        restructuring=not args.no_restructuring,
    )


def _load_trees_for_prediction(path: str, model: Model) -> list[LabeledTree]:
    """Accept a full dataset, a {"root": NODE} wrapper, or a bare NODE."""
    doc = json.loads(_read_bytes(path).decode("utf-8"))
    if isinstance(doc, dict) and "trees" in doc:
        dataset = parse_dataset(_read_bytes(path))
        if dataset.vocab_version != model.spec.vocab_version:
            raise VocabMismatch(
                f"dataset vocabulary {dataset.vocab_version!r} != "
                f"model vocabulary {model.spec.vocab_version!r}")
        return list(dataset.trees)
    if isinstance(doc, dict) and "root" in doc:
        version = doc.get("vocab_version")
        if version is not None and version != model.spec.vocab_version:
            raise VocabMismatch(
                f"tree vocabulary {version!r} != "
                f"model vocabulary {model.spec.vocab_version!r}")
        root = node_from_json(doc["root"])
        path_name = doc.get("path", path)
    else:
        root = node_from_json(doc)
        path_name = path
    violations = validate_tree(root)
    if violations:
        raise DatasetError("; ".join(violations))
    return [LabeledTree(path=path_name, root=root)]


def cmd_train(args) -> int:
    dataset = parse_dataset(_read_bytes(args.dataset))
    config = _config_from_args(args)
    if config.epochs == 0:
        logger.warning("epochs=0: writing an initialized, untrained model")
    result = training.train(dataset, config)
    _write_text(args.out, result.model.dumps())
    metrics = {
        "config": training.metrics_report(config, [], {})["config"],
        "loss_curve": result.loss_curve,
        "skipped_trees": result.skipped_trees,
    }
    if args.timestamps:
        metrics["generated_at"] = datetime.now(timezone.utc).isoformat()
    _write_text(_metrics_path(args.out), json.dumps(metrics, indent=2))
    return EXIT_OK


def _metrics_path(out: str | None) -> str | None:
    if out is None:
        return None
    stem = out[:-5] if out.endswith(".json") else out
    return stem + ".metrics.json"


def cmd_predict(args) -> int:
    model = Model.loads(_read_bytes(args.model).decode("utf-8"))
    trees = _load_trees_for_prediction(args.ast, model)
    names = model.spec.classes.names
    k = max(1, min(args.top_k, len(names)))
    lines = []
    for tree in trees:
        prepared = training.prepare_tree(
            tree, model.spec.variant, model.spec.max_children,
            model.spec.restructuring)
        result = iornn.forward(model, prepared.tree)
        for sink in prepared.tree.sinks:
            logits = result.logits[sink.sink_id].value
            probs = softmax(logits).ravel()
            order = training.rank_classes(logits)[:k]
            lines.append(json.dumps({
                "path": tree.path,
                "scope": sink.scope,
                "name": sink.name,
                "top": [{"type": names[i], "prob": float(probs[i])}
                        for i in order],
            }))
    _write_text(args.out, "\n".join(lines) if lines else "")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    dataset = parse_dataset(_read_bytes(args.dataset))
    if args.model:
        model = Model.loads(_read_bytes(args.model).decode("utf-8"))
        if dataset.vocab_version != model.spec.vocab_version:
            raise VocabMismatch(
                f"dataset vocabulary {dataset.vocab_version!r} != "
                f"model vocabulary {model.spec.vocab_version!r}")
        report = _evaluate_model_report(model, dataset, args)
    else:
        report = _train_and_evaluate_report(dataset, args)
    if args.timestamps:
        report["generated_at"] = datetime.now(timezone.utc).isoformat()
    _write_text(args.out, json.dumps(report, indent=2))
    return EXIT_OK


def _evaluate_model_report(model: Model, dataset: Dataset, args) -> dict:
    overall = training.evaluate_topk(model, dataset)
    report = {
        "config": {
            "variant": model.spec.variant,
            "d_input": model.spec.d_input,
            "d_hidden": model.spec.d_hidden,
            "max_children": model.spec.max_children,
            "restructuring": model.spec.restructuring,
        },
        "folds": [],
        "aggregate": overall.to_json_dict(),
    }
    if args.folds and args.folds >= 2:
        for _train_part, val_part in training.kfold_split(
                dataset, args.folds, args.seed):
            fold_metrics = training.evaluate_topk(model, val_part)
            report["folds"].append(fold_metrics.to_json_dict())
    return report


def _train_and_evaluate_report(dataset: Dataset, args) -> dict:
    config = _config_from_args(args)
    split = training.split_dataset(dataset, args.split_file, seed=config.seed)
    fold_metrics, mean_topk = training.cross_validate(
        dataset, config, folds=args.folds or 4)
    report = training.metrics_report(config, fold_metrics, mean_topk)
    report["restructuring"] = training.restructuring_ablation(
        dataset, config, [config.max_children], split=split)
    train_part, test_part = split
    result = training.train(train_part, config)
    test_metrics = training.evaluate_topk(result.model, test_part)
    report["test"] = test_metrics.to_json_dict()
    report["baselines"] = {
        "random": training.baseline_random(test_part, seed=config.seed)
        .to_json_dict(),
        "majority": training.baseline_majority(train_part, test_part)
        .to_json_dict(),
    }
    return report


def cmd_transform(args) -> int:
    doc = json.loads(_read_bytes(args.ast).decode("utf-8"))
    if isinstance(doc, dict) and "root" in doc:
        doc = doc["root"]
    root = node_from_json(doc)
    violations = validate_tree(root)
    if violations:
        raise DatasetError("; ".join(violations))
    if not args.no_restructuring:
        root = transforms.restructure(root, args.max_children)
    augmented = transforms.add_sink_nodes(root, transforms.resolve_scopes(root))
    _write_text(args.out, json.dumps(transforms.augmented_to_json(augmented),
                                     indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="iotyper",
        description="Type-class prediction over program trees")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common_train_flags(p):
        p.add_argument("--variant", choices=("childsum", "nary"),
                       default="childsum")
        p.add_argument("--d-input", type=int, default=10)
        p.add_argument("--d-hidden", type=int, default=None,
                       help="defaults to 15 for childsum, 10 for nary")
        p.add_argument("--max-children", type=int, default=20)
        p.add_argument("--epochs", type=int, default=100)
        p.add_argument("--lr", type=float, default=0.01)
        p.add_argument("--l2", type=float, default=1e-5)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--no-restructuring", action="store_true")

    p_train = sub.add_parser("train", help="train a model on a dataset")
    p_train.add_argument("--dataset", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--timestamps", action="store_true")
    add_common_train_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_predict = sub.add_parser("predict", help="rank type classes per identifier")
    p_predict.add_argument("--model", required=True)
    p_predict.add_argument("--ast", required=True)
    p_predict.add_argument("--top-k", type=int, default=3)
    p_predict.add_argument("--out", default=None)
    p_predict.set_defaults(func=cmd_predict)

    p_eval = sub.add_parser("evaluate", help="top-k evaluation / CV reports")
    p_eval.add_argument("--dataset", required=True)
    p_eval.add_argument("--model", default=None)
    p_eval.add_argument("--folds", type=int, default=4)
    p_eval.add_argument("--split-file", default=None)
    p_eval.add_argument("--out", default=None)
    p_eval.add_argument("--timestamps", action="store_true")
    add_common_train_flags(p_eval)
    p_eval.set_defaults(func=cmd_evaluate)

    p_tr = sub.add_parser("transform",
                          help="dump the restructured, sink-augmented tree")
    p_tr.add_argument("--ast", required=True)
    p_tr.add_argument("--max-children", type=int, default=20)
    p_tr.add_argument("--no-restructuring", action="store_true")
    p_tr.add_argument("--out", default=None)
    p_tr.set_defaults(func=cmd_transform)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except training.DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except VocabMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VOCAB_MISMATCH
    except (DatasetError, transforms.RestructureError,
            transforms.UnsupportedConstructError, training.TrainingError,
            iornn.ModelError, OSError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
