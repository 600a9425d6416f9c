"""Training loop, Adam optimizer, cross-validation, top-k evaluation,
baseline predictors and the experiment grid harness.

One optimizer step per tree: forward over the augmented tree, mean
cross-entropy over its labeled sinks, backward, update. Preparation
(restructuring or truncation, then sink insertion) is shared between
training and evaluation so both always see the same trees.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import iornn
from .astmodel import Dataset, LabeledTree, Vocabulary, load_default_vocabulary
from .iornn import Model, ModelSpec, VARIANT_CHILDSUM, VARIANT_NARY
from .transforms import (AugmentedTree, add_sink_nodes, resolve_scopes,
                         restructure, truncate_augmented)

logger = logging.getLogger("iotyper.training")

DEFAULT_DIMS_GRID = ((5, 10), (10, 10), (10, 15), (10, 20))
DEFAULT_K_SWEEP = (5, 10, 15, 20, 25, 30, 35)
TOP_KS = (1, 2, 3, 4, 5)


class TrainingError(Exception):
    pass


class DivergenceError(TrainingError):
    """Loss became non-finite; carries epoch and tree for the post-mortem."""

    def __init__(self, epoch: int, tree_path: str, detail: str):
        super().__init__(f"training diverged at epoch {epoch}, "
                         f"tree {tree_path!r}: {detail}")
        self.epoch = epoch
        self.tree_path = tree_path


@dataclass
class TrainConfig:
    variant: str = VARIANT_CHILDSUM
    d_input: int = 10
    d_hidden: int = 15
    max_children: int = 20
    epochs: int = 100
    learning_rate: float = 0.01
    l2: float = 1e-5
    seed: int = 0
    restructuring: bool = True
    head: str = "one_layer"
    siblings_source: str = "inside"

    def __post_init__(self):
        if min(self.d_input, self.d_hidden, self.max_children) <= 0:
            raise ValueError("dimensions and max_children must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")

    @classmethod
    def defaults_for(cls, variant: str, **overrides) -> "TrainConfig":
        # best reported dimensions differ between the two variants
        d_hidden = 15 if variant == VARIANT_CHILDSUM else 10
        base = dict(variant=variant, d_input=10, d_hidden=d_hidden)
        base.update(overrides)
        return cls(**base)


@dataclass
class PreparedTree:
    source: LabeledTree
    tree: AugmentedTree
    labeled: dict[int, int]
    dropped_labels: int


def prepare_tree(tree: LabeledTree, variant: str, max_children: int,
                 restructuring: bool) -> PreparedTree:
    """Apply the static passes and map labels onto sinks.

    Without restructuring the ordered variant truncates every fan-out to
    `max_children` AFTER sinks are attached: every label keeps its sink,
    but a sink whose occurrences were all cut away predicts blind.
    """
    root = tree.root
    if restructuring:
        root = restructure(root, max_children)
    aug = add_sink_nodes(root, resolve_scopes(root))
    if not restructuring and variant == VARIANT_NARY:
        aug = truncate_augmented(aug, max_children)
    labeled: dict[int, int] = {}
    dropped = 0
    for lab in tree.labels:
        sink = aug.sink_for(lab.scope, lab.name)
        if sink is None:
            dropped += 1
        else:
            labeled[sink.sink_id] = lab.class_index
    return PreparedTree(source=tree, tree=aug, labeled=labeled,
                        dropped_labels=dropped)


def prepare_dataset(dataset: Dataset, variant: str, max_children: int,
                    restructuring: bool) -> list[PreparedTree]:
    return [prepare_tree(t, variant, max_children, restructuring)
            for t in dataset.trees]


def _prepare_for_model(model: Model, dataset: Dataset) -> list[PreparedTree]:
    spec = model.spec
    return prepare_dataset(dataset, spec.variant, spec.max_children,
                           spec.restructuring)


class Adam:
    """Bias-corrected Adam; L2 is applied as weight decay added to the
    gradient before the moment updates."""

    def __init__(self, params: ad.ParameterStore, lr: float,
                 beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, l2: float = 0.0):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.l2 = l2
        self.t = 0
        self._m = {name: np.zeros_like(t.value) for name, t in params.items()}
        self._v = {name: np.zeros_like(t.value) for name, t in params.items()}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, tensor in self.params.items():
            g = tensor.grad if tensor.grad is not None \
                else np.zeros_like(tensor.value)
            if self.l2:
                g = g + self.l2 * tensor.value
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            tensor.value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class TrainResult:
    model: Model
    loss_curve: list[float]
    skipped_trees: list[str]


def train(dataset: Dataset, config: TrainConfig,
          vocab: Vocabulary | None = None) -> TrainResult:
    """Train one model: prepare trees, then per epoch and per tree run
    forward, mean cross-entropy over labeled sinks, backward, Adam step.

    Trees with no labeled sink are skipped with a warning. A non-finite
    loss aborts with the offending epoch and tree.
    """
    if not dataset.trees:
        raise TrainingError("dataset has no trees")
    if vocab is None:
        vocab = load_default_vocabulary(dataset.vocab_version)
    spec = ModelSpec(
        variant=config.variant,
        d_input=config.d_input,
        d_hidden=config.d_hidden,
        max_children=config.max_children,
        classes=dataset.classes,
        vocab_version=dataset.vocab_version,
        head=config.head,
        siblings_source=config.siblings_source,
        restructuring=config.restructuring,
    )
    model = iornn.init_model(spec, vocab, config.seed)

    prepared = prepare_dataset(dataset, config.variant, config.max_children,
                               config.restructuring)
    skipped = [p.source.path for p in prepared if not p.labeled]
    for path in skipped:
        logger.warning("tree %r has no labeled sinks; skipped", path)
    trainable = [p for p in prepared if p.labeled]
    if not trainable:
        raise TrainingError("no tree has a labeled sink")

    optimizer = Adam(model.params, lr=config.learning_rate, l2=config.l2)
    loss_curve: list[float] = []
    for epoch in range(config.epochs):
        epoch_losses = []
        for p in trainable:
            try:
                tape, loss, _ = iornn.tree_loss(model, p.tree, p.labeled)
            except ad.AutodiffError as exc:
                raise DivergenceError(epoch, p.source.path, str(exc)) from exc
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(epoch, p.source.path, f"loss={value}")
            model.params.zero_grads()
            ad.backward(tape, loss)
            optimizer.step()
            epoch_losses.append(value)
        loss_curve.append(float(np.mean(epoch_losses)))
    return TrainResult(model=model, loss_curve=loss_curve, skipped_trees=skipped)


@dataclass
class Metrics:
    """Top-k accuracies plus confusion counts over labeled sinks."""

    n_labels: int
    topk: dict[int, float]
    confusion: dict[str, dict[str, int]] = field(default_factory=dict)
    dropped_labels: int = 0
    loss_curve: list[float] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "n_labels": self.n_labels,
            "topk": {str(k): v for k, v in sorted(self.topk.items())},
            "confusion": self.confusion,
            "dropped_labels": self.dropped_labels,
            "loss_curve": self.loss_curve,
        }


def rank_classes(logits: np.ndarray) -> np.ndarray:
    """Class indices by descending logit; ties go to the lower index."""
    return np.argsort(-logits.ravel(), kind="stable")


def _metrics_from_ranks(true_ranks, ks, class_names, confusion_pairs,
                        dropped=0) -> Metrics:
    n = len(true_ranks)
    topk = {k: (float(np.mean([r < k for r in true_ranks])) if n else 0.0)
            for k in ks}
    confusion: dict[str, dict[str, int]] = {}
    for true_name, pred_name in confusion_pairs:
        row = confusion.setdefault(true_name, {})
        row[pred_name] = row.get(pred_name, 0) + 1
    return Metrics(n_labels=n, topk=topk, confusion=confusion,
                   dropped_labels=dropped)


def evaluate_topk(model: Model, dataset: Dataset, ks=TOP_KS) -> Metrics:
    """Rank classes per labeled sink and score hit@k for each k."""
    if model.spec.classes != dataset.classes:
        raise TrainingError("model and dataset class sets differ")
    names = dataset.classes.names
    prepared = _prepare_for_model(model, dataset)
    true_ranks: list[int] = []
    pairs: list[tuple[str, str]] = []
    dropped = 0
    for p in prepared:
        dropped += p.dropped_labels
        if not p.labeled:
            continue
        result = iornn.forward(model, p.tree)
        for sink_id, true_class in p.labeled.items():
            order = rank_classes(result.logits[sink_id].value)
            rank = int(np.nonzero(order == true_class)[0][0])
            true_ranks.append(rank)
            pairs.append((names[true_class], names[order[0]]))
    return _metrics_from_ranks(true_ranks, ks, names, pairs, dropped)


def baseline_random(dataset: Dataset, seed: int, ks=TOP_KS,
                    n_draws: int | None = None) -> Metrics:
    """Uniform random ranking per labeled sink: the true class lands at a
    uniform position, so hit@k has expectation k/21."""
    labels = [lab for tree in dataset.trees for lab in tree.labels]
    n = n_draws if n_draws is not None else len(labels)
    if n == 0:
        return Metrics(n_labels=0, topk={k: 0.0 for k in ks})
    rng = np.random.default_rng(seed)
    positions = rng.integers(0, len(dataset.classes), size=n)
    topk = {k: float(np.mean(positions < k)) for k in ks}
    return Metrics(n_labels=n, topk=topk)


def majority_ranking(train: Dataset) -> list[int]:
    """Classes by descending training frequency, ties to the lower index."""
    counts = np.zeros(len(train.classes), dtype=int)
    total = 0
    for tree in train.trees:
        for lab in tree.labels:
            counts[lab.class_index] += 1
            total += 1
    if total == 0:
        raise TrainingError("majority baseline needs labeled training data")
    return list(np.argsort(-counts, kind="stable"))


def baseline_majority(train: Dataset, test: Dataset, ks=TOP_KS) -> Metrics:
    ranking = majority_ranking(train)
    position = {cls: i for i, cls in enumerate(ranking)}
    names = test.classes.names
    true_ranks = []
    pairs = []
    for tree in test.trees:
        for lab in tree.labels:
            true_ranks.append(position[lab.class_index])
            pairs.append((names[lab.class_index], names[ranking[0]]))
    return _metrics_from_ranks(true_ranks, ks, names, pairs)


def _subset(dataset: Dataset, trees) -> Dataset:
    return Dataset(classes=dataset.classes, vocab_version=dataset.vocab_version,
                   trees=tuple(trees))


def kfold_split(dataset: Dataset, k: int = 4, seed: int = 0):
    """Seeded shuffle, then k near-equal folds; each tree validates once."""
    n = len(dataset.trees)
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if n < k:
        raise TrainingError(f"need at least {k} trees for {k}-fold CV, have {n}")
    order = list(np.random.default_rng(seed).permutation(n))
    base, extra = divmod(n, k)
    folds = []
    start = 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        folds.append(order[start:start + size])
        start += size
    splits = []
    for i in range(k):
        val_ids = set(folds[i])
        train_trees = [dataset.trees[j] for j in order if j not in val_ids]
        val_trees = [dataset.trees[j] for j in folds[i]]
        splits.append((_subset(dataset, train_trees), _subset(dataset, val_trees)))
    return splits


def split_dataset(dataset: Dataset, split_file: str | None = None,
                  seed: int = 0):
    """Train/test split: explicit path lists from a split file, or a
    seeded 2:1 split."""
    if split_file is not None:
        with open(split_file, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        by_path = {t.path: t for t in dataset.trees}
        try:
            train = [by_path[p] for p in doc["train"]]
            test = [by_path[p] for p in doc["test"]]
        except KeyError as exc:
            raise TrainingError(f"split file references unknown tree {exc}") from None
        return _subset(dataset, train), _subset(dataset, test)
    n = len(dataset.trees)
    order = list(np.random.default_rng(seed).permutation(n))
    cut = max(1, (2 * n) // 3)
    train = [dataset.trees[i] for i in sorted(order[:cut])]
    test = [dataset.trees[i] for i in sorted(order[cut:])]
    return _subset(dataset, train), _subset(dataset, test)


def _max_workers() -> int:
    try:
        return max(1, int(os.environ.get("IOTYPER_THREADS", "1")))
    except ValueError:
        return 1


def _pool_map(fn, items):
    workers = _max_workers()
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def cross_validate(dataset: Dataset, config: TrainConfig, folds: int = 4):
    """Train/evaluate per fold; returns (per-fold Metrics, mean top-k)."""
    def run(split):
        train_set, val_set = split
        result = train(train_set, config)
        metrics = evaluate_topk(result.model, val_set)
        metrics.loss_curve = result.loss_curve
        return metrics

    fold_metrics = _pool_map(run, kfold_split(dataset, folds, config.seed))
    mean_topk = {k: float(np.mean([m.topk[k] for m in fold_metrics]))
                 for k in TOP_KS}
    return fold_metrics, mean_topk


def metrics_report(config: TrainConfig, fold_metrics, aggregate_topk) -> dict:
    return {
        "config": {
            "variant": config.variant,
            "d_input": config.d_input,
            "d_hidden": config.d_hidden,
            "max_children": config.max_children,
            "epochs": config.epochs,
            "lr": config.learning_rate,
            "l2": config.l2,
            "seed": config.seed,
            "restructuring": config.restructuring,
        },
        "folds": [
            {"topk": {str(k): v for k, v in sorted(m.topk.items())},
             "n_labels": m.n_labels,
             "loss_curve": m.loss_curve}
            for m in fold_metrics
        ],
        "aggregate": {
            "topk": {str(k): v for k, v in sorted(aggregate_topk.items())},
        },
    }


def restructuring_ablation(dataset: Dataset, config: TrainConfig,
                           k_values, split=None) -> list[dict]:
    """Paired same-seed train/test runs with and without restructuring for
    each branching bound; both arms start from identical parameters."""
    train_set, test_set = split if split is not None \
        else split_dataset(dataset, seed=config.seed)

    def run(args):
        k, with_restructuring = args
        cfg = replace(config, max_children=k, restructuring=with_restructuring)
        result = train(train_set, cfg)
        metrics = evaluate_topk(result.model, test_set)
        return {"max_children": k, "restructuring": with_restructuring,
                "top1": metrics.topk[1],
                "topk": {str(kk): v for kk, v in sorted(metrics.topk.items())},
                "n_labels": metrics.n_labels,
                "dropped_labels": metrics.dropped_labels}

    cells = [(k, arm) for k in k_values for arm in (True, False)]
    return _pool_map(run, cells)


def run_experiment_grid(dataset: Dataset, config: TrainConfig,
                        dims_grid=DEFAULT_DIMS_GRID, k_values=DEFAULT_K_SWEEP,
                        variants=(VARIANT_CHILDSUM, VARIANT_NARY),
                        folds: int = 4, split=None) -> dict:
    """Run the full experiment shapes: a (d_input, d_hidden) CV grid, a
    paired restructuring sweep over branching bounds, and top-1..5 tables.
    Empty grids produce empty sections."""
    report: dict = {"hyperparameters": [], "restructuring": [], "topk": []}

    for (d_in, d_hid) in dims_grid:
        for variant in variants:
            cfg = replace(config, variant=variant, d_input=d_in, d_hidden=d_hid)
            _, mean_topk = cross_validate(dataset, cfg, folds=folds)
            report["hyperparameters"].append({
                "d_input": d_in, "d_hidden": d_hid, "variant": variant,
                "cv_top1": mean_topk[1],
            })

    if k_values:
        train_test = split if split is not None \
            else split_dataset(dataset, seed=config.seed)
        for variant in variants:
            cfg = replace(config, variant=variant)
            for row in restructuring_ablation(dataset, cfg, k_values,
                                              split=train_test):
                row["variant"] = variant
                report["restructuring"].append(row)
        for variant in variants:
            cfg = replace(config, variant=variant)
            result = train(train_test[0], cfg)
            metrics = evaluate_topk(result.model, train_test[1])
            report["topk"].append({
                "variant": variant,
                "topk": {str(k): v for k, v in sorted(metrics.topk.items())},
            })
    return report


def render_report(report: dict) -> str:
    """Human-readable tables for a run_experiment_grid report."""
    lines = []
    if report.get("hyperparameters"):
        lines.append("CV accuracy by dimensions")
        lines.append(f"{'d_in':>5} {'d_hid':>6} {'variant':>10} {'top1':>8}")
        for row in report["hyperparameters"]:
            lines.append(f"{row['d_input']:>5} {row['d_hidden']:>6} "
                         f"{row['variant']:>10} {row['cv_top1']:>8.4f}")
        lines.append("")
    if report.get("restructuring"):
        lines.append("Test accuracy by max-children, with/without restructuring")
        lines.append(f"{'K':>4} {'variant':>10} {'restructured':>13} {'top1':>8}")
        for row in report["restructuring"]:
            lines.append(f"{row['max_children']:>4} {row['variant']:>10} "
                         f"{str(row['restructuring']):>13} {row['top1']:>8.4f}")
        lines.append("")
    if report.get("topk"):
        lines.append("Top-k accuracy")
        header = f"{'variant':>10}" + "".join(f"{'top' + str(k):>8}" for k in TOP_KS)
        lines.append(header)
        for row in report["topk"]:
            lines.append(f"{row['variant']:>10}" + "".join(
                f"{row['topk'][str(k)]:>8.4f}" for k in TOP_KS))
        lines.append("")
    return "\n".join(lines)
