import json
import math

import numpy as np
import pytest

from iotyper import autodiff as ad
from iotyper import iornn, training
from iotyper.astmodel import ClassSet, Dataset, LabeledTree, parse_dataset
from iotyper.training import (Adam, DivergenceError, TrainConfig, TrainingError,
                              baseline_majority, baseline_random, cross_validate,
                              evaluate_topk, kfold_split, metrics_report,
                              prepare_tree, rank_classes, restructuring_ablation,
                              run_experiment_grid, split_dataset, train)
from synthcorpus import synth_corpus_json
from treeutil import NodeFactory, fig1a_dataset_json


def small_corpus(seed=0, n=6, stmts=(3, 6)):
    return parse_dataset(synth_corpus_json(seed, n_programs=n,
                                           statements_range=stmts))


def trivial_dataset(n_trees, with_labels=False):
    trees = []
    for i in range(n_trees):
        factory = NodeFactory()
        if with_labels:
            root = factory("Module", factory(
                "Assign", factory("Name", name="a"), factory("Num")))
            labels = [{"scope": "<module>", "name": "a", "type": "int"}]
        else:
            root = factory("Module", factory("Pass"))
            labels = []
        from iotyper.astmodel import Label
        trees.append(LabeledTree(
            path=f"t{i}.py", root=root,
            labels=tuple(Label(lab["scope"], lab["name"], lab["type"],
                               ClassSet().index_of(lab["type"]))
                         for lab in labels)))
    return Dataset(classes=ClassSet(), vocab_version="v1", trees=tuple(trees))


def reference_adam(theta0, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8,
                   l2=0.0):
    """Straight-line transcription of the update formulas."""
    theta = np.array(theta0, dtype=float)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    history = []
    for t, g in enumerate(grads, start=1):
        g = np.asarray(g, dtype=float) + l2 * theta
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
        history.append(theta.copy())
    return history


class TestAdam:
    def test_zero_gradient_without_l2_leaves_params_unchanged(self):
        params = ad.ParameterStore()
        w = params.add("w", np.array([[0.5, -0.25]]))
        before = w.value.copy()
        opt = Adam(params, lr=0.01, l2=0.0)
        w.grad = np.zeros_like(w.value)
        opt.step()
        assert np.array_equal(w.value, before)

    def test_first_step_closed_form(self):
        params = ad.ParameterStore()
        w = params.add("w", np.zeros((1, 1)))
        opt = Adam(params, lr=0.01)
        w.grad = np.ones((1, 1))
        opt.step()
        expected = -0.01 * (1.0 / (1.0 + 1e-8))
        assert w.value[0, 0] == pytest.approx(expected, abs=1e-12)

    def test_sequence_matches_reference(self):
        rng = np.random.default_rng(8)
        theta0 = rng.normal(size=(3, 2))
        grads = [rng.normal(size=(3, 2)) for _ in range(7)]
        params = ad.ParameterStore()
        w = params.add("w", theta0.copy())
        opt = Adam(params, lr=0.05, l2=3e-4)
        mine = []
        for g in grads:
            w.grad = g.copy()
            opt.step()
            mine.append(w.value.copy())
        ref = reference_adam(theta0, grads, lr=0.05, l2=3e-4)
        for a, b in zip(mine, ref):
            assert np.allclose(a, b, atol=1e-12)

    def test_l2_with_zero_gradient_shrinks_parameters(self):
        params = ad.ParameterStore()
        rng = np.random.default_rng(1)
        w = params.add("w", rng.uniform(0.2, 1.0, size=(4, 3))
                       * rng.choice([-1.0, 1.0], size=(4, 3)))
        before = w.value.copy()
        opt = Adam(params, lr=0.01, l2=1e-5)
        w.grad = np.zeros_like(w.value)
        opt.step()
        assert (np.abs(w.value) < np.abs(before)).all()
        assert (np.sign(w.value) == np.sign(before)).all()


class TestKFold:
    def test_24_trees_4_folds_of_6(self):
        splits = kfold_split(trivial_dataset(24), k=4, seed=0)
        assert len(splits) == 4
        for train_part, val_part in splits:
            assert len(val_part.trees) == 6
            assert len(train_part.trees) == 18

    def test_4_trees_4_folds_of_1(self):
        splits = kfold_split(trivial_dataset(4), k=4, seed=0)
        assert [len(v.trees) for _, v in splits] == [1, 1, 1, 1]

    def test_folds_partition_the_dataset(self):
        ds = trivial_dataset(10)
        splits = kfold_split(ds, k=3, seed=5)
        seen = []
        for train_part, val_part in splits:
            val_paths = {t.path for t in val_part.trees}
            train_paths = {t.path for t in train_part.trees}
            assert not val_paths & train_paths
            seen.extend(val_paths)
        assert sorted(seen) == sorted(t.path for t in ds.trees)

    def test_fewer_trees_than_folds_is_an_error(self):
        with pytest.raises(TrainingError):
            kfold_split(trivial_dataset(3), k=4)


class TestEvaluate:
    def _model_and_data(self):
        ds = small_corpus(seed=3, n=4)
        cfg = TrainConfig(variant="childsum", d_input=4, d_hidden=4,
                          max_children=6, epochs=2, seed=1)
        return train(ds, cfg).model, ds

    def test_full_k_accuracy_is_one(self):
        model, ds = self._model_and_data()
        metrics = evaluate_topk(model, ds, ks=(1, 3, 21))
        assert metrics.topk[21] == 1.0

    def test_topk_is_monotone(self):
        model, ds = self._model_and_data()
        metrics = evaluate_topk(model, ds)
        values = [metrics.topk[k] for k in sorted(metrics.topk)]
        assert values == sorted(values)
        assert all(0.0 <= v <= 1.0 for v in values)

    def test_class_set_mismatch_rejected(self):
        model, _ = self._model_and_data()
        shuffled = list(model.spec.classes.names)
        shuffled[0], shuffled[1] = shuffled[1], shuffled[0]
        other = Dataset(classes=ClassSet(shuffled), vocab_version="v1",
                        trees=trivial_dataset(1).trees)
        with pytest.raises(TrainingError):
            evaluate_topk(model, other)

    def test_rank_ties_break_to_lower_class_index(self):
        logits = np.zeros((21, 1))
        logits[5, 0] = 1.0
        order = rank_classes(logits)
        assert order[0] == 5
        assert list(order[1:6]) == [0, 1, 2, 3, 4]


class TestBaselines:
    def test_random_is_near_chance_over_1e5_draws(self):
        ds = trivial_dataset(1, with_labels=True)
        metrics = baseline_random(ds, seed=0, n_draws=100_000)
        assert abs(metrics.topk[1] - 1.0 / 21.0) < 0.005

    def test_majority_equals_analytic_frequency(self):
        train_ds = small_corpus(seed=5, n=6)
        test_ds = small_corpus(seed=7, n=4)
        metrics = baseline_majority(train_ds, test_ds)
        ranking = training.majority_ranking(train_ds)
        test_labels = [lab for t in test_ds.trees for lab in t.labels]
        freq = sum(lab.class_index == ranking[0]
                   for lab in test_labels) / len(test_labels)
        assert metrics.topk[1] == pytest.approx(freq, abs=0)

    def test_single_class_dataset_gives_majority_accuracy_one(self):
        ds = trivial_dataset(3, with_labels=True)
        metrics = baseline_majority(ds, ds)
        assert metrics.topk[1] == 1.0

    def test_majority_requires_labels(self):
        with pytest.raises(TrainingError):
            baseline_majority(trivial_dataset(2), trivial_dataset(2))


class TestTrain:
    def test_fig1a_overfit_with_full_train_accuracy(self):
        ds = parse_dataset(fig1a_dataset_json())
        cfg = TrainConfig(variant="childsum", d_input=6, d_hidden=8,
                          max_children=4, epochs=200, seed=0)
        result = train(ds, cfg)
        assert result.loss_curve[-1] < math.log(21)
        metrics = evaluate_topk(result.model, ds)
        assert metrics.topk[1] == 1.0
        names = ds.classes.names
        prepared = prepare_tree(ds.trees[0], "childsum", 4, True)
        fwd = iornn.forward(result.model, prepared.tree)
        for sink in prepared.tree.sinks:
            top = rank_classes(fwd.logits[sink.sink_id].value)[0]
            assert names[top] == "int"

    def test_epochs_zero_returns_untrained_model(self):
        ds = small_corpus(seed=11, n=3)
        cfg = TrainConfig(epochs=0, d_input=3, d_hidden=3, max_children=5)
        result = train(ds, cfg)
        assert result.loss_curve == []
        assert np.array_equal(result.model.params["W_c"].value,
                              np.zeros((21, 3)))

    def test_initial_loss_is_ln21_per_labeled_sink(self):
        ds = small_corpus(seed=13, n=4)
        cfg = TrainConfig(epochs=0, d_input=3, d_hidden=3, max_children=6,
                          seed=9)
        model = train(ds, cfg).model
        prepared = training.prepare_dataset(ds, cfg.variant, cfg.max_children,
                                            cfg.restructuring)
        for p in prepared:
            _tape, loss, _ = iornn.tree_loss(model, p.tree, p.labeled)
            assert loss.item() == pytest.approx(math.log(21), abs=1e-9)

    def test_same_seed_gives_identical_loss_curves(self):
        ds = small_corpus(seed=17, n=3)
        cfg = TrainConfig(d_input=3, d_hidden=3, max_children=6, epochs=4,
                          seed=4)
        c1 = train(ds, cfg).loss_curve
        c2 = train(ds, cfg).loss_curve
        assert c1 == c2

    def test_unlabeled_trees_are_skipped_with_warning(self, caplog):
        labeled = trivial_dataset(2, with_labels=True)
        unlabeled = trivial_dataset(1)
        ds = Dataset(classes=labeled.classes, vocab_version="v1",
                     trees=labeled.trees + unlabeled.trees)
        cfg = TrainConfig(d_input=2, d_hidden=2, max_children=4, epochs=1)
        with caplog.at_level("WARNING"):
            result = train(ds, cfg)
        assert result.skipped_trees == ["t0.py"]
        assert any("no labeled sinks" in r.message for r in caplog.records)

    def test_divergence_aborts_with_epoch_and_tree(self):
        ds = parse_dataset(fig1a_dataset_json())
        cfg = TrainConfig(d_input=4, d_hidden=4, max_children=4, epochs=50,
                          learning_rate=1e14, seed=0)
        with pytest.raises(DivergenceError):
            train(ds, cfg)

    def test_nary_variant_trains(self):
        ds = small_corpus(seed=19, n=3)
        cfg = TrainConfig(variant="nary", d_input=3, d_hidden=3,
                          max_children=6, epochs=2, seed=2)
        result = train(ds, cfg)
        assert len(result.loss_curve) == 2


class TestSplits:
    def test_default_split_is_two_to_one(self):
        ds = trivial_dataset(30)
        train_part, test_part = split_dataset(ds, seed=0)
        assert len(train_part.trees) == 20
        assert len(test_part.trees) == 10

    def test_split_file_is_honored(self, tmp_path):
        ds = trivial_dataset(4)
        split = {"train": ["t0.py", "t2.py"], "test": ["t1.py", "t3.py"]}
        path = tmp_path / "split.json"
        path.write_text(json.dumps(split))
        train_part, test_part = split_dataset(ds, str(path))
        assert [t.path for t in train_part.trees] == ["t0.py", "t2.py"]
        assert [t.path for t in test_part.trees] == ["t1.py", "t3.py"]

    def test_split_file_with_unknown_path_errors(self, tmp_path):
        ds = trivial_dataset(2)
        path = tmp_path / "split.json"
        path.write_text(json.dumps({"train": ["nope.py"], "test": []}))
        with pytest.raises(TrainingError):
            split_dataset(ds, str(path))


class TestReports:
    def test_metrics_report_shape(self):
        ds = small_corpus(seed=23, n=4)
        cfg = TrainConfig(d_input=3, d_hidden=3, max_children=6, epochs=1,
                          seed=0)
        folds, mean_topk = cross_validate(ds, cfg, folds=2)
        report = metrics_report(cfg, folds, mean_topk)
        assert set(report) == {"config", "folds", "aggregate"}
        assert len(report["folds"]) == 2
        assert set(report["folds"][0]["topk"]) == {"1", "2", "3", "4", "5"}

    def test_empty_grid_gives_empty_report(self):
        ds = small_corpus(seed=29, n=4)
        cfg = TrainConfig(d_input=3, d_hidden=3, max_children=6, epochs=1)
        report = run_experiment_grid(ds, cfg, dims_grid=(), k_values=())
        assert report == {"hyperparameters": [], "restructuring": [],
                          "topk": []}

    def test_grid_rows_mirror_table_shapes(self):
        ds = small_corpus(seed=31, n=6, stmts=(3, 5))
        cfg = TrainConfig(d_input=3, d_hidden=3, max_children=5, epochs=1,
                          seed=0)
        report = run_experiment_grid(
            ds, cfg, dims_grid=((3, 3), (3, 4)), k_values=(4, 5),
            variants=("childsum",), folds=2)
        assert len(report["hyperparameters"]) == 2
        assert len(report["restructuring"]) == 4  # 2 K values x 2 arms
        assert len(report["topk"]) == 1
        text = training.render_report(report)
        assert "max-children" in text

    def test_ablation_rows_are_paired(self):
        ds = small_corpus(seed=37, n=6, stmts=(4, 7))
        cfg = TrainConfig(d_input=3, d_hidden=3, max_children=4, epochs=1,
                          seed=1)
        rows = restructuring_ablation(ds, cfg, k_values=(4,))
        arms = {(r["max_children"], r["restructuring"]) for r in rows}
        assert arms == {(4, True), (4, False)}

    def test_worker_pool_reproduces_serial_results(self, monkeypatch):
        ds = small_corpus(seed=41, n=4)
        cfg = TrainConfig(d_input=3, d_hidden=3, max_children=6, epochs=2,
                          seed=6)
        monkeypatch.delenv("IOTYPER_THREADS", raising=False)
        serial, serial_topk = cross_validate(ds, cfg, folds=2)
        monkeypatch.setenv("IOTYPER_THREADS", "3")
        pooled, pooled_topk = cross_validate(ds, cfg, folds=2)
        assert serial_topk == pooled_topk
        assert [m.topk for m in serial] == [m.topk for m in pooled]
