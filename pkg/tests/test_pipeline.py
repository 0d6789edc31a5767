import json

import numpy as np
import pytest

from sleepstage import pipeline
from sleepstage.edf import SleepStage
from sleepstage.errors import (
    BadMagic,
    EmptyDataset,
    EmptyInput,
    InvalidSpec,
    TooFewItems,
    TruncatedData,
)
from sleepstage.pipeline import (
    Dataset,
    TrainConfig,
    aggregate_reports,
    confusion_matrix,
    evaluate,
    holdout_split,
    kfold_split,
    load_dataset,
    metrics_from_confusion,
    mode_config,
    run_experiment,
    save_dataset,
    std_dev,
    train,
)


def brute_force_metrics(labels, preds):
    """Recount TP/TN/FP/FN per stage from raw (label, prediction) pairs."""
    labels, preds = list(labels), list(preds)
    n = len(labels)
    per_stage, f1s = [], []
    for s in range(5):
        tp = sum(1 for l, p in zip(labels, preds) if l == s and p == s)
        tn = sum(1 for l, p in zip(labels, preds) if l != s and p != s)
        fp = sum(1 for l, p in zip(labels, preds) if l != s and p == s)
        fn = sum(1 for l, p in zip(labels, preds) if l == s and p != s)
        per_stage.append(100.0 * (tp + tn) / n)
        f1s.append(2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0)
    overall = 100.0 * sum(1 for l, p in zip(labels, preds) if l == p) / n
    po = overall / 100.0
    pe = sum(
        (labels.count(s) / n) * (preds.count(s) / n) for s in range(5)
    )
    kappa = 1.0 if pe >= 1.0 and po >= 1.0 else (po - pe) / (1.0 - pe)
    return per_stage, overall, sum(f1s) / 5.0, kappa


def random_dataset(n=20, h=8, w=8, seed=0, labels=True):
    rng = np.random.default_rng(seed)
    return Dataset(
        images=rng.random((n, h, w)).astype(np.float32),
        labels=rng.integers(0, 5, n) if labels else None,
        seed=seed,
    )


class TestKfold:
    def test_singleton_folds(self):
        plan = kfold_split(20, 20, seed=0)
        sizes = np.bincount(plan.assignment, minlength=20)
        assert np.all(sizes == 1)

    def test_pigeonhole(self):
        plan = kfold_split(23, 20, seed=1)
        sizes = sorted(np.bincount(plan.assignment, minlength=20))
        assert sizes == [1] * 17 + [2] * 3

    def test_disjoint_exhaustive(self):
        plan = kfold_split(100, 20, seed=7)
        seen = np.zeros(100, dtype=int)
        for f in range(20):
            train_idx, test_idx = plan.fold_indices(f)
            assert np.intersect1d(train_idx, test_idx).size == 0
            assert np.union1d(train_idx, test_idx).size == 100
            seen[test_idx] += 1
        assert np.all(seen == 1)

    def test_random_triples_property(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            k = int(rng.integers(2, 21))
            n = int(rng.integers(k, 300))
            plan = kfold_split(n, k, int(rng.integers(0, 10_000)))
            sizes = np.bincount(plan.assignment, minlength=k)
            assert sizes.sum() == n
            assert sizes.max() - sizes.min() <= 1

    def test_too_few_items(self):
        with pytest.raises(TooFewItems):
            kfold_split(5, 20)

    def test_deterministic(self):
        a = kfold_split(50, 5, seed=9)
        b = kfold_split(50, 5, seed=9)
        assert np.array_equal(a.assignment, b.assignment)


class TestHoldout:
    def test_fifteen_percent_of_100(self):
        train_idx, test_idx = holdout_split(100, 0.15, seed=0)
        assert len(test_idx) == 15
        assert len(train_idx) == 85

    def test_minimum_one_test_item(self):
        train_idx, test_idx = holdout_split(2, 0.15, seed=0)
        assert len(test_idx) == 1
        assert len(train_idx) == 1

    def test_deterministic(self):
        assert all(
            np.array_equal(a, b)
            for a, b in zip(holdout_split(40, 0.15, 3), holdout_split(40, 0.15, 3))
        )

    def test_disjoint_exhaustive(self):
        train_idx, test_idx = holdout_split(57, 0.2, seed=4)
        assert np.intersect1d(train_idx, test_idx).size == 0
        assert np.union1d(train_idx, test_idx).size == 57

    def test_fraction_validated(self):
        with pytest.raises(InvalidSpec):
            holdout_split(10, 1.5)


class TestMetrics:
    def test_perfect_predictor(self):
        labels = [0, 1, 2, 3, 4] * 4
        conf = confusion_matrix(labels, labels)
        m = metrics_from_confusion(conf)
        assert m["overall_accuracy"] == 100.0
        assert m["cohen_kappa"] == pytest.approx(1.0)
        assert np.all(conf[~np.eye(5, dtype=bool)] == 0)

    def test_one_vs_rest_arithmetic(self):
        # stage 0: TP=3, TN=5, FP=1, FN=1 -> 80%
        conf = np.zeros((5, 5), dtype=int)
        conf[0, 0] = 3
        conf[0, 1] = 1
        conf[1, 0] = 1
        conf[1, 1] = 5
        m = metrics_from_confusion(conf)
        assert m["per_stage_accuracy"][0] == pytest.approx(80.0)

    def test_constant_predictor_kappa_zero(self):
        labels = [0, 1, 2, 3, 4] * 6
        preds = [2] * 30
        m = metrics_from_confusion(confusion_matrix(labels, preds))
        assert m["cohen_kappa"] == pytest.approx(0.0, abs=1e-12)

    def test_matches_brute_force_recount(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            n = int(rng.integers(10, 200))
            labels = rng.integers(0, 5, n)
            preds = rng.integers(0, 5, n)
            conf = confusion_matrix(labels, preds)
            assert conf.sum() == n
            m = metrics_from_confusion(conf)
            ps, overall, f1, kappa = brute_force_metrics(labels, preds)
            assert np.allclose(m["per_stage_accuracy"], ps, atol=1e-12)
            assert m["overall_accuracy"] == pytest.approx(overall, abs=1e-12)
            assert m["macro_f1"] == pytest.approx(f1, abs=1e-12)
            assert m["cohen_kappa"] == pytest.approx(kappa, abs=1e-12)

    def test_empty_confusion(self):
        with pytest.raises(EmptyDataset):
            metrics_from_confusion(np.zeros((5, 5)))


class TestStdDev:
    def test_textbook_sequence(self):
        assert std_dev([2, 4, 4, 4, 5, 5, 7, 9]) == pytest.approx(2.0, abs=1e-12)

    def test_constant(self):
        assert std_dev([3.3] * 10) == 0.0

    def test_singleton(self):
        assert std_dev([42.0]) == 0.0

    def test_empty(self):
        with pytest.raises(EmptyInput):
            std_dev([])


class TestTrain:
    def test_zero_epochs_returns_initialized_network(self):
        ds = random_dataset(n=12)
        cfg = TrainConfig(epochs=0, seed=1, oversample=False)
        net, history = train(ds, cfg)
        assert history == []
        from sleepstage.nn import Network

        fresh = Network.build((1, 8, 8), cfg.network_config(), seed=1)
        assert all(
            np.array_equal(a, b)
            for a, b in zip(net.parameters(), fresh.parameters())
        )

    def test_deterministic(self):
        ds = random_dataset(n=16, seed=2)
        cfg = TrainConfig(epochs=2, batch_size=4, seed=3)
        n1, h1 = train(ds, cfg)
        n2, h2 = train(ds, cfg)
        assert h1 == h2
        assert all(np.array_equal(a, b) for a, b in zip(n1.parameters(), n2.parameters()))

    def test_none_optimizer_keeps_parameters(self):
        ds = random_dataset(n=8, seed=4)
        cfg = TrainConfig(epochs=1, optimizer="none", seed=5, oversample=False)
        net, history = train(ds, cfg)
        from sleepstage.nn import Network

        fresh = Network.build((1, 8, 8), cfg.network_config(), seed=5)
        assert all(
            np.array_equal(a, b) for a, b in zip(net.parameters(), fresh.parameters())
        )
        assert len(history) == 1

    def test_history_loss_finite(self):
        ds = random_dataset(n=10, seed=6)
        _, history = train(ds, TrainConfig(epochs=2, seed=0))
        assert all(np.isfinite(h["loss"]) for h in history)

    def test_oversample_balances_training_set(self):
        rng = np.random.default_rng(7)
        ds = Dataset(
            images=rng.random((10, 8, 8)).astype(np.float32),
            labels=np.array([0] * 7 + [3] * 3),
        )
        balanced = pipeline._oversample_dataset(ds, seed=0)
        counts = balanced.class_counts()
        assert counts[SleepStage.Wake] == 7
        assert counts[SleepStage.SWS] == 7

    def test_empty_dataset(self):
        with pytest.raises(EmptyDataset):
            train(Dataset(np.zeros((0, 4, 4), dtype=np.float32), np.zeros(0)), TrainConfig())

    def test_f32_precision_mode(self):
        ds = random_dataset(n=8, seed=8)
        cfg = TrainConfig(epochs=1, seed=0, precision="f32", oversample=False)
        net, _ = train(ds, cfg)
        for p in net.parameters():
            assert np.array_equal(p, p.astype(np.float32).astype(np.float64))


class TestEvaluate:
    def test_report_consistent_with_confusion(self):
        ds = random_dataset(n=20, seed=9)
        ds.labels = np.array([0, 1, 2, 3, 4] * 4)
        from sleepstage.nn import Network

        net = Network.build((1, 8, 8), TrainConfig().network_config(), seed=2)
        report = evaluate(net, ds)
        m = metrics_from_confusion(report.confusion)
        assert report.overall_accuracy == pytest.approx(m["overall_accuracy"])
        assert report.macro_f1 == pytest.approx(m["macro_f1"])
        assert report.confusion.sum() == len(ds)

    def test_empty_dataset(self):
        from sleepstage.nn import Network

        net = Network.build((1, 8, 8), TrainConfig().network_config(), seed=0)
        with pytest.raises(EmptyDataset):
            evaluate(net, Dataset(np.zeros((0, 8, 8), dtype=np.float32), np.zeros(0)))


class TestRunExperiment:
    def test_kfold_reports_and_aggregate(self):
        ds = random_dataset(n=24, seed=10)
        cfg = TrainConfig(epochs=1, batch_size=8, seed=0)
        result = run_experiment(ds, cfg, mode="kfold", k=4)
        assert len(result.reports) == 4
        # every item evaluated exactly once across folds
        assert sum(r.confusion.sum() for r in result.reports) == 24
        agg = result.aggregate
        assert agg.overall_accuracy == pytest.approx(
            np.mean([r.overall_accuracy for r in result.reports])
        )
        assert agg.std_dev is not None
        assert agg.std_dev["overall_accuracy"] == pytest.approx(
            std_dev([r.overall_accuracy for r in result.reports])
        )

    def test_holdout_mode(self):
        ds = random_dataset(n=20, seed=11)
        result = run_experiment(
            ds, TrainConfig(epochs=1, seed=0), mode="holdout", test_fraction=0.15
        )
        assert len(result.reports) == 1
        assert result.reports[0].confusion.sum() == 3

    def test_deterministic_reports(self):
        ds = random_dataset(n=15, seed=12)
        cfg = TrainConfig(epochs=1, batch_size=8, seed=7)
        r1 = run_experiment(ds, cfg, mode="holdout")
        r2 = run_experiment(ds, cfg, mode="holdout")
        assert pipeline.reports_to_json(r1.reports, r1.aggregate) == pipeline.reports_to_json(
            r2.reports, r2.aggregate
        )

    def test_parallel_folds_match_serial(self):
        ds = random_dataset(n=12, seed=13)
        cfg = TrainConfig(epochs=1, batch_size=4, seed=1)
        serial = run_experiment(ds, cfg, mode="kfold", k=3, jobs=1)
        parallel = run_experiment(ds, cfg, mode="kfold", k=3, jobs=2)
        assert pipeline.reports_to_json(serial.reports) == pipeline.reports_to_json(
            parallel.reports
        )


class TestDatasetCache:
    def test_roundtrip_labeled(self):
        ds = random_dataset(n=7, seed=14)
        out = load_dataset(save_dataset(ds))
        assert np.array_equal(out.images, ds.images)
        assert np.array_equal(out.labels, ds.labels)

    def test_roundtrip_unlabeled(self):
        ds = random_dataset(n=4, seed=15, labels=False)
        out = load_dataset(save_dataset(ds))
        assert out.labels is None
        assert np.array_equal(out.images, ds.images)

    def test_bad_magic(self):
        ds = random_dataset(n=2)
        blob = bytearray(save_dataset(ds))
        blob[:8] = b"WRONGBAD"
        with pytest.raises(BadMagic):
            load_dataset(bytes(blob))

    def test_truncated(self):
        ds = random_dataset(n=3)
        with pytest.raises(TruncatedData):
            load_dataset(save_dataset(ds)[:-2])


class TestReportSerialization:
    def make_reports(self):
        rng = np.random.default_rng(16)
        reports = []
        for _ in range(3):
            labels = rng.integers(0, 5, 30)
            preds = rng.integers(0, 5, 30)
            conf = confusion_matrix(labels, preds)
            m = metrics_from_confusion(conf)
            reports.append(
                pipeline.MetricsReport(
                    confusion=conf,
                    per_stage_accuracy=m["per_stage_accuracy"],
                    overall_accuracy=m["overall_accuracy"],
                    macro_f1=m["macro_f1"],
                    cohen_kappa=m["cohen_kappa"],
                    processing_time_s=1.23,
                )
            )
        return reports

    def test_json_shape_and_timing_flag(self):
        reports = self.make_reports()
        agg = aggregate_reports(reports)
        doc = json.loads(pipeline.reports_to_json(reports, agg))
        assert len(doc["folds"]) == 3
        assert "processing_time_s" not in doc["folds"][0]
        assert "std_dev" in doc["aggregate"]
        doc_timed = json.loads(pipeline.reports_to_json(reports, agg, include_timing=True))
        assert doc_timed["folds"][0]["processing_time_s"] == 1.23

    def test_csv_rows(self):
        reports = self.make_reports()
        agg = aggregate_reports(reports)
        lines = pipeline.reports_to_csv(reports, agg).strip().splitlines()
        assert len(lines) == 1 + 3 + 1
        assert lines[0].startswith("fold,overall_accuracy,macro_f1,cohen_kappa")
        assert lines[-1].startswith("aggregate,")
        assert "processing_time_s" not in lines[0]
