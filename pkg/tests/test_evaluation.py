import json

import numpy as np
import pytest
from conftest import toy_config, toy_graph
from hypothesis import given, settings
from hypothesis import strategies as st

from gcmcg import evaluation as ev
from gcmcg.train import TrainConfig


def brute_metrics(cm):
    """Per-definition recomputation with explicit loops."""
    q = len(cm)
    total = sum(cm[i][j] for i in range(q) for j in range(q))
    prec, rec, f1 = [], [], []
    for k in range(q):
        tp = cm[k][k]
        fp = sum(cm[i][k] for i in range(q) if i != k)
        fn = sum(cm[k][j] for j in range(q) if j != k)
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        prec.append(p)
        rec.append(r)
        f1.append(2 * p * r / (p + r) if p + r else 0.0)
    p_o = sum(cm[k][k] for k in range(q)) / total
    p_e = sum(sum(cm[k]) * sum(cm[i][k] for i in range(q)) for k in range(q)) / total ** 2
    kappa = (p_o - p_e) / (1 - p_e) if p_e != 1 else 0.0
    return {"top1": p_o, "macro_precision": sum(prec) / q, "macro_recall": sum(rec) / q,
            "macro_f1": sum(f1) / q, "kappa": kappa}


class TestLgso:
    def test_ten_by_three(self):
        assert [len(g) for g in ev.lgso_groups(range(10), 3)] == [4, 3, 3]

    def test_loso(self):
        assert ev.lgso_groups([7, 3, 5], 3) == [[3], [5], [7]]

    def test_partition_all_sizes(self):
        for n_subj in range(3, 31):
            subjects = list(range(100, 100 + n_subj))
            for N in range(2, n_subj + 1):
                tests = [ev.lgso_split(subjects, N, m).test_subjects for m in range(1, N + 1)]
                flat = [s for t in tests for s in t]
                assert sorted(flat) == subjects
                sizes = [len(t) for t in tests]
                base, extra = divmod(n_subj, N)
                assert sizes == [base + 1] * extra + [base] * (N - extra)
                plan = ev.lgso_split(subjects, N, 1)
                assert set(plan.test_subjects).isdisjoint(plan.train_subjects)

    def test_repeated_ids_and_determinism(self):
        subjects = [2, 2, 1, 1, 0, 0, 3]
        assert ev.lgso_split(subjects, 2, 1) == ev.lgso_split(subjects, 2, 1)
        assert ev.lgso_split(subjects, 2, 1).test_subjects == (0, 1)

    def test_errors(self):
        with pytest.raises(ValueError):
            ev.lgso_split([1, 2], 3, 1)
        with pytest.raises(ValueError):
            ev.lgso_split([1, 2], 2, 3)


class TestMetrics:
    def test_diagonal(self):
        m = ev.metrics(np.diag([5, 3, 7]))
        assert m["top1"] == 1.0 and m["macro_f1"] == 1.0 and m["kappa"] == 1.0

    def test_predict_one_class(self):
        m = ev.metrics(np.array([[50, 0], [50, 0]]))
        assert m["top1"] == 0.5 and m["kappa"] == 0.0

    def test_random_matrices(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            q = int(rng.integers(2, 6))
            cm = rng.integers(0, 20, size=(q, q))
            cm[0, 0] += 1
            got, want = ev.metrics(cm), brute_metrics(cm.tolist())
            for key, val in want.items():
                assert abs(got[key] - val) <= 1e-12, key

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 5).flatmap(lambda q: st.lists(st.integers(0, 30), min_size=q * q, max_size=q * q)))
    def test_ranges(self, flat):
        q = int(round(len(flat) ** 0.5))
        cm = np.array(flat).reshape(q, q)
        if cm.sum() == 0:
            return
        m = ev.metrics(cm)
        assert 0.0 <= m["macro_f1"] <= 1.0
        assert -1.0 <= m["kappa"] <= 1.0
        assert 0.0 <= m["top1"] <= 1.0

    def test_errors(self):
        with pytest.raises(ValueError, match="empty"):
            ev.metrics(np.zeros((2, 2)))
        with pytest.raises(ValueError, match="square"):
            ev.metrics(np.ones((2, 3)))
        with pytest.raises(ValueError, match="negative"):
            ev.metrics(np.array([[1, -1], [0, 1]]))

    def test_confusion_counts(self):
        cm = ev.confusion_matrix([0, 1, 1, 2], [0, 2, 1, 2], 3)
        np.testing.assert_array_equal(cm, [[1, 0, 0], [0, 1, 1], [0, 0, 1]])


class TestAuc:
    def test_perfect(self):
        s = np.array([0.1, 0.2, 0.8, 0.9])
        fpr, tpr = ev.roc_curve(s, [0, 0, 1, 1])
        assert ev.trapezoid_auc(fpr, tpr) == 1.0

    def test_random_scores(self):
        rng = np.random.default_rng(1)
        s, y = rng.random(10 ** 4), rng.integers(0, 2, 10 ** 4).astype(bool)
        assert abs(ev.trapezoid_auc(*ev.roc_curve(s, y)) - 0.5) < 0.02

    def test_trapezoid_equals_rank(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            n = int(rng.integers(5, 200))
            s = np.round(rng.normal(size=n), int(rng.integers(0, 3)))  # rounding creates ties
            y = rng.random(n) < 0.4
            if y.all() or not y.any():
                continue
            assert abs(ev.trapezoid_auc(*ev.roc_curve(s, y)) - ev.rank_auc(s, y)) <= 1e-12

    def test_monotone_invariance(self):
        rng = np.random.default_rng(3)
        s, y = rng.random(300), rng.random(300) < 0.5
        a = ev.trapezoid_auc(*ev.roc_curve(s, y))
        b = ev.trapezoid_auc(*ev.roc_curve(np.exp(3 * s) - 7, y))
        assert abs(a - b) <= 1e-12

    def test_matches_sklearn(self):
        metrics = pytest.importorskip("sklearn.metrics")
        rng = np.random.default_rng(4)
        s, y = rng.normal(size=400), rng.random(400) < 0.3
        assert ev.rank_auc(s, y) == pytest.approx(metrics.roc_auc_score(y, s), abs=1e-12)

    def test_undefined_class_excluded(self):
        scores = np.array([[0.7, 0.2, 0.1], [0.2, 0.7, 0.1], [0.6, 0.3, 0.1]])
        per, macro, _ = ev.roc_auc(scores, np.array([0, 1, 0]), 3)
        assert per[2] is None
        assert macro == pytest.approx(np.mean([per[0], per[1]]))


class TestReports:
    def test_evaluate_and_csv(self, tmp_path):
        probs = np.array([[0.8, 0.2], [0.3, 0.7], [0.6, 0.4]])
        rep = ev.evaluate(probs, np.array([0, 1, 1]), 2)
        assert rep.confusion.sum() == 3
        assert rep.top1 == pytest.approx(2 / 3)
        ev.write_confusion_csv(rep.confusion, tmp_path / "cm.csv", ["left", "right"])
        assert (tmp_path / "cm.csv").read_text().splitlines() == ["true\\pred,left,right", "left,1,0", "right,1,1"]
        json.dumps(rep.to_dict())

    def test_leakage(self):
        subjects = np.array([0, 0, 1, 1])
        with pytest.raises(ev.LeakageError, match="subjects"):
            ev.check_leakage(subjects, np.array([0, 2]), np.array([3]))
        with pytest.raises(ev.LeakageError, match="trials"):
            ev.check_leakage(subjects, np.array([0, 1]), np.array([1]))


class TestRunCv:
    def test_two_folds(self, tmp_path):
        rng = np.random.default_rng(5)
        subjects = np.repeat([0, 1, 2, 3], 6)
        y = np.tile([0, 1, 2], 8)
        X = rng.normal(size=(24, 6, 32))
        cfg = TrainConfig(epochs_stage1=1, epochs_stage2=1, epochs_stage3=1, warmup_epochs=1, batch=12)
        res = ev.run_cv(X, y, subjects, toy_graph(), toy_config(), cfg, N=2)
        assert [p.test_subjects for p in res.plans] == [(0, 1), (2, 3)]
        agg = res.aggregate()
        assert agg["top1"] == pytest.approx(np.mean([r.top1 for r in res.reports]))
        res.write(tmp_path / "cv.json", tmp_path / "folds.csv")
        assert len((tmp_path / "folds.csv").read_text().splitlines()) == 4
        assert json.loads((tmp_path / "cv.json").read_text())["aggregate"]["top1"] == agg["top1"]
