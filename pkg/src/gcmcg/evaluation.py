"""Leave-group-of-subjects-out cross-validation and the classification metric suite."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .model import GCMCG, ModelConfig
from .train import TrainConfig, train

log = logging.getLogger(__name__)


class LeakageError(RuntimeError):
    pass


@dataclass(frozen=True)
class FoldPlan:
    N: int
    m: int
    test_subjects: tuple
    train_subjects: tuple


def lgso_groups(subjects, N):
    """Sorted unique subjects cut into N contiguous groups; the first |S| mod N get one extra."""
    subs = sorted(set(int(s) for s in subjects))
    if not 1 <= N <= len(subs):
        raise ValueError(f"need 1 <= N <= {len(subs)} subjects, got N={N}")
    base, extra = divmod(len(subs), N)
    groups, pos = [], 0
    for g in range(N):
        size = base + (1 if g < extra else 0)
        groups.append(subs[pos:pos + size])
        pos += size
    return groups


def lgso_split(subjects, N, m) -> FoldPlan:
    if not 1 <= m <= N:
        raise ValueError(f"group index m={m} must lie in [1, {N}]")
    groups = lgso_groups(subjects, N)
    test = tuple(groups[m - 1])
    train_ = tuple(s for g, grp in enumerate(groups) if g != m - 1 for s in grp)
    return FoldPlan(N, m, test, train_)


# ---------------------------------------------------------------------------
# metrics


def confusion_matrix(y_true, y_pred, n_classes):
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def _ratio(num, den):
    return np.divide(num, den, out=np.zeros_like(num, dtype=np.float64), where=den > 0)


def metrics(confusion):
    """Scalar metrics from a confusion matrix (rows = true class, columns = prediction)."""
    cm = np.asarray(confusion)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.size == 0:
        raise ValueError(f"confusion matrix must be square and non-empty, got {cm.shape}")
    if np.any(cm < 0):
        raise ValueError("confusion matrix has negative counts")
    cm = cm.astype(np.float64)
    total = cm.sum()
    if total == 0:
        raise ValueError("confusion matrix is empty (zero samples)")
    tp = np.diag(cm)
    precision = _ratio(tp, cm.sum(axis=0))
    recall = _ratio(tp, cm.sum(axis=1))
    f1 = _ratio(2 * precision * recall, precision + recall)
    p_o = tp.sum() / total
    p_e = float((cm.sum(axis=1) * cm.sum(axis=0)).sum() / total ** 2)
    kappa = 0.0 if p_e == 1.0 else (p_o - p_e) / (1.0 - p_e)
    return {
        "top1": float(p_o),
        "macro_precision": float(precision.mean()),
        "macro_recall": float(recall.mean()),
        "macro_f1": float(f1.mean()),
        "kappa": float(kappa),
        "precision": precision.tolist(),
        "recall": recall.tolist(),
        "f1": f1.tolist(),
    }


def roc_curve(scores, positive):
    """(fpr, tpr) over every distinct threshold, from (0, 0) to (1, 1)."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    order = np.argsort(-scores, kind="mergesort")
    s, pos = scores[order], positive[order]
    tp = np.cumsum(pos)
    fp = np.cumsum(~pos)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]  # close each tie group
    tpr = np.r_[0.0, tp[last] / pos.sum()]
    fpr = np.r_[0.0, fp[last] / (~pos).sum()]
    return fpr, tpr


def trapezoid_auc(fpr, tpr):
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def rank_auc(scores, positive):
    """Mann-Whitney U / (n_pos * n_neg) with mid-ranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    s = scores[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[j + 1] == s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    n_pos, n_neg = positive.sum(), (~positive).sum()
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_auc(scores, labels, n_classes):
    """One-vs-rest ROC per class; classes lacking positives or negatives are undefined (None)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    per_class, curves = [], []
    for q in range(n_classes):
        pos = labels == q
        if pos.all() or not pos.any():
            per_class.append(None)
            curves.append(None)
            continue
        fpr, tpr = roc_curve(scores[:, q], pos)
        per_class.append(trapezoid_auc(fpr, tpr))
        curves.append((fpr.tolist(), tpr.tolist()))
    defined = [a for a in per_class if a is not None]
    macro = float(np.mean(defined)) if defined else None
    return per_class, macro, curves


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    confusion: np.ndarray
    top1: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    kappa: float
    auc: list
    macro_auc: float | None
    roc: list = field(default_factory=list)
    per_class: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "confusion": np.asarray(self.confusion).tolist(),
            "top1": self.top1, "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall, "macro_f1": self.macro_f1, "kappa": self.kappa,
            "auc": self.auc, "macro_auc": self.macro_auc, "roc": self.roc,
            "per_class": self.per_class,
        }


def evaluate(probs, labels, n_classes) -> EvalReport:
    probs = np.asarray(probs)
    cm = confusion_matrix(labels, probs.argmax(axis=1), n_classes)
    m = metrics(cm)
    auc, macro, curves = roc_auc(probs, labels, n_classes)
    return EvalReport(cm, m["top1"], m["macro_precision"], m["macro_recall"], m["macro_f1"],
                      m["kappa"], auc, macro, curves,
                      {"precision": m["precision"], "recall": m["recall"], "f1": m["f1"]})


def write_confusion_csv(confusion, path, class_names=None):
    cm = np.asarray(confusion)
    names = class_names or [f"class{q}" for q in range(len(cm))]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred"] + list(names))
        for name, row in zip(names, cm):
            w.writerow([name] + [int(v) for v in row])


SCALARS = ("top1", "macro_precision", "macro_recall", "macro_f1", "kappa", "macro_auc")


@dataclass
class CvResult:
    plans: list
    reports: list
    histories: list
    clusters: list

    def aggregate(self):
        """Unweighted mean of each scalar metric over folds."""
        out = {}
        for key in SCALARS:
            vals = [getattr(r, key) for r in self.reports if getattr(r, key) is not None]
            out[key] = float(np.mean(vals)) if vals else None
        return out

    def to_dict(self):
        return {
            "folds": [{"m": p.m, "test_subjects": list(p.test_subjects),
                       "train_subjects": list(p.train_subjects), "report": r.to_dict(),
                       "clusters": None if c is None else c.to_dict()}
                      for p, r, c in zip(self.plans, self.reports, self.clusters)],
            "aggregate": self.aggregate(),
        }

    def write(self, json_path, folds_csv_path=None, extra=None):
        with open(json_path, "w") as fh:
            json.dump(dict(self.to_dict(), **(extra or {})), fh, indent=2, sort_keys=True)
            fh.write("\n")
        if folds_csv_path:
            with open(folds_csv_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["fold"] + list(SCALARS))
                for p, r in zip(self.plans, self.reports):
                    w.writerow([p.m] + [_num(getattr(r, k)) for k in SCALARS])
                agg = self.aggregate()
                w.writerow(["mean"] + [_num(agg[k]) for k in SCALARS])


def _num(v):
    return "" if v is None else repr(float(v))


def check_leakage(subjects, train_idx, test_idx):
    shared = np.intersect1d(train_idx, test_idx)
    if shared.size:
        raise LeakageError(f"trials {shared[:5].tolist()} appear in both train and test")
    overlap = set(np.asarray(subjects)[train_idx]) & set(np.asarray(subjects)[test_idx])
    if overlap:
        raise LeakageError(f"subjects {sorted(overlap)} appear in both train and test")


def run_cv(X, labels, subjects, graph, model_cfg: ModelConfig, train_cfg: TrainConfig, N,
           folds=None, progress=None) -> CvResult:
    """LGSO over ``N`` groups on already-preprocessed trials ``X``.

    Preprocessing is strictly per trial, so computing it once up front shares no
    statistics across the split. Cluster fitting sees training trials only.
    """
    labels = np.asarray(labels)
    subjects = np.asarray(subjects)
    result = CvResult([], [], [], [])
    for m in (folds or range(1, N + 1)):
        plan = lgso_split(subjects, N, m)
        test_idx = np.flatnonzero(np.isin(subjects, plan.test_subjects))
        train_idx = np.flatnonzero(np.isin(subjects, plan.train_subjects))
        check_leakage(subjects, train_idx, test_idx)
        model = GCMCG.create(model_cfg, graph if model_cfg.use_graph else None, seed=train_cfg.seed)
        hist = train(model, X[train_idx], labels[train_idx], train_cfg, progress=progress)
        probs, _, _ = model.infer(X[test_idx])
        report = evaluate(probs, labels[test_idx], model_cfg.n_classes)
        log.info("fold %d/%d: top1=%.4f macro_auc=%s", m, N, report.top1, report.macro_auc)
        result.plans.append(plan)
        result.reports.append(report)
        result.histories.append(hist)
        result.clusters.append(model.clusters)
    return result
