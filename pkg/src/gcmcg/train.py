"""Losses, progressively balanced sampling and the three-stage training schedule."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .cluster import cluster_channels, signal_embeddings
from .model import GCMCG, gate_entropy, lws_logits

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
HISTORY_COLUMNS = ["epoch", "stage", "loss", "cls_loss", "gate_entropy", "train_acc", "val_acc", "lr"]


class FreezeViolation(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs_stage1: int = 30
    epochs_stage2: int = 10
    epochs_stage3: int = 5
    warmup_epochs: int = 5
    batch: int = 32
    lr: float = 1e-3
    lr_stage3: float = 1e-2
    lambda_gate: float = 0.01
    focal_gamma: float = 2.0
    class_weights: str = "inverse"  # or "uniform"
    stage3_loss: str = "focal"  # or "ce"
    clip_norm: float = 5.0
    seed: int = 0
    k_min: int = 2
    k_max: int = 10
    freeze_tokenizer: bool = False

    def __post_init__(self):
        for name in ("epochs_stage1", "epochs_stage2", "epochs_stage3", "warmup_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.lambda_gate < 0 or self.focal_gamma < 0:
            raise ValueError("lambda_gate and focal_gamma must be >= 0")
        if self.stage3_loss not in ("focal", "ce"):
            raise ValueError("stage3_loss must be 'focal' or 'ce'")


# ---------------------------------------------------------------------------
# losses


def _true_class_prob(p, y):
    p = p if isinstance(p, dc.Tensor) else dc.Tensor(p)
    y = np.asarray(y)
    if y.ndim == 2:  # one-hot
        return dc.sum_(p * y, axis=-1), y.argmax(axis=-1)
    if p.ndim == 1:
        return p[int(y)], y
    return p[np.arange(len(y)), y], y


def ce_loss(y, p):
    """-sum_q y_q ln p_q per sample (probabilities floored before the log)."""
    py, _ = _true_class_prob(p, y)
    return -dc.log(dc.clip(py, PROB_FLOOR, 1.0))


def focal_loss(y, p, gamma, class_weights=None):
    """-w_y (1 - p_y)^gamma ln p_y per sample."""
    py, idx = _true_class_prob(p, y)
    nll = -dc.log(dc.clip(py, PROB_FLOOR, 1.0))
    if gamma != 0:
        nll = dc.pow_(dc.clip(1.0 - py, 0.0, 1.0), gamma) * nll
    if class_weights is not None:
        nll = nll * np.asarray(class_weights, dtype=np.float64)[idx]
    return nll


def overall_loss(logits, labels, alpha, lambda_gate, loss="ce", focal_gamma=2.0, class_weights=None):
    """Mean classification loss plus lambda_gate times gate entropy; returns (total, cls, ent)."""
    p = dc.softmax(logits, axis=-1)
    if loss == "ce":
        per = ce_loss(labels, p)
    else:
        per = focal_loss(labels, p, focal_gamma, class_weights)
    cls = dc.mean(per)
    ent = gate_entropy(alpha)
    return cls + ent * lambda_gate, cls, ent


def inverse_frequency_weights(labels, n_classes):
    counts = np.bincount(labels, minlength=n_classes).astype(float)
    if np.any(counts == 0):
        raise ValueError(f"empty class in training labels (counts {counts.tolist()})")
    w = 1.0 / counts
    return w / w.mean()


# ---------------------------------------------------------------------------
# sampling


def pbs_probabilities(counts, rho):
    """(1 - rho) * n_q / N + rho / Q: instance-balanced at 0, class-balanced at 1."""
    counts = np.asarray(counts, dtype=np.float64)
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    if np.any(counts <= 0):
        raise ValueError(f"every class needs samples, counts={counts.tolist()}")
    return (1.0 - rho) * counts / counts.sum() + rho / len(counts)


class ProgressivelyBalancedSampler:
    def __init__(self, labels, n_classes, rng):
        self.labels = np.asarray(labels)
        self.by_class = [np.flatnonzero(self.labels == q) for q in range(n_classes)]
        self.counts = np.array([len(ix) for ix in self.by_class])
        self.rng = rng

    def draw(self, n, rho):
        probs = pbs_probabilities(self.counts, rho)
        classes = self.rng.choice(len(probs), size=n, p=probs)
        out = np.empty(n, dtype=int)
        for q, ix in enumerate(self.by_class):
            sel = classes == q
            out[sel] = ix[self.rng.integers(len(ix), size=sel.sum())]
        return out


# ---------------------------------------------------------------------------
# optimiser


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def forget(self, names):
        """Drop moment estimates for re-initialised parameters."""
        for name in names:
            self.m.pop(name, None)
            self.v.pop(name, None)

    def step(self, params, grads, clip_norm=None):
        if clip_norm:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > clip_norm:
                grads = {k: g * (clip_norm / norm) for k, g in grads.items()}
        self.t += 1
        for name, g in grads.items():
            m = self.m.get(name, 0.0) * self.b1 + (1 - self.b1) * g
            v = self.v.get(name, 0.0) * self.b2 + (1 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            params[name] = params[name] - self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# training


@dataclass
class History:
    rows: list = field(default_factory=list)
    alpha_means: list = field(default_factory=list)
    checksums: list = field(default_factory=list)  # (stage, group, before, after)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(HISTORY_COLUMNS)
            for row in self.rows:
                w.writerow([_fmt(row[c]) for c in HISTORY_COLUMNS])


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _accuracy(model, X, y):
    if X is None or len(X) == 0:
        return None
    probs, _, _ = model.infer(X)
    return float((probs.argmax(axis=1) == y).mean())


def fit_clusters(model: GCMCG, X, cfg: TrainConfig):
    """Cluster either the GAT embeddings or (graph-free) trial-averaged channel correlations."""
    if model.cfg.use_graph:
        theta = model.theta_prime()
        nodes = model.graph.unmasked_nodes
        emb = theta[nodes]
        channels = model.graph.channels
    else:
        emb = signal_embeddings(X)
        channels = list(range(X.shape[1]))
    return cluster_channels(emb, cfg.k_min, cfg.k_max, seed=cfg.seed, channels=channels)


def _batch_step(model, opt, names, Xb, yb, cfg, loss, weights):
    frozen = set(model.params) - set(names)

    def fn(p):
        out = model.forward(p, Xb)
        total, cls, ent = overall_loss(out["logits"], yb, out["alpha"], cfg.lambda_gate,
                                       loss, cfg.focal_gamma, weights)
        return {"loss": total, "cls": cls, "ent": ent, "logits": out["logits"]}

    tape, out = dc.forward(fn, model.params, requires_grad=set(model.params) - frozen)
    grads = dc.backward(tape, output=out["loss"])
    opt.step(model.params, grads, cfg.clip_norm)
    correct = int((out["logits"].data.argmax(axis=1) == yb).sum())
    return float(out["loss"].data), float(out["cls"].data), float(out["ent"].data), correct


def _head_step(model, opt, names, zb, alpha_b, yb, cfg, loss, weights):
    def fn(p):
        logits = lws_logits(dc.Tensor(zb), p)
        total, cls, ent = overall_loss(logits, yb, alpha_b, cfg.lambda_gate, loss,
                                       cfg.focal_gamma, weights)
        return {"loss": total, "cls": cls, "ent": ent, "logits": logits}

    head = {k: v for k, v in model.params.items() if k.startswith("head.")}
    tape, out = dc.forward(fn, head, requires_grad=set(names))
    grads = dc.backward(tape, output=out["loss"])
    opt.step(model.params, grads, cfg.clip_norm)
    correct = int((out["logits"].data.argmax(axis=1) == yb).sum())
    return float(out["loss"].data), float(out["cls"].data), float(out["ent"].data), correct


def _guard(model, history, stage, group, names, before):
    after = model.checksum(names)
    history.checksums.append((stage, group, before, after))
    if after != before:
        raise FreezeViolation(f"stage {stage}: frozen {group} parameters changed")


def train(model: GCMCG, X, y, cfg: TrainConfig, X_val=None, y_val=None, progress=None):
    """Three-stage schedule; returns the :class:`History`. ``model`` is updated in place."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    n_classes = model.cfg.n_classes
    rng = np.random.default_rng(cfg.seed)
    weights = (inverse_frequency_weights(y, n_classes) if cfg.class_weights == "inverse"
               else np.ones(n_classes))
    history = History()
    epoch = 0

    def record(stage, stats, n, lr):
        nonlocal epoch
        epoch += 1
        loss, cls, ent, correct = (np.sum(v) for v in zip(*stats)) if stats else (0, 0, 0, 0)
        nb = max(len(stats), 1)
        row = {"epoch": epoch, "stage": stage, "loss": loss / nb, "cls_loss": cls / nb,
               "gate_entropy": ent / nb, "train_acc": correct / max(n, 1),
               "val_acc": _accuracy(model, X_val, y_val), "lr": lr}
        history.rows.append(row)
        if progress:
            progress(row)

    # Stage 1: everything trainable, cross-entropy, uniform shuffling.
    model.stage = 1
    trainable = [k for k in model.params if not (cfg.freeze_tokenizer and k == "tokenizer")]
    opt = Adam(cfg.lr)
    warm = min(cfg.warmup_epochs, cfg.epochs_stage1)
    if model.cfg.use_cluster and model.clusters is None and warm == 0:
        model.set_clusters(fit_clusters(model, X, cfg), seed=cfg.seed)
        trainable = [k for k in model.params if not (cfg.freeze_tokenizer and k == "tokenizer")]
    for e in range(1, cfg.epochs_stage1 + 1):
        order = rng.permutation(len(X))
        stats = []
        for i in range(0, len(X), cfg.batch):
            idx = order[i:i + cfg.batch]
            stats.append(_batch_step(model, opt, trainable, X[idx], y[idx], cfg, "ce", None))
        record(1, stats, len(X), cfg.lr)
        if e == warm and model.cfg.use_cluster and model.clusters is None:
            model.set_clusters(fit_clusters(model, X, cfg), seed=cfg.seed + e)
            opt.forget([k for k in model.params if k.startswith(("gate.", "expert.cluster"))])
            trainable = [k for k in model.params if not (cfg.freeze_tokenizer and k == "tokenizer")]
            log.info("clusters fixed after warmup: K=%d", model.K)
    if model.cfg.use_cluster and model.clusters is None:
        model.set_clusters(fit_clusters(model, X, cfg), seed=cfg.seed)

    groups = model.groups()
    backbone_sum = model.checksum(groups["backbone"])
    if cfg.epochs_stage2 or cfg.epochs_stage3:
        _, alpha_all, fused_all = model.infer(X)
        history.alpha_means.append(alpha_all.mean(axis=0).tolist())

    # Stage 2: backbone frozen, head FC layers with focal loss and PBS.
    if cfg.epochs_stage2:
        model.stage = 2
        sampler = ProgressivelyBalancedSampler(y, n_classes, rng)
        opt = Adam(cfg.lr)
        for e in range(1, cfg.epochs_stage2 + 1):
            idx_all = sampler.draw(len(X), e / cfg.epochs_stage2)
            stats = []
            for i in range(0, len(idx_all), cfg.batch):
                idx = idx_all[i:i + cfg.batch]
                stats.append(_head_step(model, opt, groups["head_fc"], fused_all[idx],
                                        alpha_all[idx], y[idx], cfg, "focal", weights))
            record(2, stats, len(idx_all), cfg.lr)
        _guard(model, history, 2, "backbone", groups["backbone"], backbone_sum)

    # Stage 3: only the per-class scales.
    if cfg.epochs_stage3:
        model.stage = 3
        fc_sum = model.checksum(groups["head_fc"])
        sampler = ProgressivelyBalancedSampler(y, n_classes, rng)
        opt = Adam(cfg.lr_stage3)
        for _ in range(cfg.epochs_stage3):
            idx_all = sampler.draw(len(X), 1.0)
            stats = []
            for i in range(0, len(idx_all), cfg.batch):
                idx = idx_all[i:i + cfg.batch]
                stats.append(_head_step(model, opt, groups["gamma"], fused_all[idx],
                                        alpha_all[idx], y[idx], cfg, cfg.stage3_loss, weights))
            record(3, stats, len(idx_all), cfg.lr_stage3)
        _guard(model, history, 3, "head_fc", groups["head_fc"], fc_sum)
        _guard(model, history, 3, "backbone", groups["backbone"], backbone_sum)
    return history
