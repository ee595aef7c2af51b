"""Spectral clustering of electrodes with eigengap selection of the cluster count."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


class ClusterError(RuntimeError):
    pass


@dataclass
class ClusterAssignment:
    labels: np.ndarray  # cluster index in 1..K per clustered channel
    K: int
    eigenvalues: np.ndarray
    chosen_gap_index: int
    channels: list | None = None  # dataset channel of each label entry

    def members(self, k):
        """Dataset channels (or positions) assigned to cluster ``k`` (1-based)."""
        idx = np.flatnonzero(self.labels == k)
        if self.channels is None:
            return idx.tolist()
        return [self.channels[i] for i in idx]

    def to_dict(self):
        return {"labels": self.labels.tolist(), "K": self.K,
                "eigenvalues": self.eigenvalues.tolist(),
                "chosen_gap_index": self.chosen_gap_index, "channels": self.channels}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["labels"], dtype=int), d["K"], np.array(d["eigenvalues"]),
                   d["chosen_gap_index"], d.get("channels"))


def correlation_matrix(emb, names=None):
    emb = np.asarray(emb, dtype=np.float64)
    centred = emb - emb.mean(axis=1, keepdims=True)
    norms = np.sqrt((centred * centred).sum(axis=1))
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        label = names[bad[0]] if names is not None else f"row {bad[0]}"
        raise ClusterError(f"embedding of channel {label} has zero variance")
    unit = centred / norms[:, None]
    r = unit @ unit.T
    r = 0.5 * (r + r.T)
    np.fill_diagonal(r, 1.0)
    return r


def laplacian(R, normalized=False):
    """L = D - A with A = max(R, 0) and a zero diagonal."""
    a = np.maximum(np.asarray(R, dtype=np.float64), 0.0)
    np.fill_diagonal(a, 0.0)
    deg = a.sum(axis=1)
    if not normalized:
        return np.diag(deg) - a
    inv = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    return np.eye(len(a)) - inv[:, None] * a * inv[None, :]


def eigengap_select(eigenvalues, k_min, k_max):
    """K in [k_min, k_max] maximising lambda_{K+1} - lambda_K (1-based); ties go to smaller K."""
    ev = np.asarray(eigenvalues, dtype=np.float64)
    if not 1 <= k_min <= k_max:
        raise ValueError(f"bad K range [{k_min}, {k_max}]")
    if len(ev) < k_max + 1:
        raise ValueError(f"need {k_max + 1} eigenvalues for K_max={k_max}, got {len(ev)}")
    gaps = [ev[i] - ev[i - 1] for i in range(k_min, k_max + 1)]
    return k_min + int(np.argmax(gaps))


def _kmeans_pp(x, k, rng):
    centres = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = np.min(((x[:, None, :] - np.array(centres)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        if total <= 0:
            centres.append(x[rng.integers(len(x))])
        else:
            centres.append(x[rng.choice(len(x), p=d2 / total)])
    return np.array(centres)


def kmeans(x, k, seed=0, n_init=10, max_restarts=50, max_iter=300):
    """Lloyd iterations from k-means++ seeds; best inertia over ``n_init`` good runs."""
    rng = np.random.default_rng(seed)
    best, best_inertia = None, np.inf
    good = restarts = 0
    while good < n_init:
        centres = _kmeans_pp(x, k, rng)
        labels = None
        for _ in range(max_iter):
            d2 = ((x[:, None, :] - centres[None]) ** 2).sum(-1)
            new = d2.argmin(axis=1)
            if labels is not None and np.array_equal(new, labels):
                break
            labels = new
            if len(np.unique(labels)) < k:
                break
            centres = np.array([x[labels == j].mean(axis=0) for j in range(k)])
        if len(np.unique(labels)) < k:
            restarts += 1
            if restarts >= max_restarts:
                raise ClusterError(f"k-means left an empty cluster after {restarts} restarts")
            continue
        good += 1
        inertia = float(((x - centres[labels]) ** 2).sum())
        if inertia < best_inertia - 1e-12:
            best, best_inertia = labels, inertia
    return best


def _canonical(labels):
    order = {}
    for lab in labels:
        order.setdefault(int(lab), len(order) + 1)
    return np.array([order[int(lab)] for lab in labels], dtype=int)


def cluster_channels(emb, k_min=2, k_max=10, seed=0, normalized=False, channels=None,
                     n_init=10):
    """Correlation -> Laplacian -> eigengap K -> row-normalised eigenvectors -> k-means."""
    emb = np.asarray(emb, dtype=np.float64)
    c = emb.shape[0]
    if c < 2:
        raise ClusterError("need at least two channels to cluster")
    R = correlation_matrix(emb, names=channels)
    L = laplacian(R, normalized=normalized)
    evals, evecs = np.linalg.eigh(L)
    if c == 2:
        return ClusterAssignment(np.array([1, 2]), 2, evals, 2, channels)
    k_hi = min(k_max, c - 1)
    k_lo = min(k_min, k_hi)
    K = eigengap_select(evals, k_lo, k_hi)
    U = evecs[:, :K]
    norms = np.linalg.norm(U, axis=1, keepdims=True)
    U = U / np.where(norms > 0, norms, 1.0)
    labels = kmeans(U, K, seed=seed, n_init=n_init)
    return ClusterAssignment(_canonical(labels), K, evals, K, channels)


def signal_embeddings(trials):
    """Per-channel rows of the trial-averaged channel correlation matrix (graph-free ablation)."""
    trials = np.asarray(trials, dtype=np.float64)
    acc = np.zeros((trials.shape[1], trials.shape[1]))
    for x in trials:
        acc += np.corrcoef(x)
    return acc / len(trials)


def adjusted_rand_index(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1)

    def comb2(v):
        return (v * (v - 1) / 2.0).sum()

    index = comb2(table)
    rows, cols = comb2(table.sum(axis=1)), comb2(table.sum(axis=0))
    total = len(a) * (len(a) - 1) / 2.0
    expected = rows * cols / total if total else 0.0
    top = 0.5 * (rows + cols)
    if top == expected:
        return 1.0
    return float((index - expected) / (top - expected))


def write_cluster_report(assignment, path_table, path_eigen, channel_names=None):
    with open(path_table, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["channel", "name", "cluster"])
        chans = assignment.channels or list(range(len(assignment.labels)))
        for ch, lab in zip(chans, assignment.labels):
            name = channel_names[ch] if channel_names else f"ch{ch + 1}"
            w.writerow([ch + 1, name, int(lab)])
    with open(path_eigen, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "eigenvalue", "gap_to_next", "chosen"])
        ev = assignment.eigenvalues
        for i, val in enumerate(ev, 1):
            gap = ev[i] - val if i < len(ev) else ""
            w.writerow([i, repr(float(val)), repr(float(gap)) if gap != "" else "",
                        int(i == assignment.chosen_gap_index)])
