"""Trial container format, CSV ingestion and the seeded synthetic EEG generator."""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .graph import build_graph, eight_connected

MAGIC = b"GCD1"
VERSION = 1
HEADER = struct.Struct("<4sIIIfII")
TRIAL_HEADER = struct.Struct("<HH")


class ContainerError(ValueError):
    pass


@dataclass
class Dataset:
    samples: np.ndarray  # (n_trials, C, S) float64 holding f32-representable values
    subjects: np.ndarray  # (n_trials,) int
    labels: np.ndarray  # (n_trials,) int in [0, Q)
    rate: float
    n_classes: int
    version: int = VERSION

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32).astype(np.float64)
        self.subjects = np.asarray(self.subjects, dtype=int)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.samples.ndim != 3:
            raise ContainerError(f"samples must be trials x C x S, got {self.samples.shape}")
        n = len(self.samples)
        if len(self.subjects) != n or len(self.labels) != n:
            raise ContainerError("subject/label counts do not match the trial count")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ContainerError(f"labels must lie in [0, {self.n_classes - 1}]")
        if n and (self.subjects.min() < 0 or self.subjects.max() > 0xFFFF):
            raise ContainerError("subject ids must fit in u16")
        if not np.isfinite(self.samples).all():
            raise ContainerError("samples contain non-finite values")

    @property
    def n_channels(self):
        return self.samples.shape[1]

    @property
    def n_samples(self):
        return self.samples.shape[2]

    def subset(self, mask):
        return Dataset(self.samples[mask], self.subjects[mask], self.labels[mask], self.rate,
                       self.n_classes, self.version)


def to_bytes(ds: Dataset) -> bytes:
    n, c, s = ds.samples.shape
    parts = [HEADER.pack(MAGIC, ds.version, c, s, ds.rate, ds.n_classes, n)]
    block = ds.samples.astype("<f4")
    for i in range(n):
        parts.append(TRIAL_HEADER.pack(int(ds.subjects[i]), int(ds.labels[i])))
        parts.append(block[i].tobytes())
    return b"".join(parts)


def from_bytes(blob: bytes, source="<bytes>") -> Dataset:
    if len(blob) < HEADER.size:
        raise ContainerError(f"{source}: too short for a container header")
    magic, version, c, s, rate, q, n = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ContainerError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise ContainerError(f"{source}: unsupported version {version}")
    per = TRIAL_HEADER.size + 4 * c * s
    if len(blob) != HEADER.size + n * per:
        raise ContainerError(f"{source}: header promises {n} trials of {c}x{s} "
                             f"({HEADER.size + n * per} bytes), file has {len(blob)}")
    rec = np.dtype([("subject", "<u2"), ("label", "<u2"), ("x", "<f4", (c, s))])
    arr = np.frombuffer(blob, dtype=rec, count=n, offset=HEADER.size)
    return Dataset(arr["x"].astype(np.float64), arr["subject"].astype(int),
                   arr["label"].astype(int), float(rate), int(q), version)


def write_container(ds: Dataset, path):
    with open(path, "wb") as fh:
        fh.write(to_bytes(ds))


def read_container(path) -> Dataset:
    with open(path, "rb") as fh:
        return from_bytes(fh.read(), str(path))


# ---------------------------------------------------------------------------
# CSV ingestion


@dataclass
class Segment:
    start: int  # first sample row (0-based, header excluded)
    end: int  # exclusive
    label: str
    subject: int = 0


def read_segments(path):
    """Segment file: CSV with columns start,end,label[,subject]."""
    segs = []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [h.strip() for h in rows[0][:3]] != ["start", "end", "label"]:
        raise ContainerError(f"{path}: header must start with start,end,label")
    for lineno, row in enumerate(rows[1:], 2):
        if not row or not "".join(row).strip():
            continue
        try:
            start, end = int(row[0]), int(row[1])
            subject = int(row[3]) if len(row) > 3 and row[3].strip() else 0
        except (ValueError, IndexError) as exc:
            raise ContainerError(f"{path}:{lineno}: malformed segment row {row}") from exc
        segs.append(Segment(start, end, row[2].strip() if len(row) > 2 else "", subject))
    return segs


def read_csv_samples(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ContainerError(f"{path}: empty file")
    names = [h.strip() for h in rows[0]]
    data = []
    for lineno, row in enumerate(rows[1:], 2):
        if len(row) != len(names):
            raise ContainerError(f"{path}:{lineno}: expected {len(names)} fields, got {len(row)}")
        try:
            data.append([float(v) for v in row])
        except ValueError as exc:
            raise ContainerError(f"{path}:{lineno}: non-numeric value") from exc
    return names, np.array(data, dtype=np.float64).reshape(-1, len(names))


def ingest_csv(path, rate, label_map, segments, window, n_classes=None):
    """Slice a continuous recording into labelled, window-truncated trials."""
    names, data = read_csv_samples(path)
    n_classes = (max(label_map.values()) + 1) if n_classes is None else n_classes
    trials, labels, subjects = [], [], []
    for i, seg in enumerate(segments, 1):
        where = f"segment {i} (rows {seg.start}-{seg.end})"
        if not seg.label:
            raise ContainerError(f"{where} has no label")
        if seg.label not in label_map:
            raise ContainerError(f"{where}: unknown label {seg.label!r}")
        if not 0 <= seg.start < seg.end <= len(data):
            raise ContainerError(f"{where} lies outside the {len(data)}-row recording")
        if seg.end - seg.start < window:
            raise ContainerError(f"{where} is shorter than the {window}-sample window")
        trials.append(data[seg.start:seg.start + window].T)
        labels.append(label_map[seg.label])
        subjects.append(seg.subject)
    ds = Dataset(np.array(trials).reshape(len(trials), len(names), window), subjects, labels,
                 rate, n_classes)
    return ds, names


def export_csv(ds: Dataset, path, segments_path, label_names=None, channel_names=None):
    names = channel_names or [f"ch{i + 1}" for i in range(ds.n_channels)]
    label_names = label_names or [str(q) for q in range(ds.n_classes)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for trial in ds.samples:
            for row in trial.T:
                w.writerow([repr(float(v)) for v in row])
    with open(segments_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["start", "end", "label", "subject"])
        for i, (lab, sub) in enumerate(zip(ds.labels, ds.subjects)):
            w.writerow([i * ds.n_samples, (i + 1) * ds.n_samples, label_names[lab], int(sub)])


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass
class SynthSpec:
    n_classes: int = 3
    n_channels: int = 16
    n_samples: int = 256
    rate: float = 160.0
    n_subjects: int = 8
    trials_per_subject: int = 120
    groups: list = field(default_factory=lambda: [5, 5, 6])  # planted group sizes
    class_group: list | None = None  # active group per class (default q mod n_groups)
    class_freq: list = field(default_factory=lambda: [10.0, 16.0, 23.0])
    amplitude: float = 3.0
    noise_sigma: float = 1.0
    hum: bool = True
    hum_amplitude: float = 0.5
    spikes: bool = False
    spike_rate: float = 1.0  # expected artifact bursts per trial
    spike_amplitude: float = 6.0
    subject_jitter: float = 0.1
    class_balance: list | None = None  # relative class frequencies (default uniform)
    seed: int = 0

    def validate(self):
        if sum(self.groups) != self.n_channels:
            raise ValueError(f"group sizes {self.groups} must sum to n_channels={self.n_channels}")
        if min(self.groups) < 1:
            raise ValueError("planted groups must be non-empty")
        if len(self.class_freq) < self.n_classes:
            raise ValueError("need one rhythm frequency per class")
        if max(self.class_freq[:self.n_classes]) * (1 + self.subject_jitter) >= self.rate / 2:
            raise ValueError("rhythm frequencies must stay below Nyquist")
        if self.n_subjects < 1 or self.trials_per_subject < 1:
            raise ValueError("need at least one subject and one trial")

    @property
    def active_groups(self):
        if self.class_group is not None:
            return list(self.class_group)
        return [q % len(self.groups) for q in range(self.n_classes)]


def planted_layout(groups, rows=None):
    """Each group is a compact grid block; blocks are separated by an empty column."""
    rows = rows or int(np.ceil(np.sqrt(max(groups))))
    occupied, group_of, col0 = [], [], 0
    for g, size in enumerate(groups):
        width = int(np.ceil(size / rows))
        for k in range(size):
            occupied.append((k % rows, col0 + k // rows))
            group_of.append(g)
        col0 += width + 1
    cols = col0 - 1
    adj, cells = eight_connected(rows, cols, set(occupied))
    order = {tuple(int(v) for v in cell): i for i, cell in enumerate(cells)}
    # channel c sits at occupied[c]; re-index nodes so node i == channel i
    perm = [order[cell] for cell in occupied]
    inv = {old: new for new, old in enumerate(perm)}
    adj = {inv[i]: sorted(inv[j] for j in nbrs) for i, nbrs in adj.items()}
    coords = cells[perm][:, ::-1]  # (x=col, y=row)
    return adj, coords, np.array(group_of)


def _pink(rng, n_rows, n):
    spec = rng.normal(size=(n_rows, n // 2 + 1)) + 1j * rng.normal(size=(n_rows, n // 2 + 1))
    f = np.arange(n // 2 + 1)
    spec /= np.sqrt(np.maximum(f, 1))
    spec[:, 0] = 0
    x = np.fft.irfft(spec, n=n)
    return x / x.std(axis=1, keepdims=True)


def _burst_rhythm(rng, n, rate, freq):
    """Multisine around ``freq`` under a Gaussian burst envelope (super-Gaussian)."""
    t = np.arange(n) / rate
    sig = np.zeros(n)
    for df, w in ((0.0, 1.0), (-1.0, 0.5), (1.5, 0.4)):
        sig += w * np.sin(2 * np.pi * (freq + df) * t + rng.uniform(0, 2 * np.pi))
    env = np.zeros(n)
    for _ in range(rng.integers(1, 3)):
        c = rng.uniform(0.2, 0.8) * t[-1]
        env += np.exp(-0.5 * ((t - c) / rng.uniform(0.08, 0.15)) ** 2)
    return sig * env


def synth(spec: SynthSpec):
    """Returns (Dataset, truth dict, ElectrodeGraph)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    C, S, Q = spec.n_channels, spec.n_samples, spec.n_classes
    adj, coords, group_of = planted_layout(spec.groups)
    graph = build_graph(adj, {i: i for i in range(C)}, C, coords=coords)
    # Fixed within-group mixing produces correlated channels inside each planted group.
    gains = rng.uniform(0.6, 1.0, size=C)
    # Ocular-like bursts project along the front rows, cutting across planted groups.
    rows_y = coords[:, 1]
    topo = np.clip(1.0 - (rows_y - rows_y.min()) / max(rows_y.max() - rows_y.min(), 1.0), 0.0, 1.0)
    balance = np.ones(Q) if spec.class_balance is None else np.asarray(spec.class_balance, float)
    balance = balance / balance.sum()
    n_total = spec.n_subjects * spec.trials_per_subject
    samples = np.empty((n_total, C, S))
    labels = np.empty(n_total, dtype=int)
    subjects = np.empty(n_total, dtype=int)
    t = np.arange(S) / spec.rate
    i = 0
    for subj in range(spec.n_subjects):
        s_amp = 1.0 + spec.subject_jitter * rng.uniform(-1, 1)
        s_freq = 1.0 + 0.5 * spec.subject_jitter * rng.uniform(-1, 1)
        s_gain = gains * (1.0 + spec.subject_jitter * rng.uniform(-1, 1, size=C))
        for _ in range(spec.trials_per_subject):
            q = int(rng.choice(Q, p=balance))
            group_src = _pink(rng, len(spec.groups), S)
            x = 0.7 * group_src[group_of] + 0.3 * _pink(rng, C, S)
            x *= spec.noise_sigma
            members = np.flatnonzero(group_of == spec.active_groups[q])
            rhythm = _burst_rhythm(rng, S, spec.rate, spec.class_freq[q] * s_freq)
            x[members] += spec.amplitude * s_amp * s_gain[members, None] * rhythm
            if spec.hum:
                x += spec.hum_amplitude * np.sin(2 * np.pi * 60.0 * t + rng.uniform(0, 2 * np.pi))
            if spec.spikes:
                for _ in range(rng.poisson(spec.spike_rate)):
                    centre = rng.uniform(0, t[-1])
                    burst = np.exp(-0.5 * ((t - centre) / 0.03) ** 2) * rng.choice([-1.0, 1.0])
                    x += spec.spike_amplitude * topo[:, None] * burst
            samples[i], labels[i], subjects[i] = x, q, subj
            i += 1
    ds = Dataset(samples, subjects, labels, spec.rate, Q)
    truth = {
        "planted_clusters": [np.flatnonzero(group_of == g).tolist() for g in range(len(spec.groups))],
        "channel_group": group_of.tolist(),
        "class_map": [{"class": q, "group": spec.active_groups[q], "freq_hz": spec.class_freq[q]}
                      for q in range(Q)],
        "spec": asdict(spec),
    }
    return ds, truth, graph


def write_truth(truth, path):
    with open(path, "w") as fh:
        json.dump(truth, fh, indent=2, sort_keys=True)
        fh.write("\n")
