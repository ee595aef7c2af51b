"""Expert bank, gated fusion and the learnable-weight-scaling classification head."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .cluster import ClusterAssignment
from .graph import ElectrodeGraph, GatConfig, gat_forward, init_gat, init_tokenizer

CKPT_MAGIC = b"GCMCMDL"
CKPT_VERSION = 1
GATE_CLAMP = 30.0
ENTROPY_EPS = 1e-8

EXPERT_KINDS = {
    # name: (conv front-end, recurrent cell, bidirectional)
    "cnn-gru": (True, "gru", False),
    "cnn-lstm": (True, "lstm", False),
    "gru": (False, "gru", False),
    "lstm": (False, "lstm", False),
    "bilstm": (False, "lstm", True),
    "bigru": (False, "gru", True),
    "cnn-bigru": (True, "gru", True),
}

GRU_NAMES = ("update", "reset", "hidden")
LSTM_NAMES = ("input", "forget", "cell", "output")


@dataclass
class ModelConfig:
    n_channels: int
    n_samples: int
    n_classes: int
    token_dim: int = 16
    embed_dim: int = 32
    gat_heads: int = 4
    gat_layers: int = 2
    conv_kernel: int = 7
    conv_stride: int = 2
    spatial_kernel: int = 3
    gate_hidden: int = 16
    head_hidden: int = 64
    expert: str = "cnn-gru"
    use_graph: bool = True
    use_cluster: bool = True

    def __post_init__(self):
        if self.expert not in EXPERT_KINDS:
            raise ValueError(f"unknown expert kind {self.expert!r}; choose from {sorted(EXPERT_KINDS)}")

    @property
    def gat(self):
        return GatConfig(self.token_dim, self.embed_dim, self.gat_heads, self.gat_layers)


# ---------------------------------------------------------------------------
# parameter initialisation


def _glorot(rng, shape, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def init_expert(prefix, in_ch, cfg: ModelConfig, rng, kernel=None):
    conv, cell, bidir = EXPERT_KINDS[cfg.expert]
    D = cfg.embed_dim
    p = {}
    rnn_in = in_ch
    if conv:
        k = cfg.conv_kernel if kernel is None else kernel
        p[f"{prefix}.conv.w"] = _glorot(rng, (D, in_ch, k), in_ch * k, D)
        p[f"{prefix}.conv.b"] = np.zeros(D)
        rnn_in = D
    gates = GRU_NAMES if cell == "gru" else LSTM_NAMES
    for direction in (("fwd", "rev") if bidir else ("fwd",)):
        for g in gates:
            p[f"{prefix}.{cell}.{direction}.W_{g}"] = _glorot(rng, (rnn_in, D), rnn_in, D)
            q, _ = np.linalg.qr(rng.normal(size=(D, D)))
            p[f"{prefix}.{cell}.{direction}.U_{g}"] = q
    return p


def expert_names(cfg: ModelConfig, K):
    names = []
    if cfg.use_graph:
        names.append("spatial")
    names.append("temporal")
    names.extend(f"cluster{k}" for k in range(1, K + 1))
    return names


def init_gate(cfg: ModelConfig, n_experts, rng):
    width = n_experts * 2 * cfg.embed_dim
    return {
        "gate.0.w": _glorot(rng, (width, cfg.gate_hidden), width, cfg.gate_hidden),
        "gate.0.b": np.zeros(cfg.gate_hidden),
        "gate.1.w": _glorot(rng, (cfg.gate_hidden, n_experts), cfg.gate_hidden, n_experts),
        "gate.1.b": np.zeros(n_experts),
    }


def init_head(cfg: ModelConfig, rng):
    d, h, q = 2 * cfg.embed_dim, cfg.head_hidden, cfg.n_classes
    return {
        "head.fc1.w": _glorot(rng, (d, h), d, h), "head.fc1.b": np.zeros(h),
        "head.fc2.w": _glorot(rng, (h, h), h, h), "head.fc2.b": np.zeros(h),
        "head.out.w": _glorot(rng, (h, q), h, q), "head.out.b": np.zeros(q),
        "head.log_gamma": np.zeros(q),
    }


# ---------------------------------------------------------------------------
# building blocks (all operate on diffcore tensors)


def gru_step(z, h_prev, params, prefix=""):
    """Single GRU update from the per-gate matrices (reference path, unfused)."""
    W = {g: params[f"{prefix}W_{g}"] for g in GRU_NAMES}
    U = {g: params[f"{prefix}U_{g}"] for g in GRU_NAMES}
    u = dc.sigmoid(dc.matmul(z, W["update"]) + dc.matmul(h_prev, U["update"]))
    r = dc.sigmoid(dc.matmul(z, W["reset"]) + dc.matmul(h_prev, U["reset"]))
    cand = dc.tanh(dc.matmul(z, W["hidden"]) + dc.matmul(r * h_prev, U["hidden"]))
    return (1.0 - u) * h_prev + u * cand


def _rnn(seq, params, prefix, cell, direction):
    gates = GRU_NAMES if cell == "gru" else LSTM_NAMES
    w_in = dc.concat([params[f"{prefix}.{cell}.{direction}.W_{g}"] for g in gates], axis=1)
    w_rec = dc.concat([params[f"{prefix}.{cell}.{direction}.U_{g}"] for g in gates], axis=1)
    fn = dc.gru_sequence if cell == "gru" else dc.lstm_sequence
    return fn(seq, w_in, w_rec)


def expert_forward(x, params, prefix, cfg: ModelConfig, stride=None):
    """(batch, in_ch, length) -> (batch, 2D): conv front-end, recurrence, readout."""
    conv, cell, bidir = EXPERT_KINDS[cfg.expert]
    if conv:
        y = dc.relu(dc.conv1d(x, params[f"{prefix}.conv.w"], params[f"{prefix}.conv.b"],
                              stride=cfg.conv_stride if stride is None else stride))
    else:
        y = x
    seq = dc.transpose(y, (0, 2, 1))
    hs = _rnn(seq, params, prefix, cell, "fwd")
    if bidir:
        back = _rnn(seq[:, ::-1, :], params, prefix, cell, "rev")
        return dc.concat([hs[:, -1, :], back[:, -1, :]], axis=1)
    return dc.concat([hs[:, -1, :], dc.mean(hs, axis=1)], axis=1)


def gate(v_hat, params, n_layers=2):
    """Exponentiated tanh layers; alpha = g' / (1 + sum g')."""
    g = v_hat
    for t in range(n_layers):
        pre = dc.tanh(dc.matmul(g, params[f"gate.{t}.w"]) + params[f"gate.{t}.b"])
        g = dc.exp(dc.clip(pre, -GATE_CLAMP, GATE_CLAMP))
    return g / (1.0 + dc.sum_(g, axis=-1, keepdims=True))


def gate_entropy(alpha, eps=ENTROPY_EPS):
    a = alpha if isinstance(alpha, dc.Tensor) else dc.Tensor(alpha)
    if a.ndim == 1:
        a = dc.reshape(a, (1, -1))
    b = a.shape[0]
    return dc.sum_(a * dc.log(a + eps)) * (-1.0 / b)


def fuse(v_hat, alpha, block):
    """Blockwise weighted sum: sum_i alpha_i * v_hat[i-th block of width ``block``]."""
    a = alpha if isinstance(alpha, dc.Tensor) else dc.Tensor(alpha)
    v = v_hat if isinstance(v_hat, dc.Tensor) else dc.Tensor(v_hat)
    squeeze = v.ndim == 1
    if squeeze:
        v = dc.reshape(v, (1, -1))
        a = dc.reshape(a, (1, -1))
    bsz, n = a.shape
    if v.shape[1] != n * block:
        raise dc.ShapeError(f"fuse: {v.shape[1]} features do not split into {n} blocks of {block}")
    out = dc.sum_(dc.reshape(v, (bsz, n, block)) * dc.reshape(a, (bsz, n, 1)), axis=1)
    return dc.reshape(out, (block,)) if squeeze else out


def lws_logits(z, params):
    h = dc.relu(dc.matmul(z, params["head.fc1.w"]) + params["head.fc1.b"])
    h = dc.relu(dc.matmul(h, params["head.fc2.w"]) + params["head.fc2.b"])
    return dc.matmul(h, params["head.out.w"]) * dc.exp(params["head.log_gamma"]) + params["head.out.b"]


# ---------------------------------------------------------------------------
# the model


@dataclass
class GCMCG:
    cfg: ModelConfig
    graph: ElectrodeGraph | None
    params: dict = field(default_factory=dict)
    clusters: ClusterAssignment | None = None
    stage: int = 0
    rng_state: dict = field(default_factory=dict)

    @classmethod
    def create(cls, cfg: ModelConfig, graph=None, seed=0, tokenizer=None):
        if cfg.use_graph and graph is None:
            raise ValueError("graph-enabled model needs an electrode graph")
        rng = np.random.default_rng(seed)
        params = {}
        if cfg.use_graph:
            if tokenizer is None:
                tokenizer = init_tokenizer(graph, cfg.token_dim, seed=seed)
            if tokenizer.features.shape != (graph.node_count, cfg.token_dim):
                raise ValueError(f"tokenizer shape {tokenizer.features.shape} does not match "
                                 f"({graph.node_count}, {cfg.token_dim})")
            params["tokenizer"] = np.array(tokenizer.features, dtype=np.float64)
            params.update(init_gat(cfg.gat, rng))
            n_nodes = len(graph.unmasked_nodes)
            params.update(init_expert("expert.spatial", cfg.embed_dim, cfg, rng,
                                      kernel=min(cfg.spatial_kernel, n_nodes)))
        temporal_in = cfg.n_channels + (cfg.embed_dim if cfg.use_graph else 0)
        params.update(init_expert("expert.temporal", temporal_in, cfg, rng))
        params.update(init_gate(cfg, len(expert_names(cfg, 0)), rng))
        params.update(init_head(cfg, rng))
        model = cls(cfg, graph, params)
        model.rng_state = rng.bit_generator.state
        return model

    # -- structure ---------------------------------------------------------

    @property
    def K(self):
        return self.clusters.K if self.clusters is not None else 0

    @property
    def experts(self):
        return expert_names(self.cfg, self.K)

    def cluster_masks(self):
        masks = []
        for k in range(1, self.K + 1):
            m = np.zeros(self.cfg.n_channels)
            m[self.clusters.members(k)] = 1.0
            masks.append(m)
        return masks

    def set_clusters(self, assignment: ClusterAssignment, seed=0):
        """Install the frozen routing map: adds K cluster experts and resizes the gate."""
        rng = np.random.default_rng(seed)
        for name in [n for n in self.params if n.startswith("expert.cluster") or n.startswith("gate.")]:
            del self.params[name]
        self.clusters = assignment
        for k in range(1, assignment.K + 1):
            self.params.update(init_expert(f"expert.cluster{k}", self.cfg.n_channels, self.cfg, rng))
        self.params.update(init_gate(self.cfg, len(self.experts), rng))

    def groups(self):
        """Parameter names grouped by training role."""
        out = {"backbone": [], "head_fc": [], "gamma": []}
        for name in self.params:
            if name == "head.log_gamma":
                out["gamma"].append(name)
            elif name.startswith("head."):
                out["head_fc"].append(name)
            else:
                out["backbone"].append(name)
        return out

    def checksum(self, names):
        h = hashlib.sha256()
        for name in sorted(names):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()

    # -- forward -----------------------------------------------------------

    def embeddings(self, p):
        """Theta' for every graph node (tensor), or None without the graph branch."""
        if not self.cfg.use_graph:
            return None
        return gat_forward(p["tokenizer"], self.graph, p, self.cfg.gat)

    def expert_features(self, p, Z, theta=None):
        cfg = self.cfg
        Z = Z if isinstance(Z, dc.Tensor) else dc.Tensor(Z)
        bsz = Z.shape[0]
        blocks = []
        if cfg.use_graph:
            if theta is None:
                theta = self.embeddings(p)
            rows = theta[self.graph.unmasked_nodes]
            seq = dc.reshape(dc.transpose(rows), (1, cfg.embed_dim, rows.shape[0]))
            v_sp = expert_forward(seq, p, "expert.spatial", cfg, stride=1)
            blocks.append(v_sp * np.ones((bsz, 1)))
            summary = dc.reshape(dc.mean(rows, axis=0), (1, cfg.embed_dim, 1))
            temporal_in = dc.concat([Z, summary * np.ones((bsz, 1, Z.shape[2]))], axis=1)
        else:
            temporal_in = Z
        blocks.append(expert_forward(temporal_in, p, "expert.temporal", cfg))
        for k, m in enumerate(self.cluster_masks(), 1):
            zk = dc.mask_mul(Z, m[None, :, None])
            blocks.append(expert_forward(zk, p, f"expert.cluster{k}", cfg))
        return dc.concat(blocks, axis=1)

    def forward(self, p, Z):
        """Returns dict with logits, gate scores alpha, fused features and Theta'."""
        theta = self.embeddings(p)
        v_hat = self.expert_features(p, Z, theta)
        alpha = gate(v_hat, p)
        fused = fuse(v_hat, alpha, 2 * self.cfg.embed_dim)
        return {"logits": lws_logits(fused, p), "alpha": alpha, "fused": fused, "theta": theta}

    def theta_prime(self):
        if not self.cfg.use_graph:
            return None
        return self.embeddings({k: dc.Tensor(v) for k, v in self.params.items()}).data

    def infer(self, Z, batch=64):
        """No-grad pass returning (probabilities, alpha, fused) as arrays."""
        p = {k: dc.Tensor(v) for k, v in self.params.items()}
        theta = self.embeddings(p)
        probs, alphas, fused = [], [], []
        for i in range(0, len(Z), batch):
            v_hat = self.expert_features(p, Z[i:i + batch], theta)
            a = gate(v_hat, p)
            f = fuse(v_hat, a, 2 * self.cfg.embed_dim)
            probs.append(dc.softmax(lws_logits(f, p), axis=-1).data)
            alphas.append(a.data)
            fused.append(f.data)
        return np.concatenate(probs), np.concatenate(alphas), np.concatenate(fused)

    # -- checkpoint --------------------------------------------------------

    def save(self, path):
        meta = {
            "config": asdict(self.cfg),
            "graph": None if self.graph is None else self.graph.to_dict(),
            "clusters": None if self.clusters is None else self.clusters.to_dict(),
            "stage": self.stage,
            "rng_state": self.rng_state,
        }
        meta_bytes = json.dumps(meta, sort_keys=True).encode()
        parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(meta_bytes)), meta_bytes,
                 struct.pack("<I", len(self.params))]
        for name in sorted(self.params):
            arr = np.ascontiguousarray(self.params[name], dtype="<f8")
            enc = name.encode()
            parts.append(struct.pack("<HB", len(enc), arr.ndim) + enc)
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(arr.tobytes())
        with open(path, "wb") as fh:
            fh.write(b"".join(parts))

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:len(CKPT_MAGIC)] != CKPT_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint")
        pos = len(CKPT_MAGIC)
        version, n_meta = struct.unpack_from("<II", blob, pos)
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        pos += 8
        meta = json.loads(blob[pos:pos + n_meta])
        pos += n_meta
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        params = {}
        for _ in range(count):
            n_name, ndim = struct.unpack_from("<HB", blob, pos)
            pos += 3
            name = blob[pos:pos + n_name].decode()
            pos += n_name
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            params[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
        graph = None if meta["graph"] is None else ElectrodeGraph.from_dict(meta["graph"])
        clusters = None if meta["clusters"] is None else ClusterAssignment.from_dict(meta["clusters"])
        return cls(ModelConfig(**meta["config"]), graph, params, clusters, meta["stage"],
                   meta["rng_state"])
