"""Electrode graph, tokenizer features and the multi-head graph-attention encoder."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc

NEG_INF = -1e30
TOKEN_MAGIC = b"GTOK"
TOKEN_VERSION = 1


class GraphError(ValueError):
    pass


@dataclass
class ElectrodeGraph:
    """Fixed electrode neighbourhoods plus the node -> dataset-channel map.

    Node and channel indices are 0-based in memory and 1-based in files.
    """

    adjacency: dict  # node -> sorted neighbour list
    node_count: int
    electrode_map: dict  # node -> dataset channel
    mask: np.ndarray  # bool, True = participates
    coords: np.ndarray | None = None

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        bad = sorted((i, j) for i, nbrs in self.adjacency.items() for j in nbrs
                     if i not in self.adjacency.get(j, ()))
        if bad:
            pairs = ", ".join(f"{i + 1}->{j + 1}" for i, j in bad)
            raise GraphError(f"adjacency is not symmetric: {pairs}")
        loops = [i + 1 for i, nbrs in self.adjacency.items() if i in nbrs]
        if loops:
            raise GraphError(f"self loops at nodes {loops}")
        channels = list(self.electrode_map.values())
        if len(set(channels)) != len(channels):
            raise GraphError("electrode map assigns one dataset channel to several nodes")

    @property
    def unmasked_nodes(self):
        return [i for i in range(self.node_count) if self.mask[i]]

    @property
    def channels(self):
        """Dataset channels of the unmasked nodes, in node order."""
        return [self.electrode_map[i] for i in self.unmasked_nodes]

    def adjacency_matrix(self):
        a = np.zeros((self.node_count, self.node_count), dtype=bool)
        for i, nbrs in self.adjacency.items():
            a[i, list(nbrs)] = True
        return a

    def effective_adjacency(self):
        """Edges between unmasked nodes; self loops stand in for empty neighbourhoods."""
        a = self.adjacency_matrix() & self.mask[:, None] & self.mask[None, :]
        empty = ~a.any(axis=1)
        a[empty, empty] = True
        return a

    def to_dict(self):
        return {
            "node_count": self.node_count,
            "adjacency": {str(k): list(v) for k, v in sorted(self.adjacency.items())},
            "electrode_map": {str(k): v for k, v in sorted(self.electrode_map.items())},
            "mask": [bool(m) for m in self.mask],
            "coords": None if self.coords is None else np.asarray(self.coords).tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            adjacency={int(k): list(v) for k, v in d["adjacency"].items()},
            node_count=d["node_count"],
            electrode_map={int(k): int(v) for k, v in d["electrode_map"].items()},
            mask=np.array(d["mask"], dtype=bool),
            coords=None if d.get("coords") is None else np.array(d["coords"], dtype=np.float64),
        )


def build_graph(adjacency, electrode_map, n_channels=None, exclude=(), coords=None):
    """Assemble a graph; nodes without a mapped channel (or listed in ``exclude``) are masked."""
    node_count = max([len(adjacency)] + [i + 1 for i in adjacency])
    adj = {i: sorted(set(adjacency.get(i, ()))) for i in range(node_count)}
    for i, nbrs in adj.items():
        for j in nbrs:
            if not 0 <= j < node_count:
                raise GraphError(f"node {i + 1} lists out-of-range neighbour {j + 1}")
    for node, ch in electrode_map.items():
        if not 0 <= node < node_count:
            raise GraphError(f"electrode map references unknown node {node + 1}")
        if ch < 0 or (n_channels is not None and ch >= n_channels):
            raise GraphError(f"node {node + 1} maps to out-of-range channel {ch + 1}")
    mask = np.array([i in electrode_map and i not in set(exclude) for i in range(node_count)])
    return ElectrodeGraph(adj, node_count, dict(electrode_map), mask, coords)


def parse_adjacency(text):
    adj = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, _, rest = line.partition(":")
        try:
            node = int(head) - 1
            nbrs = [int(tok) - 1 for tok in rest.replace(",", " ").split()]
        except ValueError as exc:
            raise GraphError(f"adjacency line {lineno}: cannot parse {raw!r}") from exc
        if node in adj:
            raise GraphError(f"adjacency line {lineno}: node {node + 1} listed twice")
        adj[node] = nbrs
    return adj


def parse_electrode_map(text):
    emap = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise GraphError(f"electrode map line {lineno}: expected 'node channel', got {raw!r}")
        node, ch = int(parts[0]) - 1, int(parts[1]) - 1
        if node in emap:
            raise GraphError(f"electrode map line {lineno}: duplicate mapping for node {node + 1}")
        emap[node] = ch
    return emap


def parse_coords(text):
    rows = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            node, x, y = line.split()
            rows[int(node) - 1] = (float(x), float(y))
    out = np.zeros((max(rows) + 1, 2))
    for node, xy in rows.items():
        out[node] = xy
    return out


def load_graph(adjacency_file, electrode_map_file, mask_spec=(), n_channels=None,
               coords_file=None):
    with open(adjacency_file) as fh:
        adj = parse_adjacency(fh.read())
    with open(electrode_map_file) as fh:
        emap = parse_electrode_map(fh.read())
    coords = None
    if coords_file is not None:
        with open(coords_file) as fh:
            coords = parse_coords(fh.read())
    exclude = [n - 1 for n in mask_spec]
    return build_graph(adj, emap, n_channels=n_channels, exclude=exclude, coords=coords)


def format_adjacency(graph):
    return "".join(f"{i + 1}: {' '.join(str(j + 1) for j in graph.adjacency[i])}\n"
                   for i in range(graph.node_count))


def format_electrode_map(graph):
    return "".join(f"{n + 1} {c + 1}\n" for n, c in sorted(graph.electrode_map.items()))


def format_coords(coords):
    return "".join(f"{i + 1} {float(x)!r} {float(y)!r}\n" for i, (x, y) in enumerate(np.asarray(coords)))


def eight_connected(rows, cols, occupied=None):
    """Adjacency of a rows x cols grid with 8-neighbourhoods, over occupied cells only."""
    cells = [(r, c) for r in range(rows) for c in range(cols)
             if occupied is None or (r, c) in occupied]
    index = {cell: i for i, cell in enumerate(cells)}
    adj = {}
    for (r, c), i in index.items():
        adj[i] = sorted(index[(r + dr, c + dc_)] for dr in (-1, 0, 1) for dc_ in (-1, 0, 1)
                        if (dr or dc_) and (r + dr, c + dc_) in index)
    return adj, np.array(cells, dtype=np.float64)


# ---------------------------------------------------------------------------
# tokenizer


@dataclass
class TokenizerState:
    features: np.ndarray  # (C_graph, F)
    version: int = TOKEN_VERSION
    provenance: dict = field(default_factory=dict)

    @property
    def F(self):
        return self.features.shape[1]


def spectral_layout(graph):
    """2-D coordinates from the two smallest non-trivial Laplacian eigenvectors."""
    a = graph.adjacency_matrix().astype(float)
    lap = np.diag(a.sum(axis=1)) - a
    _, vecs = np.linalg.eigh(lap)
    return vecs[:, 1:3] if vecs.shape[1] >= 3 else np.zeros((graph.node_count, 2))


def init_tokenizer(graph, F=16, seed=0, noise=0.01):
    """Fourier features of standardised scalp coordinates plus small seeded noise.

    Feature columns are centred over the unmasked nodes so that no component is
    shared by every electrode; otherwise all embedding rows correlate strongly.
    """
    coords = graph.coords if graph.coords is not None else spectral_layout(graph)
    coords = np.asarray(coords, dtype=np.float64)[:graph.node_count]
    live = graph.mask
    mu, sd = coords[live].mean(axis=0), coords[live].std(axis=0)
    unit = (coords - mu) / np.where(sd > 0, sd, 1.0)
    n_freq = max(1, F // 4)
    feats = []
    for k in range(n_freq):
        w = np.pi * (k + 1) / 2.0
        for axis in range(2):
            feats.append(np.sin(w * unit[:, axis]))
            feats.append(np.cos(w * unit[:, axis]))
    theta = np.stack(feats, axis=1)
    theta = np.tile(theta, (1, F // theta.shape[1] + 1))[:, :F]
    theta = theta - theta[live].mean(axis=0)
    theta = theta + noise * np.random.default_rng(seed).normal(size=theta.shape)
    theta[~live] = 0.0
    return TokenizerState(theta, provenance={"init": "fourier-coords", "seed": seed})


def _byte_checksum(payload):
    return int(np.frombuffer(payload, dtype=np.uint8).sum(dtype=np.uint64))


def tokenizer_save(state, path):
    feats = np.ascontiguousarray(state.features, dtype="<f8")
    c, f = feats.shape
    payload = TOKEN_MAGIC + struct.pack("<III", state.version, c, f) + feats.tobytes()
    with open(path, "wb") as fh:
        fh.write(payload + struct.pack("<Q", _byte_checksum(payload) % 2 ** 64))


def tokenizer_load(path, expected_F=None, expected_nodes=None):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != TOKEN_MAGIC:
        raise GraphError(f"{path}: not a tokenizer checkpoint (bad magic {blob[:4]!r})")
    version, c, f = struct.unpack("<III", blob[4:16])
    if version != TOKEN_VERSION:
        raise GraphError(f"{path}: unsupported tokenizer version {version}")
    end = 16 + 8 * c * f
    if len(blob) != end + 8:
        raise GraphError(f"{path}: truncated tokenizer checkpoint")
    (stored,) = struct.unpack("<Q", blob[end:])
    if stored != _byte_checksum(blob[:end]) % 2 ** 64:
        raise GraphError(f"{path}: checksum mismatch")
    if expected_F is not None and f != expected_F:
        raise GraphError(f"tokenizer feature length {f} does not match model token_dim {expected_F}")
    if expected_nodes is not None and c != expected_nodes:
        raise GraphError(f"tokenizer has {c} nodes, graph has {expected_nodes}")
    feats = np.frombuffer(blob[16:end], dtype="<f8").reshape(c, f).astype(np.float64)
    return TokenizerState(feats, version=version)


# ---------------------------------------------------------------------------
# graph attention


@dataclass(frozen=True)
class GatConfig:
    in_dim: int = 16
    out_dim: int = 32
    heads: int = 4
    layers: int = 2

    @property
    def head_dim(self):
        return max(1, self.out_dim // self.heads)

    def layer_shapes(self):
        """[(in_dim, head_dim, n_heads)] per layer; the last layer has one averaging head."""
        shapes = []
        d_in = self.in_dim
        for t in range(self.layers):
            if t == self.layers - 1:
                shapes.append((d_in, self.out_dim, 1))
            else:
                shapes.append((d_in, self.head_dim, self.heads))
                d_in = self.head_dim * self.heads
        return shapes


def init_gat(cfg: GatConfig, rng):
    params = {}
    for t, (d_in, d_head, n_heads) in enumerate(cfg.layer_shapes()):
        for h in range(n_heads):
            lim = np.sqrt(6.0 / (d_in + d_head))
            params[f"gat.{t}.{h}.W"] = rng.uniform(-lim, lim, size=(d_in, d_head))
            params[f"gat.{t}.{h}.a"] = rng.normal(scale=0.1, size=2 * d_head)
    return params


def _edge_bias(graph):
    return np.where(graph.effective_adjacency(), 0.0, NEG_INF)


def attention_head(theta, W, a, edge_bias):
    """One head: returns (alpha N x N, W-projected features N x d)."""
    h = dc.matmul(theta, W)
    d = W.shape[1]
    n = h.shape[0]
    src = dc.reshape(dc.matmul(h, a[:d]), (n, 1))
    dst = dc.reshape(dc.matmul(h, a[d:]), (1, n))
    scores = dc.leaky_relu(src + dst) + edge_bias
    return dc.softmax(scores, axis=1), h


def gat_layer(theta, graph, params, t, cfg: GatConfig, final=None, edge_bias=None):
    """One attention layer over the fixed neighbourhoods; masked rows stay zero."""
    d_in, d_head, n_heads = cfg.layer_shapes()[t]
    final = (t == cfg.layers - 1) if final is None else final
    bias = _edge_bias(graph) if edge_bias is None else edge_bias
    outs = []
    for h in range(n_heads):
        alpha, proj = attention_head(theta, params[f"gat.{t}.{h}.W"], params[f"gat.{t}.{h}.a"], bias)
        outs.append(dc.matmul(alpha, proj))
    if final:
        agg = outs[0]
        for o in outs[1:]:
            agg = agg + o
        out = agg * (1.0 / n_heads) if n_heads > 1 else agg
    else:
        out = dc.elu(dc.concat(outs, axis=1) if n_heads > 1 else outs[0])
    return dc.mask_mul(out, graph.mask[:, None].astype(float))


def gat_forward(theta0, graph, params, cfg: GatConfig):
    theta = dc.mask_mul(theta0, graph.mask[:, None].astype(float))
    bias = _edge_bias(graph)
    for t in range(cfg.layers):
        theta = gat_layer(theta, graph, params, t, cfg, edge_bias=bias)
    return theta


def attention_coefficients(theta, graph, params, t, h, cfg: GatConfig):
    """Normalised attention {(i, j): alpha_ij} for unmasked i over unmasked neighbours j."""
    theta_t = dc.mask_mul(dc.Tensor(theta), graph.mask[:, None].astype(float))
    bias = _edge_bias(graph)
    for layer in range(t):
        theta_t = gat_layer(theta_t, graph, params, layer, cfg, edge_bias=bias)
    alpha, _ = attention_head(theta_t, dc.Tensor(params[f"gat.{t}.{h}.W"]),
                              dc.Tensor(params[f"gat.{t}.{h}.a"]), bias)
    adj = graph.effective_adjacency()
    return {(i, j): float(alpha.data[i, j]) for i in graph.unmasked_nodes
            for j in np.flatnonzero(adj[i])}
