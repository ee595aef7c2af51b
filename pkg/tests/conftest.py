import numpy as np
import pytest

from gcmcg import graph as gr
from gcmcg.cluster import ClusterAssignment
from gcmcg.model import GCMCG, ModelConfig


def toy_graph(n_channels=6):
    adj, coords = gr.eight_connected(2, n_channels // 2)
    return gr.build_graph(adj, {i: i for i in range(n_channels)}, coords=coords)


def toy_config(**overrides):
    base = dict(n_channels=6, n_samples=32, n_classes=3, token_dim=8, embed_dim=4,
                gat_heads=2, gate_hidden=5, head_hidden=6)
    base.update(overrides)
    return ModelConfig(**base)


def toy_model(seed=0, clusters=True, **overrides):
    cfg = toy_config(**overrides)
    model = GCMCG.create(cfg, toy_graph(cfg.n_channels) if cfg.use_graph else None, seed=seed)
    if clusters and cfg.use_cluster:
        labels = np.array([1, 1, 1, 2, 2, 2])
        model.set_clusters(ClusterAssignment(labels, 2, np.zeros(6), 2, list(range(6))), seed=seed)
    return model


@pytest.fixture
def model():
    return toy_model()


@pytest.fixture
def batch():
    rng = np.random.default_rng(0)
    return rng.normal(size=(3, 6, 32)), np.array([0, 1, 2])


_CRITERIA = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion and return the verdict."""

    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        _CRITERIA.append((number, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_CRITERIA):
            terminalreporter.write_line(line)
