import numpy as np
import pytest

from specprune.activations import ActivationSet
from specprune.graph import ModelGraph, Node


def chain_graph(units: int = 4, width: int = 8, channel_prunable: bool = True,
                class_count: int = 7) -> ModelGraph:
    """stem conv -> N single-conv units -> global pool -> classifier."""
    nodes = [Node(id="stem", kind="conv2d", out_channels=width, kernel=(3, 3),
                  padding=(1, 1))]
    edges = []
    prev = "stem"
    for i in range(units):
        nid = f"u{i}"
        nodes.append(Node(id=nid, kind="conv2d", out_channels=width, kernel=(3, 3),
                          padding=(1, 1), prunable=True,
                          channel_prunable=channel_prunable))
        edges.append((prev, nid))
        prev = nid
    nodes.append(Node(id="gap", kind="global_pool", out_channels=width))
    nodes.append(Node(id="fc", kind="classifier", out_channels=class_count,
                      has_bias=True))
    edges += [(prev, "gap"), ("gap", "fc")]
    return ModelGraph(nodes, edges, [], (3, 16, 16), class_count)


def stride_graph() -> ModelGraph:
    """Two units where the first downsamples and widens (8 -> 16, stride 2)."""
    nodes = [
        Node(id="stem", kind="conv2d", out_channels=8, kernel=(3, 3), padding=(1, 1)),
        Node(id="u0", kind="conv2d", out_channels=16, kernel=(3, 3), stride=(2, 2),
             padding=(1, 1), prunable=True),
        Node(id="u1", kind="conv2d", out_channels=16, kernel=(3, 3), padding=(1, 1),
             prunable=True, channel_prunable=True),
        Node(id="gap", kind="global_pool", out_channels=16),
        Node(id="fc", kind="classifier", out_channels=7, has_bias=True),
    ]
    edges = [("stem", "u0"), ("u0", "u1"), ("u1", "gap"), ("gap", "fc")]
    return ModelGraph(nodes, edges, [], (3, 16, 16), 7)


def _basic_block(nodes, edges, unit: str, entry: str, cin: int, cout: int,
                 stride: int) -> str:
    def conv(nid, prev, out, k, s=1, p=1):
        nodes.append(Node(id=nid, kind="conv2d", out_channels=out, kernel=(k, k),
                          stride=(s, s), padding=(p, p), unit=unit))
        edges.append((prev, nid))
        return nid

    c1 = conv(f"{unit}_c1", entry, cout, 3, s=stride)
    nodes.append(Node(id=f"{unit}_bn1", kind="batch_norm", out_channels=cout, unit=unit))
    edges.append((c1, f"{unit}_bn1"))
    nodes.append(Node(id=f"{unit}_r1", kind="relu", out_channels=cout, unit=unit))
    edges.append((f"{unit}_bn1", f"{unit}_r1"))
    c2 = conv(f"{unit}_c2", f"{unit}_r1", cout, 3)
    nodes.append(Node(id=f"{unit}_bn2", kind="batch_norm", out_channels=cout, unit=unit))
    edges.append((c2, f"{unit}_bn2"))
    if stride != 1 or cin != cout:
        ds = conv(f"{unit}_ds", entry, cout, 1, s=stride, p=0)
        nodes.append(Node(id=f"{unit}_ds_bn", kind="batch_norm", out_channels=cout,
                          unit=unit))
        edges.append((ds, f"{unit}_ds_bn"))
        skip = f"{unit}_ds_bn"
    else:
        skip = entry
    nodes.append(Node(id=f"{unit}_add", kind="add", out_channels=cout, unit=unit))
    edges += [(f"{unit}_bn2", f"{unit}_add"), (skip, f"{unit}_add")]
    nodes.append(Node(id=f"{unit}_out", kind="relu", out_channels=cout, unit=unit,
                      prunable=True))
    edges.append((f"{unit}_add", f"{unit}_out"))
    return f"{unit}_out"


def residual_graph() -> ModelGraph:
    """stem -> downsampling block (8->16, s2) -> identity block (16) -> head."""
    nodes = [Node(id="stem", kind="conv2d", out_channels=8, kernel=(3, 3),
                  padding=(1, 1))]
    edges = []
    cur = _basic_block(nodes, edges, "blk1", "stem", 8, 16, 2)
    cur = _basic_block(nodes, edges, "blk2", cur, 16, 16, 1)
    nodes.append(Node(id="gap", kind="global_pool", out_channels=16))
    nodes.append(Node(id="fc", kind="classifier", out_channels=7, has_bias=True))
    edges += [(cur, "gap"), ("gap", "fc")]
    return ModelGraph(nodes, edges, [], (3, 16, 16), 7)


def coupled_graph() -> ModelGraph:
    """Expansion conv + depthwise conv tied by a coupling group."""
    nodes = [
        Node(id="stem", kind="conv2d", out_channels=8, kernel=(3, 3), padding=(1, 1)),
        Node(id="u0_expand", kind="conv2d", out_channels=12, kernel=(1, 1),
             unit="u0", channel_prunable=True),
        Node(id="u0_dw", kind="depthwise_conv2d", out_channels=12, kernel=(3, 3),
             padding=(1, 1), groups=12, unit="u0", channel_prunable=True),
        Node(id="u0_project", kind="conv2d", out_channels=8, kernel=(1, 1),
             unit="u0", prunable=True),
        Node(id="gap", kind="global_pool", out_channels=8),
        Node(id="fc", kind="classifier", out_channels=7, has_bias=True),
    ]
    edges = [("stem", "u0_expand"), ("u0_expand", "u0_dw"), ("u0_dw", "u0_project"),
             ("u0_project", "gap"), ("gap", "fc")]
    return ModelGraph(nodes, edges, [["u0_expand", "u0_dw"]], (3, 8, 8), 7)


def make_activations(graph: ModelGraph, batch: int = 8, spatial: int = 2,
                     seed: int = 0, node_ids=None,
                     duplicates: dict[str, str] | None = None) -> ActivationSet:
    """Random activations shaped to the graph; duplicates maps copy <- source."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    if node_ids is None:
        node_ids = sorted(set(graph.prunable_units()) | set(graph.channel_prunable_nodes()))
    entries = {}
    for nid in node_ids:
        c = graph.nodes[nid].out_channels
        entries[nid] = rng.standard_normal((batch, c, spatial, spatial)).astype(np.float32)
    for copy, source in (duplicates or {}).items():
        entries[copy] = entries[source].copy()
    return ActivationSet(entries)


@pytest.fixture
def rng():
    return np.random.default_rng(np.random.SeedSequence(1234))
