"""Torch interpreter for specprune graph files.

A GraphModel instantiates one torch module per graph node and executes the
DAG in topological order, so any graph the planner can produce is directly
runnable.  Node semantics: ``pool`` is max pooling, ``global_pool`` is
adaptive average pooling, ``channel_shuffle`` is either a slice (when the
node carries a slice window) or a grouped channel shuffle, and ``relu``
covers all the rectifier variants the cost model treats as free.
"""

from __future__ import annotations

import torch
from torch import nn

from specprune.graph import ModelGraph


class _Slice(nn.Module):
    def __init__(self, lo: int, hi: int):
        super().__init__()
        self.lo, self.hi = lo, hi

    def forward(self, x):
        return x[:, self.lo:self.hi]


class _Shuffle(nn.Module):
    def __init__(self, groups: int):
        super().__init__()
        self.groups = groups

    def forward(self, x):
        if self.groups <= 1:
            return x
        b, c, h, w = x.shape
        return (x.view(b, self.groups, c // self.groups, h, w)
                .transpose(1, 2).reshape(b, c, h, w))


def _module_for(graph: ModelGraph, nid: str) -> nn.Module:
    node = graph.nodes[nid]
    cin = graph.in_channels(nid)
    if node.kind in ("conv2d", "depthwise_conv2d"):
        return nn.Conv2d(cin, node.out_channels, kernel_size=node.kernel,
                         stride=node.stride, padding=node.padding,
                         groups=node.groups, bias=node.has_bias)
    if node.kind == "batch_norm":
        return nn.BatchNorm2d(node.out_channels)
    if node.kind == "relu":
        return nn.ReLU(inplace=False)
    if node.kind == "pool":
        return nn.MaxPool2d(kernel_size=node.kernel, stride=node.stride,
                            padding=node.padding)
    if node.kind == "global_pool":
        return nn.AdaptiveAvgPool2d(1)
    if node.kind in ("linear", "classifier"):
        return nn.Linear(cin, node.out_channels, bias=node.has_bias)
    if node.kind == "channel_shuffle":
        if node.channel_slice is not None:
            return _Slice(*node.channel_slice)
        return _Shuffle(node.groups)
    if node.kind in ("add", "concat"):
        return nn.Identity()  # joins are handled in forward()
    raise ValueError(f"unsupported node kind {node.kind!r}")


class GraphModel(nn.Module):
    """Executable torch model built from a pruning graph."""

    def __init__(self, graph: ModelGraph):
        super().__init__()
        self.graph = graph
        self.modules_by_node = nn.ModuleDict(
            {_key(nid): _module_for(graph, nid) for nid in graph.topo_order}
        )

    def node_module(self, nid: str) -> nn.Module:
        return self.modules_by_node[_key(nid)]

    def forward(self, x: torch.Tensor, record: set[str] | None = None):
        graph = self.graph
        outputs: dict[str, torch.Tensor] = {}
        recorded: dict[str, torch.Tensor] = {}
        result = None
        consumers_left = {nid: len(graph.consumers[nid]) for nid in graph.topo_order}
        for nid in graph.topo_order:
            node = graph.nodes[nid]
            if nid == graph.source:
                inputs = [x]
            else:
                inputs = [outputs[p] for p in graph.producers[nid]]
            if node.kind == "add":
                value = inputs[0]
                for extra in inputs[1:]:
                    value = value + extra
            elif node.kind == "concat":
                value = torch.cat(inputs, dim=1)
            elif node.kind in ("linear", "classifier"):
                value = self.node_module(nid)(torch.flatten(inputs[0], 1))
            else:
                value = self.node_module(nid)(inputs[0])
            outputs[nid] = value
            if record and nid in record:
                recorded[nid] = value
            for p in graph.producers[nid]:
                consumers_left[p] -= 1
                if consumers_left[p] == 0:
                    del outputs[p]
            result = value
        if record is not None:
            return result, recorded
        return result

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def _key(nid: str) -> str:
    # ModuleDict forbids dots in keys
    return nid.replace(".", "__dot__")


def build_model_from_graph(graph: ModelGraph, seed: int | None = None) -> GraphModel:
    if seed is not None:
        torch.manual_seed(seed)
    return GraphModel(graph)
