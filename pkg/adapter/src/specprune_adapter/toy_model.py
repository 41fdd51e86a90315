"""A small chain-of-blocks CNN used by the adapter tests and demos."""

from __future__ import annotations

from specprune.graph import ModelGraph, Node

from .graph_model import GraphModel, build_model_from_graph

TOY_INPUT = (1, 16, 16)


def toy_graph(blocks: int = 3, width: int = 8,
              input_shape: tuple[int, int, int] = TOY_INPUT,
              class_count: int = 7, with_bn: bool = True) -> ModelGraph:
    """stem -> N conv blocks (each a prunable unit) -> pool -> classifier."""
    nodes = [
        Node(id="stem_conv", kind="conv2d", out_channels=width, kernel=(3, 3),
             padding=(1, 1)),
        Node(id="stem_bn", kind="batch_norm", out_channels=width),
        Node(id="stem_relu", kind="relu", out_channels=width),
    ]
    edges = [("stem_conv", "stem_bn"), ("stem_bn", "stem_relu")]
    prev = "stem_relu"
    for i in range(blocks):
        unit = f"b{i}"
        nodes.append(Node(id=f"{unit}_conv", kind="conv2d", out_channels=width,
                          kernel=(3, 3), padding=(1, 1), unit=unit,
                          channel_prunable=True))
        edges.append((prev, f"{unit}_conv"))
        prev = f"{unit}_conv"
        if with_bn:
            nodes.append(Node(id=f"{unit}_bn", kind="batch_norm",
                              out_channels=width, unit=unit))
            edges.append((prev, f"{unit}_bn"))
            prev = f"{unit}_bn"
        nodes.append(Node(id=f"{unit}_out", kind="relu", out_channels=width,
                          unit=unit, prunable=True))
        edges.append((prev, f"{unit}_out"))
        prev = f"{unit}_out"
    nodes += [
        Node(id="gap", kind="global_pool", out_channels=width),
        Node(id="fc", kind="classifier", out_channels=class_count, has_bias=True),
    ]
    edges += [(prev, "gap"), ("gap", "fc")]
    return ModelGraph(nodes, edges, [], input_shape, class_count)


def toy_model(seed: int = 0, **kwargs) -> tuple[GraphModel, ModelGraph]:
    graph = toy_graph(**kwargs)
    return build_model_from_graph(graph, seed=seed), graph


def make_identity_block(model: GraphModel, unit: str) -> None:
    """Turn a bn-free block into an exact pass-through.

    The conv gets a delta kernel, so block output equals block input; after
    the preceding relu the trailing relu changes nothing, and the block's
    recorded activations are byte-identical to its producer's.
    """
    import torch

    conv = model.node_module(f"{unit}_conv")
    with torch.no_grad():
        conv.weight.zero_()
        center = conv.kernel_size[0] // 2
        for c in range(conv.out_channels):
            conv.weight[c, c, center, center] = 1.0
