"""Apply a pruning plan to model weights.

The structural work is delegated to the planner's own apply_plan (single
source of truth); this module only moves weights: kept output channels are
sliced out of convolution/norm parameters, consumer input filters follow
their producers' kept sets, removed units' weights are dropped, and nodes
flagged for reinitialization (including inserted skip projections) are
freshly sampled with Kaiming fan-in initialization.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import torch
from torch import nn

from specprune.errors import ValidationError
from specprune.graph import ModelGraph, apply_plan, load_graph, write_graph
from specprune.planner import PruningPlan, read_plan

from .graph_model import GraphModel, build_model_from_graph
from .toy_model import toy_model


def _kept_out(graph: ModelGraph, nid: str) -> list[int] | None:
    return graph.nodes[nid].kept_channels


_PASSTHROUGH = {"batch_norm", "relu", "pool", "global_pool"}


def _kept_in(pruned: ModelGraph, original: ModelGraph, nid: str) -> list[int] | None:
    """Original input-channel indices surviving at a node's single input.

    Walks up through width-preserving nodes so a pruned convolution's kept
    set reaches its real consumers (norms, the next convolution, the
    classifier behind the pooling stage).
    """
    current = nid
    while True:
        producers = pruned.producers[current]
        if len(producers) != 1:
            return None
        producer = producers[0]
        kept = pruned.nodes[producer].kept_channels
        if kept is not None:
            return list(kept)
        if pruned.nodes[producer].kind in _PASSTHROUGH:
            current = producer
            continue
        return None


def _reinit(module: nn.Module, seed_stream: torch.Generator) -> None:
    if isinstance(module, nn.Conv2d):
        nn.init.kaiming_normal_(module.weight, mode="fan_in",
                                nonlinearity="relu", generator=seed_stream)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Linear):
        nn.init.kaiming_normal_(module.weight, mode="fan_in",
                                nonlinearity="relu", generator=seed_stream)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.BatchNorm2d):
        module.reset_parameters()
        module.reset_running_stats()


def apply_plan_to_weights(model: GraphModel, plan: PruningPlan,
                          graph: ModelGraph, seed: int = 0) -> GraphModel:
    """Build the pruned model and transfer (sliced) weights into it."""
    if plan.metadata.get("graph_sha256") not in (None, graph.canonical_hash()):
        raise ValidationError("plan was generated for a different graph")
    pruned_graph = apply_plan(graph, plan)
    new_model = build_model_from_graph(pruned_graph, seed=seed)
    stream = torch.Generator().manual_seed(seed)

    with torch.no_grad():
        for nid in pruned_graph.topo_order:
            node = pruned_graph.nodes[nid]
            dst = new_model.node_module(nid)
            if node.reinitialized or nid not in graph.nodes:
                _reinit(dst, stream)
                continue
            if not isinstance(dst, (nn.Conv2d, nn.Linear, nn.BatchNorm2d)):
                continue
            src = model.node_module(nid)
            out_idx = _kept_out(pruned_graph, nid)
            in_idx = _kept_in(pruned_graph, graph, nid)
            _transfer(src, dst, out_idx, in_idx, nid)
    return new_model


def _transfer(src: nn.Module, dst: nn.Module, out_idx, in_idx, nid: str) -> None:
    if isinstance(dst, nn.Conv2d):
        weight = src.weight
        if out_idx is not None:
            weight = weight[torch.as_tensor(out_idx)]
        if src.groups == 1 and in_idx is not None:
            weight = weight[:, torch.as_tensor(in_idx)]
        if tuple(weight.shape) != tuple(dst.weight.shape):
            raise ValidationError(
                f"node {nid!r}: sliced weight {tuple(weight.shape)} does not fit "
                f"{tuple(dst.weight.shape)}"
            )
        dst.weight.copy_(weight)
        if src.bias is not None and dst.bias is not None:
            bias = src.bias
            if out_idx is not None:
                bias = bias[torch.as_tensor(out_idx)]
            dst.bias.copy_(bias)
    elif isinstance(dst, nn.BatchNorm2d):
        idx = torch.as_tensor(in_idx) if in_idx is not None else None
        for name in ("weight", "bias", "running_mean", "running_var"):
            s = getattr(src, name)
            d = getattr(dst, name)
            value = s if idx is None else s[idx]
            if tuple(value.shape) != tuple(d.shape):
                raise ValidationError(
                    f"node {nid!r}: norm parameter {name} does not fit"
                )
            d.copy_(value)
        dst.num_batches_tracked.copy_(src.num_batches_tracked)
    elif isinstance(dst, nn.Linear):
        weight = src.weight
        if in_idx is not None:
            weight = weight[:, torch.as_tensor(in_idx)]
        if tuple(weight.shape) != tuple(dst.weight.shape):
            raise ValidationError(
                f"node {nid!r}: classifier weight {tuple(weight.shape)} does not "
                f"fit {tuple(dst.weight.shape)}"
            )
        dst.weight.copy_(weight)
        if src.bias is not None:
            dst.bias.copy_(src.bias)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Slice model weights per a plan.")
    parser.add_argument("--graph", type=Path, default=None,
                        help="Graph JSON; omit for the toy CNN.")
    parser.add_argument("--plan", type=Path, required=True)
    parser.add_argument("--weights", type=Path, default=None)
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--output", type=Path, required=True,
                        help="Output state-dict path (.pt); the pruned graph "
                             "is written next to it.")
    args = parser.parse_args(argv)
    try:
        if args.graph is not None:
            graph = load_graph(args.graph)
            model = build_model_from_graph(graph, seed=args.seed)
        else:
            model, graph = toy_model(seed=args.seed)
        if args.weights is not None:
            model.load_state_dict(torch.load(args.weights, weights_only=True))
        plan = read_plan(args.plan, graph)
        pruned_model = apply_plan_to_weights(model, plan, graph, seed=args.seed)
        torch.save(pruned_model.state_dict(), args.output)
        write_graph(pruned_model.graph, args.output.with_suffix(".graph.json"))
        print(f"pruned_weights\t{args.output}")
        print(f"pruned_graph\t{args.output.with_suffix('.graph.json')}")
        print(f"parameters\t{pruned_model.parameter_count()}")
        return 0
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
