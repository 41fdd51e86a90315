"""Export activation dumps (and the matching graph JSON) from a torch model.

The dump uses the planner's manifest + raw float32 format, so the planner
reads it bit-exactly.  Hooked nodes default to the graph's prunable units
plus its channel-prunable nodes, which is exactly what the two pruning
stages consume.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from specprune.activations import ActivationSet, write_activations
from specprune.errors import ValidationError
from specprune.graph import ModelGraph, load_graph, write_graph

from .graph_model import GraphModel, build_model_from_graph
from .toy_model import toy_model


def default_export_nodes(graph: ModelGraph) -> list[str]:
    ordered = []
    wanted = set(graph.prunable_units()) | set(graph.channel_prunable_nodes())
    for nid in graph.topo_order:
        if nid in wanted:
            ordered.append(nid)
    return ordered


def export_activations(model: GraphModel, probe: torch.Tensor,
                       out_dir: str | Path,
                       node_ids: list[str] | None = None) -> Path:
    """Run the probe batch and dump the hooked activations.

    Shapes are validated against the model's graph; mismatches are listed
    per node.  Returns the manifest path.
    """
    graph = model.graph
    if node_ids is None:
        node_ids = default_export_nodes(graph)
    unknown = [nid for nid in node_ids if nid not in graph.nodes]
    if unknown:
        raise ValidationError(f"hooked nodes missing from graph: {unknown}")
    if probe.shape[0] < 4:
        raise ValidationError(f"probe batch {probe.shape[0]} < 4")

    model.eval()
    with torch.no_grad():
        _, recorded = model(probe, record=set(node_ids))

    mismatched = []
    entries: dict[str, np.ndarray] = {}
    for nid in node_ids:
        tensor = recorded[nid]
        want = graph.nodes[nid].out_channels
        if tensor.ndim != 4 or tensor.shape[1] != want:
            mismatched.append(f"{nid}: got {tuple(tensor.shape)}, want {want} channels")
            continue
        entries[nid] = tensor.cpu().numpy().astype(np.float32, copy=False)
    if mismatched:
        raise ValidationError("hook/graph mismatch: " + "; ".join(mismatched))
    return write_activations(ActivationSet(entries), out_dir)


def load_probe(dataset_path: Path, split: str, batch: int,
               input_shape) -> torch.Tensor:
    """Probe batch drawn from a preprocessed dataset split."""
    payload = json.loads(dataset_path.read_text())
    if split not in payload.get("splits", {}):
        raise ValidationError(f"split {split!r} not in dataset")
    meta = payload["splits"][split]
    shape = meta["shape"]
    data = np.fromfile(dataset_path.parent / meta["file"], dtype="<f4")
    data = data.reshape(shape)
    if shape[0] < batch:
        raise ValidationError(f"split has {shape[0]} records < batch {batch}")
    probe = torch.from_numpy(data[:batch].copy())
    if tuple(probe.shape[1:]) != tuple(input_shape):
        raise ValidationError(
            f"dataset records {tuple(probe.shape[1:])} do not match model input "
            f"{tuple(input_shape)}"
        )
    return probe


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        description="Export activations (and graph JSON) for the planner.")
    parser.add_argument("--graph", type=Path, default=None,
                        help="Graph JSON to instantiate; omit for the toy CNN.")
    parser.add_argument("--weights", type=Path, default=None,
                        help="Optional state dict for the model.")
    parser.add_argument("--dataset", type=Path, default=None,
                        help="dataset.json from `specprune preprocess`; the "
                             "probe batch is drawn from it.")
    parser.add_argument("--split", default="train")
    parser.add_argument("--batch", type=int, default=256)
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--output", type=Path, required=True)
    args = parser.parse_args(argv)

    try:
        torch.manual_seed(args.seed)
        if args.graph is not None:
            graph = load_graph(args.graph)
            model = build_model_from_graph(graph, seed=args.seed)
        else:
            model, graph = toy_model(seed=args.seed)
        if args.weights is not None:
            model.load_state_dict(torch.load(args.weights, weights_only=True))
        if args.dataset is not None:
            probe = load_probe(args.dataset, args.split, args.batch,
                               graph.input_shape)
        else:
            probe = torch.randn(args.batch, *graph.input_shape)
        manifest = export_activations(model, probe, args.output)
        write_graph(graph, args.output / "graph.json")
        print(f"manifest\t{manifest}")
        print(f"graph\t{args.output / 'graph.json'}")
        return 0
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
