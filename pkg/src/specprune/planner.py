"""Hierarchical pruning plans: a layer stage followed by a channel stage.

Stage 1 clusters whole units by representational similarity and keeps the
first unit of each cluster (earliest in topological order).  Stage 2 runs
the same clustering per surviving node over channels and keeps the leading
(original lowest-index) channel of each cluster.  Coupled nodes are
clustered once over their averaged channel similarity so they share one
kept set.  Plans serialize to JSON and are tied to the source graph by its
content hash.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .activations import ActivationSet
from .errors import DegenerateInputError, ValidationError
from .graph import ModelGraph, apply_plan, validate_plan
from .similarity import SimilarityMatrix, channel_similarity, layer_similarity
from .spectral import Clustering, spectral_cluster

REINIT_SCHEME = "kaiming"


@dataclass
class LayerStage:
    clusters: list[list[str]] = field(default_factory=list)
    retained: list[str] = field(default_factory=list)
    removed: list[str] = field(default_factory=list)
    reinitialized: list[tuple[str, str]] = field(default_factory=list)


@dataclass
class PruningPlan:
    layer_stage: LayerStage
    channel_stage: dict[str, list[int]]
    metadata: dict

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "graph_sha256": self.metadata.get("graph_sha256", ""),
            "layer_stage": {
                "clusters": [list(c) for c in self.layer_stage.clusters],
                "retained": list(self.layer_stage.retained),
                "removed": list(self.layer_stage.removed),
                "reinitialized": [[nid, scheme]
                                  for nid, scheme in self.layer_stage.reinitialized],
            },
            "channel_stage": {nid: list(kept)
                              for nid, kept in self.channel_stage.items()},
            "metadata": {k: v for k, v in self.metadata.items() if k != "graph_sha256"},
        }


def derive_seed(seed: int, label: str) -> int:
    """Stable child seed for a named sub-task of a run."""
    digest = hashlib.sha256(f"{seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def identity_plan(graph: ModelGraph, seed: int = 0) -> PruningPlan:
    """A plan that removes nothing and keeps every channel."""
    units = graph.prunable_units()
    channel_stage = {
        nid: list(range(graph.nodes[nid].out_channels))
        for nid in graph.channel_prunable_nodes()
    }
    return PruningPlan(
        layer_stage=LayerStage(clusters=[[u] for u in units], retained=list(units)),
        channel_stage=channel_stage,
        metadata={
            "k": len(units),
            "channel_spec": {"mode": "ratio", "value": 1.0},
            "seed": seed,
            "graph_sha256": graph.canonical_hash(),
        },
    )


def plan_layers(graph: ModelGraph, clustering: Clustering,
                unit_ids: list[str]) -> LayerStage:
    """Turn a unit clustering into retained/removed sets with reinit markers.

    Within each cluster the earliest unit in topological order is retained;
    the rest are removed.  Markers are produced for every retained node
    whose input width changes once the removals are applied (the subsequent
    unit must be re-initialized to restore shape consistency).
    """
    if len(clustering.assignments) != len(unit_ids):
        raise ValidationError(
            f"assignment length {len(clustering.assignments)} != unit count {len(unit_ids)}"
        )
    if list(unit_ids) != graph.prunable_units():
        raise ValidationError("unit_ids must be the graph's prunable units in order")

    by_cluster: dict[int, list[str]] = {}
    for uid, cid in zip(unit_ids, clustering.assignments):
        by_cluster.setdefault(int(cid), []).append(uid)
    topo_index = {nid: i for i, nid in enumerate(graph.topo_order)}
    clusters = sorted(
        (sorted(members, key=topo_index.__getitem__) for members in by_cluster.values()),
        key=lambda ms: topo_index[ms[0]],
    )
    retained = [c[0] for c in clusters]
    removed = [uid for c in clusters for uid in c[1:]]
    stage = LayerStage(clusters=clusters, retained=retained, removed=removed)

    probe = PruningPlan(layer_stage=stage, channel_stage={}, metadata={})
    pruned = apply_plan(graph, probe)
    unit_terminals = set(graph.prunable_units())
    members = {m for t in unit_terminals for m in graph.unit_members(t)}
    stage.reinitialized = [
        (nid, REINIT_SCHEME)
        for nid in pruned.topo_order
        if pruned.nodes[nid].reinitialized and nid in graph.nodes
        and (nid in unit_terminals or nid not in members)
    ]
    return stage


def plan_channels(graph: ModelGraph,
                  per_node_clusterings: dict[str, tuple[Clustering, list[int]]],
                  degenerate: dict[str, list[int]]) -> dict[str, list[int]]:
    """Kept-channel sets from per-node clusterings over non-degenerate channels.

    ``graph`` is the layer-pruned graph; clusterings must cover all of its
    channel-prunable nodes.  Labels carry original channel indices so the
    kept set is the lowest original index of each cluster.  A node whose
    channels are all degenerate keeps channel 0.
    """
    expected = set(graph.channel_prunable_nodes())
    missing = sorted(expected - set(per_node_clusterings))
    if missing:
        raise ValidationError(f"channel clusterings missing for nodes: {missing}")
    unknown = sorted(set(per_node_clusterings) - expected)
    if unknown:
        raise ValidationError(f"channel clusterings for non-prunable nodes: {unknown}")

    stage: dict[str, list[int]] = {}
    for nid in graph.channel_prunable_nodes():
        clustering, labels = per_node_clusterings[nid]
        if len(clustering.assignments) != len(labels):
            raise ValidationError(f"node {nid!r}: assignment/label length mismatch")
        leaders: dict[int, int] = {}
        for label, cid in zip(labels, clustering.assignments):
            cid = int(cid)
            if cid not in leaders or label < leaders[cid]:
                leaders[cid] = int(label)
        kept = sorted(leaders.values())
        if not kept:
            kept = [0]
        stage[nid] = kept

    for group in graph.coupling_groups:
        kept_sets = {tuple(stage[nid]) for nid in group if nid in stage}
        if len(kept_sets) > 1:
            raise ValidationError(
                f"coupling group {group!r} produced differing kept sets"
            )
    return stage


def _ratio_clusters(ratio: float, channels: int) -> int:
    return max(1, int(ratio * channels + 0.5))


def _normalize_channel_spec(channel_spec) -> dict:
    if isinstance(channel_spec, (int, float)):
        value = float(channel_spec)
        if not 0.0 < value <= 1.0:
            raise ValidationError(f"keep-ratio {value} outside (0, 1]")
        return {"mode": "ratio", "value": value}
    if isinstance(channel_spec, dict):
        if channel_spec.get("mode") == "ratio":
            return _normalize_channel_spec(channel_spec["value"])
        values = channel_spec.get("values", channel_spec)
        return {"mode": "per_node",
                "values": {str(k): int(v) for k, v in values.items()}}
    raise ValidationError(f"unsupported channel spec {channel_spec!r}")


def _cluster_count(spec: dict, members: list[str], channels: int) -> int:
    if spec["mode"] == "ratio":
        return _ratio_clusters(spec["value"], channels)
    values = spec["values"]
    ks = set()
    for nid in members:
        if nid not in values:
            raise ValidationError(f"channel spec missing node {nid!r}")
        ks.add(int(values[nid]))
    if len(ks) != 1:
        raise ValidationError(f"coupled nodes {members!r} have differing k_i")
    k = ks.pop()
    if not 1 <= k <= channels:
        raise ValidationError(f"k_i={k} outside [1, {channels}] for {members!r}")
    return k


def _averaged_group_similarity(
    aset: ActivationSet, members: list[str]
) -> tuple[SimilarityMatrix, list[int]]:
    """Entry-wise average of the members' channel similarity matrices.

    A channel degenerate in any member is excluded everywhere so the
    matrices align on a common label set.
    """
    per_member = []
    degenerate: set[int] = set()
    for nid in members:
        matrix, degen = channel_similarity(aset, nid)
        per_member.append(matrix)
        degenerate.update(degen)
    total = aset.channel_count(members[0])
    common = [p for p in range(total) if p not in degenerate]
    if not common:
        raise DegenerateInputError(
            f"all channels degenerate across coupled nodes {members!r}"
        )
    acc = None
    for matrix in per_member:
        pos = {label: i for i, label in enumerate(matrix.labels)}
        idx = [pos[label] for label in common]
        sub = matrix.data[idx][:, idx]
        acc = sub if acc is None else acc + sub
    data = acc / len(per_member)
    return SimilarityMatrix(dim=len(common), data=data, kind="channel",
                            labels=common), sorted(degenerate)


def hierarchical_plan(graph: ModelGraph, activations: ActivationSet, k: int,
                      channel_spec, seed: int, threads: int = 1) -> PruningPlan:
    """Run both pruning stages and return the combined plan.

    Stage 2 reuses the original activation dump for surviving nodes (the
    pre-trained model's extractions index the channel analysis; re-export
    against the pruned model is the adapter's ``--reexport`` path).
    Deterministic for a fixed seed at any thread count.
    """
    unit_ids = graph.prunable_units()
    if not unit_ids:
        raise ValidationError("graph has no prunable units")
    missing = sorted(uid for uid in unit_ids if uid not in activations)
    if missing:
        raise ValidationError(f"activations missing for prunable units: {missing}")
    if not 1 <= k <= len(unit_ids):
        raise ValidationError(f"k={k} outside [1, {len(unit_ids)}]")
    for uid in unit_ids:
        have = activations.channel_count(uid)
        want = graph.nodes[uid].out_channels
        if have != want:
            raise ValidationError(
                f"activations for {uid!r} have {have} channels, graph says {want}"
            )
    spec = _normalize_channel_spec(channel_spec)

    sim = layer_similarity(activations, unit_ids)
    layer_clusters = spectral_cluster(sim, k, derive_seed(seed, "layer-stage"))
    layer_stage = plan_layers(graph, layer_clusters, unit_ids)
    pruned = apply_plan(
        graph, PruningPlan(layer_stage=layer_stage, channel_stage={}, metadata={})
    )

    channel_nodes = pruned.channel_prunable_nodes()
    missing = sorted(nid for nid in channel_nodes if nid not in activations)
    if missing:
        raise ValidationError(f"activations missing for channel-prunable nodes: {missing}")

    # cluster coupled groups once; everything else per node
    grouped: list[list[str]] = []
    seen: set[str] = set()
    for group in pruned.coupling_groups:
        prunable_members = [nid for nid in group if nid in channel_nodes]
        if not prunable_members:
            continue
        if len(prunable_members) != len(group):
            raise ValidationError(
                f"coupling group {group!r} mixes channel-prunable and fixed nodes"
            )
        grouped.append(sorted(group))
        seen.update(group)
    for nid in channel_nodes:
        if nid not in seen:
            grouped.append([nid])

    def job(members: list[str]):
        try:
            if len(members) == 1:
                matrix, degen = channel_similarity(activations, members[0])
            else:
                matrix, degen = _averaged_group_similarity(activations, members)
        except DegenerateInputError:
            # every channel is flat; keep only the leading channel
            total = activations.channel_count(members[0])
            trivial = Clustering(assignments=np.zeros(1, dtype=np.int64),
                                 centroids=np.zeros((1, 1)), inertia=0.0)
            return members, trivial, [0], list(range(total))
        k_i = min(_cluster_count(spec, members, activations.channel_count(members[0])),
                  matrix.dim)
        clustering = spectral_cluster(
            matrix, k_i, derive_seed(seed, "channels:" + "+".join(members))
        )
        return members, clustering, list(matrix.labels), degen

    results = []
    if threads > 1 and len(grouped) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, grouped))
    else:
        results = [job(members) for members in grouped]

    per_node: dict[str, tuple[Clustering, list[int]]] = {}
    degenerate: dict[str, list[int]] = {}
    for members, clustering, labels, degen in sorted(results, key=lambda r: r[0]):
        for nid in members:
            per_node[nid] = (clustering, labels)
            degenerate[nid] = list(degen)

    channel_stage = plan_channels(pruned, per_node, degenerate)
    plan = PruningPlan(
        layer_stage=layer_stage,
        channel_stage=channel_stage,
        metadata={
            "k": int(k),
            "channel_spec": spec,
            "seed": int(seed),
            "graph_sha256": graph.canonical_hash(),
        },
    )
    validate_plan(graph, plan)
    return plan


# -- serialization ------------------------------------------------------------

def write_plan(plan: PruningPlan, path: str | Path) -> None:
    payload = json.dumps(plan.to_dict(), sort_keys=True, indent=2)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(payload)
        fh.write("\n")


def read_plan(path: str | Path, graph: ModelGraph) -> PruningPlan:
    """Load a plan and validate it against the graph it was generated for."""
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("version") != 1:
        raise ValidationError(f"unsupported plan version {payload.get('version')!r}")
    expected = graph.canonical_hash()
    if payload.get("graph_sha256") != expected:
        raise ValidationError(
            "graph hash mismatch: plan was generated for a different graph"
        )
    raw_stage = payload.get("layer_stage", {})
    stage = LayerStage(
        clusters=[list(c) for c in raw_stage.get("clusters", [])],
        retained=list(raw_stage.get("retained", [])),
        removed=list(raw_stage.get("removed", [])),
        reinitialized=[(str(n), str(s)) for n, s in raw_stage.get("reinitialized", [])],
    )
    channel_stage = {str(nid): [int(i) for i in kept]
                     for nid, kept in payload.get("channel_stage", {}).items()}
    metadata = dict(payload.get("metadata", {}))
    metadata["graph_sha256"] = payload["graph_sha256"]
    plan = PruningPlan(layer_stage=stage, channel_stage=channel_stage,
                       metadata=metadata)
    retained_set = set(stage.retained)
    for cluster in stage.clusters:
        if sum(1 for nid in cluster if nid in retained_set) != 1:
            raise ValidationError(f"cluster {cluster!r} must retain exactly one unit")
    validate_plan(graph, plan)
    return plan
