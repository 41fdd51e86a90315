"""Typed graph of prunable units: validation, cost accounting, plan application.

A graph is a DAG of nodes (convolutions, norms, joins, pooling, classifier)
with one source and one classifier sink.  Whole-unit ("layer") pruning
operates on units: a unit is the set of nodes sharing a ``unit`` tag, with
exactly one terminal node flagged ``prunable``; removing the unit deletes
its members and re-stitches the unit's external producer to the terminal's
consumers.  Channel pruning reduces ``out_channels`` of flagged nodes to an
explicit kept-index set; coupling groups declare nodes whose kept sets must
be identical.

Removal is output-shape preserving: when a removed unit changed channel
width or spatial resolution, the next retained unit absorbs the change (its
input-side convolutions adapt and, where an identity skip no longer lines
up, a 1x1 projection is inserted and marked for reinitialization).  This
keeps every downstream shape fixed, so cost never increases under a valid
plan.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ValidationError

KINDS = {
    "conv2d", "depthwise_conv2d", "linear", "batch_norm", "relu", "add",
    "concat", "pool", "global_pool", "channel_shuffle", "classifier",
}
CONV_KINDS = {"conv2d", "depthwise_conv2d"}
# channel count passes straight through these
IDENTITY_KINDS = {"batch_norm", "relu", "pool", "global_pool"}
SINGLE_INPUT_KINDS = CONV_KINDS | IDENTITY_KINDS | {"linear", "classifier", "channel_shuffle"}


@dataclass
class Node:
    id: str
    kind: str
    out_channels: int
    kernel: tuple[int, int] | None = None
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    groups: int = 1
    has_bias: bool = False
    prunable: bool = False
    channel_prunable: bool = False
    unit: str | None = None
    channel_slice: tuple[int, int] | None = None
    reinitialized: bool = False
    kept_channels: list[int] | None = None

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "kind": self.kind,
            "out_channels": self.out_channels,
            "kernel": list(self.kernel) if self.kernel else None,
            "stride": list(self.stride),
            "padding": list(self.padding),
            "groups": self.groups,
            "has_bias": self.has_bias,
            "prunable": self.prunable,
            "channel_prunable": self.channel_prunable,
            "unit": self.unit,
            "channel_slice": list(self.channel_slice) if self.channel_slice else None,
            "reinitialized": self.reinitialized,
            "kept_channels": self.kept_channels,
        }
        return d

    @staticmethod
    def from_dict(d: dict) -> "Node":
        def pair(value):
            return tuple(int(v) for v in value) if value is not None else None

        try:
            return Node(
                id=str(d["id"]),
                kind=str(d["kind"]),
                out_channels=int(d["out_channels"]),
                kernel=pair(d.get("kernel")),
                stride=pair(d.get("stride")) or (1, 1),
                padding=pair(d.get("padding")) or (0, 0),
                groups=int(d.get("groups", 1)),
                has_bias=bool(d.get("has_bias", False)),
                prunable=bool(d.get("prunable", False)),
                channel_prunable=bool(d.get("channel_prunable", False)),
                unit=d.get("unit"),
                channel_slice=pair(d.get("channel_slice")),
                reinitialized=bool(d.get("reinitialized", False)),
                kept_channels=(
                    [int(i) for i in d["kept_channels"]]
                    if d.get("kept_channels") is not None else None
                ),
            )
        except KeyError as missing:
            raise ValidationError(f"node entry missing field {missing}") from None


@dataclass
class CostReport:
    params: int
    flops: int
    per_node: dict[str, tuple[int, int]] = field(default_factory=dict)


class ModelGraph:
    """Validated DAG of nodes with edges, coupling groups, and unit tags."""

    def __init__(self, nodes: list[Node], edges: list[tuple[str, str]],
                 coupling_groups: list[list[str]], input_shape: tuple[int, int, int],
                 class_count: int):
        self.nodes: dict[str, Node] = {}
        for node in nodes:
            if node.id in self.nodes:
                raise ValidationError(f"duplicate node id {node.id!r}")
            self.nodes[node.id] = node
        self.edges: list[tuple[str, str]] = [(str(a), str(b)) for a, b in edges]
        self.coupling_groups: list[list[str]] = [list(g) for g in coupling_groups]
        self.input_shape = tuple(int(v) for v in input_shape)
        self.class_count = int(class_count)
        self._index()
        self.validate()

    # -- structure ---------------------------------------------------------

    def _index(self) -> None:
        self.producers: dict[str, list[str]] = {nid: [] for nid in self.nodes}
        self.consumers: dict[str, list[str]] = {nid: [] for nid in self.nodes}
        seen = set()
        for a, b in self.edges:
            if a not in self.nodes or b not in self.nodes:
                raise ValidationError(f"edge ({a!r}, {b!r}) references unknown node")
            if a == b:
                raise ValidationError(f"self-loop on node {a!r}")
            if (a, b) in seen:
                raise ValidationError(f"duplicate edge ({a!r}, {b!r})")
            seen.add((a, b))
            self.producers[b].append(a)
            self.consumers[a].append(b)
        self.topo_order = self._toposort()

    def _toposort(self) -> list[str]:
        pending = {nid: len(self.producers[nid]) for nid in self.nodes}
        queue = [nid for nid in self.nodes if pending[nid] == 0]
        order = []
        while queue:
            nid = queue.pop(0)
            order.append(nid)
            for nxt in self.consumers[nid]:
                pending[nxt] -= 1
                if pending[nxt] == 0:
                    queue.append(nxt)
        if len(order) != len(self.nodes):
            raise ValidationError("graph contains a cycle")
        return order

    def validate(self) -> None:
        if not self.nodes:
            raise ValidationError("no source node: graph is empty")
        if len(self.input_shape) != 3 or any(v <= 0 for v in self.input_shape):
            raise ValidationError(f"bad input shape {self.input_shape}")
        if self.class_count <= 0:
            raise ValidationError("class_count must be positive")

        sources = [nid for nid in self.nodes if not self.producers[nid]]
        sinks = [nid for nid in self.nodes if not self.consumers[nid]]
        if len(sources) != 1:
            raise ValidationError(f"expected exactly one source node, found {sources!r}")
        if len(sinks) != 1:
            raise ValidationError(f"expected exactly one sink node, found {sinks!r}")
        self.source = sources[0]
        self.sink = sinks[0]
        sink = self.nodes[self.sink]
        if sink.kind != "classifier":
            raise ValidationError(f"sink node {self.sink!r} is {sink.kind}, not classifier")
        if sink.out_channels != self.class_count:
            raise ValidationError("classifier output does not match class_count")

        for node in self.nodes.values():
            if node.kind not in KINDS:
                raise ValidationError(f"node {node.id!r} has unknown kind {node.kind!r}")
            if node.out_channels <= 0:
                raise ValidationError(f"node {node.id!r} has nonpositive out_channels")
            if node.kind == "classifier" and (node.prunable or node.channel_prunable):
                raise ValidationError("classifier node can never be prunable")
            if node.kind in CONV_KINDS or node.kind == "pool":
                if node.kernel is None:
                    raise ValidationError(f"node {node.id!r} ({node.kind}) needs a kernel")
            n_in = len(self.producers[node.id])
            if node.kind in ("add", "concat"):
                if n_in < 2:
                    raise ValidationError(f"{node.kind} node {node.id!r} needs >= 2 inputs")
            elif node.kind in SINGLE_INPUT_KINDS and node.id != self.source:
                if n_in != 1:
                    raise ValidationError(
                        f"node {node.id!r} ({node.kind}) must have exactly one input"
                    )

        self._validate_channels()
        self._validate_units()
        self._validate_coupling()

    def in_channels(self, nid: str) -> int:
        node = self.nodes[nid]
        if nid == self.source:
            return self.input_shape[0]
        widths = [self.nodes[p].out_channels for p in self.producers[nid]]
        if node.kind == "concat":
            return sum(widths)
        if node.kind == "add":
            if len(set(widths)) != 1:
                raise ValidationError(
                    f"add node {nid!r} has unequal input widths {widths}"
                )
            return widths[0]
        return widths[0]

    def _validate_channels(self) -> None:
        for nid in self.topo_order:
            node = self.nodes[nid]
            cin = self.in_channels(nid)
            if node.kind == "conv2d":
                if cin % node.groups or node.out_channels % node.groups:
                    raise ValidationError(
                        f"conv {nid!r}: groups {node.groups} must divide "
                        f"in={cin} and out={node.out_channels}"
                    )
            elif node.kind == "depthwise_conv2d":
                if not (node.groups == cin == node.out_channels):
                    raise ValidationError(
                        f"depthwise conv {nid!r} needs groups == in == out, got "
                        f"groups={node.groups} in={cin} out={node.out_channels}"
                    )
            elif node.kind in IDENTITY_KINDS:
                if node.out_channels != cin:
                    raise ValidationError(
                        f"{node.kind} node {nid!r}: out {node.out_channels} != in {cin}"
                    )
            elif node.kind == "add":
                if node.out_channels != cin:
                    raise ValidationError(f"add node {nid!r}: out must equal input width")
            elif node.kind == "concat":
                if node.out_channels != cin:
                    raise ValidationError(
                        f"concat node {nid!r}: out {node.out_channels} != summed inputs {cin}"
                    )
            elif node.kind == "channel_shuffle":
                if node.channel_slice is not None:
                    lo, hi = node.channel_slice
                    if not (0 <= lo < hi <= cin):
                        raise ValidationError(
                            f"shuffle node {nid!r}: slice [{lo}, {hi}) outside input width {cin}"
                        )
                    if node.out_channels != hi - lo:
                        raise ValidationError(
                            f"shuffle node {nid!r}: out != slice width"
                        )
                elif node.out_channels != cin:
                    raise ValidationError(
                        f"shuffle node {nid!r}: out {node.out_channels} != in {cin}"
                    )

    def _validate_units(self) -> None:
        members_by_unit: dict[str, list[str]] = {}
        for nid in self.topo_order:
            node = self.nodes[nid]
            if node.unit is not None:
                members_by_unit.setdefault(node.unit, []).append(nid)
        self._unit_members: dict[str, list[str]] = {}
        self._unit_producer: dict[str, str] = {}
        for name, members in members_by_unit.items():
            terminals = [m for m in members if self.nodes[m].prunable]
            if len(terminals) != 1:
                raise ValidationError(
                    f"unit {name!r} must have exactly one prunable terminal, "
                    f"found {terminals!r}"
                )
            terminal = terminals[0]
            member_set = set(members)
            external_producers = set()
            for m in members:
                for c in self.consumers[m]:
                    if c not in member_set and m != terminal:
                        raise ValidationError(
                            f"unit {name!r}: non-terminal member {m!r} feeds outside node {c!r}"
                        )
                for p in self.producers[m]:
                    if p not in member_set:
                        external_producers.add(p)
            if len(external_producers) != 1:
                raise ValidationError(
                    f"unit {name!r} must have exactly one external producer, "
                    f"found {sorted(external_producers)!r}"
                )
            self._unit_members[terminal] = members
            self._unit_producer[terminal] = external_producers.pop()
        # singleton units: prunable nodes without a unit tag
        for nid in self.topo_order:
            node = self.nodes[nid]
            if node.prunable and node.unit is None:
                producers = self.producers[nid]
                if len(producers) != 1:
                    raise ValidationError(
                        f"prunable node {nid!r} without unit tag needs one producer"
                    )
                self._unit_members[nid] = [nid]
                self._unit_producer[nid] = producers[0]

    def _validate_coupling(self) -> None:
        for group in self.coupling_groups:
            if len(group) < 2:
                raise ValidationError(f"coupling group {group!r} needs >= 2 nodes")
            widths = set()
            for nid in group:
                if nid not in self.nodes:
                    raise ValidationError(f"coupling group references unknown node {nid!r}")
                widths.add(self.nodes[nid].out_channels)
            if len(widths) != 1:
                raise ValidationError(
                    f"coupling group {group!r} has unequal out_channels {sorted(widths)}"
                )

    # -- queries -----------------------------------------------------------

    def prunable_units(self) -> list[str]:
        """Terminal node ids of prunable units, in topological order."""
        return [nid for nid in self.topo_order if self.nodes[nid].prunable]

    def unit_members(self, terminal: str) -> list[str]:
        return list(self._unit_members[terminal])

    def unit_external_producer(self, terminal: str) -> str:
        return self._unit_producer[terminal]

    def channel_prunable_nodes(self) -> list[str]:
        return [nid for nid in self.topo_order if self.nodes[nid].channel_prunable]

    def coupling_group_of(self, nid: str) -> list[str] | None:
        for group in self.coupling_groups:
            if nid in group:
                return list(group)
        return None

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "input_shape": list(self.input_shape),
            "class_count": self.class_count,
            "nodes": [self.nodes[nid].to_dict() for nid in self.topo_order],
            "edges": [[a, b] for a, b in self.edges],
            "coupling_groups": [list(g) for g in self.coupling_groups],
        }

    def canonical_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def copy(self) -> "ModelGraph":
        return ModelGraph(
            nodes=[replace(self.nodes[nid],
                           kept_channels=(list(self.nodes[nid].kept_channels)
                                          if self.nodes[nid].kept_channels else None))
                   for nid in self.topo_order],
            edges=list(self.edges),
            coupling_groups=[list(g) for g in self.coupling_groups],
            input_shape=self.input_shape,
            class_count=self.class_count,
        )


def graph_from_dict(payload: dict) -> ModelGraph:
    if payload.get("version") != 1:
        raise ValidationError(f"unsupported graph version {payload.get('version')!r}")
    for key in ("input_shape", "class_count", "nodes", "edges"):
        if key not in payload:
            raise ValidationError(f"graph JSON missing key {key!r}")
    nodes = [Node.from_dict(d) for d in payload["nodes"]]
    edges = [(e[0], e[1]) for e in payload["edges"]]
    return ModelGraph(
        nodes=nodes,
        edges=edges,
        coupling_groups=payload.get("coupling_groups", []),
        input_shape=tuple(payload["input_shape"]),
        class_count=payload["class_count"],
    )


def load_graph(path: str | Path) -> ModelGraph:
    """Load and validate a graph JSON file."""
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    return graph_from_dict(payload)


def write_graph(graph: ModelGraph, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(graph.to_dict(), fh, indent=2)
        fh.write("\n")


def bundled_graph_path(name: str) -> Path:
    """Path of a graph file shipped with the package (e.g. 'resnet18_7class')."""
    return Path(__file__).parent / "graphs" / f"{name}.json"


# -- shape propagation and cost ---------------------------------------------

def _conv_out(h: int, w: int, node: Node) -> tuple[int, int]:
    kh, kw = node.kernel
    oh = (h + 2 * node.padding[0] - kh) // node.stride[0] + 1
    ow = (w + 2 * node.padding[1] - kw) // node.stride[1] + 1
    if oh <= 0 or ow <= 0:
        raise ValidationError(
            f"node {node.id!r}: kernel/stride exceed spatial dims ({h}x{w})"
        )
    return oh, ow


def propagate_shapes(graph: ModelGraph,
                     input_shape: tuple[int, int, int] | None = None
                     ) -> dict[str, tuple[int, int, int]]:
    """Output (c, h, w) per node, walking the DAG in topological order."""
    shape_in = tuple(input_shape) if input_shape else graph.input_shape
    shapes: dict[str, tuple[int, int, int]] = {}
    for nid in graph.topo_order:
        node = graph.nodes[nid]
        if nid == graph.source:
            ins = [shape_in]
        else:
            ins = [shapes[p] for p in graph.producers[nid]]
        c_in, h, w = ins[0]
        if node.kind in CONV_KINDS:
            oh, ow = _conv_out(h, w, node)
            shapes[nid] = (node.out_channels, oh, ow)
        elif node.kind == "pool":
            oh, ow = _conv_out(h, w, node)
            shapes[nid] = (node.out_channels, oh, ow)
        elif node.kind == "global_pool":
            shapes[nid] = (node.out_channels, 1, 1)
        elif node.kind in ("linear", "classifier"):
            shapes[nid] = (node.out_channels, 1, 1)
        elif node.kind == "concat":
            spatial = {(s[1], s[2]) for s in ins}
            if len(spatial) != 1:
                raise ValidationError(f"concat node {nid!r} has mismatched spatial dims")
            shapes[nid] = (node.out_channels, h, w)
        elif node.kind == "add":
            if len({s for s in ins}) != 1:
                raise ValidationError(f"add node {nid!r} has mismatched input shapes {ins}")
            shapes[nid] = ins[0]
        else:  # batch_norm, relu, channel_shuffle
            shapes[nid] = (node.out_channels, h, w)
    return shapes


def count_cost(graph: ModelGraph,
               input_shape: tuple[int, int, int] | None = None) -> CostReport:
    """Exact parameter count and multiply-accumulate count per node.

    Conventions: one MAC = one FLOP; batch norm costs 2*channels parameters
    and no FLOPs; activations, pooling and joins are free.
    """
    shapes = propagate_shapes(graph, input_shape)
    per_node: dict[str, tuple[int, int]] = {}
    for nid in graph.topo_order:
        node = graph.nodes[nid]
        params = flops = 0
        if node.kind in CONV_KINDS:
            cin = graph.in_channels(nid)
            kh, kw = node.kernel
            weights = node.out_channels * (cin // node.groups) * kh * kw
            params = weights + (node.out_channels if node.has_bias else 0)
            _, oh, ow = shapes[nid]
            flops = node.out_channels * oh * ow * (cin // node.groups) * kh * kw
        elif node.kind in ("linear", "classifier"):
            p = graph.producers[nid][0]
            c, h, w = shapes[p]
            fan_in = c * h * w
            params = fan_in * node.out_channels + (node.out_channels if node.has_bias else 0)
            flops = fan_in * node.out_channels
        elif node.kind == "batch_norm":
            params = 2 * node.out_channels
        per_node[nid] = (params, flops)
    totals_p = sum(p for p, _ in per_node.values())
    totals_f = sum(f for _, f in per_node.values())
    return CostReport(params=totals_p, flops=totals_f, per_node=per_node)


# -- plan application --------------------------------------------------------

class _Mutable:
    """Working copy of a graph during plan application."""

    def __init__(self, graph: ModelGraph):
        self.nodes: dict[str, Node] = {
            nid: replace(graph.nodes[nid],
                         kept_channels=(list(graph.nodes[nid].kept_channels)
                                        if graph.nodes[nid].kept_channels else None))
            for nid in graph.topo_order
        }
        self.edge_set: set[tuple[str, str]] = set(graph.edges)
        self.coupling_groups = [list(g) for g in graph.coupling_groups]
        self.input_shape = graph.input_shape
        self.class_count = graph.class_count

    def producers(self, nid: str) -> list[str]:
        return [a for a, b in sorted(self.edge_set) if b == nid]

    def consumers(self, nid: str) -> list[str]:
        return [b for a, b in sorted(self.edge_set) if a == nid]

    def remove_nodes(self, ids: set[str]) -> None:
        for nid in ids:
            del self.nodes[nid]
        self.edge_set = {(a, b) for a, b in self.edge_set
                         if a not in ids and b not in ids}

    def toposort(self) -> list[str]:
        producers = {nid: 0 for nid in self.nodes}
        for _, b in self.edge_set:
            producers[b] += 1
        queue = sorted(nid for nid, deg in producers.items() if deg == 0)
        order = []
        consumers: dict[str, list[str]] = {nid: [] for nid in self.nodes}
        for a, b in sorted(self.edge_set):
            consumers[a].append(b)
        while queue:
            nid = queue.pop(0)
            order.append(nid)
            for nxt in consumers[nid]:
                producers[nxt] -= 1
                if producers[nxt] == 0:
                    queue.append(nxt)
        if len(order) != len(self.nodes):
            raise ValidationError("graph disconnection after removal")
        return order

    def freeze(self) -> ModelGraph:
        order = self.toposort()
        return ModelGraph(
            nodes=[self.nodes[nid] for nid in order],
            edges=sorted(self.edge_set),
            coupling_groups=self.coupling_groups,
            input_shape=self.input_shape,
            class_count=self.class_count,
        )


def validate_plan(graph: ModelGraph, plan) -> None:
    """Structural plan preconditions: partition, kept-set ranges, coupling."""
    units = set(graph.prunable_units())
    retained = list(plan.layer_stage.retained)
    removed = list(plan.layer_stage.removed)
    for nid in retained + removed:
        if nid not in graph.nodes:
            raise ValidationError(f"plan references unknown node {nid!r}")
        if nid not in units:
            raise ValidationError(f"plan layer stage references non-prunable node {nid!r}")
    if set(retained) | set(removed) != units or set(retained) & set(removed):
        raise ValidationError("retained/removed do not partition the prunable unit set")
    for nid, kept in plan.channel_stage.items():
        if nid in removed:
            raise ValidationError(f"channel stage references removed unit {nid!r}")
        if nid not in graph.nodes:
            raise ValidationError(f"channel stage references unknown node {nid!r}")
        node = graph.nodes[nid]
        if not node.channel_prunable:
            raise ValidationError(f"node {nid!r} is not channel-prunable")
        if not kept:
            raise ValidationError(f"empty kept set for node {nid!r}")
        if list(kept) != sorted(set(kept)):
            raise ValidationError(f"kept set for node {nid!r} is not strictly ascending")
        if kept[0] < 0 or kept[-1] >= node.out_channels:
            raise ValidationError(
                f"kept indices for node {nid!r} outside [0, {node.out_channels})"
            )
    removed_members: set[str] = set()
    for terminal in removed:
        removed_members.update(graph.unit_members(terminal))
    for group in graph.coupling_groups:
        survivors = [n for n in group if n not in removed_members]
        kept_sets = {nid: tuple(plan.channel_stage[nid])
                     for nid in survivors if nid in plan.channel_stage}
        if kept_sets and len(set(kept_sets.values())) != 1:
            raise ValidationError(
                f"coupling violation: group {group!r} has differing kept sets"
            )
        if kept_sets and len(kept_sets) != len(survivors):
            raise ValidationError(
                f"coupling violation: group {group!r} only partially pruned"
            )


def _stride_for(h_in: int, h_out: int, context: str,
                kernel: int = 1, padding: int = 0) -> int:
    """Smallest stride with (h_in + 2p - k)//s + 1 == h_out."""
    span = h_in + 2 * padding - kernel
    if span >= 0:
        for s in range(1, h_in + 2 * padding + 1):
            if span // s + 1 == h_out:
                return s
    raise ValidationError(f"{context}: no stride maps {h_in} onto {h_out}")


def apply_plan(graph: ModelGraph, plan) -> ModelGraph:
    """Apply a pruning plan structurally, returning a new validated graph.

    Layer stage: removed units are deleted and their external producer is
    re-stitched to the terminal's consumers; retained units whose input
    changed absorb the stride and gain skip projections where an identity
    skip no longer matches.  Channel stage: flagged nodes keep only the
    listed output channels; dependent widths (norms, joins, depthwise
    convolutions) are re-derived.  The classifier's output width never
    changes.
    """
    validate_plan(graph, plan)
    shapes_before = propagate_shapes(graph)
    orig_unit_input = {t: shapes_before[graph.unit_external_producer(t)]
                       for t in graph.prunable_units()}
    unit_members_before = {t: set(graph.unit_members(t)) for t in graph.prunable_units()}

    work = _Mutable(graph)
    removed_order = [t for t in graph.topo_order if t in set(plan.layer_stage.removed)]
    for terminal in removed_order:
        members = unit_members_before[terminal]
        # resolve the producer in the current graph: upstream removals may
        # already have re-stitched this unit onto an earlier node
        producers_now = {a for a, b in work.edge_set
                         if b in members and a not in members}
        if len(producers_now) != 1:
            raise ValidationError(
                f"dangling reference while removing unit {terminal!r}: "
                f"producers {sorted(producers_now)!r}"
            )
        producer = producers_now.pop()
        external_consumers = [c for c in work.consumers(terminal) if c not in members]
        work.remove_nodes(members)
        for consumer in external_consumers:
            work.edge_set.add((producer, consumer))

    removed_ids = set().union(*(unit_members_before[t] for t in removed_order)) \
        if removed_order else set()
    work.coupling_groups = [
        [nid for nid in group if nid not in removed_ids]
        for group in work.coupling_groups
    ]
    work.coupling_groups = [g for g in work.coupling_groups if len(g) >= 2]

    _adapt_retained(graph, work, plan, shapes_before, orig_unit_input,
                    unit_members_before)
    _apply_channel_stage(work, plan)
    _rederive_widths(work)

    for nid, _scheme in plan.layer_stage.reinitialized:
        if nid not in work.nodes:
            raise ValidationError(f"reinit marker references missing node {nid!r}")
        if nid in unit_members_before:  # unit marker covers all members
            for member in unit_members_before[nid]:
                if member in work.nodes:
                    work.nodes[member].reinitialized = True
        else:
            work.nodes[nid].reinitialized = True
    result = work.freeze()
    propagate_shapes(result)  # must succeed on the final graph
    return result


def _adapt_retained(graph: ModelGraph, work: _Mutable, plan, shapes_before,
                    orig_unit_input, unit_members_before) -> None:
    """Walk the layer-pruned graph, absorbing input changes into retained units."""
    retained = [t for t in graph.prunable_units() if t in work.nodes]
    member_to_unit = {}
    for t in retained:
        for m in unit_members_before[t]:
            member_to_unit[m] = t

    producers_map: dict[str, list[str]] = {nid: [] for nid in work.nodes}
    for a, b in sorted(work.edge_set):
        producers_map[b].append(a)

    # (producer, add_node) -> (width, stride, unit_name, needs_weights)
    pending: dict[tuple[str, str], tuple[int, tuple[int, int], str | None, bool]] = {}
    shapes: dict[str, tuple[int, int, int]] = {}
    seen_units: set[str] = set()

    order = work.toposort()
    source = [nid for nid in work.nodes if not producers_map[nid]]
    if len(source) != 1:
        raise ValidationError("graph disconnection after removal")
    source = source[0]

    for nid in order:
        unit_terminal = member_to_unit.get(nid)
        if unit_terminal is not None and unit_terminal not in seen_units:
            seen_units.add(unit_terminal)
            members = unit_members_before[unit_terminal] & set(work.nodes)
            ext_producer = {p for m in members for p in producers_map[m]
                            if p not in members}
            if len(ext_producer) != 1:
                raise ValidationError(
                    f"unit {unit_terminal!r} lost its single-producer shape"
                )
            ext_producer = ext_producer.pop()
            in_new = shapes[ext_producer]
            in_old = orig_unit_input[unit_terminal]
            if in_new != in_old:
                spatial_changed = in_new[1:] != in_old[1:]
                width_changed = in_new[0] != in_old[0]
                for m in sorted(members):
                    if ext_producer not in producers_map[m]:
                        continue
                    node = work.nodes[m]
                    if node.kind in CONV_KINDS or node.kind == "pool":
                        if spatial_changed:
                            # restore this node's original output resolution
                            target = shapes_before[m]
                            node.stride = (
                                _stride_for(in_new[1], target[1], f"node {m!r}",
                                            node.kernel[0], node.padding[0]),
                                _stride_for(in_new[2], target[2], f"node {m!r}",
                                            node.kernel[1], node.padding[1]),
                            )
                    elif node.kind == "add":
                        target_shape = shapes_before[m]
                        sh = _stride_for(in_new[1], target_shape[1], f"skip into {m!r}")
                        sw = _stride_for(in_new[2], target_shape[2], f"skip into {m!r}")
                        if width_changed or sh > 1 or sw > 1:
                            pending[(ext_producer, m)] = (
                                node.out_channels, (sh, sw),
                                work.nodes[unit_terminal].unit, width_changed,
                            )
                    elif spatial_changed:
                        raise ValidationError(
                            f"cannot absorb spatial change into {node.kind} node {m!r}"
                        )
                if width_changed:
                    # the whole successor unit gets fresh weights
                    for m in sorted(members):
                        work.nodes[m].reinitialized = True

        # compute this node's shape (substituting pending projections)
        node = work.nodes[nid]
        if nid == source:
            ins = [work.input_shape]
        else:
            ins = []
            for p in producers_map[nid]:
                if (p, nid) in pending:
                    width, (sh, sw), _unit, _w = pending[(p, nid)]
                    ph = (shapes[p][1] - 1) // sh + 1
                    pw = (shapes[p][2] - 1) // sw + 1
                    ins.append((width, ph, pw))
                else:
                    ins.append(shapes[p])
        shapes[nid] = _node_shape(node, ins, nid)

    # weight-bearing nodes outside any unit (head convolutions, the
    # classifier) whose fan-in changed through removals also need new weights
    for nid, node in work.nodes.items():
        if nid not in shapes_before or nid in member_to_unit or nid == graph.source:
            continue
        if node.kind in ("linear", "classifier"):
            p_orig = graph.producers[nid][0]
            p_now = producers_map[nid][0]
            if int(np.prod(shapes[p_now])) != int(np.prod(shapes_before[p_orig])):
                node.reinitialized = True
        elif node.kind in CONV_KINDS:
            p_orig = graph.producers[nid][0]
            p_now = producers_map[nid][0]
            if shapes[p_now][0] != shapes_before[p_orig][0]:
                node.reinitialized = True

    for (producer, add_id), (width, stride, unit_name, needs_weights) in pending.items():
        if needs_weights:
            proj_id = f"{add_id}__skip_proj"
            bn_id = f"{add_id}__skip_proj_bn"
            if proj_id in work.nodes or bn_id in work.nodes:
                raise ValidationError(f"projection id collision at {add_id!r}")
            work.nodes[proj_id] = Node(
                id=proj_id, kind="conv2d", out_channels=width, kernel=(1, 1),
                stride=stride, padding=(0, 0), groups=1, has_bias=False,
                unit=unit_name, reinitialized=True,
            )
            work.nodes[bn_id] = Node(
                id=bn_id, kind="batch_norm", out_channels=width,
                unit=unit_name, reinitialized=True,
            )
            work.edge_set.discard((producer, add_id))
            work.edge_set.update({(producer, proj_id), (proj_id, bn_id), (bn_id, add_id)})
        else:
            sub_id = f"{add_id}__skip_subsample"
            if sub_id in work.nodes:
                raise ValidationError(f"subsample id collision at {add_id!r}")
            work.nodes[sub_id] = Node(
                id=sub_id, kind="pool", out_channels=width, kernel=(1, 1),
                stride=stride, unit=unit_name,
            )
            work.edge_set.discard((producer, add_id))
            work.edge_set.update({(producer, sub_id), (sub_id, add_id)})


def _node_shape(node: Node, ins: list[tuple[int, int, int]], nid: str):
    """Shape during plan surgery: widths derive from inputs, since stored
    out_channels of pass-through nodes are only reconciled afterwards."""
    c, h, w = ins[0]
    if node.kind in CONV_KINDS:
        oh, ow = _conv_out(h, w, node)
        return (node.out_channels, oh, ow)
    if node.kind == "pool":
        oh, ow = _conv_out(h, w, node)
        return (c, oh, ow)
    if node.kind == "global_pool":
        return (c, 1, 1)
    if node.kind in ("linear", "classifier"):
        return (node.out_channels, 1, 1)
    if node.kind == "add":
        if len(set(ins)) != 1:
            raise ValidationError(f"add node {nid!r} has mismatched input shapes {ins}")
        return ins[0]
    if node.kind == "concat":
        if len({(s[1], s[2]) for s in ins}) != 1:
            raise ValidationError(f"concat node {nid!r} has mismatched spatial dims")
        return (sum(s[0] for s in ins), h, w)
    if node.kind == "channel_shuffle" and node.channel_slice is not None:
        lo, hi = node.channel_slice
        if hi > c:
            raise ValidationError(f"shuffle node {nid!r}: slice exceeds width {c}")
        return (hi - lo, h, w)
    return (c, h, w)


def _apply_channel_stage(work: _Mutable, plan) -> None:
    for nid, kept in plan.channel_stage.items():
        if nid not in work.nodes:
            raise ValidationError(f"channel stage references missing node {nid!r}")
        node = work.nodes[nid]
        node.kept_channels = [int(i) for i in kept]
        node.out_channels = len(kept)


def _rederive_widths(work: _Mutable) -> None:
    """Recompute dependent channel widths after structural edits."""
    producers_map: dict[str, list[str]] = {nid: [] for nid in work.nodes}
    for a, b in sorted(work.edge_set):
        producers_map[b].append(a)
    order = work.toposort()
    for nid in order:
        node = work.nodes[nid]
        if not producers_map[nid]:
            continue
        widths = [work.nodes[p].out_channels for p in producers_map[nid]]
        cin = sum(widths) if node.kind == "concat" else widths[0]
        if node.kind in IDENTITY_KINDS:
            node.out_channels = cin
        elif node.kind == "concat":
            node.out_channels = cin
        elif node.kind == "add":
            if len(set(widths)) != 1:
                raise ValidationError(
                    f"add node {nid!r} has unequal input widths {widths} after pruning"
                )
            node.out_channels = widths[0]
        elif node.kind == "channel_shuffle":
            if node.channel_slice is None:
                node.out_channels = cin
            else:
                lo, hi = node.channel_slice
                if hi > cin:
                    raise ValidationError(
                        f"shuffle node {nid!r}: slice [{lo}, {hi}) exceeds pruned width {cin}"
                    )
                node.out_channels = hi - lo
        elif node.kind == "depthwise_conv2d":
            if node.out_channels != cin:
                raise ValidationError(
                    f"depthwise conv {nid!r}: input width {cin} no longer matches "
                    f"out {node.out_channels}; couple it with its producer"
                )
            node.groups = cin
