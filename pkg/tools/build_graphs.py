#!/usr/bin/env python3
"""Generate the bundled architecture graphs (7-class heads, 102x389 input).

Regenerate with:  python tools/build_graphs.py
Writes into src/specprune/graphs/.
"""

from __future__ import annotations

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from specprune.graph import ModelGraph, Node, write_graph  # noqa: E402

INPUT_SHAPE = (3, 102, 389)
CLASSES = 7


class Builder:
    def __init__(self):
        self.nodes: list[Node] = []
        self.edges: list[tuple[str, str]] = []
        self.groups: list[list[str]] = []

    def add(self, node: Node, *producers: str | None) -> str:
        self.nodes.append(node)
        for p in producers:
            if p is not None:
                self.edges.append((p, node.id))
        return node.id

    def conv(self, nid, prev, out, k, s=1, p=None, groups=1, bias=False, **kw) -> str:
        if p is None:
            p = k // 2
        kind = "depthwise_conv2d" if kw.pop("dw", False) else "conv2d"
        return self.add(Node(id=nid, kind=kind, out_channels=out, kernel=(k, k),
                             stride=(s, s), padding=(p, p), groups=groups,
                             has_bias=bias, **kw), prev)

    def bn(self, nid, prev, channels, **kw) -> str:
        return self.add(Node(id=nid, kind="batch_norm", out_channels=channels, **kw), prev)

    def relu(self, nid, prev, channels, **kw) -> str:
        return self.add(Node(id=nid, kind="relu", out_channels=channels, **kw), prev)

    def graph(self) -> ModelGraph:
        return ModelGraph(self.nodes, self.edges, self.groups, INPUT_SHAPE, CLASSES)


def resnet18() -> ModelGraph:
    b = Builder()
    cur = b.conv("stem_conv", None, 64, 7, s=2, p=3)
    cur = b.bn("stem_bn", cur, 64)
    cur = b.relu("stem_relu", cur, 64)
    cur = b.add(Node(id="stem_pool", kind="pool", out_channels=64, kernel=(3, 3),
                     stride=(2, 2), padding=(1, 1)), cur)

    stages = [  # (name, out, stride, blocks)
        ("b1", 64, 1, 2), ("b2", 128, 2, 2), ("b3", 256, 2, 2), ("b4", 512, 2, 2),
    ]
    width = 64
    for name, out, stride, blocks in stages:
        for i in range(blocks):
            s = stride if i == 0 else 1
            unit = f"{name}{chr(ord('a') + i)}"
            entry = cur
            c1 = b.conv(f"{unit}_conv1", entry, out, 3, s=s, unit=unit,
                        channel_prunable=True)
            n1 = b.bn(f"{unit}_bn1", c1, out, unit=unit)
            r1 = b.relu(f"{unit}_relu1", n1, out, unit=unit)
            c2 = b.conv(f"{unit}_conv2", r1, out, 3, unit=unit)
            n2 = b.bn(f"{unit}_bn2", c2, out, unit=unit)
            if s != 1 or width != out:
                ds = b.conv(f"{unit}_ds_conv", entry, out, 1, s=s, p=0, unit=unit)
                dsn = b.bn(f"{unit}_ds_bn", ds, out, unit=unit)
                skip = dsn
            else:
                skip = entry
            join = b.add(Node(id=f"{unit}_add", kind="add", out_channels=out,
                              unit=unit), n2, skip)
            cur = b.add(Node(id=f"{unit}_out", kind="relu", out_channels=out,
                             unit=unit, prunable=True), join)
            width = out

    gp = b.add(Node(id="gap", kind="global_pool", out_channels=512), cur)
    b.add(Node(id="fc", kind="classifier", out_channels=CLASSES, has_bias=True), gp)
    return b.graph()


def mobilenet_v2() -> ModelGraph:
    b = Builder()
    cur = b.conv("stem_conv", None, 32, 3, s=2)
    cur = b.bn("stem_bn", cur, 32)
    cur = b.relu("stem_relu", cur, 32)

    # (expansion, out, repeats, first stride)
    settings = [(1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2),
                (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1)]
    width = 32
    index = 0
    for t, out, repeats, first_stride in settings:
        for i in range(repeats):
            s = first_stride if i == 0 else 1
            unit = f"ir{index}"
            index += 1
            entry = cur
            hidden = width * t
            x = entry
            if t != 1:
                x = b.conv(f"{unit}_expand", x, hidden, 1, p=0, unit=unit,
                           channel_prunable=True)
                x = b.bn(f"{unit}_expand_bn", x, hidden, unit=unit)
                x = b.relu(f"{unit}_expand_relu", x, hidden, unit=unit)
            x = b.conv(f"{unit}_dw", x, hidden, 3, s=s, groups=hidden, dw=True,
                       unit=unit, channel_prunable=(t != 1))
            x = b.bn(f"{unit}_dw_bn", x, hidden, unit=unit)
            x = b.relu(f"{unit}_dw_relu", x, hidden, unit=unit)
            x = b.conv(f"{unit}_project", x, out, 1, p=0, unit=unit)
            x = b.bn(f"{unit}_project_bn", x, out, unit=unit)
            if s == 1 and width == out:
                x = b.add(Node(id=f"{unit}_add", kind="add", out_channels=out,
                               unit=unit), x, entry)
            # terminal of the unit
            b.nodes[-1].prunable = True
            if t != 1:
                b.groups.append([f"{unit}_expand", f"{unit}_dw"])
            cur = x
            width = out

    cur = b.conv("head_conv", cur, 1280, 1, p=0)
    cur = b.bn("head_bn", cur, 1280)
    cur = b.relu("head_relu", cur, 1280)
    gp = b.add(Node(id="gap", kind="global_pool", out_channels=1280), cur)
    b.add(Node(id="fc", kind="classifier", out_channels=CLASSES, has_bias=True), gp)
    return b.graph()


def shufflenet_v2_x1() -> ModelGraph:
    b = Builder()
    cur = b.conv("stem_conv", None, 24, 3, s=2)
    cur = b.bn("stem_bn", cur, 24)
    cur = b.relu("stem_relu", cur, 24)
    cur = b.add(Node(id="stem_pool", kind="pool", out_channels=24, kernel=(3, 3),
                     stride=(2, 2), padding=(1, 1)), cur)

    stages = [("s2", 116, 4), ("s3", 232, 8), ("s4", 464, 4)]
    width = 24
    for name, out, repeats in stages:
        half = out // 2
        for i in range(repeats):
            unit = f"{name}u{i}"
            # spatial-reduction units (i == 0) stay in place; only the
            # channel-split units are removable, so only they carry unit tags
            utag = unit if i != 0 else None
            entry = cur
            if i == 0:
                b1 = b.conv(f"{unit}_b1_dw", entry, width, 3, s=2, groups=width,
                            dw=True)
                b1 = b.bn(f"{unit}_b1_dw_bn", b1, width)
                b1 = b.conv(f"{unit}_b1_pw", b1, half, 1, p=0)
                b1 = b.bn(f"{unit}_b1_pw_bn", b1, half)
                b1 = b.relu(f"{unit}_b1_relu", b1, half)
                b2_in = entry
                stride = 2
            else:
                # channel split: each branch sees half the unit input
                b1 = b.add(Node(id=f"{unit}_split_a", kind="channel_shuffle",
                                out_channels=half, channel_slice=(0, half),
                                unit=utag), entry)
                b2_in = b.add(Node(id=f"{unit}_split_b", kind="channel_shuffle",
                                   out_channels=half, channel_slice=(half, out),
                                   unit=utag), entry)
                stride = 1
            c1 = b.conv(f"{unit}_b2_c1", b2_in, half, 1, p=0, unit=utag,
                        channel_prunable=True)
            x = b.bn(f"{unit}_b2_c1_bn", c1, half, unit=utag)
            x = b.relu(f"{unit}_b2_c1_relu", x, half, unit=utag)
            x = b.conv(f"{unit}_b2_dw", x, half, 3, s=stride, groups=half, dw=True,
                       unit=utag, channel_prunable=True)
            x = b.bn(f"{unit}_b2_dw_bn", x, half, unit=utag)
            x = b.conv(f"{unit}_b2_c2", x, half, 1, p=0, unit=utag)
            x = b.bn(f"{unit}_b2_c2_bn", x, half, unit=utag)
            x = b.relu(f"{unit}_b2_c2_relu", x, half, unit=utag)
            cat = b.add(Node(id=f"{unit}_concat", kind="concat", out_channels=out,
                             unit=utag), b1, x)
            cur = b.add(Node(id=f"{unit}_shuffle", kind="channel_shuffle",
                             out_channels=out, groups=2, unit=utag,
                             prunable=(i != 0)), cat)
            b.groups.append([f"{unit}_b2_c1", f"{unit}_b2_dw"])
            width = out

    cur = b.conv("head_conv", cur, 1024, 1, p=0)
    cur = b.bn("head_bn", cur, 1024)
    cur = b.relu("head_relu", cur, 1024)
    gp = b.add(Node(id="gap", kind="global_pool", out_channels=1024), cur)
    b.add(Node(id="fc", kind="classifier", out_channels=CLASSES, has_bias=True), gp)
    return b.graph()


def main() -> None:
    out_dir = Path(__file__).resolve().parents[1] / "src" / "specprune" / "graphs"
    out_dir.mkdir(parents=True, exist_ok=True)
    from specprune.graph import count_cost
    for name, build in [("resnet18_7class", resnet18),
                        ("mobilenet_v2_7class", mobilenet_v2),
                        ("shufflenet_v2_x1_7class", shufflenet_v2_x1)]:
        graph = build()
        write_graph(graph, out_dir / f"{name}.json")
        cost = count_cost(graph)
        print(f"{name}: {len(graph.prunable_units())} units, "
              f"params={cost.params:,} ({cost.params / 1e6:.4f} M), "
              f"flops={cost.flops:,} ({cost.flops / 1e6:.2f} M)")


if __name__ == "__main__":
    main()
