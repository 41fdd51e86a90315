"""Activation dump storage.

A dump is a JSON manifest plus one raw little-endian float32 binary per
node, written in C (row-major) order.  The manifest schema is::

    {"version": 1, "batch_size": b,
     "tensors": [{"name": id, "shape": [b, c, h, w], "dtype": "f32",
                  "byte_order": "le", "file": relpath}, ...]}

Loading is bit-exact: element values equal the file contents untouched.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError

MIN_BATCH = 4  # the unbiased HSIC denominator b(b-3) needs b >= 4


@dataclass
class FlatView:
    """A 2-D row-major view of an activation tensor (one row per sample)."""

    rows: int
    cols: int
    data: np.ndarray


class ActivationSet:
    """Per-node activation tensors for a fixed probe batch.

    All tensors are float32 with shape (b, c, h, w) and share the same
    leading batch dimension b >= 4.
    """

    def __init__(self, entries: dict[str, np.ndarray]):
        if not entries:
            raise ValidationError("activation set has no entries")
        batches = set()
        for name, tensor in entries.items():
            if tensor.ndim != 4:
                raise ValidationError(
                    f"tensor {name!r} must be 4-D (b, c, h, w), got shape {tensor.shape}"
                )
            if tensor.dtype != np.float32:
                raise ValidationError(f"tensor {name!r} must be float32, got {tensor.dtype}")
            batches.add(tensor.shape[0])
        if len(batches) != 1:
            raise ValidationError(f"batch mismatch across tensors: sizes {sorted(batches)}")
        b = batches.pop()
        if b < MIN_BATCH:
            raise ValidationError(f"batch size {b} < {MIN_BATCH}")
        self.batch_size = b
        self.entries = dict(entries)

    def __contains__(self, node_id: str) -> bool:
        return node_id in self.entries

    def names(self) -> list[str]:
        return list(self.entries)

    def tensor(self, node_id: str) -> np.ndarray:
        try:
            return self.entries[node_id]
        except KeyError:
            raise ValidationError(f"unknown node id {node_id!r} in activation set") from None

    def channel_count(self, node_id: str) -> int:
        return self.tensor(node_id).shape[1]


def layer_view(aset: ActivationSet, node_id: str) -> FlatView:
    """Flatten a node's (b, c, h, w) tensor to (b, c*h*w), row-major."""
    t = aset.tensor(node_id)
    b = t.shape[0]
    flat = t.reshape(b, -1)
    return FlatView(rows=b, cols=flat.shape[1], data=flat)


def channel_view(aset: ActivationSet, node_id: str, channel: int) -> FlatView:
    """Flatten one channel slice of a node's tensor to (b, h*w)."""
    t = aset.tensor(node_id)
    b, c = t.shape[0], t.shape[1]
    if not 0 <= channel < c:
        raise ValidationError(
            f"channel {channel} out of range for node {node_id!r} with {c} channels"
        )
    flat = t[:, channel].reshape(b, -1)
    return FlatView(rows=b, cols=flat.shape[1], data=flat)


def read_activations(manifest_path: str | Path) -> ActivationSet:
    """Load an activation dump described by its manifest file."""
    manifest_path = Path(manifest_path)
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("version") != 1:
        raise ValidationError(f"unsupported manifest version {manifest.get('version')!r}")
    declared_b = manifest.get("batch_size")
    base = manifest_path.parent
    entries: dict[str, np.ndarray] = {}
    for item in manifest.get("tensors", []):
        name = item["name"]
        shape = tuple(int(s) for s in item["shape"])
        if item.get("dtype") != "f32":
            raise ValidationError(f"tensor {name!r}: unsupported dtype {item.get('dtype')!r}")
        if item.get("byte_order") != "le":
            raise ValidationError(f"tensor {name!r}: unsupported byte order")
        if len(shape) != 4 or any(s <= 0 for s in shape):
            raise ValidationError(f"tensor {name!r}: bad shape {shape}")
        if shape[0] != declared_b:
            raise ValidationError(
                f"tensor {name!r}: batch {shape[0]} != manifest batch_size {declared_b}"
            )
        path = base / item["file"]
        expected = int(np.prod(shape)) * 4
        actual = path.stat().st_size
        if actual != expected:
            raise ValidationError(
                f"tensor {name!r}: file {path.name} holds {actual} bytes, "
                f"shape {shape} needs {expected}"
            )
        data = np.fromfile(path, dtype="<f4").reshape(shape)
        entries[name] = data
    return ActivationSet(entries)


def _safe_filename(index: int, name: str) -> str:
    stem = re.sub(r"[^A-Za-z0-9_.-]", "_", name)
    return f"{index:03d}_{stem}.f32"


def write_activations(aset: ActivationSet, out_dir: str | Path,
                      manifest_name: str = "manifest.json") -> Path:
    """Write a dump (manifest + raw tensors); round-trips bit-exactly."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tensors = []
    for i, (name, tensor) in enumerate(aset.entries.items()):
        fname = _safe_filename(i, name)
        tensor.astype("<f4", copy=False).tofile(out_dir / fname)
        tensors.append({
            "name": name,
            "shape": [int(s) for s in tensor.shape],
            "dtype": "f32",
            "byte_order": "le",
            "file": fname,
        })
    manifest = {"version": 1, "batch_size": aset.batch_size, "tensors": tensors}
    manifest_path = out_dir / manifest_name
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return manifest_path
