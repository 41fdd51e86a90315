import json

import numpy as np
import pytest

from specprune.activations import (ActivationSet, channel_view, layer_view,
                                   read_activations, write_activations)
from specprune.errors import ValidationError


def write_manifest(tmp_path, tensors, batch=8):
    manifest = {"version": 1, "batch_size": batch, "tensors": tensors}
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(manifest))
    return path


def test_read_simple_dump(tmp_path):
    data = np.arange(8 * 4 * 2 * 2, dtype="<f4")
    data.tofile(tmp_path / "a.f32")
    path = write_manifest(tmp_path, [
        {"name": "a", "shape": [8, 4, 2, 2], "dtype": "f32", "byte_order": "le",
         "file": "a.f32"},
    ])
    aset = read_activations(path)
    assert aset.batch_size == 8
    assert aset.tensor("a").shape == (8, 4, 2, 2)
    assert (tmp_path / "a.f32").stat().st_size == 512


def test_size_mismatch_rejected(tmp_path):
    (tmp_path / "a.f32").write_bytes(b"\x00" * 500)
    path = write_manifest(tmp_path, [
        {"name": "a", "shape": [8, 4, 2, 2], "dtype": "f32", "byte_order": "le",
         "file": "a.f32"},
    ])
    with pytest.raises(ValidationError, match="500 bytes"):
        read_activations(path)


def test_batch_mismatch_rejected(tmp_path):
    np.zeros(8 * 4, dtype="<f4").tofile(tmp_path / "a.f32")
    np.zeros(16 * 4, dtype="<f4").tofile(tmp_path / "b.f32")
    path = write_manifest(tmp_path, [
        {"name": "a", "shape": [8, 1, 2, 2], "dtype": "f32", "byte_order": "le",
         "file": "a.f32"},
        {"name": "b", "shape": [16, 1, 2, 2], "dtype": "f32", "byte_order": "le",
         "file": "b.f32"},
    ])
    with pytest.raises(ValidationError, match="batch"):
        read_activations(path)


def test_small_batch_rejected():
    with pytest.raises(ValidationError, match="batch size 2"):
        ActivationSet({"a": np.zeros((2, 1, 2, 2), dtype=np.float32)})


def test_layer_view_row_major():
    t = np.arange(8, dtype=np.float32).reshape(2, 1, 2, 2)
    # batch of 2 is too small for an ActivationSet, so pad with two more rows
    t = np.concatenate([t, np.zeros((2, 1, 2, 2), dtype=np.float32)])
    aset = ActivationSet({"x": t})
    view = layer_view(aset, "x")
    assert view.rows == 4 and view.cols == 4
    assert view.data[0].tolist() == [0.0, 1.0, 2.0, 3.0]
    assert view.data[1].tolist() == [4.0, 5.0, 6.0, 7.0]


def test_layer_view_shape_arithmetic():
    aset = ActivationSet({"x": np.zeros((4, 3, 1, 1), dtype=np.float32)})
    view = layer_view(aset, "x")
    assert (view.rows, view.cols) == (4, 3)


def test_layer_view_unknown_node():
    aset = ActivationSet({"x": np.zeros((4, 1, 1, 1), dtype=np.float32)})
    with pytest.raises(ValidationError, match="conv9"):
        layer_view(aset, "conv9")


def test_channel_view_slices():
    t = np.arange(4 * 2 * 1 * 2, dtype=np.float32).reshape(4, 2, 1, 2)
    aset = ActivationSet({"x": t})
    view = channel_view(aset, "x", 1)
    assert (view.rows, view.cols) == (4, 2)
    assert np.array_equal(view.data, t[:, 1].reshape(4, 2))


def test_channel_view_out_of_range():
    aset = ActivationSet({"x": np.zeros((4, 2, 1, 1), dtype=np.float32)})
    with pytest.raises(ValidationError, match="out of range"):
        channel_view(aset, "x", 2)


def test_single_channel_matches_layer_view(rng):
    t = rng.standard_normal((4, 1, 3, 3)).astype(np.float32)
    aset = ActivationSet({"x": t})
    assert np.array_equal(channel_view(aset, "x", 0).data, layer_view(aset, "x").data)


def test_channel_views_concatenate_to_layer_view(rng):
    t = rng.standard_normal((6, 3, 2, 2)).astype(np.float32)
    aset = ActivationSet({"x": t})
    stacked = np.concatenate(
        [channel_view(aset, "x", p).data for p in range(3)], axis=1)
    assert np.array_equal(stacked, layer_view(aset, "x").data)


def test_round_trip_bit_exact(tmp_path, rng):
    entries = {
        "conv1": rng.standard_normal((8, 4, 3, 2)).astype(np.float32),
        "block/out": rng.standard_normal((8, 2, 5, 5)).astype(np.float32),
    }
    aset = ActivationSet(entries)
    manifest = write_activations(aset, tmp_path / "dump")
    loaded = read_activations(manifest)
    assert loaded.batch_size == 8
    for name, tensor in entries.items():
        assert np.array_equal(loaded.tensor(name), tensor)
        assert loaded.tensor(name).dtype == np.float32
