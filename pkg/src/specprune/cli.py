"""Command-line surface: preprocess raw I/Q data, compute similarity
matrices, generate pruning plans, and report compression statistics.

Exit codes: 0 success, 2 I/O failure, 3 validation failure, 4 numerical
failure.  Report lines on stdout are tab-separated and stable; progress
notes go to stderr.
"""

from __future__ import annotations

import csv
import functools
import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from . import signals
from .activations import read_activations
from .errors import (ConvergenceError, DegenerateInputError, RecordRejected,
                     ValidationError)
from .graph import apply_plan, count_cost, load_graph, write_graph
from .planner import derive_seed, hierarchical_plan, read_plan, write_plan
from .similarity import channel_similarity, layer_similarity
from .spectral import eigengaps, normalized_laplacian, eig_sym

log = logging.getLogger("specprune")

EXIT_IO = 2
EXIT_VALIDATION = 3
EXIT_NUMERICAL = 4


def exit_codes(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ValidationError, DegenerateInputError, RecordRejected) as exc:
            log.error("%s", exc)
            sys.exit(EXIT_VALIDATION)
        except ConvergenceError as exc:
            log.error("%s", exc)
            sys.exit(EXIT_NUMERICAL)
        except (OSError, json.JSONDecodeError) as exc:
            log.error("%s", exc)
            sys.exit(EXIT_IO)
    return wrapper


@click.group()
@click.option("--seed", type=int, default=42, show_default=True,
              help="Master seed for all randomized steps.")
@click.option("--threads", type=int, default=1, show_default=True,
              help="Worker threads for independent per-node jobs.")
@click.option("--quiet", is_flag=True, help="Suppress progress notes.")
@click.pass_context
def main(ctx, seed, threads, quiet):
    """Similarity-driven structural pruning toolkit."""
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.WARNING if quiet else logging.INFO,
        format="%(levelname)s %(message)s",
    )
    ctx.obj = {"seed": seed, "threads": max(1, threads), "quiet": quiet}


def _parse_snr_range(text: str) -> list[float]:
    if text.strip().lower() == "clean":
        return [signals.CLEAN]
    parts = text.split(":")
    try:
        if len(parts) == 1:
            return [float(parts[0])]
        if len(parts) == 2:
            lo, hi = int(parts[0]), int(parts[1])
            step = 1
        elif len(parts) == 3:
            lo, hi, step = int(parts[0]), int(parts[1]), int(parts[2])
        else:
            raise ValueError
        if step <= 0 or hi < lo:
            raise ValueError
        return [float(v) for v in range(lo, hi + 1, step)]
    except ValueError:
        raise ValidationError(f"malformed SNR range {text!r}; use LO:HI or LO:HI:STEP")


@main.command()
@click.option("--input", "input_dir", required=True, type=click.Path(path_type=Path))
@click.option("--output", "output_dir", required=True, type=click.Path(path_type=Path))
@click.option("--snr-train", default="0:10", show_default=True)
@click.option("--snr-test", default="-5:20:5", show_default=True)
@click.option("--mixup-alpha", default=0.5, show_default=True)
@click.option("--test-fraction", default=0.2, show_default=True)
@click.option("--labels", "labels_name", default="labels.csv", show_default=True,
              help="Labels CSV inside the input directory (file,label).")
@click.pass_context
@exit_codes
def preprocess(ctx, input_dir, output_dir, snr_train, snr_test, mixup_alpha,
               test_fraction, labels_name):
    """Raw I/Q captures -> noise-injected log-power spectrogram dataset."""
    seed = ctx.obj["seed"]
    train_snrs = _parse_snr_range(snr_train)
    test_snrs = _parse_snr_range(snr_test)
    if not 0.0 <= test_fraction < 1.0:
        raise ValidationError(f"test fraction {test_fraction} outside [0, 1)")
    if mixup_alpha < 0:
        raise ValidationError("mixup alpha must be >= 0")

    labels = signals.load_labels_csv(input_dir / labels_name)
    records = []
    for fname in sorted(labels):
        path = input_dir / fname
        try:
            raw = signals.load_iq_file(path)
            rec = signals.normalize_truncate(raw, label=labels[fname], source_id=fname)
        except RecordRejected as why:
            log.info("skipped: %s", why)
            continue
        records.append(rec)
    if not records:
        raise ValidationError("no usable records after ingestion")

    split_rng = np.random.default_rng(
        np.random.SeedSequence(derive_seed(seed, "split")))
    order = split_rng.permutation(len(records))
    n_test = int(round(test_fraction * len(records)))
    test_idx = set(order[:n_test].tolist())

    output_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"version": 1, "class_count": signals.CLASS_COUNT,
                "image_rows": signals.IMAGE_ROWS, "splits": {}}
    counts: list[tuple[str, str, int]] = []

    train_images, train_labels = [], []
    for i, rec in enumerate(records):
        if i in test_idx:
            continue
        snr = train_snrs[
            np.random.default_rng(
                np.random.SeedSequence(
                    signals.record_seed(seed, rec.source_id, "train-snr"))
            ).integers(len(train_snrs))
        ]
        noisy = signals.inject_awgn(
            rec, snr, signals.record_seed(seed, rec.source_id, f"awgn:{snr}"))
        spec = signals.stft_spectrogram(noisy)
        train_images.append(signals.spectrogram_image(spec))
        train_labels.append(spec.label)
    if train_images and mixup_alpha > 0 and len(train_images) >= 2:
        base = list(range(len(train_images)))
        mix_rng = np.random.default_rng(
            np.random.SeedSequence(derive_seed(seed, "mixup-pairs")))
        partners = mix_rng.permutation(len(base))
        n_orig = len(base)
        for i in range(n_orig):
            j = int(partners[i])
            a = signals.Spectrogram(train_images[i].astype(np.float64),
                                    train_labels[i], {})
            b = signals.Spectrogram(train_images[j].astype(np.float64),
                                    train_labels[j], {})
            mixed = signals.mixup(a, b, mixup_alpha, derive_seed(seed, f"mixup:{i}"))
            train_images.append(mixed.data.astype(np.float32))
            train_labels.append(mixed.label)
    if train_images:
        _write_split(output_dir, "train", train_images, train_labels, manifest)
        counts.append(("train", snr_train, len(train_images)))

    for snr in test_snrs:
        images, labs = [], []
        for i, rec in enumerate(records):
            if i not in test_idx:
                continue
            noisy = signals.inject_awgn(
                rec, snr, signals.record_seed(seed, rec.source_id, f"awgn:{snr}"))
            spec = signals.stft_spectrogram(noisy)
            images.append(signals.spectrogram_image(spec))
            labs.append(spec.label)
        if images:
            tag = "clean" if snr == signals.CLEAN else f"{int(snr):+d}"
            name = f"test_snr{tag}"
            _write_split(output_dir, name, images, labs, manifest)
            counts.append((name, tag, len(images)))

    with open(output_dir / "dataset.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    click.echo("split\tsnr_db\trecords")
    for name, snr, n in counts:
        click.echo(f"{name}\t{snr}\t{n}")


def _write_split(output_dir: Path, name: str, images, labels, manifest) -> None:
    stack = np.stack(images)[:, None, :, :].astype("<f4")
    fname = f"{name}.f32"
    stack.tofile(output_dir / fname)
    manifest["splits"][name] = {
        "file": fname,
        "shape": list(stack.shape),
        "dtype": "f32",
        "byte_order": "le",
        "labels": [[float(v) for v in lab] for lab in labels],
    }


@main.command()
@click.option("--graph", "graph_path", required=True, type=click.Path(path_type=Path))
@click.option("--activations", "manifest_path", required=True,
              type=click.Path(path_type=Path))
@click.option("--mode", type=click.Choice(["layer", "channel"]), default="layer",
              show_default=True)
@click.option("--node", "node_id", default=None,
              help="Node id for channel mode.")
@click.option("--output-prefix", "prefix", required=True,
              type=click.Path(path_type=Path))
@click.pass_context
@exit_codes
def similarity(ctx, graph_path, manifest_path, mode, node_id, prefix):
    """Write a CKA similarity matrix as CSV + raw float64 + JSON sidecar."""
    graph = load_graph(graph_path)
    aset = read_activations(manifest_path)
    if mode == "layer":
        unit_ids = graph.prunable_units()
        missing = sorted(u for u in unit_ids if u not in aset)
        if missing:
            raise ValidationError(f"activations missing for units: {missing}")
        matrix = layer_similarity(aset, unit_ids)
        degenerate: list[int] = []
    else:
        if not node_id:
            raise ValidationError("--node is required in channel mode")
        if node_id not in graph.nodes:
            raise ValidationError(f"unknown node {node_id!r}")
        if node_id not in aset:
            raise ValidationError(f"activations missing for node {node_id!r}")
        matrix, degenerate = channel_similarity(aset, node_id)

    prefix.parent.mkdir(parents=True, exist_ok=True)
    csv_path = prefix.with_suffix(".csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([""] + [str(l) for l in matrix.labels])
        for label, row in zip(matrix.labels, matrix.data):
            writer.writerow([str(label)] + [f"{v:.17g}" for v in row])
    bin_path = prefix.with_suffix(".f64")
    matrix.data.astype("<f8").tofile(bin_path)
    sidecar = {
        "dim": matrix.dim,
        "kind": matrix.kind,
        "labels": list(matrix.labels),
        "degenerate": degenerate,
        "dtype": "f64",
        "byte_order": "le",
        "file": bin_path.name,
    }
    with open(prefix.with_suffix(".json"), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2)
        fh.write("\n")
    click.echo(f"matrix\t{matrix.kind}\t{matrix.dim}\t{csv_path}")


@main.command()
@click.option("--graph", "graph_path", required=True, type=click.Path(path_type=Path))
@click.option("--activations", "manifest_path", required=True,
              type=click.Path(path_type=Path))
@click.option("--k", required=True, type=int, help="Number of unit clusters.")
@click.option("--keep-ratio", type=float, default=None,
              help="Global channel keep ratio in (0, 1].")
@click.option("--channel-spec", "channel_spec_path", type=click.Path(path_type=Path),
              default=None, help="JSON file mapping node id -> cluster count.")
@click.option("--output", "plan_path", required=True, type=click.Path(path_type=Path))
@click.option("--emit-graph", "emit_graph_path", type=click.Path(path_type=Path),
              default=None, help="Also write the pruned graph JSON.")
@click.option("--eigengap-report", is_flag=True,
              help="Print unit-similarity eigengaps to stderr (advisory).")
@click.pass_context
@exit_codes
def plan(ctx, graph_path, manifest_path, k, keep_ratio, channel_spec_path,
         plan_path, emit_graph_path, eigengap_report):
    """Generate a two-stage pruning plan and print the cost delta."""
    if (keep_ratio is None) == (channel_spec_path is None):
        raise ValidationError("exactly one of --keep-ratio/--channel-spec is required")
    graph = load_graph(graph_path)
    aset = read_activations(manifest_path)
    if channel_spec_path is not None:
        with open(channel_spec_path, "r", encoding="utf-8") as fh:
            channel_spec = {"mode": "per_node", "values": json.load(fh)}
    else:
        channel_spec = keep_ratio

    if eigengap_report:
        matrix = layer_similarity(aset, graph.prunable_units())
        values, _ = eig_sym(normalized_laplacian(matrix).data)
        for idx, gap in eigengaps(values):
            log.info("eigengap after %d: %.6f", idx, gap)

    result = hierarchical_plan(graph, aset, k, channel_spec,
                               seed=ctx.obj["seed"], threads=ctx.obj["threads"])
    write_plan(result, plan_path)
    pruned = apply_plan(graph, result)
    if emit_graph_path is not None:
        write_graph(pruned, emit_graph_path)
    _echo_cost_table(count_cost(graph), count_cost(pruned))


@main.command()
@click.option("--graph", "graph_path", required=True, type=click.Path(path_type=Path))
@click.option("--plan", "plan_path", type=click.Path(path_type=Path), default=None)
@click.pass_context
@exit_codes
def report(ctx, graph_path, plan_path):
    """Print params/FLOPs (and reductions when a plan is given) as TSV."""
    graph = load_graph(graph_path)
    base = count_cost(graph)
    if plan_path is None:
        _echo_cost_table(base, base)
    else:
        plan_obj = read_plan(plan_path, graph)
        pruned = apply_plan(graph, plan_obj)
        _echo_cost_table(base, count_cost(pruned))


def _echo_cost_table(base, pruned) -> None:
    dp = 100.0 * (1.0 - pruned.params / base.params)
    df = 100.0 * (1.0 - pruned.flops / base.flops)
    click.echo("params_m\tdparams_pct\tflops_m\tdflops_pct")
    click.echo(f"{pruned.params / 1e6:.4f}\t{dp:.2f}\t{pruned.flops / 1e6:.2f}\t{df:.2f}")


if __name__ == "__main__":
    main()
