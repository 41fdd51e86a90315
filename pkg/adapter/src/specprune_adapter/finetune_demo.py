"""Demo-scale fine-tuning loop with batch-level sample mixing.

Trains a (pruned) model on a dataset produced by `specprune preprocess`,
drawing the mixing coefficient from the same Beta sampling path the
preprocessing pipeline uses.  Deliberately small: it demonstrates the
recovery recipe (Adam, lr 1e-3, mixed samples with soft labels); it is
not sized for publication-scale accuracy runs.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
import torch
from torch import nn

from specprune.errors import ValidationError
from specprune.graph import load_graph
from specprune.signals import beta_lambda

from .graph_model import GraphModel, build_model_from_graph
from .toy_model import toy_model


def load_split(dataset_path: Path, split: str) -> tuple[torch.Tensor, torch.Tensor]:
    payload = json.loads(dataset_path.read_text())
    if split not in payload.get("splits", {}):
        raise ValidationError(f"split {split!r} not in dataset")
    meta = payload["splits"][split]
    data = np.fromfile(dataset_path.parent / meta["file"], dtype="<f4")
    images = torch.from_numpy(data.reshape(meta["shape"]).copy())
    labels = torch.tensor(meta["labels"], dtype=torch.float32)
    return images, labels


def soft_cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return -(targets * torch.log_softmax(logits, dim=1)).sum(dim=1).mean()


def finetune_mixup_demo(model: GraphModel, images: torch.Tensor,
                        labels: torch.Tensor, alpha: float = 0.5,
                        epochs: int = 2, lr: float = 1e-3,
                        batch_size: int = 64, seed: int = 42,
                        log_path: Path | None = None) -> list[dict]:
    """Train with per-batch mixing; returns per-epoch metric rows."""
    if images.shape[0] != labels.shape[0]:
        raise ValidationError("images/labels length mismatch")
    torch.manual_seed(seed)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    rows = []
    n = images.shape[0]
    model.train()
    for epoch in range(epochs):
        order = torch.from_numpy(rng.permutation(n))
        losses = []
        correct = 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            u = images[idx]
            v = labels[idx]
            if alpha > 0.0 and idx.shape[0] > 1:
                lam = beta_lambda(alpha, rng)
                perm = torch.from_numpy(rng.permutation(idx.shape[0]))
                u = lam * u + (1.0 - lam) * u[perm]
                v = lam * v + (1.0 - lam) * v[perm]
            else:
                lam = 1.0
            optimizer.zero_grad()
            logits = model(u)
            loss = soft_cross_entropy(logits, v)
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
            correct += int((logits.argmax(dim=1) == v.argmax(dim=1)).sum())
        rows.append({
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "accuracy": correct / n,
            "last_lambda": float(lam),
        })
    if log_path is not None:
        with open(log_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch", "loss", "accuracy",
                                                    "last_lambda"])
            writer.writeheader()
            writer.writerows(rows)
    return rows


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Mixup fine-tuning demo.")
    parser.add_argument("--graph", type=Path, default=None,
                        help="Pruned graph JSON; omit for the toy CNN.")
    parser.add_argument("--weights", type=Path, default=None)
    parser.add_argument("--dataset", type=Path, required=True,
                        help="dataset.json from `specprune preprocess`.")
    parser.add_argument("--split", default="train")
    parser.add_argument("--mixup-alpha", type=float, default=0.5)
    parser.add_argument("--epochs", type=int, default=2)
    parser.add_argument("--lr", type=float, default=1e-3)
    parser.add_argument("--batch-size", type=int, default=64)
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--log", type=Path, default=Path("finetune_log.csv"))
    args = parser.parse_args(argv)
    try:
        images, labels = load_split(args.dataset, args.split)
        if args.graph is not None:
            graph = load_graph(args.graph)
            model = build_model_from_graph(graph, seed=args.seed)
        else:
            model, _ = toy_model(seed=args.seed,
                                 input_shape=tuple(images.shape[1:]))
        if args.weights is not None:
            model.load_state_dict(torch.load(args.weights, weights_only=True))
        rows = finetune_mixup_demo(model, images, labels,
                                   alpha=args.mixup_alpha, epochs=args.epochs,
                                   lr=args.lr, batch_size=args.batch_size,
                                   seed=args.seed, log_path=args.log)
        print("epoch\tloss\taccuracy")
        for row in rows:
            print(f"{row['epoch']}\t{row['loss']:.4f}\t{row['accuracy']:.4f}")
        return 0
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
