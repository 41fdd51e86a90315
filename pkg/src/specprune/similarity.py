"""Representational similarity: linear Gram matrices, the unbiased HSIC
estimator, CKA, and full layer/channel similarity matrices.

All reductions run in float64 with a fixed (row-major) summation order so
matrices are reproducible across runs.  The unbiased estimator operates on
Gram matrices whose diagonals are zeroed; it can come out slightly negative
in finite samples, so CKA values are clamped into [0, 1] after the
normalization.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .activations import ActivationSet, FlatView, channel_view, layer_view
from .errors import DegenerateInputError, ValidationError

log = logging.getLogger(__name__)

# Self-similarity below this is treated as a constant (zero-variance) input.
VARIANCE_EPS = 1e-12

# Raw CKA values outside [-CLAMP_WARN_DELTA, 1 + CLAMP_WARN_DELTA] indicate
# something worse than round-off and are logged.
CLAMP_WARN_DELTA = 1e-6


@dataclass
class GramMatrix:
    """Symmetric b x b matrix of inner products between sample rows."""

    dim: int
    data: np.ndarray


@dataclass
class SimilarityMatrix:
    """Symmetric matrix of pairwise CKA values with unit diagonal."""

    dim: int
    data: np.ndarray
    kind: str  # "layer" or "channel"
    labels: list

    def check(self) -> None:
        if self.data.shape != (self.dim, self.dim):
            raise ValidationError("similarity matrix shape mismatch")
        if not np.array_equal(self.data, self.data.T):
            raise ValidationError("similarity matrix is not symmetric")
        if np.any(self.data < 0.0) or np.any(self.data > 1.0):
            raise ValidationError("similarity entries outside [0, 1]")


def gram(view: FlatView) -> GramMatrix:
    """Linear Gram matrix of a flat view, accumulated in float64.

    The upper triangle is computed and mirrored so the result is exactly
    symmetric.
    """
    if view.rows < 4:
        raise ValidationError(f"gram needs >= 4 rows, got {view.rows}")
    x = np.ascontiguousarray(view.data, dtype=np.float64)
    g = x @ x.T
    g = np.triu(g) + np.triu(g, 1).T
    return GramMatrix(dim=view.rows, data=g)


def _hsic_parts(g: np.ndarray):
    """Diagonal-zeroed summaries reused by the pairwise estimator.

    Returns (gz, total, colsums) where gz is the Gram with zero diagonal.
    """
    gz = g.copy()
    np.fill_diagonal(gz, 0.0)
    return gz, float(gz.sum()), gz.sum(axis=0)


def _hsic_from_parts(kz, ks, kc, lz, ls, lc, b: int) -> float:
    trace = float((kz * lz).sum())
    middle = ks * ls / ((b - 1.0) * (b - 2.0))
    right = 2.0 / (b - 2.0) * float(kc @ lc)
    return (trace + middle - right) / (b * (b - 3.0))


def hsic1(k: GramMatrix, l: GramMatrix) -> float:
    """Unbiased HSIC estimator over two Gram matrices.

    Uses the diagonal-zeroed form

        (1 / (b(b-3))) * [tr(Kz Lz) + (1'Kz1)(1'Lz1)/((b-1)(b-2))
                          - (2/(b-2)) 1'Kz Lz 1]

    computed with O(b^2) memory (the product Kz Lz is never materialized).
    """
    if k.dim != l.dim:
        raise ValidationError(f"gram dimension mismatch: {k.dim} != {l.dim}")
    b = k.dim
    if b < 4:
        raise ValidationError(f"hsic1 needs b >= 4, got {b}")
    kz, ks, kc = _hsic_parts(k.data)
    lz, ls, lc = _hsic_parts(l.data)
    return _hsic_from_parts(kz, ks, kc, lz, ls, lc, b)


def cka(view_a: FlatView, view_b: FlatView) -> float:
    """CKA between two representations: HSIC normalized by self-HSIC terms.

    Invariant to isotropic scaling and to orthogonal transforms of the
    feature columns.  Raises DegenerateInputError when either input has
    (near-)zero variance.
    """
    if view_a.rows != view_b.rows:
        raise ValidationError(f"row mismatch: {view_a.rows} != {view_b.rows}")
    k = gram(view_a)
    l = gram(view_b)
    h_kk = hsic1(k, k)
    h_ll = hsic1(l, l)
    if h_kk <= VARIANCE_EPS or h_ll <= VARIANCE_EPS:
        raise DegenerateInputError(
            f"degenerate representation (self-HSIC {min(h_kk, h_ll):.3e} <= {VARIANCE_EPS})"
        )
    raw = hsic1(k, l) / np.sqrt(h_kk * h_ll)
    return _clamp_unit(raw)


def _clamp_unit(raw: float) -> float:
    if raw < -CLAMP_WARN_DELTA or raw > 1.0 + CLAMP_WARN_DELTA:
        log.warning("CKA value %.3e clamped into [0, 1] beyond round-off", raw)
    return min(1.0, max(0.0, raw))


def _pairwise_hsic(grams: list[np.ndarray], b: int) -> np.ndarray:
    """All-pairs unbiased HSIC over a list of b x b Gram matrices.

    Vectorized: tr(Kz Lz) for all pairs is a single GEMM over flattened
    zero-diagonal Grams, and 1'Kz Lz 1 reduces to a GEMM over column sums.
    """
    n = len(grams)
    flat = np.empty((n, b * b), dtype=np.float64)
    cols = np.empty((n, b), dtype=np.float64)
    sums = np.empty(n, dtype=np.float64)
    for i, g in enumerate(grams):
        gz, gs, gc = _hsic_parts(g)
        flat[i] = gz.reshape(-1)
        cols[i] = gc
        sums[i] = gs
    trace = flat @ flat.T
    cross = cols @ cols.T
    middle = np.outer(sums, sums) / ((b - 1.0) * (b - 2.0))
    h = (trace + middle - 2.0 / (b - 2.0) * cross) / (b * (b - 3.0))
    return h


def _similarity_from_hsic(h: np.ndarray) -> np.ndarray:
    """Normalize a pairwise HSIC matrix into CKA values in [0, 1]."""
    selfs = np.diag(h).copy()
    denom = np.sqrt(np.outer(selfs, selfs))
    raw = h / denom
    worst_low = raw.min()
    worst_high = raw.max()
    if worst_low < -CLAMP_WARN_DELTA or worst_high > 1.0 + CLAMP_WARN_DELTA:
        log.warning(
            "CKA raw values reached [%.3e, %.3e]; clamping beyond round-off",
            worst_low, worst_high,
        )
    s = np.clip(raw, 0.0, 1.0)
    s = np.triu(s) + np.triu(s, 1).T  # exact symmetry
    np.fill_diagonal(s, 1.0)
    return s


def layer_similarity(aset: ActivationSet, unit_ids: list[str]) -> SimilarityMatrix:
    """Pairwise CKA over whole-layer (flattened) representations."""
    if not unit_ids:
        raise ValidationError("unit id list is empty")
    b = aset.batch_size
    grams = [gram(layer_view(aset, uid)).data for uid in unit_ids]
    h = _pairwise_hsic(grams, b)
    for uid, self_h in zip(unit_ids, np.diag(h)):
        if self_h <= VARIANCE_EPS:
            raise DegenerateInputError(
                f"unit {uid!r} has degenerate activations (self-HSIC {self_h:.3e})"
            )
    s = _similarity_from_hsic(h)
    return SimilarityMatrix(dim=len(unit_ids), data=s, kind="layer", labels=list(unit_ids))


def channel_similarity(
    aset: ActivationSet, node_id: str
) -> tuple[SimilarityMatrix, list[int]]:
    """Pairwise CKA over the per-channel representations of one node.

    Channels with degenerate (zero-variance) responses are excluded from
    the matrix and returned as the second element; surviving labels carry
    the original channel indices.
    """
    c = aset.channel_count(node_id)
    b = aset.batch_size
    grams = [gram(channel_view(aset, node_id, p)).data for p in range(c)]
    h = _pairwise_hsic(grams, b)
    selfs = np.diag(h)
    keep = [p for p in range(c) if selfs[p] > VARIANCE_EPS]
    degenerate = [p for p in range(c) if selfs[p] <= VARIANCE_EPS]
    if not keep:
        raise DegenerateInputError(
            f"all {c} channels of node {node_id!r} are degenerate; keep channel 0 only"
        )
    idx = np.asarray(keep)
    s = _similarity_from_hsic(h[np.ix_(idx, idx)])
    matrix = SimilarityMatrix(dim=len(keep), data=s, kind="channel", labels=keep)
    return matrix, degenerate
