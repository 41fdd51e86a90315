"""Normalized-Laplacian spectral clustering.

Pipeline: affinity matrix -> symmetric normalized Laplacian -> cyclic
Jacobi eigendecomposition -> spectral embedding (k smallest eigenvalues,
row-normalized) -> seeded k-means with restarts.

Everything is deterministic for a fixed seed: the k-means restart streams
are derived from the user seed by fixed splitting, ties break on the
lowest index, and the Jacobi sweep order is fixed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, ValidationError
from .similarity import SimilarityMatrix

JACOBI_TOL = 1e-12      # off-diagonal Frobenius norm, relative to ||A||_F
JACOBI_MAX_SWEEPS = 100
KMEANS_MAX_ITER = 300
KMEANS_RESTARTS = 10


@dataclass
class Laplacian:
    dim: int
    data: np.ndarray


@dataclass
class SpectralEmbedding:
    """Row-normalized eigenvector embedding (n rows, k columns)."""

    rows: np.ndarray
    eigenvalues: np.ndarray


@dataclass
class Clustering:
    assignments: np.ndarray  # length n, values in [0, k)
    centroids: np.ndarray    # k x dim
    inertia: float


def normalized_laplacian(s: SimilarityMatrix) -> Laplacian:
    """I - D^{-1/2} S D^{-1/2} for an affinity matrix with unit diagonal."""
    a = s.data
    degrees = a.sum(axis=1)
    if np.any(degrees <= 0.0):
        raise ValidationError("zero degree in affinity matrix")
    inv_sqrt = 1.0 / np.sqrt(degrees)
    lap = np.eye(s.dim) - inv_sqrt[:, None] * a * inv_sqrt[None, :]
    lap = (lap + lap.T) / 2.0  # exact symmetrization
    return Laplacian(dim=s.dim, data=lap)


def _rotation_rounds(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Round-robin schedule covering every index pair once per sweep.

    Pairs within a round are disjoint, so their Givens rotations commute
    and can be applied as one vectorized update.
    """
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        ps, qs = [], []
        for i in range(m // 2):
            a, bb = players[i], players[m - 1 - i]
            if a < n and bb < n:
                ps.append(min(a, bb))
                qs.append(max(a, bb))
        rounds.append((np.asarray(ps), np.asarray(qs)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def eig_sym(a: np.ndarray, tol: float = JACOBI_TOL,
            max_sweeps: int = JACOBI_MAX_SWEEPS) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues ascending, eigenvectors as columns).  The sweep
    order is a fixed round-robin over index pairs; convergence is declared
    when the off-diagonal Frobenius norm drops below tol * ||A||_F.  Sign
    convention: each eigenvector's largest-magnitude component is positive.
    """
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValidationError(f"matrix is not square: {a.shape}")
    scale = max(1.0, float(np.abs(a).max()) if n else 1.0)
    if n and float(np.abs(a - a.T).max()) > 1e-10 * scale:
        raise ValidationError("matrix is not symmetric within 1e-10")
    if n == 0:
        return np.empty(0), np.empty((0, 0))
    if n == 1:
        return a.reshape(1).copy(), np.ones((1, 1))

    work = (a + a.T) / 2.0
    vt = np.eye(n)  # rows of vt are the eigenvectors being accumulated
    norm = np.linalg.norm(work)
    if norm == 0.0:
        return np.zeros(n), vt
    rounds = _rotation_rounds(n)
    threshold = tol * norm
    # rotations this small cannot lift the off-norm above threshold/10
    skip_tol = threshold / (10.0 * n)

    def off_norm(m):
        o = m.copy()
        np.fill_diagonal(o, 0.0)
        return np.linalg.norm(o)

    converged = False
    for _ in range(max_sweeps):
        work = (work + work.T) / 2.0  # keep round-off drift symmetric
        if off_norm(work) < threshold:
            converged = True
            break
        for ps, qs in rounds:
            apq = work[ps, qs]
            active = np.abs(apq) > skip_tol
            if not active.any():
                continue
            ps_a, qs_a, apq = ps[active], qs[active], apq[active]
            app = work[ps_a, ps_a]
            aqq = work[qs_a, qs_a]
            tau = (aqq - app) / (2.0 * apq)
            t = np.sign(tau) / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
            t = np.where(tau == 0.0, 1.0, t)
            c = 1.0 / np.sqrt(1.0 + t * t)
            sn = t * c
            # rows, then columns (fancy indexing gathers are copies)
            rp = work[ps_a, :]
            rq = work[qs_a, :]
            work[ps_a, :] = c[:, None] * rp - sn[:, None] * rq
            work[qs_a, :] = sn[:, None] * rp + c[:, None] * rq
            cp = work[:, ps_a]
            cq = work[:, qs_a]
            work[:, ps_a] = cp * c - cq * sn
            work[:, qs_a] = cp * sn + cq * c
            # exact zeros on the rotated pairs
            work[ps_a, qs_a] = 0.0
            work[qs_a, ps_a] = 0.0
            # accumulate eigenvectors (rows of vt)
            vp = vt[ps_a, :]
            vq = vt[qs_a, :]
            vt[ps_a, :] = c[:, None] * vp - sn[:, None] * vq
            vt[qs_a, :] = sn[:, None] * vp + c[:, None] * vq
    else:
        converged = off_norm(work) < threshold
    if not converged:
        residual = float(off_norm(work) / norm)
        raise ConvergenceError(
            f"Jacobi failed to converge in {max_sweeps} sweeps", residual=residual
        )

    values = np.diag(work).copy()
    order = np.argsort(values, kind="stable")
    values = values[order]
    vecs = vt[order].T
    # deterministic signs: largest-magnitude component positive
    pivot = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[pivot, np.arange(n)])
    signs[signs == 0.0] = 1.0
    vecs = vecs * signs[None, :]
    return values, vecs


def embed(lap: Laplacian, k: int) -> SpectralEmbedding:
    """Eigenvectors of the k smallest eigenvalues, rows scaled to unit norm.

    Zero eigenvalues are included (their eigenvectors carry the connected
    component structure).  Rows that are exactly zero stay zero instead of
    producing NaNs.
    """
    n = lap.dim
    if not 1 <= k <= n:
        raise ValidationError(f"embedding size k={k} outside [1, {n}]")
    values, vecs = eig_sym(lap.data)
    u = vecs[:, :k].copy()
    norms = np.sqrt((u * u).sum(axis=1))
    nonzero = norms > 0.0
    u[nonzero] /= norms[nonzero, None]
    return SpectralEmbedding(rows=u, eigenvalues=values[:k].copy())


def eigengaps(eigenvalues: np.ndarray) -> list[tuple[int, float]]:
    """Advisory eigengap report: [(k, gap after the k-th eigenvalue), ...]."""
    w = np.asarray(eigenvalues)
    return [(i + 1, float(w[i + 1] - w[i])) for i in range(len(w) - 1)]


def _derive_streams(seed: int, count: int) -> list[np.random.Generator]:
    children = np.random.SeedSequence(int(seed)).spawn(count)
    return [np.random.default_rng(c) for c in children]


def _plusplus_init(y: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: D^2-probabilistic farthest-point selection."""
    n = y.shape[0]
    centroids = np.empty((k, y.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = y[first]
    d2 = ((y - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            pick = int(rng.integers(n))
        else:
            u = rng.random() * total
            pick = int(np.searchsorted(np.cumsum(d2), u, side="right"))
            pick = min(pick, n - 1)
        centroids[j] = y[pick]
        d2 = np.minimum(d2, ((y - centroids[j]) ** 2).sum(axis=1))
    return centroids


def _lloyd(y: np.ndarray, centroids: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray, float]:
    n = y.shape[0]
    assignments = np.full(n, -1, dtype=np.int64)
    for _ in range(KMEANS_MAX_ITER):
        d2 = ((y[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(d2, axis=1)
        # repair empty clusters: move in the point farthest from its centroid
        for cid in range(k):
            if not np.any(new_assign == cid):
                dist_own = d2[np.arange(n), new_assign]
                candidates = np.where(np.bincount(new_assign, minlength=k)[new_assign] > 1)[0]
                if candidates.size == 0:
                    candidates = np.arange(n)
                far = candidates[np.argmax(dist_own[candidates])]
                new_assign[far] = cid
                d2[far] = 0.0  # freeze it for further repairs this round
        if np.array_equal(new_assign, assignments):
            break
        assignments = new_assign
        for cid in range(k):
            members = y[assignments == cid]
            centroids[cid] = members.mean(axis=0)
    d2 = ((y[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    inertia = float(d2[np.arange(n), assignments].sum())
    return assignments, centroids, inertia


def kmeans(y: np.ndarray, k: int, seed: int) -> Clustering:
    """Seeded k-means: k-means++ init, Lloyd iterations, best of restarts.

    Deterministic for a fixed seed; every cluster id is guaranteed to be
    assigned at least once.
    """
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[0]
    if not 1 <= k <= n:
        raise ValidationError(f"k={k} outside [1, n={n}]")
    best: tuple[np.ndarray, np.ndarray, float] | None = None
    for rng in _derive_streams(seed, KMEANS_RESTARTS):
        centroids = _plusplus_init(y, k, rng)
        assignments, centroids, inertia = _lloyd(y, centroids.copy(), k)
        if best is None or inertia < best[2]:
            best = (assignments, centroids, inertia)
    assignments, centroids, inertia = best
    return Clustering(assignments=assignments, centroids=centroids, inertia=inertia)


def spectral_cluster(s: SimilarityMatrix, k: int, seed: int) -> Clustering:
    """Laplacian -> embedding -> k-means; assignments align with s.labels."""
    if not 1 <= k <= s.dim:
        raise ValidationError(f"cluster count k={k} outside [1, {s.dim}]")
    lap = normalized_laplacian(s)
    emb = embed(lap, k)
    return kmeans(emb.rows, k, seed)
