"""Independent brute-force oracles used to pin down expected values.

Everything here is deliberately naive (explicit Python loops, exhaustive
enumeration) and shares no code with the package's optimized paths.
"""

from __future__ import annotations

import numpy as np


def naive_gram(x: np.ndarray) -> np.ndarray:
    """Double-loop dot products in float64."""
    x = np.asarray(x, dtype=np.float64)
    b = x.shape[0]
    g = np.zeros((b, b))
    for i in range(b):
        for j in range(b):
            acc = 0.0
            for v, w in zip(x[i], x[j]):
                acc += float(v) * float(w)
            g[i][j] = acc
    return g


def naive_hsic1(k: np.ndarray, l: np.ndarray) -> float:
    """Loop-level evaluation of the unbiased estimator (diagonal-zeroed)."""
    b = k.shape[0]
    kz = [[0.0 if i == j else float(k[i][j]) for j in range(b)] for i in range(b)]
    lz = [[0.0 if i == j else float(l[i][j]) for j in range(b)] for i in range(b)]
    trace = 0.0
    for i in range(b):
        for j in range(b):
            trace += kz[i][j] * lz[j][i]
    sum_k = sum(kz[i][j] for i in range(b) for j in range(b))
    sum_l = sum(lz[i][j] for i in range(b) for j in range(b))
    middle = sum_k * sum_l / ((b - 1) * (b - 2))
    ones_klone = 0.0
    for i in range(b):
        for j in range(b):
            acc = 0.0
            for m in range(b):
                acc += kz[i][m] * lz[m][j]
            ones_klone += acc
    right = 2.0 / (b - 2) * ones_klone
    return (trace + middle - right) / (b * (b - 3))


def naive_cka(x: np.ndarray, y: np.ndarray) -> float:
    k = naive_gram(x)
    l = naive_gram(y)
    return naive_hsic1(k, l) / np.sqrt(naive_hsic1(k, k) * naive_hsic1(l, l))


def partition_sets(assignments) -> frozenset:
    """Label-invariant view of a clustering: frozenset of member index sets."""
    groups: dict[int, set[int]] = {}
    for idx, cid in enumerate(assignments):
        groups.setdefault(int(cid), set()).add(idx)
    return frozenset(frozenset(g) for g in groups.values())


def all_assignments(n: int, k: int):
    """Every surjective assignment of n items onto k unlabeled clusters.

    Generated as restricted growth strings, so each partition appears once.
    """
    def grow(prefix, used):
        if len(prefix) == n:
            if used == k:
                yield list(prefix)
            return
        for cid in range(min(used + 1, k)):
            prefix.append(cid)
            yield from grow(prefix, max(used, cid + 1))
            prefix.pop()

    yield from grow([], 0)


def ncut_value(s: np.ndarray, assignments) -> float:
    """Normalized cut of a partition over affinity matrix s."""
    s = np.asarray(s, dtype=np.float64)
    labels = sorted(set(int(c) for c in assignments))
    a = np.asarray(assignments)
    total = 0.0
    for cid in labels:
        inside = np.where(a == cid)[0]
        outside = np.where(a != cid)[0]
        cut = s[np.ix_(inside, outside)].sum()
        vol = s[inside, :].sum()
        if vol == 0.0:
            return np.inf
        total += cut / vol
    return total


def min_ncut_partitions(s: np.ndarray, k: int) -> list[frozenset]:
    """All partitions achieving the minimum normalized cut (exhaustive)."""
    best = np.inf
    winners: list[frozenset] = []
    n = s.shape[0]
    for assignment in all_assignments(n, k):
        value = ncut_value(s, assignment)
        if value < best - 1e-12:
            best = value
            winners = [partition_sets(assignment)]
        elif abs(value - best) <= 1e-12:
            p = partition_sets(assignment)
            if p not in winners:
                winners.append(p)
    return winners


def min_inertia_partition(points: np.ndarray, k: int) -> frozenset:
    """Exhaustive minimum within-cluster sum of squares over all partitions."""
    best = np.inf
    winner = None
    for assignment in all_assignments(points.shape[0], k):
        a = np.asarray(assignment)
        inertia = 0.0
        for cid in range(k):
            members = points[a == cid]
            centroid = members.mean(axis=0)
            inertia += ((members - centroid) ** 2).sum()
        if inertia < best:
            best = inertia
            winner = partition_sets(assignment)
    return winner


def planted_block_similarity(sizes, noise: float, rng: np.random.Generator) -> np.ndarray:
    """Block-diagonal affinity: 1.0 within blocks, U[0, noise] across."""
    n = sum(sizes)
    s = np.zeros((n, n))
    start = 0
    blocks = []
    for size in sizes:
        blocks.append(range(start, start + size))
        start += size
    for block in blocks:
        for i in block:
            for j in block:
                s[i][j] = 1.0
    upper = rng.uniform(0.0, noise, size=(n, n))
    for i in range(n):
        for j in range(i + 1, n):
            if s[i][j] == 0.0:
                s[i][j] = s[j][i] = upper[i][j]
    np.fill_diagonal(s, 1.0)
    return s


def planted_partition(sizes) -> frozenset:
    start = 0
    parts = []
    for size in sizes:
        parts.append(frozenset(range(start, start + size)))
        start += size
    return frozenset(parts)
