"""Reference solvers and the optimality-gap metric."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

HELD_KARP_MAX_N = 20


@dataclass(frozen=True)
class Tour:
    order: tuple[int, ...]
    length: float


@dataclass(frozen=True)
class GapReport:
    mean_model_len: float
    mean_ref_len: float
    gap_pct: float
    n_instances: int
    augmented: bool


def distance_matrix(coords) -> np.ndarray:
    c = np.asarray(coords, dtype=np.float64)
    diff = c[:, None, :] - c[None, :, :]
    return np.sqrt((diff ** 2).sum(-1))


def _check_perm(order, n: int) -> np.ndarray:
    order = np.asarray(order, dtype=np.int64)
    if order.shape != (n,) or not np.array_equal(np.sort(order), np.arange(n)):
        raise ValueError(f"tour is not a permutation of 0..{n - 1}: {order.tolist()}")
    return order


def tour_length(coords, order) -> float:
    """Closed Euclidean tour length, including the edge back to the start."""
    c = np.asarray(coords, dtype=np.float64)
    order = _check_perm(order, len(c))
    pts = c[order]
    return float(np.sqrt(((pts - np.roll(pts, -1, axis=0)) ** 2).sum(-1)).sum())


def canonical(order) -> tuple[int, ...]:
    """Rotate to start at node 0 and pick the direction with the smaller second node."""
    order = list(order)
    k = order.index(0)
    fwd = order[k:] + order[:k]
    rev = [fwd[0]] + fwd[:0:-1]
    return tuple(min(fwd, rev))


def held_karp(coords) -> Tour:
    """Exact TSP by dynamic programming over visited-set bitmasks.

    Memory is ``2**(n-1) * (n-1)`` float64 entries (about 80 MB at n = 20).
    """
    c = np.asarray(coords, dtype=np.float64)
    n = len(c)
    if n < 3:
        raise ValueError(f"held_karp needs n >= 3, got {n}")
    if n > HELD_KARP_MAX_N:
        raise ValueError(f"held_karp refuses n={n}: exact DP is bounded to n <= {HELD_KARP_MAX_N}")
    D = distance_matrix(c)
    m = n - 1                      # node 0 is the fixed start; bit j is node j + 1
    Dm = D[1:, 1:]
    full = 1 << m
    dp = np.full((full, m), np.inf)
    bits = 1 << np.arange(m)
    dp[bits, np.arange(m)] = D[0, 1:]
    masks = np.arange(full)
    popcount = np.zeros(full, dtype=np.int64)
    for j in range(m):
        popcount += (masks >> j) & 1
    by_size = [masks[popcount == s] for s in range(m + 1)]
    for size in range(2, m + 1):
        layer = by_size[size]
        for j in range(m):
            sel = layer[(layer >> j) & 1 == 1]
            prev = sel ^ (1 << j)
            dp[sel, j] = (dp[prev] + Dm[:, j]).min(axis=1)
    last = full - 1
    closing = dp[last] + D[1:, 0]
    j = int(closing.argmin())
    path = [j]
    mask = last
    while mask != (1 << j):
        prev = mask ^ (1 << j)
        k = int((dp[prev] + Dm[:, j]).argmin())
        path.append(k)
        mask, j = prev, k
    order = canonical([0] + [p + 1 for p in reversed(path)])
    return Tour(order, tour_length(c, order))


def brute_force(coords) -> Tour:
    """Exhaustive search over all tours starting at node 0 (for small n)."""
    from itertools import permutations

    c = np.asarray(coords, dtype=np.float64)
    n = len(c)
    D = distance_matrix(c)
    perms = np.array(list(permutations(range(1, n))), dtype=np.int64)
    full = np.concatenate([np.zeros((len(perms), 1), np.int64), perms], axis=1)
    lens = D[full, np.roll(full, -1, axis=1)].sum(1)
    best = canonical(full[int(lens.argmin())].tolist())
    return Tour(best, tour_length(c, best))


def nearest_neighbor(coords, start: int = 0) -> Tour:
    c = np.asarray(coords, dtype=np.float64)
    D = distance_matrix(c)
    n = len(c)
    visited = np.zeros(n, dtype=bool)
    order = [start]
    visited[start] = True
    for _ in range(n - 1):
        row = np.where(visited, np.inf, D[order[-1]])
        nxt = int(row.argmin())    # argmin returns the lowest index on ties
        order.append(nxt)
        visited[nxt] = True
    return Tour(tuple(order), tour_length(c, order))


def two_opt(coords, initial: Tour | list[int], tol: float = 1e-12) -> Tour:
    """First-improvement 2-opt with a fixed (i, j) scan order."""
    c = np.asarray(coords, dtype=np.float64)
    D = distance_matrix(c)
    order = list(initial.order if isinstance(initial, Tour) else initial)
    _check_perm(order, len(c))
    n = len(order)
    improved = True
    while improved:
        improved = False
        for i in range(n - 1):
            a, b = order[i], order[i + 1]
            for j in range(i + 2, n if i > 0 else n - 1):
                p, q = order[j], order[(j + 1) % n]
                delta = D[a, p] + D[b, q] - D[a, b] - D[p, q]
                if delta < -tol:
                    order[i + 1:j + 1] = order[i + 1:j + 1][::-1]
                    improved = True
                    break
            if improved:
                break
    return Tour(tuple(order), tour_length(c, order))


def opt_gap(model_lens, ref_lens, augmented: bool = False) -> GapReport:
    """Ratio-of-means optimality gap in percent.

    With ``augmented=True`` each row of ``model_lens`` holds the lengths over
    the augmentations of one instance and its minimum is used.
    """
    m = np.asarray(model_lens, dtype=np.float64)
    r = np.asarray(ref_lens, dtype=np.float64)
    if augmented:
        m = m.reshape(len(m), -1).min(axis=1)
    if m.shape != r.shape:
        raise ValueError(f"opt_gap: {m.shape[0] if m.ndim else 1} model lengths vs "
                         f"{r.shape[0] if r.ndim else 1} references")
    if (r <= 0).any():
        raise ValueError("opt_gap: reference lengths must be positive")
    mm, rm = float(m.mean()), float(r.mean())
    return GapReport(mm, rm, (mm / rm - 1.0) * 100.0, int(m.size), augmented)
