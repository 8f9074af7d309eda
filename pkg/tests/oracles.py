"""Independent reference implementations used to verify the package.

Everything here is deliberately brute force and shares no code with the
library: exhaustive monotone-path enumeration, a classic hard-DTW DP,
and naive per-element recomputations of the losses.
"""

from __future__ import annotations

import math

import numpy as np


def enumerate_monotone_paths(n: int, m: int) -> list[list[tuple[int, int]]]:
    """All paths from (0,0) to (n-1,m-1) with steps right/down/diagonal."""
    paths: list[list[tuple[int, int]]] = []

    def walk(i: int, j: int, acc: list[tuple[int, int]]):
        acc = acc + [(i, j)]
        if i == n - 1 and j == m - 1:
            paths.append(acc)
            return
        if i + 1 < n:
            walk(i + 1, j, acc)
        if j + 1 < m:
            walk(i, j + 1, acc)
        if i + 1 < n and j + 1 < m:
            walk(i + 1, j + 1, acc)

    walk(0, 0, [])
    return paths


def path_costs(cost: np.ndarray) -> np.ndarray:
    paths = enumerate_monotone_paths(*cost.shape)
    return np.array([sum(cost[i, j] for i, j in path) for path in paths])


def soft_dtw_by_enumeration(cost: np.ndarray, gamma: float) -> float:
    """-gamma * log sum over all monotone paths of exp(-cost/gamma)."""
    c = path_costs(cost)
    lo = c.min()
    return float(lo - gamma * math.log(np.exp(-(c - lo) / gamma).sum()))


def occupancy_by_enumeration(cost: np.ndarray, gamma: float) -> np.ndarray:
    """Expected cell occupancy under the Gibbs measure over paths."""
    paths = enumerate_monotone_paths(*cost.shape)
    costs = np.array([sum(cost[i, j] for i, j in path) for path in paths])
    lo = costs.min()
    w = np.exp(-(costs - lo) / gamma)
    w /= w.sum()
    occ = np.zeros_like(cost)
    for weight, path in zip(w, paths):
        for i, j in path:
            occ[i, j] += weight
    return occ


def hard_dtw(cost: np.ndarray) -> float:
    """Classic min-DP over the same step set."""
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            acc[i, j] = cost[i - 1, j - 1] + min(
                acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1]
            )
    return float(acc[n, m])


def cosine_cost_by_pairs(x: np.ndarray, y: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    out = np.zeros((x.shape[0], y.shape[0]))
    for i in range(x.shape[0]):
        for j in range(y.shape[0]):
            nx = math.sqrt(sum(v * v for v in x[i]))
            ny = math.sqrt(sum(v * v for v in y[j]))
            dot = sum(a * b for a, b in zip(x[i], y[j]))
            out[i, j] = 1.0 - dot / max(nx * ny, eps)
    return out


def entropy_scalar(row) -> float:
    return -sum(p * math.log(p) for p in row if p > 0)


def kl_scalar(p, q, floor: float = 1e-12) -> float:
    return sum(
        pi * (math.log(max(pi, floor)) - math.log(max(qi, floor)))
        for pi, qi in zip(p, q)
    )


def weighted_kl_by_loops(p_ref, p_other, weights, mask) -> float:
    total, count = 0.0, 0
    for i in range(p_ref.shape[0]):
        if mask[i]:
            count += 1
            total += weights[i] * kl_scalar(p_ref[i], p_other[i])
    return total / count


def lcs_by_recursion(a, b) -> int:
    from functools import lru_cache

    @lru_cache(maxsize=None)
    def rec(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + rec(i + 1, j + 1)
        return max(rec(i + 1, j), rec(i, j + 1))

    return rec(0, 0)
