"""Exact minimum-cost assignment (Kuhn-Munkres with potentials, O(n^3))."""

from __future__ import annotations

import numpy as np


def _solve(cost: np.ndarray) -> tuple[np.ndarray, float]:
    n = cost.shape[0]
    inf = float("inf")
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match_col = np.zeros(n + 1, dtype=np.int64)  # column j -> row (1-based), 0 = free
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match_col[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match_col[j0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[match_col[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match_col[j0] == 0:
                break
        while True:
            j1 = way[j0]
            match_col[j0] = match_col[j1]
            j0 = j1
            if j0 == 0:
                break
    perm = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        perm[match_col[j] - 1] = j - 1
    return perm, float(sum(cost[i, perm[i]] for i in range(n)))


def hungarian(cost) -> np.ndarray:
    """Return ``perm`` minimizing ``sum(cost[i, perm[i]])``.

    Among optimal assignments the lexicographically smallest permutation is
    returned, so ties resolve deterministically.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"assignment needs a square cost matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("assignment costs must be finite")
    n = cost.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    _, best = _solve(cost)
    tol = 1e-9 * max(1.0, abs(best), float(np.abs(cost).max()))
    rows = list(range(n))
    cols = list(range(n))
    perm = np.empty(n, dtype=np.int64)
    fixed = 0.0
    # greedily fix each row to the smallest column that keeps the total optimal
    for i in range(n):
        rest_rows = rows[i + 1:]
        for j in sorted(cols):
            rest_cols = [c for c in cols if c != j]
            if rest_rows:
                _, sub = _solve(cost[np.ix_(rest_rows, rest_cols)])
            else:
                sub = 0.0
            if fixed + cost[i, j] + sub <= best + tol:
                perm[i] = j
                fixed += cost[i, j]
                cols.remove(j)
                break
    return perm


def assignment_cost(cost, perm) -> float:
    cost = np.asarray(cost, dtype=np.float64)
    return float(sum(cost[i, perm[i]] for i in range(len(perm))))
