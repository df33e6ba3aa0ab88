"""Independent brute-force references shared by the unit and acceptance tests.

These deliberately avoid the library's dynamic-programming shortcuts: the
warping distance below enumerates every monotone alignment path by depth
first search and accumulates costs in path order, so agreement with the
DP implementation is meaningful rather than circular.
"""

from __future__ import annotations

import numpy as np


def dtw_bruteforce(a: np.ndarray, b: np.ndarray) -> float:
    """Minimum path cost over all monotone warping paths, by enumeration.

    Steps are (1, 0), (0, 1) and (1, 1); the cost of a path is the left
    fold of the Euclidean column distances along it, starting from the
    (0, 0) cell.  Exponential in the input lengths, so keep them small.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    n, m = a.shape[1], b.shape[1]
    diff = a.T[:, None, :] - b.T[None, :, :]
    cost = np.sqrt((diff ** 2).sum(axis=2))
    best = [np.inf]

    def walk(i: int, j: int, total: float) -> None:
        if i == n - 1 and j == m - 1:
            if total < best[0]:
                best[0] = total
            return
        if i + 1 < n:
            walk(i + 1, j, total + cost[i + 1, j])
        if j + 1 < m:
            walk(i, j + 1, total + cost[i, j + 1])
        if i + 1 < n and j + 1 < m:
            walk(i + 1, j + 1, total + cost[i + 1, j + 1])

    walk(0, 0, cost[0, 0])
    return float(best[0])
