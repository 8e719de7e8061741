"""Pure-numpy kernel implementations.

Semantics (including tie-breaking) match ``_numba`` exactly; the backend
equivalence tests compare the two bit for bit.
"""

from __future__ import annotations

import numpy as np


def solve_square_assignment(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shortest-augmenting-path assignment on a square cost matrix.

    Returns ``(col4row, u, v)`` where ``u``/``v`` are optimal dual potentials,
    i.e. ``cost[i, j] - u[i] - v[j] >= 0`` with equality on assigned edges.
    """
    n = cost.shape[0]
    u = np.zeros(n)
    v = np.zeros(n)
    col4row = np.full(n, -1, dtype=np.int64)
    row4col = np.full(n, -1, dtype=np.int64)

    for cur_row in range(n):
        shortest = np.full(n, np.inf)
        path = np.full(n, -1, dtype=np.int64)
        scanned_rows = np.zeros(n, dtype=np.bool_)
        scanned_cols = np.zeros(n, dtype=np.bool_)
        remaining = np.arange(n, dtype=np.int64)
        n_remaining = n
        min_val = 0.0
        i = cur_row
        sink = -1
        while sink == -1:
            scanned_rows[i] = True
            cols = remaining[:n_remaining]
            reduced = min_val + cost[i, cols] - u[i] - v[cols]
            better = reduced < shortest[cols]
            path[cols[better]] = i
            shortest[cols] = np.where(better, reduced, shortest[cols])

            cand = shortest[cols]
            lowest = cand.min()
            ties = np.flatnonzero(cand == lowest)
            free = ties[row4col[cols[ties]] == -1]
            index = int(free[0]) if free.size else int(ties[0])

            min_val = lowest
            j = int(remaining[index])
            if row4col[j] == -1:
                sink = j
            else:
                i = int(row4col[j])
            scanned_cols[j] = True
            n_remaining -= 1
            remaining[index] = remaining[n_remaining]

        u[cur_row] += min_val
        rows = np.flatnonzero(scanned_rows)
        rows = rows[rows != cur_row]
        u[rows] += min_val - shortest[col4row[rows]]
        cols = np.flatnonzero(scanned_cols)
        v[cols] -= min_val - shortest[cols]

        j = sink
        while True:
            i = int(path[j])
            row4col[j] = i
            col4row[i], j = j, int(col4row[i])
            if i == cur_row:
                break
    return col4row, u, v


def pair_counts(a: np.ndarray, b: np.ndarray, n_a: int, n_b: int) -> np.ndarray:
    """Contingency table ``counts[x, y] = #{k : a[k] == x and b[k] == y}``."""
    flat = a.astype(np.int64) * n_b + b.astype(np.int64)
    return np.bincount(flat, minlength=n_a * n_b).reshape(n_a, n_b)


def masked_argmax(scores: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Row-wise argmax over kept columns; -1 where no column is kept.

    Ties resolve to the lowest column index.
    """
    n_rows = scores.shape[0]
    if not keep.any():
        return np.full(n_rows, -1, dtype=np.int64)
    masked = np.where(keep[None, :], scores, -np.inf)
    return np.argmax(masked, axis=1).astype(np.int64)
