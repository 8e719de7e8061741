"""Numba-compiled kernels; loop-level mirrors of ``_numpy``."""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def solve_square_assignment(cost):
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
        remaining = np.arange(n)
        n_remaining = n
        min_val = 0.0
        i = cur_row
        sink = -1
        while sink == -1:
            scanned_rows[i] = True
            lowest = np.inf
            index = -1
            for it in range(n_remaining):
                j = remaining[it]
                r = min_val + cost[i, j] - u[i] - v[j]
                if r < shortest[j]:
                    path[j] = i
                    shortest[j] = r
                s = shortest[j]
                if index == -1 or s < lowest:
                    lowest = s
                    index = it
                elif s == lowest and row4col[remaining[index]] != -1 and row4col[j] == -1:
                    index = it

            min_val = lowest
            j = remaining[index]
            if row4col[j] == -1:
                sink = j
            else:
                i = row4col[j]
            scanned_cols[j] = True
            n_remaining -= 1
            remaining[index] = remaining[n_remaining]

        u[cur_row] += min_val
        for r in range(n):
            if scanned_rows[r] and r != cur_row:
                u[r] += min_val - shortest[col4row[r]]
        for c in range(n):
            if scanned_cols[c]:
                v[c] -= min_val - shortest[c]

        j = sink
        while True:
            i = path[j]
            row4col[j] = i
            nxt = col4row[i]
            col4row[i] = j
            j = nxt
            if i == cur_row:
                break
    return col4row, u, v


@njit(cache=True)
def pair_counts(a, b, n_a, n_b):
    counts = np.zeros((n_a, n_b), dtype=np.int64)
    for k in range(a.shape[0]):
        counts[a[k], b[k]] += 1
    return counts


@njit(cache=True)
def masked_argmax(scores, keep):
    n_rows, n_cols = scores.shape
    out = np.full(n_rows, -1, dtype=np.int64)
    for r in range(n_rows):
        best = -np.inf
        for c in range(n_cols):
            if keep[c] and (out[r] == -1 or scores[r, c] > best):
                best = scores[r, c]
                out[r] = c
    return out
