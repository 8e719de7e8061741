"""Minimum-cost bipartite matching between predicted queries and ground-truth segments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels


@dataclass(frozen=True)
class Assignment:
    pairs: tuple[tuple[int, int], ...]  # (query, gt), sorted by query
    total_cost: float

    @property
    def queries(self) -> np.ndarray:
        return np.array([q for q, _ in self.pairs], dtype=np.int64)

    @property
    def gts(self) -> np.ndarray:
        return np.array([g for _, g in self.pairs], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.pairs)


def _path_cost(cost: np.ndarray, pairs) -> float:
    total = 0.0
    for q, g in pairs:
        total += cost[q, g]
    return float(total)


def _solve(cost: np.ndarray):
    """Optimal pairs (sorted by row), plus reduced costs of the padded problem."""
    r, c = cost.shape
    n = max(r, c)
    padded = np.zeros((n, n))
    padded[:r, :c] = cost
    col4row, u, v = kernels.solve_square_assignment(padded)
    pairs = [(i, int(col4row[i])) for i in range(r) if col4row[i] < c]
    reduced = padded - u[:, None] - v[None, :]
    return pairs, reduced[:r, :c]


def hungarian(cost) -> Assignment:
    """Minimise total cost over injective matchings of ``min(R, C)`` pairs.

    Among optimal matchings the lexicographically smallest pair list wins,
    so ties resolve deterministically regardless of solver internals.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a matrix")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")
    r, c = cost.shape
    if r == 0 or c == 0:
        return Assignment((), 0.0)

    current, reduced = _solve(cost)
    best = _path_cost(cost, current)
    tol = 1e-9 * max(1.0, float(np.abs(cost).max()))
    k = min(r, c)

    # Greedy lexicographic refinement. Complementary slackness limits the
    # candidates to tight edges; `current` is always optimal with prefix `fixed`.
    fixed: list[tuple[int, int]] = []
    used: set[int] = set()
    fixed_cost = 0.0
    last_q = -1
    for t in range(k):
        chosen = None
        for q in range(last_q + 1, r):
            if r - q < k - t:
                break
            for g in range(c):
                if g in used or reduced[q, g] > tol:
                    continue
                if current[t] == (q, g):
                    chosen = (q, g)
                    break
                rows = np.arange(q + 1, r)
                cols = np.array([j for j in range(c) if j not in used and j != g], dtype=np.int64)
                need = k - t - 1
                if min(rows.size, cols.size) < need:
                    continue
                if need:
                    sub_pairs, _ = _solve(cost[np.ix_(rows, cols)])
                    rest = [(int(rows[i]), int(cols[j])) for i, j in sub_pairs]
                else:
                    rest = []
                if fixed_cost + cost[q, g] + _path_cost(cost, rest) <= best + tol:
                    chosen = (q, g)
                    current = fixed + [chosen] + rest
                    break
            if chosen is not None:
                break
        if chosen is None:  # pragma: no cover - unreachable with a valid optimum
            raise RuntimeError("lexicographic refinement lost the optimum")
        fixed.append(chosen)
        used.add(chosen[1])
        fixed_cost += cost[chosen]
        last_q = chosen[0]

    return Assignment(tuple(fixed), _path_cost(cost, fixed))
