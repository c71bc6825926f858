"""Rectangular minimum-weight bipartite matching with forbidden pairs.

``solve_lap`` is a shortest-augmenting-path solver in the Jonker-Volgenant
family (dual potentials + Dijkstra over reduced costs, one augmentation per
row).  ``brute_force_lap`` enumerates every injective map and serves as the
test oracle.

Forbidden entries are given as NaN (``FORBIDDEN``) or +inf in the cost
matrix, or through an explicit boolean ``forbidden`` mask.  Both solvers
first maximise the number of matched pairs, then minimise total cost.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

FORBIDDEN = math.nan
BRUTE_FORCE_MAX_SIDE = 8
_BRUTE_FORCE_MAX_MAPS = 5_000_000


@dataclass
class Assignment:
    pairs: list = field(default_factory=list)
    unmatched_rows: list = field(default_factory=list)
    unmatched_cols: list = field(default_factory=list)
    total_cost: float = 0.0

    @property
    def cardinality(self) -> int:
        return len(self.pairs)

    def col_for_row(self) -> dict:
        return dict(self.pairs)


def as_cost_matrix(costs, forbidden=None):
    """Return (values float64 array, allowed bool mask) after validation."""
    values = np.array(costs, dtype=np.float64)
    if values.ndim == 1 and values.size == 0:
        values = values.reshape(0, 0)
    if values.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    allowed = np.isfinite(values)
    if np.any(np.isneginf(values)):
        raise ValueError("cost matrix contains -inf")
    if forbidden is not None:
        mask = np.asarray(forbidden, dtype=bool)
        if mask.shape != values.shape:
            raise ValueError("forbidden mask shape does not match costs")
        allowed &= ~mask
    if np.any(values[allowed] < 0):
        raise ValueError("finite costs must be non-negative")
    values = np.where(allowed, values, 0.0)
    return values, allowed


def _result(values, allowed, pairs) -> Assignment:
    n, m = values.shape
    pairs = sorted((int(i), int(j)) for i, j in pairs if allowed[i, j])
    rows = {i for i, _ in pairs}
    cols = {j for _, j in pairs}
    return Assignment(
        pairs=pairs,
        unmatched_rows=[i for i in range(n) if i not in rows],
        unmatched_cols=[j for j in range(m) if j not in cols],
        total_cost=math.fsum(values[i, j] for i, j in pairs),
    )


def _augmenting_path_solve(cost: np.ndarray) -> np.ndarray:
    """Min-cost perfect matching on a square matrix; returns col index per row.

    Among equally short columns the search prefers a free column, then the
    lowest column index, so results are deterministic.
    """
    n = cost.shape[0]
    u = np.zeros(n)
    v = np.zeros(n)
    col4row = np.full(n, -1, dtype=np.int64)
    row4col = np.full(n, -1, dtype=np.int64)
    cols = np.arange(n)

    for cur_row in range(n):
        shortest = np.full(n, np.inf)
        path = np.full(n, -1, dtype=np.int64)
        scanned_cols = np.zeros(n, dtype=bool)
        scanned_rows = np.zeros(n, dtype=bool)
        i = cur_row
        min_val = 0.0
        sink = -1
        while sink < 0:
            scanned_rows[i] = True
            remaining = ~scanned_cols
            reduced = min_val + cost[i] - u[i] - v
            better = remaining & (reduced < shortest)
            shortest[better] = reduced[better]
            path[better] = i
            cand = np.where(remaining, shortest, np.inf)
            low = cand.min()
            if not np.isfinite(low):
                raise RuntimeError("no augmenting path; cost matrix is infeasible")
            ties = cols[cand == low]
            free = ties[row4col[ties] < 0]
            j = int(free[0]) if free.size else int(ties[0])
            min_val = low
            scanned_cols[j] = True
            if row4col[j] < 0:
                sink = j
            else:
                i = int(row4col[j])

        u[cur_row] += min_val
        others = scanned_rows.copy()
        others[cur_row] = False
        r = np.nonzero(others)[0]
        u[r] += min_val - shortest[col4row[r]]
        v[scanned_cols] -= min_val - shortest[scanned_cols]

        j = sink
        while True:
            i = int(path[j])
            row4col[j] = i
            col4row[i], j = j, col4row[i]
            if i == cur_row:
                break
    return col4row


def solve_lap(costs, forbidden=None) -> Assignment:
    """Maximum-cardinality, minimum-cost matching over the allowed entries.

    The matrix is padded to square; forbidden entries cost
    ``1 + sum(finite entries)`` so that any matching using one fewer forbidden
    pair is always cheaper, and padded rows/columns cost zero.
    """
    values, allowed = as_cost_matrix(costs, forbidden)
    n, m = values.shape
    if n == 0 or m == 0 or not allowed.any():
        return _result(values, allowed, [])
    big = 1.0 + math.fsum(values[allowed])
    weights = np.where(allowed, values, big)
    # keep the short side as rows so padding rows are augmented last
    transpose = n > m
    if transpose:
        weights = weights.T
    rows, cols = weights.shape
    square = np.zeros((cols, cols))
    square[:rows] = weights
    col4row = _augmenting_path_solve(square)
    pairs = [(i, int(col4row[i])) for i in range(rows)]
    if transpose:
        pairs = [(j, i) for i, j in pairs]
    return _result(values, allowed, pairs)


def brute_force_lap(costs, forbidden=None) -> Assignment:
    """Exhaustive oracle with the same contract as :func:`solve_lap`.

    Injective maps are enumerated in lexicographic order and only a strict
    improvement replaces the incumbent, so ties resolve to the
    lexicographically smallest map.
    """
    values, allowed = as_cost_matrix(costs, forbidden)
    n, m = values.shape
    if min(n, m) > BRUTE_FORCE_MAX_SIDE:
        raise ValueError(f"brute force limited to min(n, m) <= {BRUTE_FORCE_MAX_SIDE}")
    if n == 0 or m == 0:
        return _result(values, allowed, [])
    transpose = n > m
    vals, ok = (values.T, allowed.T) if transpose else (values, allowed)
    small, large = vals.shape
    if math.perm(large, small) > _BRUTE_FORCE_MAX_MAPS:
        raise ValueError(f"brute force over {math.perm(large, small)} maps is too large")

    best_key, best_pairs = None, []
    for perm in itertools.permutations(range(large), small):
        pairs = [(i, j) for i, j in enumerate(perm) if ok[i, j]]
        key = (-len(pairs), math.fsum(vals[i, j] for i, j in pairs))
        if best_key is None or key < best_key:
            best_key, best_pairs = key, pairs
    if transpose:
        best_pairs = [(j, i) for i, j in best_pairs]
    return _result(values, allowed, best_pairs)
