"""Minimum-cost bipartite assignment for cross-frame positive-pair mining.

``solve_assignment`` is an exact rectangular solver (successive shortest
augmenting paths with dual potentials). The dual variables it produces are
used to resolve ties exactly: among equal-cost optima the lexicographically
smallest pair list is returned, which keeps every downstream artifact
deterministic. ``brute_force_assignment`` is the independent enumeration
oracle used by the verification suites.
"""

from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass

import numpy as np

from .core import AssociationMatrix, FeatureMatrix, ShapeMismatchError, cosine_cost

BRUTE_FORCE_MAX_SIDE = 8


class SwapRequiredError(ValueError):
    """Raised when a cost matrix has more rows than columns; swap operands."""


class NonFiniteCostError(ValueError):
    """Raised when the cost matrix contains NaN or infinite entries."""


class EnumerationBoundError(ValueError):
    """Raised when brute force is asked to enumerate beyond its size bound."""


class EmptyFrameError(ValueError):
    """Raised when pair mining is attempted on an empty frame."""


@dataclass(frozen=True)
class Matching:
    """An assignment of every row to a distinct column.

    ``pairs`` lists (row, column) with rows ascending 0..m-1;
    ``total_cost`` is the sum of the matched cost entries.
    """

    pairs: tuple[tuple[int, int], ...]
    total_cost: float


def _validate_cost(cost: np.ndarray) -> np.ndarray:
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ShapeMismatchError(f"cost matrix must be 2-d, got {cost.ndim}-d")
    m, n = cost.shape
    if m > n:
        raise SwapRequiredError(f"cost matrix has {m} rows > {n} columns; swap operands")
    if cost.size and not np.all(np.isfinite(cost)):
        raise NonFiniteCostError("cost matrix contains non-finite entries")
    return cost


def _shortest_augmenting_paths(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Solve the rectangular assignment, returning columns and dual potentials.

    Maintains reduced costs c_ij - u_i - v_j >= 0 with equality on matched
    edges; the duals characterize the full optimal face, which the
    lexicographic tie-break below relies on.
    """
    m, n = cost.shape
    u = np.zeros(m)
    v = np.zeros(n)
    col_to_row = np.full(n, -1, dtype=np.int64)
    row_to_col = np.full(m, -1, dtype=np.int64)

    for cur_row in range(m):
        shortest = np.full(n, np.inf)
        reached_from = np.full(n, -1, dtype=np.int64)
        scanned_rows = np.zeros(m, dtype=bool)
        scanned_cols = np.zeros(n, dtype=bool)
        min_val = 0.0
        i = cur_row
        sink = -1
        while sink < 0:
            scanned_rows[i] = True
            candidate = min_val + cost[i] - u[i] - v
            improve = ~scanned_cols & (candidate < shortest)
            shortest[improve] = candidate[improve]
            reached_from[improve] = i
            masked = np.where(scanned_cols, np.inf, shortest)
            j = int(np.argmin(masked))
            min_val = float(masked[j])
            scanned_cols[j] = True
            if col_to_row[j] < 0:
                sink = j
            else:
                i = int(col_to_row[j])

        u[cur_row] += min_val
        others = scanned_rows.copy()
        others[cur_row] = False
        if others.any():
            u[others] += min_val - shortest[row_to_col[others]]
        v[scanned_cols] -= min_val - shortest[scanned_cols]

        j = sink
        while True:
            i = int(reached_from[j])
            col_to_row[j] = i
            row_to_col[i], j = j, row_to_col[i]
            if i == cur_row:
                break

    return row_to_col, u, v


def _rows_saturable(adj: list[np.ndarray], rows: list[int], available: np.ndarray,
                    row_match: dict[int, int], col_match: dict[int, int]) -> bool:
    """Extend the matching so every row in ``rows`` is matched; Kuhn augmenting."""

    def augment(r: int, banned: set[int]) -> bool:
        for j in adj[r]:
            j = int(j)
            if not available[j] or j in banned:
                continue
            banned.add(j)
            taken_by = col_match.get(j)
            if taken_by is None or augment(taken_by, banned):
                col_match[j] = r
                row_match[r] = j
                return True
        return False

    for r in rows:
        if r in row_match:
            continue
        if not augment(r, set()):
            return False
    return True


def _cover_required_column(j: int, col_rows: list[np.ndarray], required: np.ndarray,
                           row_match: dict[int, int], col_match: dict[int, int],
                           banned_rows: set[int]) -> bool:
    """Rematch rows so column ``j`` is saturated without unmatching any row.

    A displaced column may be left unmatched only if it is not required;
    otherwise it is covered recursively.
    """
    for r in col_rows[j]:
        r = int(r)
        if r in banned_rows:
            continue
        banned_rows.add(r)
        previous = row_match[r]
        if previous == j:
            return True
        if not required[previous] or _cover_required_column(
            previous, col_rows, required, row_match, col_match, banned_rows
        ):
            if col_match.get(previous) == r:
                del col_match[previous]
            row_match[r] = j
            col_match[j] = r
            return True
    return False


def _completion_exists(zero_edges: np.ndarray, rows: list[int], available: np.ndarray,
                       required: np.ndarray) -> bool:
    """True if ``rows`` can be matched into available columns on zero edges
    while saturating every available required column."""
    adj = [np.flatnonzero(zero_edges[r]) for r in range(zero_edges.shape[0])]
    row_match: dict[int, int] = {}
    col_match: dict[int, int] = {}
    if not _rows_saturable(adj, rows, available, row_match, col_match):
        return False
    col_rows = [
        np.array([r for r in rows if zero_edges[r, j] and available[j]], dtype=np.int64)
        for j in range(zero_edges.shape[1])
    ]
    for j in np.flatnonzero(required & available):
        j = int(j)
        if j in col_match:
            continue
        if not _cover_required_column(j, col_rows, required, row_match, col_match, set()):
            return False
    return True


def _lexicographic_columns(cost: np.ndarray, row_to_col: np.ndarray,
                           u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Among all optimal assignments pick the lexicographically smallest
    column list, scanning rows in ascending order.

    The optimal face is exactly the set of feasible assignments restricted
    to zero-reduced-cost edges that saturate every column with a strictly
    negative dual, so candidate columns can be tested by a matchability
    check instead of re-solving.
    """
    m, n = cost.shape
    scale = max(1.0, float(np.max(np.abs(cost))) if cost.size else 1.0)
    tol = 1e-9 * scale
    zero_edges = (cost - u[:, None] - v[None, :]) <= tol
    required = v < -tol

    available = np.ones(n, dtype=bool)
    chosen = np.array(row_to_col, dtype=np.int64)
    for i in range(m):
        candidates = np.flatnonzero(zero_edges[i] & available)
        if candidates.size == 0:
            # Numerical inconsistency; fall back to the solver's own column.
            available[chosen[i]] = False
            continue
        if candidates.size == 1:
            chosen[i] = candidates[0]
            available[candidates[0]] = False
            continue
        remaining_rows = list(range(i + 1, m))
        picked = -1
        for j in candidates:
            j = int(j)
            available[j] = False
            if _completion_exists(zero_edges, remaining_rows, available, required):
                picked = j
                break
            available[j] = True
        if picked < 0:
            picked = int(chosen[i])
            available[picked] = False
        chosen[i] = picked
    return chosen


def solve_assignment(cost: np.ndarray) -> Matching:
    """Exact minimum-cost assignment of every row to a distinct column.

    Requires m <= n and finite entries. Among equal-cost optima the
    lexicographically smallest pair list is returned (smallest column per
    ascending row), so results are fully deterministic.
    """
    cost = _validate_cost(cost)
    m, _ = cost.shape
    if m == 0:
        return Matching(pairs=(), total_cost=0.0)
    row_to_col, u, v = _shortest_augmenting_paths(cost)
    columns = _lexicographic_columns(cost, row_to_col, u, v)
    total = float(cost[np.arange(m), columns].sum())
    return Matching(pairs=tuple((i, int(columns[i])) for i in range(m)), total_cost=total)


@functools.lru_cache(maxsize=None)
def _injective_maps(m: int, n: int) -> np.ndarray:
    """All injective row-to-column maps in lexicographic order, (count, m)."""
    return np.array(list(itertools.permutations(range(n), m)), dtype=np.int64)


def brute_force_assignment(cost: np.ndarray) -> Matching:
    """Exact minimum by enumerating every injective row-to-column map.

    Verification oracle only; bounded to m <= n <= 8. Ties resolve to the
    first (lexicographically smallest) permutation enumerated.
    """
    cost = _validate_cost(cost)
    m, n = cost.shape
    if n > BRUTE_FORCE_MAX_SIDE:
        raise EnumerationBoundError(f"n={n} exceeds enumeration bound {BRUTE_FORCE_MAX_SIDE}")
    if m == 0:
        return Matching(pairs=(), total_cost=0.0)
    maps = _injective_maps(m, n)
    totals = cost[np.arange(m), maps].sum(axis=1)
    best = maps[int(np.argmin(totals))]  # first minimum, hence lexicographically smallest
    return Matching(
        pairs=tuple((i, int(best[i])) for i in range(m)),
        total_cost=float(totals.min()),
    )


def mine_positive_pairs(x: FeatureMatrix, y: FeatureMatrix) -> tuple[AssociationMatrix, bool]:
    """Mine the optimal cross-frame association between two crop sets.

    Builds the cosine-cost matrix and solves the assignment. When x has
    more columns than y the operands are swapped first; the returned flag
    records the swap and the association is then indexed (y, x).

    Raises:
        EmptyFrameError: if either side has no crops; callers skip the pair.
    """
    if x.num_columns == 0 or y.num_columns == 0:
        raise EmptyFrameError("cannot mine positive pairs from an empty frame")
    swapped = x.num_columns > y.num_columns
    if swapped:
        x, y = y, x
    matching = solve_assignment(cosine_cost(x, y))
    columns = np.array([j for _, j in matching.pairs], dtype=np.int64)
    return AssociationMatrix.from_matched_columns(columns, y.num_columns), swapped
