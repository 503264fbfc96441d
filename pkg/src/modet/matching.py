"""Optimal query-to-target assignment under the detection matching cost.

The cost couples a token-alignment term (one minus the overlap between
the predicted span distribution and the target's uniform span), an L1
box term in center form, and a GIoU term.  The solver is a dual-potential
shortest-augmenting-path Hungarian (O(n^3)); the duals matter because
ties are broken toward the lexicographically smallest pair list, which
is found by a greedy walk over the zero-reduced-cost subgraph rather
than by whatever order the augmenting paths happened to visit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Box, giou_matrix


@dataclass(frozen=True)
class CostWeights:
    """Weights of the three matching-cost terms."""

    w_tok: float = 1.0
    w_l1: float = 5.0
    w_giou: float = 2.0

    def __post_init__(self):
        for name in ("w_tok", "w_l1", "w_giou"):
            val = getattr(self, name)
            if not math.isfinite(val) or val < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {val}")


@dataclass(frozen=True)
class GroundTruthObject:
    """A target: its box plus the caption token positions it grounds to."""

    box: Box
    positive_positions: tuple[int, ...]

    def __post_init__(self):
        if len(self.positive_positions) == 0:
            raise ValueError("target has empty positive token set")
        if any(p < 0 for p in self.positive_positions):
            raise ValueError("negative token position")


@dataclass(frozen=True)
class Assignment:
    """Injective target -> query map plus the leftover queries."""

    pairs: tuple[tuple[int, int], ...]
    unmatched_queries: tuple[int, ...]

    def validate(self, n_queries: int, n_targets: int) -> None:
        qs = [q for q, _ in self.pairs] + list(self.unmatched_queries)
        ts = sorted(t for _, t in self.pairs)
        if sorted(qs) != list(range(n_queries)):
            raise ValueError("assignment does not cover queries exactly once")
        if ts != list(range(n_targets)):
            raise ValueError("assignment does not cover targets exactly once")


def uniform_span_rows(targets: Sequence[GroundTruthObject], n_cols: int) -> np.ndarray:
    """Per-target uniform distribution over its positive positions, as
    rows with n_cols columns (the last column is the no-object slot)."""
    out = np.zeros((len(targets), n_cols), dtype=np.float64)
    for j, t in enumerate(targets):
        if max(t.positive_positions) >= n_cols - 1:
            raise ValueError(
                f"token position {max(t.positive_positions)} outside 0..{n_cols - 2}"
            )
        out[j, list(t.positive_positions)] = 1.0 / len(t.positive_positions)
    return out


def build_cost_matrix(
    pred_boxes: np.ndarray,
    pred_token_dists: np.ndarray,
    targets: Sequence[GroundTruthObject],
    w: CostWeights,
) -> np.ndarray:
    """N x M matching cost: w_tok*(1 - span overlap) + w_l1*L1 + w_giou*(1 - giou)."""
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64)
    pred_token_dists = np.asarray(pred_token_dists, dtype=np.float64)
    n = pred_boxes.shape[0]
    m = len(targets)
    if m > n:
        raise ValueError("more targets than queries")
    if m == 0:
        return np.zeros((n, 0), dtype=np.float64)
    targ_rows = uniform_span_rows(targets, pred_token_dists.shape[1])
    tgt_boxes = np.stack([t.box.as_array() for t in targets])
    tok_cost = 1.0 - pred_token_dists @ targ_rows.T
    l1_cost = np.abs(pred_boxes[:, None, :] - tgt_boxes[None, :, :]).sum(axis=-1)
    giou_cost = 1.0 - giou_matrix(pred_boxes, tgt_boxes)
    return w.w_tok * tok_cost + w.w_l1 * l1_cost + w.w_giou * giou_cost


def _solve_rect(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Shortest-augmenting-path assignment on an m x n matrix, m <= n.

    Returns duals (u, v) satisfying cost[i, j] - u[i] - v[j] >= 0 with
    equality on matched edges; v <= 0 everywhere and v = 0 on columns
    the optimal matching leaves free (columns are only ever expanded
    while matched, so free ones keep their initial potential).
    """
    m, n = cost.shape
    u = np.zeros(m, dtype=np.float64)
    v = np.zeros(n + 1, dtype=np.float64)  # col n is the staging slot
    row_of_col = np.full(n + 1, -1, dtype=np.intp)
    way = np.zeros(n + 1, dtype=np.intp)
    for i in range(m):
        row_of_col[n] = i
        j0 = n
        minv = np.full(n, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of_col[j0]
            reduced = cost[i0] - u[i0] - v[:n]
            better = ~used[:n] & (reduced < minv)
            minv[better] = reduced[better]
            way[:n][better] = j0
            open_vals = np.where(used[:n], np.inf, minv)
            j1 = int(np.argmin(open_vals))
            delta = open_vals[j1]
            used_cols = np.flatnonzero(used)
            u[row_of_col[used_cols]] += delta
            v[used_cols] -= delta
            minv[~used[:n]] -= delta
            j0 = j1
            if row_of_col[j0] == -1:
                break
        while j0 != n:
            j1 = way[j0]
            row_of_col[j0] = row_of_col[j1]
            j0 = j1
    return u, v[:n]


def _rows_saturable(adj: np.ndarray) -> bool:
    """Kuhn's algorithm: can every row be matched to a distinct column?"""
    n_rows, n_cols = adj.shape
    match_row = np.full(n_cols, -1, dtype=np.intp)

    def try_row(row: int, seen: np.ndarray) -> bool:
        for col in np.flatnonzero(adj[row]):
            if seen[col]:
                continue
            seen[col] = True
            if match_row[col] == -1 or try_row(match_row[col], seen):
                match_row[col] = row
                return True
        return False

    for row in range(n_rows):
        if not try_row(row, np.zeros(n_cols, dtype=bool)):
            return False
    return True


def hungarian(cost: np.ndarray) -> Assignment:
    """Minimum-cost injective target -> query assignment.

    Ties are broken toward the lexicographically smallest pair list
    (pairs sorted by query index).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {cost.shape}")
    n, m = cost.shape
    if np.isnan(cost).any():
        raise ValueError("NaN in cost matrix")
    if m > n:
        raise ValueError("more targets than queries")
    if m == 0:
        return Assignment(pairs=(), unmatched_queries=tuple(range(n)))

    by_target = np.ascontiguousarray(cost.T)
    u, v = _solve_rect(by_target)
    tol = 1e-9 * max(1.0, float(np.abs(cost).max()))
    tight = (by_target - u[:, None] - v[None, :]) <= tol

    # A tight target-perfect matching is optimal iff it also covers every
    # query with a strictly negative potential; by Mendelsohn-Dulmage a
    # matching saturating both sides exists iff each side is saturable on
    # its own, so completability needs two independent row checks.
    negative = v < -tol

    def completable(targets: list[int], first_query: int) -> bool:
        cols = np.arange(first_query, n)
        sub = tight[np.ix_(targets, cols)]
        if not _rows_saturable(sub):
            return False
        neg_cols = cols[negative[first_query:]]
        return _rows_saturable(tight[np.ix_(targets, neg_cols)].T)

    target_of_query = np.full(n, -1, dtype=np.intp)
    remaining = list(range(m))
    for q in range(n):
        if not remaining:
            break
        for t in remaining:
            if not tight[t, q]:
                continue
            rest = [r for r in remaining if r != t]
            if not rest or completable(rest, q + 1):
                target_of_query[q] = t
                remaining.remove(t)
                break
        if target_of_query[q] == -1 and negative[q]:
            raise RuntimeError("negative-potential query left unmatched")
    if remaining:
        raise RuntimeError("tight subgraph lost its perfect matching")

    pairs = tuple(
        (int(q), int(target_of_query[q])) for q in range(n) if target_of_query[q] >= 0
    )
    unmatched = tuple(int(q) for q in range(n) if target_of_query[q] < 0)
    return Assignment(pairs=pairs, unmatched_queries=unmatched)
