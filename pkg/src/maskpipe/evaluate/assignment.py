"""Optimal one-to-one matching of prediction clusters to ground-truth classes.

The profit matrix (typically pixel intersection counts) is padded to a
square with zero-profit dummies, solved as a linear sum assignment, and
then refined so that among equally optimal assignments the
lexicographically smallest one (row by row, real columns before
dummies) is returned. The refinement makes results reproducible even
for the heavily tied integer matrices overclustering produces.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment

from ..errors import ParameterError, ValidationError

_REL_TOL = 1e-9


def _max_profit(matrix: np.ndarray) -> float:
    if matrix.size == 0 or matrix.shape[0] == 0:
        return 0.0
    rows, cols = linear_sum_assignment(matrix, maximize=True)
    return float(sum(matrix[r, c] for r, c in zip(rows, cols)))


def hungarian_match(profit) -> np.ndarray:
    """Assignment vector over the real rows; -1 marks a dummy (unmatched) row.

    ``result[i] = j`` assigns prediction row ``i`` to ground-truth
    column ``j``. With more rows than columns some rows end at -1; with
    more columns than rows the surplus columns stay unassigned.
    """
    profit = np.asarray(profit, dtype=np.float64)
    if profit.ndim != 2 or profit.shape[0] == 0 or profit.shape[1] == 0:
        raise ParameterError("profit matrix must be non-empty and 2-D")
    if not np.all(np.isfinite(profit)):
        raise ValidationError("profit matrix contains non-finite values")
    n, m = profit.shape
    side = max(n, m)
    padded = np.zeros((side, side), dtype=np.float64)
    padded[:n, :m] = profit

    best_total = _max_profit(padded)
    tol = _REL_TOL * max(1.0, abs(best_total))

    free_cols = list(range(side))
    chosen: list[int] = []
    prefix = 0.0
    for row in range(side):
        remaining_rows = np.arange(row + 1, side)
        for col in free_cols:  # ascending: lexicographically smallest wins
            rest_cols = [c for c in free_cols if c != col]
            sub = padded[np.ix_(remaining_rows, rest_cols)] if remaining_rows.size else np.zeros((0, 0))
            total = prefix + padded[row, col] + _max_profit(sub)
            if total >= best_total - tol:
                chosen.append(col)
                prefix += padded[row, col]
                free_cols.remove(col)
                break
    assignment = np.full(n, -1, dtype=np.int64)
    for row in range(n):
        if chosen[row] < m:
            assignment[row] = chosen[row]
    return assignment


def assignment_profit(profit, assignment) -> float:
    """Total profit of an assignment, summed in row order."""
    profit = np.asarray(profit, dtype=np.float64)
    total = 0.0
    for row, col in enumerate(np.asarray(assignment)):
        if col >= 0:
            total += profit[row, col]
    return total
