"""Deterministic first-occurrence grouping shared by both encoders."""

from __future__ import annotations

import numpy as np


def first_seen_groups(cell_ids: np.ndarray):
    """Group points by cell id, groups ordered by first point encountered.

    Returns ``(rank, within, ordered_cells)`` where ``rank[i]`` is the
    group index of point i (0 = first-seen cell), ``within[i]`` its
    position inside that group in input order, and ``ordered_cells`` the
    unique cell ids in rank order.
    """
    n = cell_ids.shape[0]
    if n == 0:
        z = np.zeros(0, dtype=np.int64)
        return z, z.copy(), z.copy()
    uniq, first_idx, inverse = np.unique(
        cell_ids, return_index=True, return_inverse=True
    )
    order = np.argsort(first_idx, kind="stable")
    rank_of = np.empty(len(uniq), dtype=np.int64)
    rank_of[order] = np.arange(len(uniq), dtype=np.int64)
    rank = rank_of[inverse]

    perm = np.argsort(rank, kind="stable")
    sorted_rank = rank[perm]
    starts = np.searchsorted(sorted_rank, np.arange(len(uniq), dtype=np.int64))
    within = np.empty(n, dtype=np.int64)
    within[perm] = np.arange(n, dtype=np.int64) - starts[sorted_rank]
    return rank, within, uniq[order]


def integral_cells(span: float, size: float) -> int:
    """Number of cells covering ``span`` at ``size``; -1 if not integral."""
    if size <= 0.0 or span <= 0.0:
        return -1
    q = span / size
    n = int(round(q))
    if n < 1 or abs(q - n) > 1e-6:
        return -1
    return n
