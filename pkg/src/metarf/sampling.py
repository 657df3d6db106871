"""Kennard-Stone max-min selection, optionally on a t-SNE projection."""

from __future__ import annotations

import numpy as np
from scipy.spatial.distance import cdist

from metarf.tsne import TsneConfig, tsne_embed


def kennard_stone(points, k: int) -> list[int]:
    """Greedy max-min selection of ``k`` row indices, in selection order.

    The first two picks are the farthest pair (lower index first); each next
    pick maximises its minimum Euclidean distance to the picks so far. Ties
    go to the lowest index (for the pair: lexicographically smallest). With
    ``k == 1`` the single pick is the point closest to the centroid.
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    if k == 1:
        d = np.sqrt(np.sum((X - X.mean(axis=0)) ** 2, axis=1))
        return [int(np.argmin(d))]
    D = cdist(X, X)
    # argmax over the flattened matrix returns the first (row-major) maximum,
    # and D is symmetric, so that entry already has i < j
    flat = int(np.argmax(np.triu(D, 1)))
    i, j = divmod(flat, n)
    if i == j:  # every point coincides
        i, j = 0, 1
    selected = [i, j]
    min_d = np.minimum(D[i], D[j])
    taken = np.zeros(n, dtype=bool)
    taken[selected] = True
    while len(selected) < k:
        cand = np.where(taken, -np.inf, min_d)
        nxt = int(np.argmax(cand))
        selected.append(nxt)
        taken[nxt] = True
        np.minimum(min_d, D[nxt], out=min_d)
    return selected


def standardize_columns(X) -> np.ndarray:
    """Column z-scores; constant columns become zero."""
    X = np.asarray(X, dtype=np.float64)
    sd = X.std(axis=0)
    return (X - X.mean(axis=0)) / np.where(sd > 0, sd, 1.0)


def select_representative(
    X, k: int, tsne: TsneConfig | None = None, *, embed: bool = True, standardize: bool = True
) -> list[int]:
    """Kennard-Stone on the t-SNE projection of ``X`` (columns z-scored first).

    ``embed=False`` runs Kennard-Stone in the raw (standardised) feature space.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    Xs = standardize_columns(X) if standardize else X
    if embed and n >= 3:
        Xs = tsne_embed(Xs, tsne).coords
    return kennard_stone(Xs, k)
