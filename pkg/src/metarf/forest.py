"""CART regression trees and a bagged random forest.

Split rule: weighted variance reduction over midpoints between consecutive
distinct feature values; a row goes left when ``x[feature] <= threshold``.
Equal-gain candidates (within a relative tolerance of ``GAIN_RTOL`` times
the node's sum of squares) resolve to the lowest feature index, then the
smallest threshold.

Node feature subsets: at each node the features are visited in a random order
drawn for that node, and the best split is taken over the first ``mtry``
features that are not constant inside the node. With ``mtry == p`` every
feature is searched.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from metarf.seeding import make_rng

GAIN_RTOL = 1e-10
FORMAT = "metarf-forest"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: int | None = None
    min_samples_leaf: int = 1
    mtry: int | None = None  # None -> ceil(p / 3)
    seed: int = 0
    bootstrap: bool = True

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0 or None")
        if self.mtry is not None and self.mtry < 1:
            raise ValueError("mtry must be >= 1")

    def resolve_mtry(self, p: int) -> int:
        m = math.ceil(p / 3) if self.mtry is None else self.mtry
        if not 1 <= m <= p:
            raise ValueError(f"mtry={m} outside [1, {p}]")
        return m


@dataclass(frozen=True, eq=False)
class DecisionTree:
    """Array-encoded binary tree; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray
    n_features: int

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf node index reached by each row of ``X``."""
        X = _check_matrix(X, self.n_features)
        return _apply(self.feature, self.threshold, self.left, self.right, X)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "n_samples": self.n_samples.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict, n_features: int) -> DecisionTree:
        return cls(
            np.array(d["feature"], dtype=np.int64),
            np.array(d["threshold"], dtype=np.float64),
            np.array(d["left"], dtype=np.int64),
            np.array(d["right"], dtype=np.int64),
            np.array(d["value"], dtype=np.float64),
            np.array(d["n_samples"], dtype=np.int64),
            n_features,
        )


@dataclass(frozen=True, eq=False)
class Forest:
    trees: tuple[DecisionTree, ...]
    params: ForestParams
    n_features: int
    tree_seeds: tuple[tuple[int, int], ...] = field(default=())

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def tree_outputs(self, X: np.ndarray) -> np.ndarray:
        """N x M matrix of per-tree predictions."""
        X = _check_matrix(X, self.n_features)
        out = np.empty((X.shape[0], len(self.trees)))
        for m, t in enumerate(self.trees):
            out[:, m] = t.value[_apply(t.feature, t.threshold, t.left, t.right, X)]
        return out

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.tree_outputs(X).mean(axis=1)

    def used_features(self) -> set[int]:
        return {int(f) for t in self.trees for f in t.feature if f >= 0}

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "version": FORMAT_VERSION,
            "n_features": self.n_features,
            "params": asdict(self.params),
            "tree_seeds": [list(s) for s in self.tree_seeds],
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> Forest:
        if d.get("format") != FORMAT:
            raise ValueError(f"not a forest file (format={d.get('format')!r})")
        if d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported forest file version {d.get('version')!r}")
        p = int(d["n_features"])
        return cls(
            tuple(DecisionTree.from_dict(t, p) for t in d["trees"]),
            ForestParams(**d["params"]),
            p,
            tuple(tuple(s) for s in d.get("tree_seeds", [])),
        )

    def save(self, path: str | Path) -> None:
        # json writes floats with repr, which round-trips doubles exactly
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Forest:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _check_matrix(X, p: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != p:
        raise ValueError(f"expected rows of length {p}, got shape {X.shape}")
    return np.ascontiguousarray(X)


@njit(cache=True)
def _apply(feature, threshold, left, right, X):
    n = X.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out


@njit(cache=True)
def _midpoint(a, b):
    t = 0.5 * (a + b)
    if t >= b:
        t = a
    return t


@njit(cache=True)
def _build(X, y, idx, keys, mtry, max_depth, min_leaf, gain_rtol):
    n = idx.shape[0]
    p = X.shape[1]
    cap = 2 * n - 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    start_of = np.zeros(cap, dtype=np.int64)
    end_of = np.zeros(cap, dtype=np.int64)
    stack_node = np.empty(cap, dtype=np.int64)
    stack_depth = np.empty(cap, dtype=np.int64)
    stack_node[0] = 0
    stack_depth[0] = 0
    start_of[0] = 0
    end_of[0] = n
    top = 1
    n_nodes = 1
    vals = np.empty(n)
    yc = np.empty(n)
    gains = np.empty((p, n))
    thresholds = np.empty((p, n))
    cand_f = np.empty(p, dtype=np.int64)
    while top > 0:
        top -= 1
        node = stack_node[top]
        depth = stack_depth[top]
        s = start_of[node]
        e = end_of[node]
        m = e - s
        if m < 2 * min_leaf or (max_depth >= 0 and depth >= max_depth):
            continue
        mean = 0.0
        for i in range(s, e):
            mean += y[idx[i]]
        mean /= m
        sst = 0.0
        for i in range(s, e):
            d = y[idx[i]] - mean
            sst += d * d
        if sst <= 0.0:
            continue
        tol = gain_rtol * sst
        order = np.argsort(keys[node])
        seen = 0
        best_gain = tol
        for oi in range(p):
            if seen >= mtry:
                break
            f = order[oi]
            for i in range(m):
                vals[i] = X[idx[s + i], f]
            srt = np.argsort(vals[:m], kind="mergesort")
            if vals[srt[0]] == vals[srt[m - 1]]:
                continue
            cand_f[seen] = f
            for i in range(m):
                yc[i] = y[idx[s + srt[i]]] - mean
            sl = 0.0
            for i in range(1, m):
                sl += yc[i - 1]
                gains[seen, i] = -1.0
                if i < min_leaf or m - i < min_leaf:
                    continue
                a = vals[srt[i - 1]]
                b = vals[srt[i]]
                if not a < b:
                    continue
                # node-centred targets sum to zero, so the right sum is -sl
                g = sl * sl / i + sl * sl / (m - i)
                gains[seen, i] = g
                thresholds[seen, i] = _midpoint(a, b)
                if g > best_gain:
                    best_gain = g
            seen += 1
        best_f = -1
        best_t = 0.0
        if best_gain > tol:
            # lowest feature index, then smallest threshold, among near-ties
            for c in range(seen):
                f = cand_f[c]
                if best_f >= 0 and f > best_f:
                    continue
                for i in range(1, m):
                    if gains[c, i] >= best_gain - tol:
                        if best_f < 0 or f < best_f or thresholds[c, i] < best_t:
                            best_f = f
                            best_t = thresholds[c, i]
                        break
        if best_f < 0:
            continue
        # stable partition of idx[s:e] on the chosen split
        nl = 0
        for i in range(s, e):
            if X[idx[i], best_f] <= best_t:
                nl += 1
        tmp = idx[s:e].copy()
        li = s
        ri = s + nl
        for i in range(m):
            r = tmp[i]
            if X[r, best_f] <= best_t:
                idx[li] = r
                li += 1
            else:
                idx[ri] = r
                ri += 1
        feature[node] = best_f
        threshold[node] = best_t
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc
        start_of[lc] = s
        end_of[lc] = s + nl
        start_of[rc] = s + nl
        end_of[rc] = e
        # right first so the left subtree is expanded first
        stack_node[top] = rc
        stack_depth[top] = depth + 1
        top += 1
        stack_node[top] = lc
        stack_depth[top] = depth + 1
        top += 1
    return n_nodes, feature, threshold, left, right, start_of, end_of


def _grow(X: np.ndarray, y: np.ndarray, rows: np.ndarray, params: ForestParams, rng: np.random.Generator) -> DecisionTree:
    n, p = X.shape
    mtry = params.resolve_mtry(p)
    keys = rng.random((max(2 * rows.size - 1, 1), p))
    idx = rows.astype(np.int64).copy()
    max_depth = -1 if params.max_depth is None else params.max_depth
    k, feat, thr, lft, rgt, s, e = _build(X, y, idx, keys, mtry, max_depth, params.min_samples_leaf, GAIN_RTOL)
    value = np.zeros(k)
    n_samples = (e[:k] - s[:k]).astype(np.int64)
    for node in range(k):
        if feat[node] < 0:
            value[node] = math.fsum(y[idx[s[node] : e[node]]]) / n_samples[node]
            thr[node] = 0.0
    return DecisionTree(
        feat[:k].copy(), thr[:k].copy(), lft[:k].copy(), rgt[:k].copy(), value, n_samples, p
    )


def _validate_xy(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = np.ascontiguousarray(np.asarray(X, dtype=np.float64))
    y = np.ascontiguousarray(np.asarray(y, dtype=np.float64))
    if X.ndim != 2:
        raise ValueError(f"X must be 2-D, got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("cannot fit a tree on zero rows")
    if y.shape != (X.shape[0],):
        raise ValueError(f"X has {X.shape[0]} rows but y has shape {y.shape}")
    if not np.all(np.isfinite(y)) or not np.all(np.isfinite(X)):
        raise ValueError("X and y must be finite")
    return X, y


def fit_tree(X, y, params: ForestParams, rng: np.random.Generator) -> DecisionTree:
    """Fit one CART regression tree on all rows of ``X`` (no resampling)."""
    X, y = _validate_xy(X, y)
    return _grow(X, y, np.arange(X.shape[0]), params, rng)


def fit_forest(X, y, params: ForestParams) -> Forest:
    """Bagged forest: tree ``m`` uses a PCG64 stream seeded by ``(params.seed, m)``.

    The stream draws the N-row bootstrap first (skipped when
    ``params.bootstrap`` is false) and then the per-node feature orders.
    """
    X, y = _validate_xy(X, y)
    n = X.shape[0]
    trees = []
    seeds = []
    for m in range(params.n_trees):
        rng = make_rng(params.seed, m)
        rows = rng.integers(0, n, size=n) if params.bootstrap else np.arange(n)
        trees.append(_grow(X, y, rows, params, rng))
        seeds.append((params.seed, m))
    return Forest(tuple(trees), params, X.shape[1], tuple(seeds))


def predict_tree(tree: DecisionTree, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (tree.n_features,):
        raise ValueError(f"expected a vector of length {tree.n_features}, got shape {x.shape}")
    return float(tree.predict(x[None, :])[0])


def tree_output_vector(forest: Forest, x) -> np.ndarray:
    """Per-tree predictions for one feature vector (length M)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (forest.n_features,):
        raise ValueError(f"expected a vector of length {forest.n_features}, got shape {x.shape}")
    return forest.tree_outputs(x[None, :])[0]


def predict_forest_mean(forest: Forest, x) -> float:
    return float(np.mean(tree_output_vector(forest, x)))
