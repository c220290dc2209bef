"""Bagged regression trees used as a stand-in for black-box prediction rules.

Depth-limited CART trees with variance-reduction splits, fit on full
bootstrap resamples drawn from a counter-split seed sequence so the
ensemble is reproducible independent of execution order. Trees are
stored as flat arrays and predictions traverse all rows level by level,
which keeps repeated scoring cheap inside the Monte Carlo harness.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class _Tree:
    feature: np.ndarray   # split feature per node, -1 for leaves
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray     # leaf prediction (node mean)

    def predict(self, x: np.ndarray) -> np.ndarray:
        idx = np.zeros(x.shape[0], dtype=np.int64)
        active = self.feature[idx] >= 0
        while np.any(active):
            rows = np.where(active)[0]
            nodes = idx[rows]
            go_left = x[rows, self.feature[nodes]] <= self.threshold[nodes]
            idx[rows] = np.where(go_left, self.left[nodes], self.right[nodes])
            active = self.feature[idx] >= 0
        return self.value[idx]


def _best_split(x: np.ndarray, y: np.ndarray):
    """Best (feature, threshold) by SSE reduction; None if no valid split."""
    n = y.shape[0]
    total_sum = y.sum()
    best = None
    best_cost = np.inf
    for j in range(x.shape[1]):
        order = np.argsort(x[:, j], kind="mergesort")
        xs = x[order, j]
        ys = y[order]
        csum = np.cumsum(ys)[:-1]
        k = np.arange(1, n)
        valid = xs[1:] != xs[:-1]
        if not valid.any():
            continue
        left_cost = -(csum**2) / k
        right_cost = -((total_sum - csum) ** 2) / (n - k)
        cost = left_cost + right_cost
        cost[~valid] = np.inf
        kk = int(np.argmin(cost))
        if cost[kk] < best_cost:
            best_cost = cost[kk]
            best = (j, 0.5 * (xs[kk] + xs[kk + 1]))
    return best


def _fit_tree(x: np.ndarray, y: np.ndarray, max_depth: int) -> _Tree:
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node() -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(0)
        right.append(0)
        value.append(0.0)
        return len(feature) - 1

    # iterative building; stack holds (node_id, row_index_array, depth)
    root = new_node()
    stack = [(root, np.arange(x.shape[0]), 0)]
    while stack:
        node, rows, depth = stack.pop()
        ysub = y[rows]
        value[node] = float(ysub.mean())
        if depth >= max_depth or rows.shape[0] < 2 or np.all(ysub == ysub[0]):
            continue
        split = _best_split(x[rows], ysub)
        if split is None:
            continue
        j, thr = split
        go_left = x[rows, j] <= thr
        feature[node] = j
        threshold[node] = thr
        lid, rid = new_node(), new_node()
        left[node] = lid
        right[node] = rid
        stack.append((lid, rows[go_left], depth + 1))
        stack.append((rid, rows[~go_left], depth + 1))

    return _Tree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=float),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        value=np.asarray(value, dtype=float),
    )


@dataclass(frozen=True)
class BaggedTrees:
    """Frozen ensemble; prediction is the plain average over trees."""

    trees: tuple
    n_features: int

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise ValidationError(f"expected {self.n_features} feature columns, got {x.shape}")
        out = np.zeros(x.shape[0])
        for tree in self.trees:
            out += tree.predict(x)
        return out / len(self.trees)


def fit_bagged_trees(x: np.ndarray, y: np.ndarray, n_trees: int = 100,
                     max_depth: int = 8, seed: int = 0) -> BaggedTrees:
    """Fit depth-limited trees on full bootstrap resamples.

    Tree t draws its bootstrap from SeedSequence(seed, spawn_key=(t,)),
    so the ensemble is identical however the fitting loop is scheduled.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValidationError("x must be (n, p) with matching y length")
    if x.shape[0] == 0:
        raise ValidationError("empty training set")
    if n_trees < 1 or max_depth < 1:
        raise ValidationError("n_trees and max_depth must be >= 1")
    n = x.shape[0]
    trees = []
    for t in range(n_trees):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(t,)))
        rows = rng.integers(0, n, size=n)
        trees.append(_fit_tree(x[rows], y[rows], max_depth))
    return BaggedTrees(trees=tuple(trees), n_features=x.shape[1])
