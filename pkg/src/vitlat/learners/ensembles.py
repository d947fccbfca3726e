"""Random forest and gradient boosting on top of the CART kernel."""

from __future__ import annotations

import numpy as np

from .tree import PackedForest, Tree, TreeGrower


def weighted_median(values, weights) -> float:
    """Smallest value whose cumulative weight reaches half the total."""
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    order = np.argsort(values, kind="mergesort")
    cw = np.cumsum(weights[order])
    k = int(np.searchsorted(cw, 0.5 * cw[-1], side="left"))
    return float(values[order[min(k, len(order) - 1)]])


def fit_forest(X, y, n_trees, max_depth, min_leaf, feature_subsample, bootstrap, seed):
    """Bagged variance-reduction trees; prediction is the mean over trees."""
    grower = TreeGrower(X)
    n, p = grower.X.shape
    n_sub = max(1, int(round(feature_subsample * p)))
    rng = np.random.default_rng(seed)
    trees = []
    for t in range(n_trees):
        idx = rng.integers(0, n, size=n) if bootstrap else None
        tree_seed = int(rng.integers(0, 2**32))
        tree, _ = grower.grow(y, idx=idx, max_depth=max_depth, min_leaf=min_leaf, n_sub=n_sub, seed=tree_seed)
        trees.append(tree)
    return trees


def _relative_mape(y, pred) -> float:
    return float(np.mean(np.abs(y - pred) / y))


def fit_boosting(X, y, n_trees, learning_rate, max_depth, min_leaf, objective, seed):
    """Stagewise boosting of relative error.

    ``relative_l1`` minimises sum |y - F| / y: each stage grows a tree on the
    negative gradient sign(y - F)/y, then resets every leaf to the 1/y-weighted
    median of the residuals it holds. ``log_l2`` fits squared error on log y.

    Returns ``(base, trees, history)`` where ``history[m]`` is the training
    relative error after ``m`` stages.
    """
    grower = TreeGrower(X)
    y = np.asarray(y, dtype=float)
    if objective == "log_l2":
        target = np.log(y)
        base = float(target.mean())
    else:
        w = 1.0 / y
        target = y
        base = weighted_median(y, w)
    F = np.full(len(y), base)
    trees = []
    history = [_relative_mape(y, _output(F, objective))]
    rng = np.random.default_rng(seed)
    for m in range(n_trees):
        resid = target - F
        if objective == "log_l2":
            if not np.any(np.abs(resid) > 1e-12):
                break
            tree, leaves = grower.grow(resid, max_depth=max_depth, min_leaf=min_leaf,
                                       seed=int(rng.integers(0, 2**32)))
        else:
            if not np.any(resid != 0.0):
                break
            # unit pseudo-residuals weighted by 1/y: the weighted least-squares
            # projection of the gradient sign(y - F)/y
            tree, leaves = grower.grow(np.sign(resid), w=w, max_depth=max_depth, min_leaf=min_leaf,
                                       seed=int(rng.integers(0, 2**32)))
            # leaves are indexed by training row because no bootstrap is used
            value = tree.value.copy()
            for leaf in np.unique(leaves):
                rows = leaves == leaf
                value[leaf] = weighted_median(resid[rows], w[rows])
            tree = Tree(tree.feature, tree.threshold, tree.left, tree.right, value, tree.gain)
        F = F + learning_rate * tree.value[leaves]
        trees.append(tree)
        history.append(_relative_mape(y, _output(F, objective)))
    return base, trees, history


def _output(F, objective):
    return np.exp(F) if objective == "log_l2" else F


def boosting_predict(base, trees, learning_rate, objective, X, n_stages=None) -> np.ndarray:
    trees = trees if n_stages is None else trees[:n_stages]
    F = PackedForest(trees, [learning_rate] * len(trees), base).predict(X)
    return _output(F, objective)
