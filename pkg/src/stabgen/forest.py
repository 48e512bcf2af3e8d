"""Random-forest sensitivity analysis on accumulated stability labels.

Bagged CART trees with Gini-impurity splits and sqrt(d) feature
subsampling per node.  Feature importances (mean decrease in impurity)
rank the operating-space dimensions for split selection; stratified k-fold
accuracy quantifies dataset quality.  Fully deterministic for a fixed
(data, hyperparameters, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class SensitivityUnavailableError(ValueError):
    """Training data carries a single class; importances are undefined."""


@dataclass
class LabeledDataset:
    features: np.ndarray       # (n, d) dimension values of feasible samples
    labels: np.ndarray         # (n,) binary stable/unstable
    feature_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.features.ndim != 2 or len(self.labels) != len(self.features):
            raise ValueError("features must be (n, d) with one label per row")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")


@dataclass
class _Node:
    feature: int = -1
    threshold: float = 0.0
    left: "_Node | None" = None
    right: "_Node | None" = None
    prediction: int = 0

    @property
    def is_leaf(self) -> bool:
        return self.left is None


def _gini(counts: np.ndarray) -> float:
    n = counts.sum()
    if n == 0:
        return 0.0
    p = counts / n
    return float(1.0 - (p * p).sum())


def _best_split(x: np.ndarray, y: np.ndarray, features: np.ndarray
                ) -> tuple[int, float, float] | None:
    """Best (feature, threshold, impurity decrease) over candidate features."""
    n = len(y)
    parent = _gini(np.bincount(y, minlength=2))
    best = None
    best_gain = 1e-12
    for f in features:
        order = np.argsort(x[:, f], kind="stable")
        xs = x[order, f]
        ys = y[order]
        ones_left = np.cumsum(ys)[:-1]
        n_left = np.arange(1, n)
        n_right = n - n_left
        ones_right = ones_left[-1] + ys[-1] - ones_left
        valid = xs[1:] > xs[:-1]
        if not valid.any():
            continue
        p1l = ones_left / n_left
        p1r = ones_right / n_right
        gini_l = 1.0 - p1l ** 2 - (1.0 - p1l) ** 2
        gini_r = 1.0 - p1r ** 2 - (1.0 - p1r) ** 2
        gain = parent - (n_left * gini_l + n_right * gini_r) / n
        gain[~valid] = -1.0
        k = int(np.argmax(gain))
        if gain[k] > best_gain:
            best_gain = float(gain[k])
            best = (int(f), float(0.5 * (xs[k] + xs[k + 1])), best_gain)
    return best


def _grow(x: np.ndarray, y: np.ndarray, idx: np.ndarray, depth: int,
          max_depth: int, n_sub: int, n_total: int,
          importances: np.ndarray, rng: np.random.Generator) -> _Node:
    counts = np.bincount(y[idx], minlength=2)
    node = _Node(prediction=int(np.argmax(counts)))
    if depth >= max_depth or counts.min() == 0 or len(idx) < 2:
        return node
    features = np.sort(rng.choice(x.shape[1], size=n_sub, replace=False))
    best = _best_split(x[idx], y[idx], features)
    if best is None:
        return node
    f, thr, gain = best
    importances[f] += gain * len(idx) / n_total
    mask = x[idx, f] <= thr
    node.feature = f
    node.threshold = thr
    node.left = _grow(x, y, idx[mask], depth + 1, max_depth, n_sub, n_total,
                      importances, rng)
    node.right = _grow(x, y, idx[~mask], depth + 1, max_depth, n_sub, n_total,
                       importances, rng)
    return node


def _predict_tree(node: _Node, x: np.ndarray) -> np.ndarray:
    out = np.empty(len(x), dtype=int)
    stack = [(node, np.arange(len(x)))]
    while stack:
        nd, idx = stack.pop()
        if nd.is_leaf:
            out[idx] = nd.prediction
            continue
        mask = x[idx, nd.feature] <= nd.threshold
        stack.append((nd.left, idx[mask]))
        stack.append((nd.right, idx[~mask]))
    return out


@dataclass
class ForestModel:
    trees: list[_Node]
    importances: np.ndarray    # normalized, sums to 1
    feature_names: list[str]
    seed: int

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        votes = np.zeros(len(x))
        for t in self.trees:
            votes += _predict_tree(t, x)
        return (votes * 2 > len(self.trees)).astype(int)


def train_forest(data: LabeledDataset, n_trees: int = 100, max_depth: int = 8,
                 seed: int = 0) -> ForestModel:
    """Bagged CART forest with Gini splits and sqrt(d) feature subsampling."""
    x, y = data.features, data.labels
    if len(np.unique(y)) < 2:
        raise SensitivityUnavailableError("sensitivity unavailable: single-class data")
    if n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    n, d = x.shape
    n_sub = max(1, int(round(np.sqrt(d))))
    rng = np.random.default_rng(seed)
    trees: list[_Node] = []
    raw = np.zeros(d)
    for _ in range(n_trees):
        boot = rng.integers(0, n, n)
        imp = np.zeros(d)
        trees.append(_grow(x[boot], y[boot], np.arange(n), 0, max_depth, n_sub,
                           n, imp, rng))
        tot = imp.sum()
        raw += imp / tot if tot > 0 else imp
    total = raw.sum()
    importances = raw / total if total > 0 else np.full(d, 1.0 / d)
    return ForestModel(trees, importances, list(data.feature_names), seed)


def feature_importance(forest: ForestModel) -> np.ndarray:
    """Mean decrease in Gini impurity per feature, normalized to sum 1."""
    return forest.importances.copy()


def kfold_accuracy(data: LabeledDataset, k: int = 5, n_trees: int = 100,
                   max_depth: int = 8, seed: int = 0) -> tuple[float, float]:
    """Stratified k-fold cross-validated accuracy (mean, std)."""
    if k < 2:
        raise ValueError("k must be >= 2")
    y = data.labels
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2:
        raise SensitivityUnavailableError("sensitivity unavailable: single-class data")
    if counts.min() < k:
        raise ValueError(f"smallest class has {counts.min()} samples, cannot stratify into {k} folds")
    rng = np.random.default_rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    for c in classes:
        idx = np.flatnonzero(y == c)
        rng.shuffle(idx)
        for i, j in enumerate(idx):
            folds[i % k].append(int(j))
    accs = []
    for i in range(k):
        test = np.array(sorted(folds[i]))
        train = np.array(sorted(j for f in folds for j in f if f is not folds[i]))
        sub = LabeledDataset(data.features[train], y[train], data.feature_names)
        model = train_forest(sub, n_trees, max_depth, seed + 1 + i)
        accs.append(float(np.mean(model.predict(data.features[test]) == y[test])))
    return float(np.mean(accs)), float(np.std(accs))
