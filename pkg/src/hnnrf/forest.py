"""
Bagged Gini decision trees for binary superpixel classification.

Trees are stored as flat node tables so prediction is vectorised over samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .container import read_container, write_container

FOREST_KIND = b"RFS1"
FOREST_VERSION = 1


@dataclass
class Tree:
    feature: np.ndarray  # int, -1 at leaves
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # positive-class fraction at each node

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = np.nonzero(self.feature[node] >= 0)[0]
        while active.size:
            nd = node[active]
            go_left = X[active, self.feature[nd]] <= self.threshold[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
            active = active[self.feature[node[active]] >= 0]
        return self.value[node]


@dataclass
class ForestModel:
    trees: list[Tree]
    inbag: list[np.ndarray]  # bootstrap indices per tree
    n_features: int
    mtry: int
    seed: int
    n_train: int
    meta: dict | None = None


def _best_split(Xn: np.ndarray, yn: np.ndarray, feats: np.ndarray):
    """Lowest weighted Gini split over ``feats``; returns (feature, threshold) or None."""
    n = yn.size
    sub = Xn[:, feats]
    order = np.argsort(sub, axis=0, kind="stable")
    xs = np.take_along_axis(sub, order, axis=0)
    ys = yn[order]
    pos_left = np.cumsum(ys, axis=0)[:-1]
    n_left = np.arange(1, n)[:, None]
    n_right = n - n_left
    pos_total = ys.sum(axis=0)
    pl = pos_left / n_left
    pr = (pos_total - pos_left) / n_right
    gini = (n_left * 2 * pl * (1 - pl) + n_right * 2 * pr * (1 - pr)) / n
    valid = xs[:-1] < xs[1:]
    if not valid.any():
        return None
    gini = np.where(valid, gini, np.inf)
    # column-major argmin: first sampled feature wins ties, then first position
    flat = int(np.argmin(gini.T))
    f, i = divmod(flat, n - 1)
    lo, hi = xs[i, f], xs[i + 1, f]
    thr = 0.5 * (lo + hi)
    if not lo <= thr < hi:
        thr = lo
    return int(feats[f]), float(thr)


def build_tree(X: np.ndarray, y: np.ndarray, mtry: int, rng, min_samples_split: int = 2) -> Tree:
    """Grow until nodes are pure or smaller than ``min_samples_split``."""
    n_feat = X.shape[1]
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(y[idx].mean()))
        return len(feature) - 1

    stack = [(new_node(np.arange(y.size)), np.arange(y.size))]
    while stack:
        node, idx = stack.pop()
        yn = y[idx]
        npos = int(yn.sum())
        if idx.size < min_samples_split or npos in (0, idx.size):
            continue
        perm = rng.permutation(n_feat)
        split = _best_split(X[idx], yn, perm[:mtry])
        if split is None and mtry < n_feat:
            split = _best_split(X[idx], yn, perm[mtry:])
        if split is None:
            continue
        f, thr = split
        go_left = X[idx, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        feature[node], threshold[node] = f, thr
        left[node] = new_node(li)
        right[node] = new_node(ri)
        stack.append((right[node], ri))
        stack.append((left[node], li))
    return Tree(
        np.array(feature, dtype=np.int64),
        np.array(threshold, dtype=np.float64),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(value, dtype=np.float64),
    )


def rf_train(
    features, labels, n_trees: int = 50, mtry: int = 6, seed: int = 0, bootstrap: bool = True, bootstrap_indices=None
) -> ForestModel:
    """
    Bootstrap-aggregated trees, each seeded from ``(seed, tree index)``.

    ``bootstrap=False`` grows every tree on the full training set in order;
    ``bootstrap_indices`` (one index array per tree) overrides the sampling.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if X.ndim != 2 or X.shape[0] != y.size:
        raise ValueError(f"features {X.shape} and labels {y.shape} disagree")
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    classes = set(np.unique(y).tolist())
    if not classes <= {0, 1}:
        raise ValueError(f"labels must be binary, got {sorted(classes)}")
    if len(classes) < 2:
        raise ValueError(
            f"random forest needs both classes; training set of {y.size} samples is all {y[0] if y.size else '-'}"
        )
    if n_trees < 1 or not 1 <= mtry <= X.shape[1]:
        raise ValueError(f"need n_trees >= 1 and 1 <= mtry <= {X.shape[1]}")
    n = y.size
    if bootstrap_indices is not None and len(bootstrap_indices) != n_trees:
        raise ValueError(f"need {n_trees} bootstrap index arrays, got {len(bootstrap_indices)}")
    trees, inbag = [], []
    for t in range(n_trees):
        sample_rng = np.random.default_rng([seed, t, 0])
        split_rng = np.random.default_rng([seed, t, 1])
        if bootstrap_indices is not None:
            boot = np.asarray(bootstrap_indices[t], dtype=np.int64)
            if boot.size == 0 or boot.min() < 0 or boot.max() >= n:
                raise ValueError(f"bootstrap indices for tree {t} out of range")
        elif bootstrap:
            boot = sample_rng.integers(0, n, size=n)
        else:
            boot = np.arange(n)
        trees.append(build_tree(X[boot], y[boot], mtry, split_rng))
        inbag.append(boot)
    return ForestModel(trees, inbag, X.shape[1], mtry, seed, n)


def rf_predict(model: ForestModel, features) -> np.ndarray | float:
    """Mean positive-class leaf fraction over trees; scalar in, scalar out."""
    X = np.asarray(features, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != model.n_features:
        raise ValueError(f"expected {model.n_features} features, got {X.shape[1]}")
    p = np.mean([t.predict(X) for t in model.trees], axis=0)
    return float(p[0]) if single else p


def rf_predict_oob(model: ForestModel, features) -> np.ndarray:
    """
    Out-of-bag probabilities for the training samples: each sample is scored
    only by trees whose bootstrap missed it (all trees if none did).
    """
    X = np.asarray(features, dtype=np.float64)
    if X.shape[0] != model.n_train:
        raise ValueError("out-of-bag prediction needs the original training matrix")
    total = np.zeros(model.n_train)
    count = np.zeros(model.n_train)
    for tree, boot in zip(model.trees, model.inbag):
        oob = np.ones(model.n_train, dtype=bool)
        oob[boot] = False
        idx = np.nonzero(oob)[0]
        if idx.size:
            total[idx] += tree.predict(X[idx])
            count[idx] += 1
    out = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    missing = count == 0
    if missing.any():
        out[missing] = rf_predict(model, X[missing])
    return out


def save_forest(path, model: ForestModel) -> None:
    cfg = {
        "n_trees": len(model.trees),
        "n_features": model.n_features,
        "mtry": model.mtry,
        "seed": model.seed,
        "n_train": model.n_train,
        "meta": model.meta or {},
    }
    blocks = []
    for tree, boot in zip(model.trees, model.inbag):
        table = np.stack([tree.feature, tree.threshold, tree.left, tree.right, tree.value], axis=1)
        blocks += [table, boot.astype(np.float64)]
    write_container(path, FOREST_KIND, FOREST_VERSION, cfg, blocks)


def load_forest(path) -> ForestModel:
    cfg, blocks = read_container(path, FOREST_KIND, FOREST_VERSION)
    trees, inbag = [], []
    for table, boot in zip(blocks[0::2], blocks[1::2]):
        trees.append(
            Tree(
                table[:, 0].astype(np.int64),
                table[:, 1].copy(),
                table[:, 2].astype(np.int64),
                table[:, 3].astype(np.int64),
                table[:, 4].copy(),
            )
        )
        inbag.append(boot.astype(np.int64))
    return ForestModel(trees, inbag, cfg["n_features"], cfg["mtry"], cfg["seed"], cfg["n_train"], cfg["meta"])
