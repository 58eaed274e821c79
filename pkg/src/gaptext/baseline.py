"""Numeric featurization and a from-scratch random-forest regressor with
k-fold cross-validated grid search."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .records import MaterialRecord
from .tables import (
    CRYSTAL_CLASSES,
    CRYSTAL_FAMILIES,
    CRYSTAL_SYSTEMS,
    POINT_GROUP_STRUCTURES,
    POINT_GROUP_TYPES,
)

FEATURIZER_VERSION = 1

_CATEGORICAL = [
    ("crystal_system", CRYSTAL_SYSTEMS),
    ("crystal_family", CRYSTAL_FAMILIES),
    ("crystal_class", CRYSTAL_CLASSES),
    ("point_group_type", POINT_GROUP_TYPES),
    ("point_group_structure", POINT_GROUP_STRUCTURES),
]

_SCALARS = ["density", "valence_cell_iupac", "spin_atom", "spin_cell", "spacegroup_relax", "point_group_order"]
_GEOMETRY = ["a", "b", "c", "alpha", "beta", "gamma"]


def feature_names() -> list[str]:
    names = list(_SCALARS)
    names += [f"geometry_{g}" for g in _GEOMETRY]
    names += ["n_species", "composition_mean", "composition_max", "n_atoms"]
    names += ["spinD_mean", "spinD_max", "positions_mean"]
    for field_name, cats in _CATEGORICAL:
        names += [f"{field_name}={c}" for c in cats] + [f"{field_name}=OTHER"]
    return names


def _stats(values):
    return (float(np.mean(values)), float(np.max(values))) if len(values) else (0.0, 0.0)


def featurize(r: MaterialRecord) -> np.ndarray:
    """Fixed-order numeric vector: scalar fields, the six lattice parameters,
    list summaries (length, mean, max) and one-hot categoricals with an
    OTHER slot for unseen values."""
    v = [float(getattr(r, s)) for s in _SCALARS]
    v += [float(x) for x in r.geometry]
    comp_mean, comp_max = _stats(r.composition)
    v += [float(len(r.species)), comp_mean, comp_max, float(sum(r.composition))]
    v += list(_stats(r.spinD))
    v.append(float(np.mean(r.positions_fractional)) if r.positions_fractional else 0.0)
    for field_name, cats in _CATEGORICAL:
        hot = [0.0] * (len(cats) + 1)
        value = getattr(r, field_name)
        hot[cats.index(value) if value in cats else len(cats)] = 1.0
        v += hot
    return np.asarray(v, dtype=float)


def featurize_all(records) -> np.ndarray:
    return np.stack([featurize(r) for r in records]) if len(records) else np.zeros((0, len(feature_names())))


@dataclass
class RFConfig:
    n_trees: int = 100
    max_depth: int | None = 50
    min_samples_split: int = 2
    min_samples_leaf: int = 2
    features_per_split: float = 1 / 3  # fraction of features tried per split, rounded up
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be >= 2")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")
        if not 0 < self.features_per_split <= 1:
            raise ValueError("features_per_split must be in (0, 1]")


@dataclass
class Tree:
    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    value: list[float] = field(default_factory=list)

    def _add(self, value):
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(float(value))
        return len(self.value) - 1

    def predict(self, X) -> np.ndarray:
        feat = np.asarray(self.feature)
        thr = np.asarray(self.threshold)
        left = np.asarray(self.left)
        right = np.asarray(self.right)
        node = np.zeros(len(X), dtype=int)
        rows = np.arange(len(X))
        active = feat[node] >= 0
        while active.any():
            r = rows[active]
            nd = node[r]
            go_left = X[r, feat[nd]] <= thr[nd]
            node[r] = np.where(go_left, left[nd], right[nd])
            active = feat[node] >= 0
        return np.asarray(self.value)[node]


def best_split(x: np.ndarray, y: np.ndarray, min_leaf: int):
    """Exact variance-reduction split of one feature.

    Returns (children SSE, threshold) for the best midpoint between sorted
    distinct values, or None when no split leaves min_leaf on both sides.
    """
    res = best_splits(np.asarray(x, dtype=float)[:, None], y, min_leaf)
    return None if res is None else res[:2]


def best_splits(Xn: np.ndarray, y: np.ndarray, min_leaf: int):
    """Best split over all columns of `Xn` at once: (sse, threshold, column)
    with ties resolved towards the lower column, or None."""
    n = len(y)
    if n < 2:
        return None
    order = np.argsort(Xn, axis=0, kind="stable")
    xs = np.take_along_axis(Xn, order, axis=0)
    ys = y[order]
    csum = np.cumsum(ys, axis=0)
    csq = np.cumsum(ys * ys, axis=0)
    nl = np.arange(1, n)[:, None]
    sl, ql = csum[:-1], csq[:-1]
    sr, qr = csum[-1] - sl, csq[-1] - ql
    sse = (ql - sl * sl / nl) + (qr - sr * sr / (n - nl))
    ok = (xs[1:] > xs[:-1]) & (nl >= min_leaf) & (n - nl >= min_leaf)
    if not ok.any():
        return None
    sse = np.where(ok, sse, np.inf)
    k = int(np.argmin(sse.T))  # column-major: earliest column wins ties
    col, row = divmod(k, n - 1)
    lo, hi = xs[row, col], xs[row + 1, col]
    thr = (lo + hi) / 2.0
    if not lo <= thr < hi:  # adjacent floats: the midpoint can round up to hi
        thr = lo
    return float(sse[row, col]), float(thr), col


def fit_tree(X, y, cfg: RFConfig, rng: np.random.Generator) -> Tree:
    n_feat = X.shape[1]
    m_try = max(1, math.ceil(cfg.features_per_split * n_feat))
    tree = Tree()
    stack = [(np.arange(len(y)), 0, None, None)]
    while stack:
        idx, depth, parent, is_left = stack.pop()
        yi = y[idx]
        pure = yi.min() == yi.max()
        node = tree._add(yi[0] if pure else yi.mean())  # exact value for pure leaves
        if parent is not None:
            (tree.left if is_left else tree.right)[parent] = node
        node_sse = float(np.sum((yi - yi.mean()) ** 2))
        if (pure or len(idx) < cfg.min_samples_split or node_sse <= 1e-12 * max(1.0, len(idx))
                or (cfg.max_depth is not None and depth >= cfg.max_depth)):
            continue
        feats = rng.choice(n_feat, size=m_try, replace=False)
        best = best_splits(X[np.ix_(idx, feats)], yi, cfg.min_samples_leaf)
        if best is None or best[0] >= node_sse:
            continue
        _, thr, col = best
        f = int(feats[col])
        tree.feature[node] = f
        tree.threshold[node] = thr
        mask = X[idx, f] <= thr
        stack.append((idx[~mask], depth + 1, node, False))
        stack.append((idx[mask], depth + 1, node, True))
    return tree


@dataclass
class RFModel:
    trees: list[Tree]
    n_features: int
    config: RFConfig
    in_bag: list[np.ndarray] = field(default_factory=list)


def fit_random_forest(X, y, cfg: RFConfig = RFConfig()) -> RFModel:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or len(X) != len(y) or len(y) < 2:
        raise ValueError("need |X| == |y| >= 2")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite features")
    n = len(y)
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_trees)
    trees, bags = [], []
    for ss in seeds:
        rng = np.random.default_rng(ss)
        idx = rng.integers(0, n, n) if cfg.bootstrap else np.arange(n)
        trees.append(fit_tree(X[idx], y[idx], cfg, rng))
        bags.append(np.bincount(idx, minlength=n))
    return RFModel(trees, X.shape[1], cfg, bags)


def rf_predict(model: RFModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.size == 0:
        return np.zeros(0)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ValueError(f"expected {model.n_features} features, got shape {X.shape}")
    return np.mean([t.predict(X) for t in model.trees], axis=0)


def kfold_indices(n: int, k: int = 5, seed: int = 0) -> list[np.ndarray]:
    if k < 2:
        raise ValueError("k must be >= 2")
    if n < k:
        raise ValueError(f"n={n} < k={k}")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


@dataclass
class GridResult:
    best: RFConfig
    best_index: int
    rows: list[tuple[int, dict, int, float]]  # (grid index, config, fold, mae)
    mean_mae: list[float]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["config", "params", "fold", "mae"])
        for gi, params, fold, mae in self.rows:
            w.writerow([gi, _params_str(params), fold, f"{mae:.6f}"])
        return buf.getvalue()


def _params_str(params: dict) -> str:
    return ";".join(f"{k}={v}" for k, v in sorted(params.items()))


def kfold_grid_search(X, y, grid, k: int = 5, seed: int = 0) -> GridResult:
    """Mean validation MAE per grid point over k folds; lowest wins, ties to
    the earliest grid entry. `grid` holds RFConfigs or dicts of overrides."""
    grid = list(grid)
    if not grid:
        raise ValueError("empty grid")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    folds = kfold_indices(len(y), k, seed)
    configs = [g if isinstance(g, RFConfig) else replace(RFConfig(seed=seed), **g) for g in grid]
    rows, means = [], []
    for gi, cfg in enumerate(configs):
        maes = []
        for fi, val in enumerate(folds):
            train = np.setdiff1d(np.arange(len(y)), val)
            model = fit_random_forest(X[train], y[train], cfg)
            mae = float(np.mean(np.abs(rf_predict(model, X[val]) - y[val])))
            maes.append(mae)
            rows.append((gi, asdict(cfg), fi, mae))
        means.append(float(np.mean(maes)))
    best = int(np.argmin(means))  # argmin returns the first minimum
    return GridResult(configs[best], best, rows, means)
