"""Second-order gradient-boosted trees on sparse inputs.

Exact greedy split search over presorted columns.  Stored zeros are
treated as missing: each split learns a default direction for them by
scanning the present values in both directions.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numba as nb
import numpy as np
import scipy.sparse as sp

from ..errors import ConfigError
from .base import as_matrix, check_dim, check_finite, check_labels, log_loss_from_logits, sigmoid

log = logging.getLogger(__name__)


@dataclass
class GBTParams:
    max_depth: int = 30
    learning_rate: float = 0.01
    n_rounds: int = 500
    subsample: float = 1.0
    colsample_bytree: float = 0.7
    colsample_bylevel: float = 0.7
    min_child_weight: float = 0.001   # fraction of training rows, applied to hessian mass
    alpha: float = 0.3                # L1 on leaf weights
    lam: float = 0.5                  # L2 on leaf weights
    gamma: float = 0.1
    base_score: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.max_depth < 0 or self.n_rounds < 0 or self.learning_rate <= 0:
            raise ConfigError("invalid GBT depth/rounds/learning rate")
        for name in ("subsample", "colsample_bytree", "colsample_bylevel"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in (0, 1]")
        if self.min_child_weight < 0 or self.alpha < 0 or self.lam < 0 or self.gamma < 0:
            raise ConfigError("regularization terms must be non-negative")


@dataclass
class Tree:
    feature: np.ndarray        # -1 for leaves
    threshold: np.ndarray      # present value v goes left iff v < threshold
    default_left: np.ndarray   # route for missing (zero) entries
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray          # leaf weight (unscaled by the learning rate)
    cover: np.ndarray          # hessian mass reaching the node

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        d = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                d[self.left[i]] = d[self.right[i]] = d[i] + 1
        return int(d.max())

    def to_json(self) -> dict:
        thr = [("inf" if t == np.inf else "-inf" if t == -np.inf else float(t)) for t in self.threshold]
        return {"feature": self.feature.tolist(), "threshold": thr,
                "default_left": self.default_left.astype(int).tolist(),
                "left": self.left.tolist(), "right": self.right.tolist(),
                "value": self.value.tolist(), "cover": self.cover.tolist()}

    @classmethod
    def from_json(cls, d) -> "Tree":
        return cls(np.asarray(d["feature"], dtype=np.int64),
                   np.asarray([float(t) for t in d["threshold"]], dtype=np.float64),
                   np.asarray(d["default_left"], dtype=np.bool_),
                   np.asarray(d["left"], dtype=np.int64), np.asarray(d["right"], dtype=np.int64),
                   np.asarray(d["value"], dtype=np.float64), np.asarray(d["cover"], dtype=np.float64))


@dataclass
class TreeEnsemble:
    trees: list[Tree]
    n_features: int
    params: GBTParams = field(default_factory=GBTParams)
    base_score: float = 0.0
    train_loss: list[float] = field(default_factory=list)
    kind: str = "gbt"

    def _flat(self):
        if getattr(self, "_flat_cache", None) is None or self._flat_cache[0] != len(self.trees):
            offs = np.zeros(len(self.trees) + 1, dtype=np.int64)
            for i, t in enumerate(self.trees):
                offs[i + 1] = offs[i] + t.n_nodes
            cat = lambda a: (np.concatenate([getattr(t, a) for t in self.trees])
                             if self.trees else np.zeros(0))
            self._flat_cache = (len(self.trees), offs, cat("feature").astype(np.int64),
                                cat("threshold").astype(np.float64), cat("default_left").astype(np.bool_),
                                cat("left").astype(np.int64), cat("right").astype(np.int64),
                                cat("value").astype(np.float64))
        return self._flat_cache[1:]

    def tree_outputs(self, X) -> np.ndarray:
        """Leaf weight reached in every tree, shape (n, n_trees)."""
        X = sp.csr_matrix(as_matrix(X))
        check_dim(X, self.n_features)
        X.sort_indices()
        return _predict_leaves(X.indptr, X.indices, X.data, X.shape[0], *self._flat())

    def predict_logit(self, X) -> np.ndarray:
        out = self.tree_outputs(X)
        return self.base_score + self.params.learning_rate * out.sum(axis=1)

    def predict(self, X) -> np.ndarray:
        return sigmoid(self.predict_logit(X))

    def max_depth(self) -> int:
        return max((t.depth() for t in self.trees), default=0)


# ---------------------------------------------------------------- numba kernels

@nb.njit(cache=True)
def _soft(g, alpha):
    if g > alpha:
        return g - alpha
    if g < -alpha:
        return g + alpha
    return 0.0


@nb.njit(cache=True)
def _score(G, H, alpha, lam):
    t = _soft(G, alpha)
    return t * t / (H + lam)


@nb.njit(cache=True)
def _better(gain, thr, bgain, bthr):
    return gain > bgain or (gain == bgain and thr < bthr)


@nb.njit(parallel=True, cache=True)
def _find_splits(col_ptr, col_rows, col_vals, feats, node_of, g, h,
                 nodeG, nodeH, nodeN, alpha, lam, gamma, mcw):
    nf = len(feats)
    nn = len(nodeG)
    bgain = np.full((nf, nn), -np.inf)
    bthr = np.zeros((nf, nn))
    bdef = np.zeros((nf, nn), dtype=np.bool_)
    bGL = np.zeros((nf, nn))
    bHL = np.zeros((nf, nn))
    parent = np.empty(nn)
    for k in range(nn):
        parent[k] = _score(nodeG[k], nodeH[k], alpha, lam)
    for fi in nb.prange(nf):
        f = feats[fi]
        lo, hi = col_ptr[f], col_ptr[f + 1]
        accG = np.zeros(nn)
        accH = np.zeros(nn)
        accN = np.zeros(nn, dtype=np.int64)
        last = np.zeros(nn)
        # missing go right: present values accumulate on the left
        for e in range(lo, hi):
            r = col_rows[e]
            k = node_of[r]
            if k < 0:
                continue
            v = col_vals[e]
            if accN[k] > 0 and v != last[k]:
                HL = accH[k]
                HR = nodeH[k] - HL
                if HL >= mcw and HR >= mcw:
                    GL = accG[k]
                    gain = 0.5 * (_score(GL, HL, alpha, lam) + _score(nodeG[k] - GL, HR, alpha, lam)
                                  - parent[k]) - gamma
                    thr = 0.5 * (last[k] + v)
                    if _better(gain, thr, bgain[fi, k], bthr[fi, k]):
                        bgain[fi, k] = gain
                        bthr[fi, k] = thr
                        bdef[fi, k] = False
                        bGL[fi, k] = GL
                        bHL[fi, k] = HL
            accG[k] += g[r]
            accH[k] += h[r]
            accN[k] += 1
            last[k] = v
        for k in range(nn):
            if accN[k] > 0 and accN[k] < nodeN[k]:
                HL = accH[k]
                HR = nodeH[k] - HL
                if HL >= mcw and HR >= mcw:
                    GL = accG[k]
                    gain = 0.5 * (_score(GL, HL, alpha, lam) + _score(nodeG[k] - GL, HR, alpha, lam)
                                  - parent[k]) - gamma
                    if _better(gain, np.inf, bgain[fi, k], bthr[fi, k]):
                        bgain[fi, k] = gain
                        bthr[fi, k] = np.inf
                        bdef[fi, k] = False
                        bGL[fi, k] = GL
                        bHL[fi, k] = HL
        # missing go left: present values accumulate on the right
        accG[:] = 0.0
        accH[:] = 0.0
        accN[:] = 0
        for e in range(hi - 1, lo - 1, -1):
            r = col_rows[e]
            k = node_of[r]
            if k < 0:
                continue
            v = col_vals[e]
            if accN[k] > 0 and v != last[k]:
                HR = accH[k]
                HL = nodeH[k] - HR
                if HL >= mcw and HR >= mcw:
                    GL = nodeG[k] - accG[k]
                    gain = 0.5 * (_score(GL, HL, alpha, lam) + _score(accG[k], HR, alpha, lam)
                                  - parent[k]) - gamma
                    thr = 0.5 * (last[k] + v)
                    if _better(gain, thr, bgain[fi, k], bthr[fi, k]):
                        bgain[fi, k] = gain
                        bthr[fi, k] = thr
                        bdef[fi, k] = True
                        bGL[fi, k] = GL
                        bHL[fi, k] = HL
            accG[k] += g[r]
            accH[k] += h[r]
            accN[k] += 1
            last[k] = v
        for k in range(nn):
            if accN[k] > 0 and accN[k] < nodeN[k]:
                HR = accH[k]
                HL = nodeH[k] - HR
                if HL >= mcw and HR >= mcw:
                    GL = nodeG[k] - accG[k]
                    gain = 0.5 * (_score(GL, HL, alpha, lam) + _score(accG[k], HR, alpha, lam)
                                  - parent[k]) - gamma
                    if _better(gain, -np.inf, bgain[fi, k], bthr[fi, k]):
                        bgain[fi, k] = gain
                        bthr[fi, k] = -np.inf
                        bdef[fi, k] = True
                        bGL[fi, k] = GL
                        bHL[fi, k] = HL
    # fixed-order reduction over features: lowest feature index wins ties
    out_gain = np.full(nn, -np.inf)
    out_feat = np.full(nn, -1, dtype=np.int64)
    out_thr = np.zeros(nn)
    out_def = np.zeros(nn, dtype=np.bool_)
    out_GL = np.zeros(nn)
    out_HL = np.zeros(nn)
    for fi in range(nf):
        for k in range(nn):
            gn = bgain[fi, k]
            if gn > out_gain[k]:
                out_gain[k] = gn
                out_feat[k] = feats[fi]
                out_thr[k] = bthr[fi, k]
                out_def[k] = bdef[fi, k]
                out_GL[k] = bGL[fi, k]
                out_HL[k] = bHL[fi, k]
    return out_gain, out_feat, out_thr, out_def, out_GL, out_HL


@nb.njit(cache=True)
def _route(col_ptr, col_rows, col_vals, node_of, split_feat, split_thr, split_def, left_child, right_child):
    """Next-level local node for every active row (-1 once the row sits in a leaf)."""
    n = len(node_of)
    out = np.full(n, -1, dtype=np.int64)
    for r in range(n):
        k = node_of[r]
        if k >= 0 and split_feat[k] >= 0:
            out[r] = left_child[k] if split_def[k] else right_child[k]
    feats = np.unique(split_feat[split_feat >= 0])
    for f in feats:
        for e in range(col_ptr[f], col_ptr[f + 1]):
            r = col_rows[e]
            k = node_of[r]
            if k >= 0 and split_feat[k] == f:
                out[r] = left_child[k] if col_vals[e] < split_thr[k] else right_child[k]
    return out


@nb.njit(parallel=True, cache=True)
def _predict_leaves(indptr, indices, data, n, offs, feature, threshold, default_left, left, right, value):
    nt = len(offs) - 1
    out = np.zeros((n, nt))
    for i in nb.prange(n):
        lo, hi = indptr[i], indptr[i + 1]
        for t in range(nt):
            base = offs[t]
            node = 0
            while feature[base + node] >= 0:
                f = feature[base + node]
                a, b = lo, hi
                while a < b:
                    m = (a + b) // 2
                    if indices[m] < f:
                        a = m + 1
                    else:
                        b = m
                v = data[a] if (a < hi and indices[a] == f) else 0.0
                if v == 0.0:
                    go_left = default_left[base + node]
                else:
                    go_left = v < threshold[base + node]
                node = left[base + node] if go_left else right[base + node]
            out[i, t] = value[base + node]
    return out


# ---------------------------------------------------------------- training

def presort_columns(X: sp.csr_matrix):
    """CSC layout with every column's present entries sorted by value."""
    C = sp.csc_matrix(X)
    C.eliminate_zeros()
    C.sort_indices()
    col = np.repeat(np.arange(C.shape[1]), np.diff(C.indptr))
    order = np.lexsort((C.indices, C.data, col))
    return C.indptr.astype(np.int64), C.indices[order].astype(np.int64), C.data[order].astype(np.float64)


def _sample(rng, pool: np.ndarray, frac: float) -> np.ndarray:
    if frac >= 1.0 or len(pool) == 0:
        return pool
    k = max(1, int(round(frac * len(pool))))
    return np.sort(rng.choice(pool, size=k, replace=False))


def grow_tree(cols, g, h, row_mask, params: GBTParams, mcw: float, rng, n_features: int) -> tuple[Tree, np.ndarray]:
    """One tree; returns it with the leaf node index of every row (-1 outside ``row_mask``)."""
    col_ptr, col_rows, col_vals = cols
    n = len(g)
    tree_feats = _sample(rng, np.arange(n_features, dtype=np.int64), params.colsample_bytree)
    feature, threshold, default_left, left, right, value, cover = [], [], [], [], [], [], []

    def new_node(G, H):
        feature.append(-1)
        threshold.append(0.0)
        default_left.append(False)
        left.append(-1)
        right.append(-1)
        value.append(-_soft_py(G, params.alpha) / (H + params.lam))
        cover.append(H)
        return len(feature) - 1

    node_of = np.where(row_mask, 0, -1).astype(np.int64)
    leaf_of = np.full(n, -1, dtype=np.int64)
    level = [new_node(g[row_mask].sum(), h[row_mask].sum())]
    for depth in range(params.max_depth + 1):
        nn = len(level)
        act = node_of >= 0
        nodeG = np.bincount(node_of[act], weights=g[act], minlength=nn)
        nodeH = np.bincount(node_of[act], weights=h[act], minlength=nn)
        nodeN = np.bincount(node_of[act], minlength=nn).astype(np.int64)
        if depth == params.max_depth:
            split = np.zeros(nn, dtype=bool)
            res = None
        else:
            feats = _sample(rng, tree_feats, params.colsample_bylevel)
            res = _find_splits(col_ptr, col_rows, col_vals, feats, node_of, g, h, nodeG, nodeH, nodeN,
                               params.alpha, params.lam, params.gamma, mcw)
            split = res[0] > 0.0
        global_ids = np.asarray(level, dtype=np.int64)
        for k in np.flatnonzero(~split):
            leaf_of[node_of == k] = global_ids[k]
        if not split.any():
            break
        gain, feat, thr, dflt, GL, HL = res
        split_feat = np.where(split, feat, -1)
        lc = np.full(nn, -1, dtype=np.int64)
        rc = np.full(nn, -1, dtype=np.int64)
        nxt = []
        for k in np.flatnonzero(split):
            gid = level[k]
            l = new_node(GL[k], HL[k])
            r = new_node(nodeG[k] - GL[k], nodeH[k] - HL[k])
            feature[gid], threshold[gid], default_left[gid] = int(feat[k]), float(thr[k]), bool(dflt[k])
            left[gid], right[gid] = l, r
            lc[k], rc[k] = len(nxt), len(nxt) + 1
            nxt += [l, r]
        node_of = _route(col_ptr, col_rows, col_vals, node_of, split_feat, thr, dflt, lc, rc)
        level = nxt
    tree = Tree(np.asarray(feature, dtype=np.int64), np.asarray(threshold, dtype=np.float64),
                np.asarray(default_left, dtype=np.bool_), np.asarray(left, dtype=np.int64),
                np.asarray(right, dtype=np.int64), np.asarray(value, dtype=np.float64),
                np.asarray(cover, dtype=np.float64))
    return tree, leaf_of


def _soft_py(G, alpha):
    return float(np.sign(G) * max(abs(G) - alpha, 0.0))


def train_gbt(X, y, params: GBTParams | None = None) -> TreeEnsemble:
    params = params or GBTParams()
    X = sp.csr_matrix(as_matrix(X))
    check_finite(X)
    y = check_labels(y)
    n, d = X.shape
    cols = presort_columns(X)
    mcw = params.min_child_weight * n
    margin = np.full(n, params.base_score)
    model = TreeEnsemble([], d, params, params.base_score)
    model.train_loss.append(log_loss_from_logits(margin, y))
    for t in range(params.n_rounds):
        rng = np.random.default_rng([params.seed, t])
        p = sigmoid(margin)
        g = p - y
        h = p * (1.0 - p)
        mask = (rng.random(n) < params.subsample) if params.subsample < 1.0 else np.ones(n, dtype=bool)
        tree, leaf_of = grow_tree(cols, g, h, mask, params, mcw, rng, d)
        model.trees.append(tree)
        if mask.all():
            margin = margin + params.learning_rate * tree.value[leaf_of]
        else:
            single = TreeEnsemble([tree], d, params, 0.0)
            margin = margin + params.learning_rate * single.tree_outputs(X)[:, 0]
        model.train_loss.append(log_loss_from_logits(margin, y))
    return model


def params_to_json(p: GBTParams) -> dict:
    return asdict(p)
