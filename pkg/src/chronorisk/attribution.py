"""Additive feature attributions in logit space.

Every method returns phi with ``sum(phi) = logit(x) - base_value``: exactly
for the linear/tree/exact Shapley values, per permutation path for the
sampled estimator, and up to quadrature error for integrated gradients.
The interventional value of a coalition S is the mean over background rows
b of f(x on S, b elsewhere).
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numba as nb
import numpy as np
import pandas as pd
import scipy.sparse as sp

from .errors import ConfigError, ContractViolation, NumericError
from .models import EnsembleModel, HighwayNet, LinearModel, TreeEnsemble

MAX_EXACT_PLAYERS = 20


@dataclass
class Attribution:
    member_id: int | None
    phi: np.ndarray
    base_value: float
    logit: float
    method: str
    se: np.ndarray | None = None
    schema_hash: str | None = None

    @property
    def residual(self) -> float:
        return float(self.phi.sum() - (self.logit - self.base_value))


def _dense(X) -> np.ndarray:
    if sp.issparse(X):
        return X.toarray()
    X = np.asarray(X, dtype=float)
    return X[None, :] if X.ndim == 1 else X


# ---------------------------------------------------------------- linear

def shapley_linear(model: LinearModel, X, background) -> list[Attribution]:
    """phi_j = w_j (x~_j - mu~_j) in standardized coordinates."""
    Xs = model.standardizer.transform(X)
    mu = model.standardizer.transform(_dense(background).mean(axis=0, keepdims=True))[0]
    phi = (Xs - mu) * model.weights
    logits = Xs @ model.weights + model.bias
    base = float(mu @ model.weights + model.bias)
    return [Attribution(None, phi[i], base, float(logits[i]), "shapley_linear") for i in range(len(Xs))]


# ---------------------------------------------------------------- exact (oracle)

def _subset_weights(m: int) -> np.ndarray:
    return np.array([math.factorial(s) * math.factorial(m - s - 1) / math.factorial(m) for s in range(m)])


def shapley_exact(f, x, background, players=None) -> Attribution:
    """Brute-force interventional Shapley values over ``players`` (default: all columns).

    Non-player columns stay at x.  Cost is 2^M * |background| model calls.
    """
    x = _dense(x)[0]
    B = _dense(background)
    d = len(x)
    players = np.arange(d) if players is None else np.asarray(players, dtype=np.int64)
    m = len(players)
    if m > MAX_EXACT_PLAYERS:
        raise ConfigError(f"shapley_exact refuses {m} > {MAX_EXACT_PLAYERS} players")
    masks = np.arange(2 ** m)
    bits = ((masks[:, None] >> np.arange(m)) & 1).astype(bool)       # subset -> players present
    v = np.empty(2 ** m)
    base_rows = np.tile(x, (len(B), 1))
    base_rows[:, players] = B[:, players]
    chunk = max(1, 200_000 // max(1, len(B)))
    for s in range(0, 2 ** m, chunk):
        sel = bits[s:s + chunk]
        Z = np.repeat(base_rows[None, :, :], len(sel), axis=0)
        for j in range(m):
            Z[sel[:, j], :, players[j]] = x[players[j]]
        out = np.asarray(f(Z.reshape(-1, d)), dtype=float).reshape(len(sel), len(B))
        v[s:s + chunk] = out.mean(axis=1)
    w = _subset_weights(m)
    size = bits.sum(axis=1)
    phi_p = np.zeros(m)
    for j in range(m):
        without = ~bits[:, j]
        S = masks[without]
        phi_p[j] = np.sum(w[size[without]] * (v[S | (1 << j)] - v[S]))
    phi = np.zeros(d)
    phi[players] = phi_p
    return Attribution(None, phi, float(v[0]), float(v[-1]), "shapley_exact")


# ---------------------------------------------------------------- sampled

def shapley_sampled(f, x, background, n_permutations: int = 100, seed: int = 0, players=None) -> Attribution:
    """Permutation-sampling estimator with per-feature standard errors.

    Each draw picks a permutation and one background row and walks from the
    background row to x; the marginal steps telescope to f(x) - f(b).
    """
    if n_permutations < 1:
        raise ConfigError("n_permutations must be >= 1")
    x = _dense(x)[0]
    B = _dense(background)
    d = len(x)
    players = np.arange(d) if players is None else np.asarray(players, dtype=np.int64)
    rng = np.random.default_rng([seed, 31])
    samples = np.zeros((n_permutations, d))
    fb = np.empty(n_permutations)
    fx = None
    for p in range(n_permutations):
        b = B[rng.integers(len(B))]
        order = players[rng.permutation(len(players))]
        order = order[x[order] != b[order]]
        path = np.tile(b, (len(order) + 1, 1))
        for i, j in enumerate(order):
            path[i + 1:, j] = x[j]
        vals = np.asarray(f(path), dtype=float)
        samples[p, order] = np.diff(vals)
        fb[p] = vals[0]
        fx = vals[-1] if fx is None else fx
    phi = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / np.sqrt(n_permutations) if n_permutations > 1 else np.zeros(d)
    if fx is None:
        fx = float(np.asarray(f(x[None, :]))[0])
    return Attribution(None, phi, float(fb.mean()), float(fx), "shapley_sampled", se)


# ---------------------------------------------------------------- trees

@nb.njit(cache=True)
def _goes_left(v, thr, dflt):
    if v == 0.0:
        return dflt
    return v < thr


@nb.njit(cache=True)
def _tree_shap_one(x, z, base, feature, threshold, default_left, left, right, value,
                   w_pos, w_neg, phi, scale, st_node, st_depth, st_a, st_b, st_f, st_s, path_f, path_s):
    """Interventional Shapley values of one tree for input x against background row z."""
    top = 0
    st_node[0] = 0
    st_depth[0] = 0
    st_a[0] = 0
    st_b[0] = 0
    st_f[0] = -1
    st_s[0] = 0
    top = 1
    while top > 0:
        top -= 1
        node = st_node[top]
        depth = st_depth[top]
        a = st_a[top]
        b = st_b[top]
        if depth > 0:
            path_f[depth - 1] = st_f[top]
            path_s[depth - 1] = st_s[top]
        f = feature[base + node]
        if f < 0:
            if a + b == 0:
                continue
            v = value[base + node] * scale
            for i in range(depth):
                if path_s[i] == 1:
                    phi[path_f[i]] += v * w_pos[a, b]
                elif path_s[i] == 2:
                    phi[path_f[i]] -= v * w_neg[a, b]
            continue
        thr = threshold[base + node]
        dl = default_left[base + node]
        xl = _goes_left(x[f], thr, dl)
        zl = _goes_left(z[f], thr, dl)
        xc = left[base + node] if xl else right[base + node]
        zc = left[base + node] if zl else right[base + node]
        if xc == zc:
            st_node[top] = xc
            st_depth[top] = depth + 1
            st_a[top] = a
            st_b[top] = b
            st_f[top] = -1
            st_s[top] = 0
            top += 1
            continue
        state = 0
        for i in range(depth):
            if path_f[i] == f and path_s[i] != 0:
                state = path_s[i]
                break
        if state == 1:
            st_node[top] = xc
            st_depth[top] = depth + 1
            st_a[top] = a
            st_b[top] = b
            st_f[top] = -1
            st_s[top] = 0
            top += 1
        elif state == 2:
            st_node[top] = zc
            st_depth[top] = depth + 1
            st_a[top] = a
            st_b[top] = b
            st_f[top] = -1
            st_s[top] = 0
            top += 1
        else:
            st_node[top] = xc
            st_depth[top] = depth + 1
            st_a[top] = a + 1
            st_b[top] = b
            st_f[top] = f
            st_s[top] = 1
            top += 1
            st_node[top] = zc
            st_depth[top] = depth + 1
            st_a[top] = a
            st_b[top] = b + 1
            st_f[top] = f
            st_s[top] = 2
            top += 1


@nb.njit(parallel=True, cache=True)
def _tree_shap(X, B, offs, feature, threshold, default_left, left, right, value, w_pos, w_neg, scale, max_depth):
    n, d = X.shape
    nt = len(offs) - 1
    out = np.zeros((n, d))
    cap = 2 * (max_depth + 2) + 4
    for i in nb.prange(n):
        phi = np.zeros(d)
        st_node = np.zeros(cap, dtype=np.int64)
        st_depth = np.zeros(cap, dtype=np.int64)
        st_a = np.zeros(cap, dtype=np.int64)
        st_b = np.zeros(cap, dtype=np.int64)
        st_f = np.zeros(cap, dtype=np.int64)
        st_s = np.zeros(cap, dtype=np.int64)
        path_f = np.zeros(max_depth + 2, dtype=np.int64)
        path_s = np.zeros(max_depth + 2, dtype=np.int64)
        for k in range(B.shape[0]):
            for t in range(nt):
                _tree_shap_one(X[i], B[k], offs[t], feature, threshold, default_left, left, right, value,
                               w_pos, w_neg, phi, scale, st_node, st_depth, st_a, st_b, st_f, st_s,
                               path_f, path_s)
        out[i] = phi / B.shape[0]
    return out


def _leaf_weights(max_depth: int) -> tuple[np.ndarray, np.ndarray]:
    """w_pos[a,b] = (a-1)! b! / (a+b)!, w_neg[a,b] = a! (b-1)! / (a+b)!."""
    k = max_depth + 2
    wp = np.zeros((k, k))
    wn = np.zeros((k, k))
    for a in range(k):
        for b in range(k):
            if a + b == 0:
                continue
            tot = math.factorial(a + b)
            if a > 0:
                wp[a, b] = math.factorial(a - 1) * math.factorial(b) / tot
            if b > 0:
                wn[a, b] = math.factorial(a) * math.factorial(b - 1) / tot
    return wp, wn


def shapley_tree(model: TreeEnsemble, X, background) -> list[Attribution]:
    """Interventional tree Shapley values, additive over trees."""
    Xd = _dense(X)
    B = _dense(background)
    if len(B) == 0:
        raise ConfigError("background set is empty")
    offs, feature, threshold, default_left, left, right, value = model._flat()
    depth = model.max_depth()
    wp, wn = _leaf_weights(depth)
    phi = _tree_shap(np.ascontiguousarray(Xd), np.ascontiguousarray(B), offs, feature, threshold,
                     default_left, left, right, value, wp, wn, model.params.learning_rate, depth)
    logits = model.predict_logit(sp.csr_matrix(Xd))
    base = float(model.predict_logit(sp.csr_matrix(B)).mean())
    return [Attribution(None, phi[i], base, float(logits[i]), "shapley_tree") for i in range(len(Xd))]


# ---------------------------------------------------------------- integrated gradients

def integrated_gradients(net: HighwayNet, x, baseline=None, steps: int = 256) -> Attribution:
    """Midpoint-rule path integral of d logit / dx from ``baseline`` (default: zeros) to x."""
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    x = _dense(x)[0]
    x0 = np.zeros_like(x) if baseline is None else _dense(baseline)[0]
    alphas = (np.arange(1, steps + 1) - 0.5) / steps
    path = x0 + alphas[:, None] * (x - x0)
    _, grads = net.logit_and_input_grad(path)
    phi = (x - x0) * grads.mean(axis=0)
    if not np.isfinite(phi).all():
        raise NumericError("non-finite integrated gradients")
    ends, _ = net.logit_and_input_grad(np.vstack([x, x0]))
    return Attribution(None, phi, float(ends[1]), float(ends[0]), "integrated_gradients")


# ---------------------------------------------------------------- dispatch

def explain(model, X, background, member_ids=None, ig_steps: int = 256, ig_baseline: str = "zero",
            n_permutations: int = 64, seed: int = 0, schema_hash: str | None = None) -> list[Attribution]:
    """Per-sample attributions with the method matching the model kind."""
    Xd = _dense(X)
    if isinstance(model, LinearModel):
        out = shapley_linear(model, Xd, background)
    elif isinstance(model, TreeEnsemble):
        out = shapley_tree(model, Xd, background)
    elif isinstance(model, HighwayNet):
        base = None if ig_baseline == "zero" else model.standardizer.mean
        out = [integrated_gradients(model, Xd[i], base, ig_steps) for i in range(len(Xd))]
    elif isinstance(model, EnsembleModel):
        out = [shapley_sampled(model.predict_logit, Xd[i], background, n_permutations, seed + i)
               for i in range(len(Xd))]
    else:
        raise ContractViolation(f"no attribution method for {type(model).__name__}")
    ids = member_ids if member_ids is not None else [None] * len(out)
    for a, mid in zip(out, ids):
        a.member_id = None if mid is None else int(mid)
        a.schema_hash = schema_hash
    return out


def background_sample(X, size: int = 100, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng([seed, 41])
    n = X.shape[0]
    idx = np.sort(rng.choice(n, size=min(size, n), replace=False))
    return _dense(X[idx])


# ---------------------------------------------------------------- aggregation

@dataclass
class AttributionReport:
    names: list[str]
    phi_sum_abs: np.ndarray
    method: str
    n_samples: int
    normalized: bool = False

    @property
    def ranking(self) -> np.ndarray:
        return np.argsort(-self.phi_sum_abs, kind="stable")

    def to_frame(self) -> pd.DataFrame:
        order = self.ranking
        return pd.DataFrame({"feature_name": [self.names[i] for i in order],
                             "phi_sum_abs": self.phi_sum_abs[order],
                             "rank": np.arange(1, len(order) + 1),
                             "method": self.method})

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.12g", lineterminator="\n")


def aggregate(attributions, names: list[str], normalize: bool = False) -> AttributionReport:
    """Sum of absolute contributions per column (no cancellation across samples)."""
    if len(attributions) == 0:
        raise ContractViolation("no attributions to aggregate")
    dims = {len(a.phi) for a in attributions}
    hashes = {a.schema_hash for a in attributions}
    methods = {a.method for a in attributions}
    if len(dims) != 1 or len(hashes) != 1 or dims.pop() != len(names):
        raise ContractViolation("attributions come from different schemas")
    total = np.sum([np.abs(a.phi) for a in attributions], axis=0)
    if normalize:
        total = total / len(attributions)
    return AttributionReport(list(names), total, "+".join(sorted(methods)), len(attributions), normalize)


def top_k(report: AttributionReport, k: int) -> list[str]:
    return [report.names[i] for i in report.ranking[:k]]


_STAT = re.compile(r"(@y\d+)$")


def feature_key(name: str) -> str:
    """Column name -> underlying feature (drops the mean/max suffix and concat year tag)."""
    name = _STAT.sub("", name)
    for suffix in ("|mean", "|max"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return name


def grouped(report: AttributionReport) -> AttributionReport:
    """Report at feature level: columns sharing a feature key are summed."""
    keys = [feature_key(n) for n in report.names]
    uniq = list(dict.fromkeys(keys))
    pos = {k: i for i, k in enumerate(uniq)}
    total = np.zeros(len(uniq))
    np.add.at(total, [pos[k] for k in keys], report.phi_sum_abs)
    return AttributionReport(uniq, total, report.method, report.n_samples, report.normalized)


def save_attributions(attributions, path) -> None:
    """Per-sample phi as sparse triplets (member_id, column_index, phi)."""
    rows = []
    for a in attributions:
        nz = np.flatnonzero(a.phi)
        rows.append(pd.DataFrame({"member_id": a.member_id, "column_index": nz, "phi": a.phi[nz]}))
    pd.concat(rows, ignore_index=True).to_csv(path, index=False, float_format="%.12g", lineterminator="\n")
