"""Highway network with hand-written backpropagation (float64 numpy).

Stack: affine -> highway -> affine -> highway -> affine -> highway -> affine(1).
A highway block maps h to g*T(h) + (1-g)*h with T = dropout(relu(W_t h + b_t))
and gate g = sigmoid(W_g h + b_g), so it never changes the width.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from ..errors import ConfigError, NumericError, TrainingError
from .base import Standardizer, as_matrix, check_dim, check_finite, check_labels, sigmoid

log = logging.getLogger(__name__)


@dataclass
class HighwayParams:
    hidden: tuple[int, ...] = (2000, 1000, 500)
    learning_rate: float = 1e-5
    batch_size: int = 128
    dropout: float = 0.5
    max_epochs: int = 100
    patience: int = 5
    val_fraction: float = 0.1
    optimizer: str = "adam"         # or "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    gate_bias_init: float = -1.0
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not self.hidden or min(self.hidden) < 1:
            raise ConfigError("hidden widths must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.patience < 1:
            raise ConfigError("invalid optimizer settings")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in (0, 1)")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizer must be 'adam' or 'sgd'")


def init_params(n_in: int, hidden, rng, gate_bias: float = -1.0) -> dict[str, np.ndarray]:
    """Glorot-uniform affines, He-normal transform paths, negative gate bias (carry first)."""
    p = {}
    dims = [n_in, *hidden]
    for i in range(len(hidden)):
        a, b = dims[i], dims[i + 1]
        lim = np.sqrt(6.0 / (a + b))
        p[f"A{i}.W"] = rng.uniform(-lim, lim, size=(a, b))
        p[f"A{i}.b"] = np.zeros(b)
        p[f"H{i}.Wt"] = rng.normal(0.0, np.sqrt(2.0 / b), size=(b, b))
        p[f"H{i}.bt"] = np.zeros(b)
        lim = np.sqrt(6.0 / (2 * b))
        p[f"H{i}.Wg"] = rng.uniform(-lim, lim, size=(b, b))
        p[f"H{i}.bg"] = np.full(b, gate_bias)
    last = hidden[-1]
    lim = np.sqrt(6.0 / (last + 1))
    p["out.W"] = rng.uniform(-lim, lim, size=(last, 1))
    p["out.b"] = np.zeros(1)
    return p


def forward(params, X, n_blocks: int, dropout: float = 0.0, rng=None, cache: bool = False):
    """Logits for standardized dense ``X``; optionally keep activations for backprop."""
    h = X
    tape = []
    for i in range(n_blocks):
        a = h @ params[f"A{i}.W"] + params[f"A{i}.b"]
        pre_t = a @ params[f"H{i}.Wt"] + params[f"H{i}.bt"]
        t = np.maximum(pre_t, 0.0)
        mask = None
        if dropout > 0.0 and rng is not None:
            mask = (rng.random(t.shape) >= dropout) / (1.0 - dropout)
            t = t * mask
        gate = sigmoid(a @ params[f"H{i}.Wg"] + params[f"H{i}.bg"])
        out = gate * t + (1.0 - gate) * a
        if cache:
            tape.append((h, a, pre_t, t, mask, gate))
        h = out
    z = (h @ params["out.W"] + params["out.b"]).ravel()
    return (z, tape, h) if cache else z


def backward(params, tape, h_last, dz, n_blocks: int, want_input: bool = False):
    """Gradients of ``sum(dz * z)`` w.r.t. every parameter (and the input if asked)."""
    grads = {}
    dz = dz.reshape(-1, 1)
    grads["out.W"] = h_last.T @ dz
    grads["out.b"] = dz.sum(axis=0)
    dh = dz @ params["out.W"].T
    for i in reversed(range(n_blocks)):
        h_in, a, pre_t, t, mask, gate = tape[i]
        # out = gate*t + (1-gate)*a
        dgate = dh * (t - a)
        dt = dh * gate
        da = dh * (1.0 - gate)
        dpre_g = dgate * gate * (1.0 - gate)
        if mask is not None:
            dt = dt * mask
        dpre_t = dt * (pre_t > 0.0)
        grads[f"H{i}.Wg"] = a.T @ dpre_g
        grads[f"H{i}.bg"] = dpre_g.sum(axis=0)
        grads[f"H{i}.Wt"] = a.T @ dpre_t
        grads[f"H{i}.bt"] = dpre_t.sum(axis=0)
        da = da + dpre_g @ params[f"H{i}.Wg"].T + dpre_t @ params[f"H{i}.Wt"].T
        grads[f"A{i}.W"] = h_in.T @ da
        grads[f"A{i}.b"] = da.sum(axis=0)
        if i > 0 or want_input:
            dh = da @ params[f"A{i}.W"].T
    return (grads, dh) if want_input else grads


def bce_loss_grad(params, X, y, n_blocks, dropout=0.0, rng=None):
    """Mean BCE on logits and its parameter gradients."""
    z, tape, h = forward(params, X, n_blocks, dropout, rng, cache=True)
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    dz = (sigmoid(z) - y) / len(y)
    return loss, backward(params, tape, h, dz, n_blocks)


@dataclass
class HighwayNet:
    params: dict[str, np.ndarray]
    standardizer: Standardizer
    hyper: HighwayParams = field(default_factory=HighwayParams)
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    kind: str = "highway"

    @property
    def n_blocks(self) -> int:
        return len(self.hyper.hidden)

    @property
    def n_features(self) -> int:
        return self.params["A0.W"].shape[0]

    @property
    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def _std(self, X) -> np.ndarray:
        X = as_matrix(X)
        check_dim(X, self.n_features)
        return self.standardizer.transform(X)

    def predict_logit(self, X, batch: int = 2048) -> np.ndarray:
        X = as_matrix(X)
        check_dim(X, self.n_features)
        out = [forward(self.params, self.standardizer.transform(X[i:i + batch]), self.n_blocks)
               for i in range(0, X.shape[0], batch)]
        return np.concatenate(out) if out else np.zeros(0)

    def predict(self, X) -> np.ndarray:
        return sigmoid(self.predict_logit(X))

    def logit_and_input_grad(self, X_raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Logit and d logit / d x (raw coordinates) for each dense row."""
        Xs = self.standardizer.transform(X_raw)
        z, tape, h = forward(self.params, Xs, self.n_blocks, cache=True)
        _, dx = backward(self.params, tape, h, np.ones_like(z), self.n_blocks, want_input=True)
        dx = dx / self.standardizer.scale
        if not np.isfinite(dx).all():
            raise NumericError("non-finite input gradient")
        return z, dx


def _auc(scores, y) -> float:
    from ..evaluate import auc

    return auc(scores, y)


def train_highway(X, y, hyper: HighwayParams | None = None) -> HighwayNet:
    """Mini-batch training with early stopping on a seeded validation carve-out."""
    hyper = hyper or HighwayParams()
    X = as_matrix(X)
    check_finite(X)
    y = check_labels(y)
    n = X.shape[0]
    rng = np.random.default_rng([hyper.seed, 0])
    perm = rng.permutation(n)
    n_val = max(1, int(round(hyper.val_fraction * n)))
    val_idx, fit_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    Xf = X[fit_idx]
    std = Standardizer.fit(Xf)
    params = init_params(X.shape[1], hyper.hidden, np.random.default_rng([hyper.seed, 1]),
                         hyper.gate_bias_init)
    net = HighwayNet(params, std, hyper)
    Xv, yv = X[val_idx], y[val_idx]
    yf = y[fit_idx]
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v2 = {k: np.zeros_like(v) for k, v in params.items()}
    step = 0
    best, best_params, bad = -np.inf, None, 0
    recent: list[float] = []
    for epoch in range(hyper.max_epochs):
        erng = np.random.default_rng([hyper.seed, 2, epoch])
        order = erng.permutation(len(fit_idx))
        losses = []
        for s in range(0, len(order), hyper.batch_size):
            idx = np.sort(order[s:s + hyper.batch_size])
            xb = std.transform(Xf[idx])
            loss, grads = bce_loss_grad(params, xb, yf[idx], net.n_blocks, hyper.dropout, erng)
            if not np.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch}, step {step} "
                                    f"(lr={hyper.learning_rate}, last finite losses {recent})")
            losses.append(loss)
            recent = (recent + [loss])[-3:]
            step += 1
            for k, gk in grads.items():
                if hyper.optimizer == "sgd":
                    params[k] -= hyper.learning_rate * gk
                    continue
                m[k] = hyper.beta1 * m[k] + (1 - hyper.beta1) * gk
                v2[k] = hyper.beta2 * v2[k] + (1 - hyper.beta2) * gk * gk
                mh = m[k] / (1 - hyper.beta1 ** step)
                vh = v2[k] / (1 - hyper.beta2 ** step)
                params[k] -= hyper.learning_rate * mh / (np.sqrt(vh) + hyper.eps)
        val_auc = _auc(net.predict_logit(Xv), yv) if 0 < yv.sum() < len(yv) else float("nan")
        net.history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_auc": val_auc})
        log.debug("highway epoch %d loss %.5f val_auc %.4f", epoch, np.mean(losses), val_auc)
        if val_auc > best:
            best, bad, net.best_epoch = val_auc, 0, epoch
            best_params = {k: v.copy() for k, v in params.items()}
        else:
            bad += 1
            if bad >= hyper.patience:
                break
    if best_params is not None:
        net.params = best_params
    return net


def count_parameters(n_in: int, hidden) -> int:
    dims = [n_in, *hidden]
    total = 0
    for i, b in enumerate(hidden):
        total += dims[i] * b + b + 2 * (b * b + b)
    return total + hidden[-1] + 1
