"""L1-regularized logistic regression solved by accelerated proximal gradient (FISTA)."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .base import Standardizer, as_matrix, check_dim, check_finite, check_labels, sigmoid

log = logging.getLogger(__name__)


@dataclass
class LRParams:
    C: float = 1.0
    tol: float = 1e-4
    max_iter: int = 100

    def __post_init__(self):
        from ..errors import ConfigError

        if self.C <= 0 or self.tol <= 0 or self.max_iter < 1:
            raise ConfigError("LR needs C > 0, tol > 0, max_iter >= 1")


@dataclass
class LinearModel:
    """Weights live in standardized coordinates; ``bias`` is unpenalized."""
    weights: np.ndarray
    bias: float
    standardizer: Standardizer
    params: LRParams = field(default_factory=LRParams)
    n_iter: int = 0
    converged: bool = False
    kind: str = "lr"

    @property
    def n_features(self) -> int:
        return len(self.weights)

    def raw_coefficients(self) -> tuple[np.ndarray, float]:
        """Equivalent weights/intercept acting on unstandardized inputs."""
        w = self.weights / self.standardizer.scale
        return w, float(self.bias - self.standardizer.mean @ w)

    def predict_logit(self, X) -> np.ndarray:
        X = as_matrix(X)
        check_dim(X, self.n_features)
        if sp.issparse(X):
            w, c = self.raw_coefficients()
            return np.asarray(X @ w).ravel() + c
        return self.standardizer.transform(X) @ self.weights + self.bias

    def predict(self, X) -> np.ndarray:
        return sigmoid(self.predict_logit(X))


class _Problem:
    """Mean logistic loss on standardized columns, computed without densifying X."""

    def __init__(self, X, y, std: Standardizer):
        self.X, self.y, self.std = X, y, std
        self.n = X.shape[0]

    def logits(self, w, b):
        v = w / self.std.scale
        return np.asarray(self.X @ v).ravel() - self.std.mean @ v + b

    def loss_grad(self, w, b):
        z = self.logits(w, b)
        loss = float(np.mean(np.logaddexp(0.0, z) - self.y * z))
        r = (sigmoid(z) - self.y) / self.n
        gx = np.asarray(self.X.T @ r).ravel()
        gw = (gx - self.std.mean * r.sum()) / self.std.scale
        return loss, gw, float(r.sum())

    def loss(self, w, b):
        z = self.logits(w, b)
        return float(np.mean(np.logaddexp(0.0, z) - self.y * z))


def _soft(v, t):
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def train_lr(X, y, params: LRParams | None = None) -> LinearModel:
    """Minimize mean logistic loss + ||w||_1 / (C * N) with FISTA and backtracking.

    The penalty scale follows the usual ``C``-parameterization in which the
    summed loss is traded against ``||w||_1 / C``; dividing by N gives the
    mean-loss form solved here.
    """
    params = params or LRParams()
    X = as_matrix(X)
    check_finite(X)
    y = check_labels(y)
    if not sp.issparse(X):
        X = sp.csr_matrix(X)
    std = Standardizer.fit(X)
    prob = _Problem(X, y, std)
    lam = 1.0 / (params.C * prob.n)

    d = X.shape[1]
    w = np.zeros(d)
    pbar = np.clip(y.mean(), 1e-12, 1 - 1e-12)
    b = float(np.log(pbar / (1 - pbar)))
    yw, yb = w.copy(), b
    t = 1.0
    L = 0.25
    converged = False
    it = 0
    for it in range(1, params.max_iter + 1):
        f0, gw, gb = prob.loss_grad(yw, yb)
        while True:
            nw = _soft(yw - gw / L, lam / L)
            nb = yb - gb / L
            dw, db = nw - yw, nb - yb
            f1 = prob.loss(nw, nb)
            if f1 <= f0 + gw @ dw + gb * db + 0.5 * L * (dw @ dw + db * db) + 1e-15:
                break
            L *= 2.0
        gmap = L * max(np.max(np.abs(dw), initial=0.0), abs(db))
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        # restart momentum when the objective goes up
        if f1 + lam * np.abs(nw).sum() > prob.loss(w, b) + lam * np.abs(w).sum():
            t_next = 1.0
            yw, yb = nw.copy(), nb
        else:
            beta = (t - 1.0) / t_next
            yw = nw + beta * (nw - w)
            yb = nb + beta * (nb - b)
        w, b, t = nw, nb, t_next
        if gmap <= params.tol:
            converged = True
            break
    if not converged:
        log.info("LR stopped at max_iter=%d before reaching tol", params.max_iter)
    return LinearModel(w, b, std, params, it, converged)


def kkt_violation(model: LinearModel, X, y) -> float:
    """Largest breach of L1 stationarity for the summed-loss objective.

    Zero weights need ``|dL/dw_j| <= 1/C``; nonzero weights need
    ``dL/dw_j = -sign(w_j)/C``.  Returned in summed-loss units.
    """
    X = sp.csr_matrix(as_matrix(X))
    y = check_labels(y)
    prob = _Problem(X, y, model.standardizer)
    _, gw, _ = prob.loss_grad(model.weights, model.bias)
    g = gw * prob.n
    pen = 1.0 / model.params.C
    zero = model.weights == 0
    v_zero = np.maximum(np.abs(g[zero]) - pen, 0.0)
    v_nz = np.abs(g[~zero] + np.sign(model.weights[~zero]) * pen)
    return float(max(v_zero.max(initial=0.0), v_nz.max(initial=0.0)))
