"""Shared pieces: numerically safe links, the train-fitted standardizer, input checks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ..errors import ContractViolation, DataError


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def log_loss_from_logits(z, y) -> float:
    """Mean binary cross-entropy, evaluated as softplus(z) - y*z."""
    z = np.asarray(z, dtype=float)
    return float(np.mean(np.logaddexp(0.0, z) - np.asarray(y, dtype=float) * z))


def as_matrix(X):
    """CSR float64 for sparse input, 2-D float64 ndarray otherwise."""
    if sp.issparse(X):
        return sp.csr_matrix(X, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    return X


def check_finite(X) -> None:
    data = X.data if sp.issparse(X) else X
    if not np.isfinite(data).all():
        raise DataError("non-finite feature values")


def check_labels(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).ravel()
    if not np.isin(y, (0.0, 1.0)).all():
        raise DataError("labels must be 0/1")
    return y


def check_dim(X, n_features: int) -> None:
    if X.shape[1] != n_features:
        raise ContractViolation(f"expected {n_features} features, got {X.shape[1]}")


@dataclass
class Standardizer:
    """Per-column z-score fitted on train; constant columns pass through unchanged."""
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X) -> "Standardizer":
        X = as_matrix(X)
        if sp.issparse(X):
            mean = np.asarray(X.mean(axis=0)).ravel()
            sq = np.asarray(X.multiply(X).mean(axis=0)).ravel()
        else:
            mean = X.mean(axis=0)
            sq = (X * X).mean(axis=0)
        var = np.maximum(sq - mean * mean, 0.0)
        std = np.sqrt(var)
        const = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
        return cls(np.where(const, 0.0, mean), np.where(const, 1.0, std))

    def transform(self, X) -> np.ndarray:
        X = as_matrix(X)
        dense = X.toarray() if sp.issparse(X) else X
        return (dense - self.mean) / self.scale

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_json(cls, d) -> "Standardizer":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["scale"], dtype=float))
