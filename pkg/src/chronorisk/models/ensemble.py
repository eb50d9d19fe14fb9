"""Convex combination of member probabilities."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError


@dataclass
class EnsembleModel:
    members: list
    weights: np.ndarray
    kind: str = "ensemble"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if len(self.members) == 0 or len(w) != len(self.members):
            raise ConfigError("ensemble needs one weight per member and at least one member")
        if (w < 0).any() or not np.isfinite(w).all() or w.sum() <= 0:
            raise ConfigError("ensemble weights must be finite, non-negative and not all zero")
        self.weights = w / w.sum()

    @property
    def n_features(self) -> int:
        return self.members[0].n_features

    def predict(self, X) -> np.ndarray:
        out = np.zeros(X.shape[0])
        for m, w in zip(self.members, self.weights):
            if w > 0:
                out += w * m.predict(X)
        return out

    def predict_logit(self, X) -> np.ndarray:
        p = np.clip(self.predict(X), 1e-300, 1 - 1e-16)
        return np.log(p) - np.log1p(-p)


def auc_weights(val_aucs) -> np.ndarray:
    """Weights proportional to max(AUC - 0.5, 0)."""
    w = np.maximum(np.asarray(val_aucs, dtype=float) - 0.5, 0.0)
    if w.sum() <= 0:
        raise ConfigError("no ensemble member beats chance on validation")
    return w / w.sum()


def _compositions(total: int, k: int):
    if k == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _compositions(total - first, k - 1):
            yield (first, *rest)


def search_weights(val_probs, y, steps: int = 20) -> np.ndarray:
    """Simplex grid (resolution 1/steps) maximizing validation AUC.

    Ties keep the first grid point in enumeration order, which favours the
    earlier members; the result is deterministic.
    """
    from ..evaluate import auc

    P = np.asarray(val_probs, dtype=float)
    best, best_w = -1.0, None
    for c in _compositions(steps, P.shape[0]):
        w = np.asarray(c, dtype=float) / steps
        s = auc(w @ P, y)
        if s > best + 1e-12:
            best, best_w = s, w
    return best_w


def ensemble_predict(ensemble: EnsembleModel, X) -> np.ndarray:
    return ensemble.predict(X)
