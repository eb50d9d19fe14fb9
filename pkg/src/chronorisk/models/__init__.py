"""Classifiers trained from scratch plus versioned JSON persistence."""
from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ..errors import ConfigError, ContractViolation
from .base import Standardizer, sigmoid
from .ensemble import EnsembleModel, auc_weights, ensemble_predict, search_weights
from .highway import HighwayNet, HighwayParams, train_highway
from .linear import LinearModel, LRParams, kkt_violation, train_lr
from .trees import GBTParams, Tree, TreeEnsemble, train_gbt

MODEL_FORMAT = "chronorisk-model"
MODEL_VERSION = 1
KINDS = ("lr", "gbt", "highway")

__all__ = [
    "EnsembleModel", "GBTParams", "HighwayNet", "HighwayParams", "LinearModel", "LRParams",
    "Standardizer", "Tree", "TreeEnsemble", "auc_weights", "ensemble_predict", "kkt_violation",
    "load_model", "model_from_json", "model_to_json", "predict", "predict_logit", "save_model",
    "search_weights", "sigmoid", "train", "train_gbt", "train_highway", "train_lr",
]


def make_params(kind: str, hyper: dict | None = None):
    hyper = dict(hyper or {})
    if kind == "lr":
        return LRParams(**hyper)
    if kind == "gbt":
        return GBTParams(**hyper)
    if kind == "highway":
        return HighwayParams(**hyper)
    raise ConfigError(f"unknown model kind {kind!r}")


def train(kind: str, X, y, hyper: dict | None = None, seed: int | None = None):
    params = make_params(kind, hyper)
    if seed is not None and hasattr(params, "seed"):
        params.seed = seed
    if kind == "lr":
        return train_lr(X, y, params)
    if kind == "gbt":
        return train_gbt(X, y, params)
    return train_highway(X, y, params)


def predict_logit(model, X) -> np.ndarray:
    return model.predict_logit(X)


def predict(model, X) -> np.ndarray:
    return model.predict(X)


# ---------------------------------------------------------------- persistence

def _arr(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _unarr(d: dict) -> np.ndarray:
    return np.asarray(d["data"], dtype=float).reshape(d["shape"])


def model_to_json(model, schema_hash: str | None = None) -> dict:
    out = {"format": MODEL_FORMAT, "version": MODEL_VERSION, "kind": model.kind, "schema_hash": schema_hash}
    if isinstance(model, LinearModel):
        out.update(weights=model.weights.tolist(), bias=model.bias,
                   standardizer=model.standardizer.to_json(), params=asdict(model.params),
                   n_iter=model.n_iter, converged=model.converged)
    elif isinstance(model, TreeEnsemble):
        out.update(n_features=model.n_features, base_score=model.base_score, params=asdict(model.params),
                   trees=[t.to_json() for t in model.trees], train_loss=model.train_loss)
    elif isinstance(model, HighwayNet):
        hyper = asdict(model.hyper)
        hyper["hidden"] = list(hyper["hidden"])
        out.update(hyper=hyper, standardizer=model.standardizer.to_json(),
                   layers={k: _arr(v) for k, v in sorted(model.params.items())},
                   n_parameters=model.n_parameters, best_epoch=model.best_epoch, history=model.history)
    elif isinstance(model, EnsembleModel):
        out.update(weights=model.weights.tolist(), members=[model_to_json(m, schema_hash) for m in model.members])
    else:
        raise ContractViolation(f"cannot serialize {type(model).__name__}")
    return out


def model_from_json(d: dict, expected_schema_hash: str | None = None):
    if d.get("format") != MODEL_FORMAT or d.get("version") != MODEL_VERSION:
        raise ContractViolation("not a chronorisk model file of a supported version")
    if expected_schema_hash is not None and d.get("schema_hash") != expected_schema_hash:
        raise ContractViolation(
            f"model schema hash {d.get('schema_hash')} does not match features {expected_schema_hash}")
    kind = d["kind"]
    if kind == "lr":
        return LinearModel(np.asarray(d["weights"], dtype=float), float(d["bias"]),
                           Standardizer.from_json(d["standardizer"]), LRParams(**d["params"]),
                           d["n_iter"], d["converged"])
    if kind == "gbt":
        return TreeEnsemble([Tree.from_json(t) for t in d["trees"]], d["n_features"],
                            GBTParams(**d["params"]), d["base_score"], list(d["train_loss"]))
    if kind == "highway":
        return HighwayNet({k: _unarr(v) for k, v in d["layers"].items()},
                          Standardizer.from_json(d["standardizer"]), HighwayParams(**d["hyper"]),
                          list(d["history"]), d["best_epoch"])
    if kind == "ensemble":
        return EnsembleModel([model_from_json(m, expected_schema_hash) for m in d["members"]], d["weights"])
    raise ContractViolation(f"unknown model kind {kind!r}")


def save_model(model, path: str | Path, schema_hash: str | None = None) -> None:
    Path(path).write_text(json.dumps(model_to_json(model, schema_hash), sort_keys=True))


def load_model(path: str | Path, expected_schema_hash: str | None = None):
    return model_from_json(json.loads(Path(path).read_text()), expected_schema_hash)
