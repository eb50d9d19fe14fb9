"""In-memory orchestration shared by the CLI stages and the acceptance suite.

A ``Runner`` owns one cohort and one schema; feature matrices and fitted
models are cached per (design, columns, kind) so sweeps and ablations only
pay for what changes.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from . import attribution as attr
from .cohort import build_cohort, skew_test_set
from .config import ExperimentConfig
from .errors import ContractViolation
from .evaluate import (MetricsReport, auc, bayes_ppv, group_columns, probability_histogram,
                       slice_metrics, threshold_metrics)
from .featurize import FeatureMatrix, Featurizer, StudyDesign, build_schema
from .models import EnsembleModel, auc_weights, search_weights, train
from .synthgen import generate

log = logging.getLogger(__name__)


def set_threads(n: int) -> None:
    import numba

    numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


@dataclass
class EnsembleResult:
    member_auc: dict[str, float]
    val_auc: dict[str, float]
    weights: dict[str, float]
    ensemble_auc: float
    model: EnsembleModel
    recipe: str = "auc_margin"
    sensitivity: dict[str, float] | None = None   # recipe -> test AUC


class Runner:
    def __init__(self, cfg: ExperimentConfig, tables=None, members: pd.DataFrame | None = None, schema=None):
        self.cfg = cfg
        set_threads(cfg.threads)
        self.tables = tables if tables is not None else generate(cfg.generator, threads=cfg.threads)
        if members is None:
            c = cfg.cohort
            members, self.exclusions = build_cohort(
                self.tables, cfg.labeling, c.sample_fraction, c.year_range, c.min_age,
                cfg.reference_design.b, c.test_years, cfg.seed)
        else:
            self.exclusions = None
        self.members = members.sort_values("person_id", kind="mergesort").reset_index(drop=True)
        self.schema = schema or build_schema(self.tables.observations, self.tables.persons, self.members)
        self._featurizer: Featurizer | None = None
        self._features: dict[tuple, FeatureMatrix] = {}
        self._models: dict[tuple, object] = {}

    # ---- features and models

    @property
    def featurizer(self) -> Featurizer:
        # folding the observation table is the slow part; defer it until needed
        if self._featurizer is None:
            self._featurizer = Featurizer(self.tables, self.schema)
        return self._featurizer

    @staticmethod
    def _design_key(design: StudyDesign) -> tuple:
        return (design.w, design.b, design.mode, design.avg_denominator)

    def features(self, design: StudyDesign) -> FeatureMatrix:
        key = self._design_key(design)
        if key not in self._features:
            self._features[key] = self.featurizer.build(self.members, design)
        return self._features[key]

    def put_features(self, fm: FeatureMatrix) -> None:
        """Seed the cache with a matrix loaded from disk."""
        if fm.schema_hash != self.schema.hash:
            raise ContractViolation(f"feature schema {fm.schema_hash} does not match {self.schema.hash}")
        self._features[self._design_key(fm.design)] = fm

    def put_model(self, kind: str, design: StudyDesign, model, columns=None, tag: str = "") -> None:
        ckey = None if columns is None else tuple(int(c) for c in columns)
        self._models[(kind, *self._design_key(design), ckey, tag)] = model

    def columns_for(self, design: StudyDesign, group: str) -> np.ndarray:
        fm = self.features(design)
        return group_columns(fm.names, group, self.schema.fixed_dim)

    def fit(self, kind: str, design: StudyDesign, columns=None, rows=None, tag: str = ""):
        ckey = None if columns is None else tuple(int(c) for c in columns)
        key = (kind, *self._design_key(design), ckey, tag)
        if key not in self._models:
            fm = self.features(design)
            tr = fm.train if rows is None else fm.subset(rows)
            X = tr.X if columns is None else tr.X[:, np.asarray(columns)]
            self._models[key] = train(kind, X, tr.y, self.cfg.models.get(kind, {}), seed=self.cfg.seed)
        return self._models[key]

    def test_scores(self, model, design: StudyDesign, columns=None) -> tuple[np.ndarray, np.ndarray]:
        te = self.features(design).test
        X = te.X if columns is None else te.X[:, np.asarray(columns)]
        return model.predict(X), te.y

    def evaluate_design(self, kind: str, design: StudyDesign) -> MetricsReport:
        model = self.fit(kind, design)
        s, y = self.test_scores(model, design)
        return threshold_metrics(s, y, self.cfg.evaluation.threshold)

    def evaluate_columns(self, kind, design, columns=None, group=None, attribute=False):
        if group is not None:
            columns = None if group == "all" else self.columns_for(design, group)
        model = self.fit(kind, design, columns)
        s, y = self.test_scores(model, design, columns)
        report = self.attribute(kind, design, columns)[1] if attribute else None
        return threshold_metrics(s, y, self.cfg.evaluation.threshold), report

    # ---- attribution

    def attribution_rows(self, design: StudyDesign, n: int) -> np.ndarray:
        te = np.flatnonzero(self.features(design).split == "test")
        rng = np.random.default_rng([self.cfg.seed, 43])
        return np.sort(rng.choice(te, size=min(n, len(te)), replace=False))

    def attribute(self, kind: str, design: StudyDesign, columns=None, n_samples: int | None = None):
        a = self.cfg.attribution
        fm = self.features(design)
        model = self.fit(kind, design, columns)
        X = fm.X if columns is None else fm.X[:, np.asarray(columns)]
        names = fm.names if columns is None else [fm.names[i] for i in columns]
        rows = self.attribution_rows(design, n_samples or a.n_samples)
        train_rows = np.flatnonzero(fm.split == "train")
        bg = attr.background_sample(X[train_rows], a.background_size, self.cfg.seed)
        atts = attr.explain(model, X[rows], bg, fm.person_id[rows], a.ig_steps, a.ig_baseline,
                            a.n_permutations, self.cfg.seed, fm.schema_hash)
        return atts, attr.aggregate(atts, names)

    # ---- composite evaluations

    def ensemble(self, design: StudyDesign, kinds=("lr", "gbt", "highway")) -> EnsembleResult:
        fm = self.features(design)
        train_rows = np.flatnonzero(fm.split == "train")
        rng = np.random.default_rng([self.cfg.seed, 47])
        n_val = int(round(self.cfg.evaluation.ensemble_val_fraction * len(train_rows)))
        val = np.zeros(len(fm.y), dtype=bool)
        val[rng.choice(train_rows, size=n_val, replace=False)] = True
        fit_rows = (fm.split == "train") & ~val
        members, val_auc, test_auc, val_probs = [], {}, {}, []
        for k in kinds:
            m = self.fit(k, design, rows=fit_rows, tag="ensemble-fit")
            members.append(m)
            val_probs.append(m.predict(fm.X[val]))
            val_auc[k] = auc(val_probs[-1], fm.y[val])
            test_auc[k] = auc(*self.test_scores(m, design))
        recipes = {"auc_margin": auc_weights([val_auc[k] for k in kinds]),
                   "val_search": search_weights(val_probs, fm.y[val])}
        chosen = self.cfg.evaluation.ensemble_weighting
        sens = {name: auc(*self.test_scores(EnsembleModel(members, w), design)) for name, w in recipes.items()}
        ens = EnsembleModel(members, recipes[chosen])
        return EnsembleResult(test_auc, val_auc, dict(zip(kinds, ens.weights.tolist())),
                              sens[chosen], ens, chosen, sens)

    def skewed(self, kind: str, design: StudyDesign, prevalence: float | None = None) -> dict:
        """Balanced vs prevalence-skewed test metrics for one fitted model."""
        p = prevalence or self.cfg.evaluation.skew_prevalence
        fm = self.features(design)
        model = self.fit(kind, design)
        te = fm.test
        s = model.predict(te.X)
        bal = threshold_metrics(s, te.y, self.cfg.evaluation.threshold)
        test_members = self.members[self.members["split"] == "test"]
        sk = skew_test_set(test_members, p, self.cfg.seed)
        mask = np.isin(te.person_id, sk["person_id"].to_numpy())
        skm = threshold_metrics(s[mask], te.y[mask], self.cfg.evaluation.threshold)
        prev = float(te.y[mask].mean())
        return {"balanced": bal, "skewed": skm, "prevalence": prev,
                "ppv_bayes": bayes_ppv(bal.sensitivity, bal.specificity, prev)}

    def slices(self, kind: str, design: StudyDesign):
        fm = self.features(design)
        model = self.fit(kind, design)
        s, y = self.test_scores(model, design)
        tm = self.members[self.members["split"] == "test"].reset_index(drop=True)
        return slice_metrics(s, y, tm, self.tables.persons, self.cfg.evaluation.slices,
                             self.cfg.evaluation.threshold)

    def histogram(self, kind: str, design: StudyDesign) -> pd.DataFrame:
        s, y = self.test_scores(self.fit(kind, design), design)
        return probability_histogram(s, y, self.cfg.evaluation.histogram_bin_width)
