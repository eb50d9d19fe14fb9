"""Metrics, demographic slices, probability histograms and the experiment grid."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from .cohort import AGE_BUCKETS, age_bucket
from .errors import ConfigError, MetricError

log = logging.getLogger(__name__)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC from midranks; ties count one half."""
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if len(s) != len(y):
        raise MetricError("scores and labels differ in length")
    n1 = int(y.sum())
    n0 = len(y) - n1
    if n1 == 0 or n0 == 0:
        raise MetricError("AUC needs both classes")
    r = rankdata(s)
    return float((r[y].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def auc_pairwise(scores, labels) -> float:
    """Exhaustive pair count; quadratic, for testing."""
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    pos, neg = s[y], s[~y]
    if len(pos) == 0 or len(neg) == 0:
        raise MetricError("AUC needs both classes")
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


@dataclass
class MetricsReport:
    auc: float | None
    accuracy: float | None
    sensitivity: float | None
    specificity: float | None
    ppv: float | None
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int
    n: int
    slice_key: tuple[str, str] | None = None
    flag: str | None = None

    def to_row(self) -> dict:
        d = asdict(self)
        key = d.pop("slice_key")
        d["slice_dimension"], d["slice_bucket"] = key if key else (None, None)
        return d


def _ratio(a, b):
    return a / b if b > 0 else None


def threshold_metrics(scores, labels, threshold: float = 0.5, slice_key=None) -> MetricsReport:
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    pred = s >= threshold
    tp = int((pred & y).sum())
    fp = int((pred & ~y).sum())
    tn = int((~pred & ~y).sum())
    fn = int((~pred & y).sum())
    a = auc(s, y) if 0 < y.sum() < len(y) else None
    return MetricsReport(a, _ratio(tp + tn, len(y)), _ratio(tp, tp + fn), _ratio(tn, tn + fp),
                         _ratio(tp, tp + fp), threshold, tp, fp, tn, fn, len(y), slice_key)


def bayes_ppv(sensitivity: float, specificity: float, prevalence: float) -> float:
    num = sensitivity * prevalence
    return num / (num + (1.0 - specificity) * (1.0 - prevalence))


def slice_metrics(scores, labels, members: pd.DataFrame, persons: pd.DataFrame,
                  dimensions=("age", "gender", "country"), threshold: float = 0.5,
                  min_n: int = 30) -> list[MetricsReport]:
    """One report per bucket; empty buckets come back flagged, small ones flagged too."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    p = persons.set_index("person_id").loc[members["person_id"].to_numpy()]
    out = []
    for dim in dimensions:
        if dim == "age":
            age = members["prediction_date"].dt.year.to_numpy() - p["birth_year"].to_numpy()
            keys = age_bucket(age)
            buckets = AGE_BUCKETS
        elif dim == "gender":
            keys = p["gender"].to_numpy()
            buckets = ["M", "F"]
        elif dim == "country":
            keys = p["country_of_origin"].astype(str).to_numpy()
            buckets = sorted(set(keys))
        else:
            raise MetricError(f"unknown slice dimension {dim!r}")
        for b in buckets:
            sel = keys == b
            if not sel.any():
                out.append(MetricsReport(None, None, None, None, None, threshold, 0, 0, 0, 0, 0,
                                         (dim, b), "empty"))
                continue
            r = threshold_metrics(s[sel], y[sel], threshold, (dim, b))
            if r.n < min_n:
                r.flag = "small"
            out.append(r)
    return out


def probability_histogram(scores, labels, bin_width: float = 0.05) -> pd.DataFrame:
    """Per-class counts over [0,1] bins; bin floor(s/width), last bin closed at 1."""
    s = np.asarray(scores, dtype=float)
    if ((s < 0) | (s > 1)).any():
        raise MetricError("scores must lie in [0, 1]")
    y = np.asarray(labels).astype(bool)
    nb_ = int(round(1.0 / bin_width))
    idx = np.minimum(np.floor(s / bin_width).astype(int), nb_ - 1)
    return pd.DataFrame({
        "bin_lo": np.arange(nb_) * bin_width,
        "bin_hi": (np.arange(nb_) + 1) * bin_width,
        "case": np.bincount(idx[y], minlength=nb_),
        "control": np.bincount(idx[~y], minlength=nb_),
    })


# ---------------------------------------------------------------- experiment grid

@dataclass
class CellResult:
    model: str
    mode: str
    w: int
    b: int
    arm: str = "grid"
    metrics: MetricsReport | None = None
    status: str = "ok"
    reason: str | None = None
    extra: dict = field(default_factory=dict)

    def to_row(self) -> dict:
        row = {"arm": self.arm, "model": self.model, "mode": self.mode, "w": self.w, "b": self.b,
               "status": self.status, "reason": self.reason}
        if self.metrics is not None:
            m = self.metrics
            row.update(auc=m.auc, accuracy=m.accuracy, sensitivity=m.sensitivity,
                       specificity=m.specificity, ppv=m.ppv, n=m.n)
        row.update(self.extra)
        return row


def results_frame(cells) -> pd.DataFrame:
    cols = ["arm", "model", "mode", "w", "b", "status", "reason", "auc", "accuracy", "sensitivity",
            "specificity", "ppv", "n"]
    df = pd.DataFrame([c.to_row() for c in cells])
    for c in cols:
        if c not in df:
            df[c] = None
    rest = [c for c in df.columns if c not in cols]
    return df[cols + rest]


def write_results(cells, path) -> None:
    results_frame(cells).to_csv(path, index=False, float_format="%.10g", lineterminator="\n")


def sweep(runner, kinds, ws=(1, 3, 5, 10), bs=tuple(range(1, 11)), modes=("avg", "concat")) -> list[CellResult]:
    """Every (kind, mode, w, b) cell; failures are isolated and reported."""
    from .featurize import StudyDesign

    out = []
    for kind in kinds:
        for mode in modes:
            for w in ws:
                for b in bs:
                    cell = CellResult(kind, mode, w, b)
                    try:
                        cell.metrics = runner.evaluate_design(kind, StudyDesign(w, b, mode))
                    except Exception as exc:  # isolate per-cell failures
                        log.exception("cell %s failed", (kind, mode, w, b))
                        cell.status, cell.reason = "failed", f"{type(exc).__name__}: {exc}"
                    out.append(cell)
    return out


ABLATION_GROUPS = ("all", "fixed", "chronic", "DAD", "ERCLAIM", "NACRS", "ODB", "OHIP", "OLIS")


def group_columns(names: list[str], group: str, fixed_dim: int) -> np.ndarray:
    """Columns belonging to a source group."""
    if group == "all":
        return np.arange(len(names))
    if group == "fixed":
        return np.arange(fixed_dim)
    prefix = "CHRONIC|" if group == "chronic" else f"{group}|"
    cols = np.array([i for i, n in enumerate(names) if i >= fixed_dim and n.startswith(prefix)], dtype=np.int64)
    if len(cols) == 0:
        raise ConfigError(f"ablation group {group!r} selects no columns")
    return cols


def dataset_ablation(runner, kind: str, design, groups=ABLATION_GROUPS, top: int = 5) -> list[CellResult]:
    out = []
    for g in groups:
        cell = CellResult(kind, design.mode, design.w, design.b, arm=f"dataset:{g}")
        try:
            m, report = runner.evaluate_columns(kind, design, group=g, attribute=True)
            cell.metrics = m
            if report is not None:
                from .attribution import top_k

                cell.extra["top_features"] = ";".join(top_k(report, top))
        except Exception as exc:
            log.exception("ablation group %s failed", g)
            cell.status, cell.reason = "failed", f"{type(exc).__name__}: {exc}"
        out.append(cell)
    return out


def topk_ablation(runner, kind: str, design, report, ks=(1, 5, 10, 15, "all")) -> list[CellResult]:
    """Retrain on the top-k attributed columns (ranking taken from ``report``)."""
    out = []
    n = len(report.names)
    for k in ks:
        kk = n if k == "all" else int(k)
        if kk > n:
            log.warning("top-k %d exceeds %d features; clamped", kk, n)
            kk = n
        cell = CellResult(kind, design.mode, design.w, design.b, arm=f"topk:{k}")
        try:
            cols = None if k == "all" else np.sort(report.ranking[:kk])
            cell.metrics, _ = runner.evaluate_columns(kind, design, columns=cols)
        except Exception as exc:
            log.exception("top-k %s failed", k)
            cell.status, cell.reason = "failed", f"{type(exc).__name__}: {exc}"
        out.append(cell)
    return out
