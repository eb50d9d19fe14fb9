"""Command-line entry point: one subcommand per pipeline stage.

Layout under the output directory::

    data/                     generator tables (unless data_dir is absolute)
    cohort/                   cohort.csv, exclusions.json
    features/schema.json      vocabularies fitted on the train split
    features/<design>/        features.csv, labels.csv
    models/<design>/<kind>.json
    evaluate/  attribute/  ablate/  sweep/  report/
    manifests/<stage>.json    per-stage fragment: config hash, schema hash, artifact digests
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import attribution as attr
from .cohort import read_cohort, write_cohort
from .config import ExperimentConfig, load_config
from .errors import ChronoriskError, ContractViolation, MissingArtifactError
from .evaluate import CellResult, dataset_ablation, results_frame, sweep, topk_ablation, write_results
from .featurize import FeatureSchema, StudyDesign, load_matrix, save_matrix
from .models import load_model, save_model

log = logging.getLogger("chronorisk")

STAGES = ("generate", "cohort", "featurize", "train", "evaluate", "attribute", "ablate", "sweep", "report")


# ---------------------------------------------------------------- paths and manifests

class Workspace:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        data = Path(cfg.data_dir)
        self.data = data if data.is_absolute() else self.out / data

    def path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def design_dir(self, stage: str, design: StudyDesign) -> Path:
        return self.path(stage, design.key)

    def require(self, path: Path, stage: str) -> Path:
        if not path.exists():
            raise MissingArtifactError(path, stage)
        return path

    # ---- loaders with stage-aware errors

    def tables(self):
        from .synthgen import read_tables

        self.require(self.data / "persons.csv", "generate")
        return read_tables(self.data)

    def members(self) -> pd.DataFrame:
        return read_cohort(self.require(self.path("cohort", "cohort.csv"), "cohort"))

    def schema(self) -> FeatureSchema:
        return FeatureSchema.load(self.require(self.path("features", "schema.json"), "featurize"))

    def runner(self, with_features: bool = False, with_models: bool = False):
        from .experiment import Runner

        # upstream first, so the error names the earliest missing stage
        tables, members = self.tables(), self.members()
        schema = self.schema() if (with_features or with_models) else None
        r = Runner(self.cfg, tables, members, schema)
        if with_features:
            for d in self.cfg.designs:
                r.put_features(self.matrix(d, schema))
        if with_models:
            for d in self.cfg.designs:
                for kind in self.cfg.models:
                    r.put_model(kind, d, self.model(d, kind, schema))
        return r

    def matrix(self, design: StudyDesign, schema: FeatureSchema):
        d = self.design_dir("features", design)
        self.require(d / "labels.csv", "featurize")
        frag = self.read_manifest("featurize")
        if frag.get("schema_hash") != schema.hash:
            raise ContractViolation(
                f"features were built with schema {frag.get('schema_hash')}, schema file is {schema.hash}")
        return load_matrix(d, schema, design)

    def model(self, design: StudyDesign, kind: str, schema: FeatureSchema):
        path = self.require(self.design_dir("models", design) / f"{kind}.json", "train")
        return load_model(path, expected_schema_hash=schema.hash)

    # ---- manifests

    def read_manifest(self, stage: str) -> dict:
        return json.loads(self.require(self.path("manifests", f"{stage}.json"), stage).read_text())

    def write_manifest(self, stage: str, files: list[Path], schema_hash: str | None = None,
                       cells: list[CellResult] | None = None, extra: dict | None = None) -> None:
        d = {
            "stage": stage,
            "config_hash": self.cfg.hash,
            "schema_hash": schema_hash,
            "seed": self.cfg.seed,
            "config": self.cfg.to_json() | {"data_dir": None, "out_dir": None, "threads": None},
            "artifacts": {_rel(p, self.out): _digest(p) for p in sorted(files)},
        }
        if cells is not None:
            d["cells"] = {"total": len(cells), "failed": sum(c.status != "ok" for c in cells)}
        if extra:
            d.update(extra)
        path = self.path("manifests", f"{stage}.json")
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(d, indent=1, sort_keys=True) + "\n")


def _rel(p: Path, root: Path) -> str:
    try:
        return str(p.relative_to(root))
    except ValueError:
        return str(p)


def _digest(p: Path) -> str:
    return hashlib.sha256(p.read_bytes()).hexdigest()


def _csv(df: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")
    return path


# ---------------------------------------------------------------- stages

def stage_generate(ws: Workspace) -> int:
    from .synthgen import generate, write_tables

    tables = generate(ws.cfg.generator, threads=ws.cfg.threads)
    files = write_tables(tables, ws.data)
    ws.write_manifest("generate", files, extra={"n_individuals": len(tables.persons)})
    return 0


def stage_cohort(ws: Workspace) -> int:
    from .cohort import build_cohort

    tables = ws.tables()
    c = ws.cfg.cohort
    members, report = build_cohort(tables, ws.cfg.labeling, c.sample_fraction, c.year_range, c.min_age,
                                   ws.cfg.reference_design.b, c.test_years, ws.cfg.seed)
    out = ws.path("cohort")
    write_cohort(members, report, out)
    ws.write_manifest("cohort", [out / "cohort.csv", out / "exclusions.json"],
                      extra={"n_members": len(members), "n_cases": int(members["label"].sum())})
    return 0


def stage_featurize(ws: Workspace) -> int:
    r = ws.runner()
    schema_path = ws.path("features", "schema.json")
    schema_path.parent.mkdir(parents=True, exist_ok=True)
    r.schema.save(schema_path)
    files = [schema_path]
    for d in ws.cfg.designs:
        fm = r.features(d)
        out = ws.design_dir("features", d)
        save_matrix(fm, out)
        files += [out / "features.csv", out / "labels.csv"]
    ws.write_manifest("featurize", files, r.schema.hash,
                      extra={"fixed_dim": r.schema.fixed_dim, "temporal_dim": r.schema.temporal_dim})
    return 0


def stage_train(ws: Workspace) -> int:
    r = ws.runner(with_features=True)
    files, cells = [], []
    for d in ws.cfg.designs:
        out = ws.design_dir("models", d)
        out.mkdir(parents=True, exist_ok=True)
        for kind in ws.cfg.models:
            cell = CellResult(kind, d.mode, d.w, d.b, arm="train")
            try:
                save_model(r.fit(kind, d), out / f"{kind}.json", r.schema.hash)
                files.append(out / f"{kind}.json")
            except ChronoriskError as exc:
                log.error("training %s on %s failed: %s", kind, d.key, exc)
                cell.status, cell.reason = "failed", f"{type(exc).__name__}: {exc}"
            cells.append(cell)
    ws.write_manifest("train", files, r.schema.hash, cells)
    return _status(cells)


def stage_evaluate(ws: Workspace) -> int:
    r = ws.runner(with_features=True, with_models=True)
    ev = ws.cfg.evaluation
    cells, files = [], []
    kinds = list(ws.cfg.models)
    for d in ws.cfg.designs:
        for kind in kinds:
            cells.append(_cell(kind, d, "test", lambda: r.evaluate_design(kind, d)))
            sk = {}

            def skewed():
                sk.update(r.skewed(kind, d, ev.skew_prevalence))
                return sk["skewed"]

            cell = _cell(kind, d, f"skewed:{ev.skew_prevalence:g}", skewed)
            if sk:
                cell.extra.update(prevalence=sk["prevalence"], ppv_bayes=sk["ppv_bayes"])
            cells.append(cell)
            try:
                for m in r.slices(kind, d):
                    dim, bucket = m.slice_key
                    cells.append(CellResult(kind, d.mode, d.w, d.b, f"slice:{dim}={bucket}", m,
                                            extra={"flag": m.flag}))
                hist = r.histogram(kind, d)
                files.append(_csv(hist, ws.path("evaluate", f"histogram_{d.key}_{kind}.csv")))
            except ChronoriskError as exc:
                cells.append(CellResult(kind, d.mode, d.w, d.b, "slices", status="failed",
                                        reason=f"{type(exc).__name__}: {exc}"))
        if len(kinds) > 1:
            res = {}

            def ens():
                res["e"] = r.ensemble(d, tuple(kinds))
                return r_metrics(r, res["e"].model, d)

            cell = _cell("ensemble", d, "test", ens)
            if res:
                e = res["e"]
                cell.extra.update({f"weight_{k}": w for k, w in e.weights.items()})
                cell.extra["weighting"] = e.recipe
                cell.extra.update({f"{name}_auc": v for name, v in e.sensitivity.items()})
            cells.append(cell)
    files.append(ws.path("evaluate", "results.csv"))
    ws.path("evaluate").mkdir(parents=True, exist_ok=True)
    write_results(cells, files[-1])
    ws.write_manifest("evaluate", files, r.schema.hash, cells)
    return _status(cells)


def r_metrics(r, model, design):
    from .evaluate import threshold_metrics

    s, y = r.test_scores(model, design)
    return threshold_metrics(s, y, r.cfg.evaluation.threshold)


def stage_attribute(ws: Workspace) -> int:
    r = ws.runner(with_features=True, with_models=True)
    k = ws.cfg.attribution.top_k
    files, cells = [], []
    for d in ws.cfg.designs:
        out = ws.design_dir("attribute", d)
        out.mkdir(parents=True, exist_ok=True)
        for kind in ws.cfg.models:
            cell = CellResult(kind, d.mode, d.w, d.b, arm="attribute")
            try:
                atts, report = r.attribute(kind, d)
                attr.save_attributions(atts, out / f"{kind}_phi.csv")
                report.to_csv(out / f"{kind}_report.csv")
                attr.grouped(report).to_csv(out / f"{kind}_report_grouped.csv")
                files += [out / f"{kind}_phi.csv", out / f"{kind}_report.csv", out / f"{kind}_report_grouped.csv"]
                cell.extra.update(top_features=";".join(attr.top_k(report, k)),
                                  max_residual=max(abs(a.residual) for a in atts))
            except ChronoriskError as exc:
                cell.status, cell.reason = "failed", f"{type(exc).__name__}: {exc}"
            cells.append(cell)
    files.append(ws.path("attribute", "results.csv"))
    write_results(cells, files[-1])
    ws.write_manifest("attribute", files, r.schema.hash, cells)
    return _status(cells)


def read_report(path: Path, names: list[str]) -> attr.AttributionReport:
    df = pd.read_csv(path)
    pos = {n: i for i, n in enumerate(names)}
    if set(df["feature_name"]) != set(names):
        raise ContractViolation(f"attribution report {path} does not match the feature schema")
    phi = np.zeros(len(names))
    phi[[pos[n] for n in df["feature_name"]]] = df["phi_sum_abs"].to_numpy()
    return attr.AttributionReport(names, phi, str(df["method"].iloc[0]), 0)


def stage_ablate(ws: Workspace) -> int:
    r = ws.runner(with_features=True, with_models=True)
    ev = ws.cfg.evaluation
    d = ws.cfg.reference_design
    kind = ev.ablation_kind
    report_path = ws.require(ws.design_dir("attribute", d) / f"{kind}_report.csv", "attribute")
    report = read_report(report_path, r.features(d).names)
    cells = dataset_ablation(r, kind, d, ev.ablation_groups, ws.cfg.attribution.top_k)
    cells += topk_ablation(r, kind, d, report, ev.topk)
    path = ws.path("ablate", "results.csv")
    path.parent.mkdir(parents=True, exist_ok=True)
    write_results(cells, path)
    ws.write_manifest("ablate", [path], r.schema.hash, cells)
    return _status(cells)


def stage_sweep(ws: Workspace) -> int:
    r = ws.runner()
    ws.require(ws.path("features", "schema.json"), "featurize")
    if r.schema.hash != ws.schema().hash:
        raise ContractViolation("schema rebuilt from the cohort differs from features/schema.json")
    ev = ws.cfg.evaluation
    cells = sweep(r, ev.sweep_kinds, ev.sweep_w, ev.sweep_b, ev.sweep_modes)
    path = ws.path("sweep", "results.csv")
    path.parent.mkdir(parents=True, exist_ok=True)
    write_results(cells, path)
    ws.write_manifest("sweep", [path], r.schema.hash, cells)
    return _status(cells)


def stage_report(ws: Workspace) -> int:
    frags = {}
    for stage in STAGES[:-1]:
        p = ws.path("manifests", f"{stage}.json")
        if p.exists():
            frags[stage] = json.loads(p.read_text())
    if not frags:
        raise MissingArtifactError(ws.path("manifests"), "generate")
    config_hashes = {f["config_hash"] for f in frags.values()}
    schema_hashes = {f["schema_hash"] for f in frags.values() if f.get("schema_hash")}
    if len(config_hashes) > 1 or len(schema_hashes) > 1:
        raise ContractViolation(f"manifests mix config hashes {sorted(config_hashes)} "
                                f"or schema hashes {sorted(schema_hashes)}; rerun the stale stages")
    if ws.cfg.hash not in config_hashes:
        raise ContractViolation(f"artifacts were produced with config {config_hashes.pop()}, "
                                f"not {ws.cfg.hash}")
    tables = []
    for stage in ("evaluate", "attribute", "ablate", "sweep"):
        p = ws.path(stage, "results.csv")
        if stage in frags and p.exists():
            df = pd.read_csv(p)
            df.insert(0, "stage", stage)
            tables.append(df)
    out = ws.path("report")
    out.mkdir(parents=True, exist_ok=True)
    files = []
    if tables:
        allres = pd.concat(tables, ignore_index=True)
        files.append(_csv(allres, out / "results.csv"))
        for name, df in summary_tables(allres).items():
            files.append(_csv(df, out / f"{name}.csv"))
    failed = sum(f.get("cells", {}).get("failed", 0) for f in frags.values())
    summary = {"config_hash": ws.cfg.hash, "schema_hash": schema_hashes.pop() if schema_hashes else None,
               "seed": ws.cfg.seed, "stages": sorted(frags), "failed_cells": failed,
               "fragments": {k: {"artifacts": v["artifacts"], "cells": v.get("cells")} for k, v in frags.items()}}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return 0 if failed == 0 else 1


def summary_tables(res: pd.DataFrame) -> dict[str, pd.DataFrame]:
    """Result views shaped like the usual reporting tables (percent scale)."""
    pct = ["auc", "accuracy", "sensitivity", "specificity", "ppv"]
    out = {}

    def view(mask, label_col, label_fn):
        df = res[mask].copy()
        df[label_col] = df.apply(label_fn, axis=1)
        for c in pct:
            df[c] = pd.to_numeric(df[c]) * 100.0
        return df[[label_col, "model", "mode", "w", "b"] + pct + ["n"]].reset_index(drop=True)

    ev = res["stage"] == "evaluate"
    m = ev & (res["arm"] == "test")
    if m.any():
        out["performance_test"] = view(m, "Model", lambda r: r["model"])
    m = ev & res["arm"].astype(str).str.startswith("skewed")
    if m.any():
        out["performance_skewed"] = view(m, "Model", lambda r: r["model"])
    m = ev & res["arm"].astype(str).str.startswith("slice:")
    if m.any():
        out["demographics"] = view(m, "Slice", lambda r: r["arm"][len("slice:"):])
    ab = res["stage"] == "ablate"
    m = ab & res["arm"].astype(str).str.startswith("dataset:")
    if m.any():
        out["dataset_pruning"] = view(m, "Dataset", lambda r: r["arm"][len("dataset:"):])
    m = ab & res["arm"].astype(str).str.startswith("topk:")
    if m.any():
        out["topk_features"] = view(m, "Top k", lambda r: r["arm"][len("topk:"):])
    return out


def _cell(kind, design, arm, fn) -> CellResult:
    cell = CellResult(kind, design.mode, design.w, design.b, arm=arm)
    try:
        cell.metrics = fn()
    except ChronoriskError as exc:
        log.error("%s %s %s failed: %s", kind, design.key, arm, exc)
        cell.status, cell.reason = "failed", f"{type(exc).__name__}: {exc}"
    return cell


def _status(cells) -> int:
    return 0 if all(c.status == "ok" for c in cells) else 1


RUNNERS = {
    "generate": stage_generate, "cohort": stage_cohort, "featurize": stage_featurize,
    "train": stage_train, "evaluate": stage_evaluate, "attribute": stage_attribute,
    "ablate": stage_ablate, "sweep": stage_sweep, "report": stage_report,
}


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="chronorisk", description="Temporal EHR risk-model pipeline.")
    p.add_argument("stage", choices=STAGES)
    p.add_argument("--config", required=True, help="experiment config (JSON)")
    p.add_argument("--seed", type=int, help="override the global seed")
    p.add_argument("--threads", type=int, help="cap on worker threads")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def configure(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.threads is not None:
        cfg.threads = args.threads
    if args.out is not None:
        cfg.out_dir = args.out
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = configure(args)
        from .experiment import set_threads

        set_threads(cfg.threads)
        return RUNNERS[args.stage](Workspace(cfg))
    except ChronoriskError as exc:
        print(f"chronorisk {args.stage}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
