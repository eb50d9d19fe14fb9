"""Experiment configuration (JSON) and its canonical hash."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .cohort import LabelingRule
from .errors import ConfigError
from .featurize import StudyDesign
from .synthgen import GeneratorConfig

DATA_DIR_ENV = "CHRONORISK_DATA_DIR"


@dataclass
class CohortSettings:
    sample_fraction: float = 1.0
    year_range: tuple[int, int] = (2008, 2017)
    min_age: int = 20
    test_years: tuple[int, int] = (2016, 2017)


@dataclass
class AttributionSettings:
    background_size: int = 100
    n_samples: int = 200
    ig_steps: int = 256
    ig_baseline: str = "zero"        # or "train_mean"
    n_permutations: int = 64
    top_k: int = 5


@dataclass
class EvaluationSettings:
    threshold: float = 0.5
    slices: tuple[str, ...] = ("age", "gender", "country")
    sweep_kinds: tuple[str, ...] = ("gbt",)
    sweep_w: tuple[int, ...] = (1, 3, 5, 10)
    sweep_b: tuple[int, ...] = tuple(range(1, 11))
    sweep_modes: tuple[str, ...] = ("avg", "concat")
    ablation_kind: str = "gbt"
    ablation_groups: tuple[str, ...] = ("all", "fixed", "chronic", "DAD", "ERCLAIM", "NACRS", "ODB", "OHIP", "OLIS")
    topk: tuple = (1, 5, 10, 15, "all")
    skew_prevalence: float = 0.08
    ensemble_val_fraction: float = 0.1
    ensemble_weighting: str = "auc_margin"     # or "val_search"
    histogram_bin_width: float = 0.05


@dataclass
class ExperimentConfig:
    data_dir: str = "data"
    out_dir: str = "out"
    seed: int = 20200214
    threads: int = 1
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    labeling: LabelingRule = field(default_factory=LabelingRule)
    cohort: CohortSettings = field(default_factory=CohortSettings)
    reference_design: StudyDesign = field(default_factory=StudyDesign)
    designs: list[StudyDesign] = field(default_factory=lambda: [StudyDesign()])
    models: dict[str, dict] = field(default_factory=lambda: {"lr": {}, "gbt": {}, "highway": {}})
    attribution: AttributionSettings = field(default_factory=AttributionSettings)
    evaluation: EvaluationSettings = field(default_factory=EvaluationSettings)

    def validate(self) -> None:
        from .models import make_params

        self.generator.validate()
        for kind, hyper in self.models.items():
            make_params(kind, hyper)
        if not 0.0 < self.evaluation.skew_prevalence < 1.0:
            raise ConfigError("skew_prevalence must be in (0, 1)")
        if self.evaluation.ensemble_weighting not in ("auc_margin", "val_search"):
            raise ConfigError("ensemble_weighting must be 'auc_margin' or 'val_search'")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.attribution.ig_baseline not in ("zero", "train_mean"):
            raise ConfigError("ig_baseline must be 'zero' or 'train_mean'")

    # ---- serialization

    def to_json(self) -> dict:
        d = {
            "data_dir": self.data_dir,
            "out_dir": self.out_dir,
            "seed": self.seed,
            "threads": self.threads,
            "generator": self.generator.to_json(),
            "labeling": asdict(self.labeling),
            "cohort": _lists(asdict(self.cohort)),
            "reference_design": asdict(self.reference_design),
            "designs": [asdict(x) for x in self.designs],
            "models": self.models,
            "attribution": asdict(self.attribution),
            "evaluation": _lists(asdict(self.evaluation)),
        }
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ExperimentConfig":
        known = {"data_dir", "out_dir", "seed", "threads", "generator", "labeling", "cohort",
                 "reference_design", "designs", "models", "attribution", "evaluation"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        cfg = cls()
        for k in ("data_dir", "out_dir", "seed", "threads"):
            if k in d:
                setattr(cfg, k, d[k])
        try:
            if "generator" in d:
                cfg.generator = GeneratorConfig.from_json(d["generator"])
            if "labeling" in d:
                cfg.labeling = LabelingRule(**d["labeling"])
            if "cohort" in d:
                cfg.cohort = CohortSettings(**_tuples(d["cohort"]))
            if "reference_design" in d:
                cfg.reference_design = StudyDesign(**d["reference_design"])
            if "designs" in d:
                cfg.designs = [StudyDesign(**x) for x in d["designs"]]
            if "models" in d:
                cfg.models = {k: dict(v) for k, v in d["models"].items()}
            if "attribution" in d:
                cfg.attribution = AttributionSettings(**d["attribution"])
            if "evaluation" in d:
                cfg.evaluation = EvaluationSettings(**_tuples(d["evaluation"]))
        except TypeError as exc:
            raise ConfigError(f"bad config: {exc}") from exc
        cfg.validate()
        return cfg

    @property
    def hash(self) -> str:
        """Hash of everything except run-location fields."""
        d = self.to_json()
        for k in ("data_dir", "out_dir", "threads"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        cfg = ExperimentConfig.from_json(self.to_json())
        cfg.seed = seed
        cfg.generator.seed = seed
        return cfg


def _lists(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    cfg = ExperimentConfig.from_json(json.loads(path.read_text()))
    # env var supplies the data dir when the config leaves it unset
    if "data_dir" not in json.loads(path.read_text()) and os.environ.get(DATA_DIR_ENV):
        cfg.data_dir = os.environ[DATA_DIR_ENV]
    return cfg
