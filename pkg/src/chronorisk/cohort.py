"""Case labeling, cohort selection, control matching and out-of-time split."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .codemap import map_icd10, map_icd9
from .errors import CohortError, ConfigError

log = logging.getLogger(__name__)

AGE_BUCKETS = ["20-29", "30-39", "40-49", "50-59", "60-69", "70-79", "80-89", "90+"]
COHORT_COLUMNS = ["person_id", "label", "prediction_date", "current_date", "split", "stratum"]


@dataclass(frozen=True)
class LabelingRule:
    """Stand-in for the registry's case definition.

    A person is a case once ``n_claims`` qualifying physician claims fall
    within ``claim_window_years``, or on a single qualifying hospitalization.
    """
    n_claims: int = 2
    claim_window_years: float = 2.0
    hospitalization_qualifies: bool = True

    def __post_init__(self):
        if self.n_claims < 1:
            raise ConfigError("n_claims must be >= 1")
        if self.claim_window_years <= 0:
            raise ConfigError("claim_window_years must be positive")


@dataclass
class Labels:
    diagnosis_date: pd.Series                                   # person_id -> Timestamp
    flagged: dict[int, str] = field(default_factory=dict)       # person_id -> reason


@dataclass
class ExclusionReport:
    n_labeled: int = 0
    n_selected: int = 0
    excluded: dict[str, int] = field(default_factory=dict)
    n_not_sampled: int = 0
    control_shortfall: dict[str, int] = field(default_factory=dict)
    n_controls: int = 0

    def to_json(self) -> dict:
        return asdict(self)


def age_bucket(age) -> np.ndarray:
    age = np.asarray(age)
    idx = np.clip((age - 20) // 10, 0, len(AGE_BUCKETS) - 1).astype(int)
    out = np.array(AGE_BUCKETS, dtype=object)[idx]
    return np.where(age < 20, "under-20", out)


def shift_years(dates, years: int) -> pd.Series:
    """Same calendar day ``years`` earlier (Feb 29 falls back to Feb 28)."""
    s = pd.Series(pd.to_datetime(dates))
    if years == 0:
        return s
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", pd.errors.PerformanceWarning)
        return s - pd.DateOffset(years=int(years))


# ---------------------------------------------------------------- labeling

def qualifying_events(observations: pd.DataFrame) -> pd.DataFrame:
    """Diabetes-coded claims (OHIP/ICD-9) and hospitalizations (DAD/ICD-10)."""
    dx = observations[observations["column"] == "dx"]
    parts = []
    for source, mapper, kind in (("OHIP", map_icd9, "claim"), ("DAD", map_icd10, "hospitalization")):
        rows = dx[dx["source"] == source]
        codes = rows["token"].unique()
        hits = {c for c in codes if c and mapper(c) == "diabetes"}
        rows = rows[rows["token"].isin(hits)]
        parts.append(pd.DataFrame({"person_id": rows["person_id"].to_numpy(),
                                   "date": rows["date"].to_numpy(), "kind": kind}))
    ev = pd.concat(parts, ignore_index=True)
    return ev.sort_values(["person_id", "date", "kind"], kind="mergesort").reset_index(drop=True)


def label_individuals(observations: pd.DataFrame, rule: LabelingRule = LabelingRule()) -> Labels:
    """Diagnosis date = earliest event completing ``rule``.

    Persons are flagged when their record is internally inconsistent:
    ``rule-violation`` for a qualifying claim isolated more than one claim
    window before the diagnosis (ambiguous onset), ``unconfirmed`` for
    qualifying events that never complete the rule.
    """
    ev = qualifying_events(observations)
    window = np.timedelta64(int(round(rule.claim_window_years * 365.25)), "D")
    diag: dict[int, pd.Timestamp] = {}
    flagged: dict[int, str] = {}
    for pid, g in ev.groupby("person_id", sort=True):
        claims = g.loc[g["kind"] == "claim", "date"].to_numpy()
        best = None
        n = rule.n_claims
        for i in range(n - 1, len(claims)):
            if claims[i] - claims[i - n + 1] <= window:
                best = claims[i]
                break
        if rule.hospitalization_qualifies:
            hosp = g.loc[g["kind"] == "hospitalization", "date"].to_numpy()
            if len(hosp) and (best is None or hosp[0] < best):
                best = hosp[0]
        if best is None:
            flagged[int(pid)] = "unconfirmed"
            continue
        diag[int(pid)] = pd.Timestamp(best)
        if len(claims) and (best - claims[0]) > window:
            flagged[int(pid)] = "rule-violation"
    series = pd.Series(diag, dtype="datetime64[ns]", name="diagnosis_date")
    series.index.name = "person_id"
    return Labels(series, flagged)


# ---------------------------------------------------------------- selection

def select_cohort(persons: pd.DataFrame, labels: Labels, sample_fraction: float = 1.0,
                  year_range: tuple[int, int] = (2008, 2017), min_age: int = 20,
                  seed: int = 0) -> tuple[pd.DataFrame, ExclusionReport]:
    """Eligible, sampled cases with ``prediction_date`` = diagnosis date."""
    if not 0.0 < sample_fraction <= 1.0:
        raise ConfigError("sample_fraction must be in (0, 1]")
    report = ExclusionReport(n_labeled=len(labels.diagnosis_date))
    birth = persons.set_index("person_id")["birth_year"]
    keep = []
    reasons = {"rule-violation": 0, "out-of-range-year": 0, "under-age": 0}
    for pid, date in labels.diagnosis_date.sort_index().items():
        if labels.flagged.get(pid) == "rule-violation":
            reasons["rule-violation"] += 1
        elif not year_range[0] <= date.year <= year_range[1]:
            reasons["out-of-range-year"] += 1
        elif date.year - birth[pid] < min_age:
            reasons["under-age"] += 1
        else:
            keep.append((pid, date))
    report.excluded = reasons
    if not keep:
        raise CohortError("no eligible cases")
    cases = pd.DataFrame(keep, columns=["person_id", "prediction_date"])
    if sample_fraction < 1.0:
        rng = np.random.default_rng([seed, 11])
        mask = rng.random(len(cases)) < sample_fraction
        report.n_not_sampled = int((~mask).sum())
        cases = cases[mask].reset_index(drop=True)
        if cases.empty:
            raise CohortError("sampling left no cases")
    report.n_selected = len(cases)
    return cases, report


def _stratum(age, gender) -> np.ndarray:
    return np.char.add(np.char.add(age_bucket(age).astype(str), "|"), np.asarray(gender, dtype=str))


def case_strata(cases: pd.DataFrame, persons: pd.DataFrame) -> pd.Series:
    p = persons.set_index("person_id").loc[cases["person_id"]]
    age = cases["prediction_date"].dt.year.to_numpy() - p["birth_year"].to_numpy()
    return pd.Series(_stratum(age, p["gender"].to_numpy()), index=cases.index)


def match_controls(cases: pd.DataFrame, persons: pd.DataFrame, labels: Labels,
                   seed: int = 0, report: ExclusionReport | None = None) -> pd.DataFrame:
    """Draw controls stratum-by-stratum (age decade x gender at prediction date).

    Each control gets a prediction date sampled from the case diagnosis
    dates of its stratum, then a never-diagnosed, unflagged person whose
    age at that date falls in the stratum's decade.
    """
    rng = np.random.default_rng([seed, 17])
    excluded = set(labels.diagnosis_date.index) | set(labels.flagged)
    pool = persons[~persons["person_id"].isin(excluded)].sort_values("person_id")
    # gender -> birth_year -> shuffled unused ids
    avail: dict[str, dict[int, list[int]]] = {}
    for (g, by), grp in pool.groupby(["gender", "birth_year"], sort=True):
        ids = grp["person_id"].to_numpy().copy()
        rng.shuffle(ids)
        avail.setdefault(g, {})[int(by)] = list(ids)

    strata = case_strata(cases, persons)
    out = []
    shortfall = {}
    for key in sorted(strata.unique()):
        bucket, gender = key.split("|")
        lo = int(bucket[:2])
        hi = lo + 9 if not bucket.endswith("+") else 200
        dates = cases.loc[strata == key].sort_values("person_id")["prediction_date"].to_numpy()
        need = len(dates)
        by_gender = avail.get(gender, {})
        missing = 0
        for _ in range(need):
            picked = None
            for _attempt in range(20):
                d = pd.Timestamp(dates[rng.integers(len(dates))])
                years = [y for y in range(d.year - hi, d.year - lo + 1) if by_gender.get(y)]
                if not years:
                    continue
                counts = np.array([len(by_gender[y]) for y in years], dtype=float)
                y = years[rng.choice(len(years), p=counts / counts.sum())]
                picked = (by_gender[y].pop(), d)
                break
            if picked is None:
                missing += 1
            else:
                out.append((picked[0], picked[1], key))
        if missing:
            shortfall[key] = missing
            log.warning("control pool exhausted for stratum %s: %d short", key, missing)
    if report is not None:
        report.control_shortfall = shortfall
        report.n_controls = len(out)
    return pd.DataFrame(out, columns=["person_id", "prediction_date", "stratum"])


def split_out_of_time(members: pd.DataFrame, test_years: tuple[int, int] = (2016, 2017)) -> pd.DataFrame:
    """Assign train/test purely from the prediction year."""
    year = members["prediction_date"].dt.year
    out = members.copy()
    out["split"] = np.where((year >= test_years[0]) & (year <= test_years[1]), "test", "train")
    return out


def assemble_members(cases: pd.DataFrame, controls: pd.DataFrame, persons: pd.DataFrame,
                     buffer_years: int = 1, test_years: tuple[int, int] = (2016, 2017)) -> pd.DataFrame:
    c = cases.copy()
    c["label"] = 1
    c["stratum"] = case_strata(cases, persons).to_numpy()
    k = controls.copy()
    k["label"] = 0
    members = pd.concat([c, k], ignore_index=True)
    overlap = set(c["person_id"]) & set(k["person_id"])
    if overlap:
        raise CohortError(f"{len(overlap)} persons are both case and control")
    members = members.sort_values("person_id", kind="mergesort").reset_index(drop=True)
    members = split_out_of_time(members, test_years)
    members["current_date"] = shift_years(members["prediction_date"], buffer_years).to_numpy()
    return members[COHORT_COLUMNS]


def with_buffer(members: pd.DataFrame, buffer_years: int) -> pd.DataFrame:
    out = members.copy()
    out["current_date"] = shift_years(out["prediction_date"], buffer_years).to_numpy()
    return out


def skew_test_set(test_members: pd.DataFrame, target_prevalence: float, seed: int = 0) -> pd.DataFrame:
    """Downsample cases (all controls kept) to ``target_prevalence``."""
    cases = test_members[test_members["label"] == 1]
    controls = test_members[test_members["label"] == 0]
    if not 0.0 < target_prevalence < 1.0:
        raise ConfigError("target_prevalence must be in (0, 1)")
    n_keep = int(round(target_prevalence / (1.0 - target_prevalence) * len(controls)))
    if n_keep > len(cases):
        raise ConfigError(
            f"prevalence {target_prevalence} needs {n_keep} cases but only {len(cases)} exist")
    if n_keep == len(cases):
        return test_members.copy()
    rng = np.random.default_rng([seed, 23])
    keep = rng.choice(cases.index.to_numpy(), size=n_keep, replace=False)
    out = pd.concat([test_members.loc[np.sort(keep)], controls])
    return out.sort_values("person_id", kind="mergesort")


def build_cohort(tables, rule: LabelingRule = LabelingRule(), sample_fraction: float = 1.0,
                 year_range=(2008, 2017), min_age: int = 20, buffer_years: int = 1,
                 test_years=(2016, 2017), seed: int = 0) -> tuple[pd.DataFrame, ExclusionReport]:
    labels = label_individuals(tables.observations, rule)
    cases, report = select_cohort(tables.persons, labels, sample_fraction, year_range, min_age, seed)
    controls = match_controls(cases, tables.persons, labels, seed, report)
    return assemble_members(cases, controls, tables.persons, buffer_years, test_years), report


def write_cohort(members: pd.DataFrame, report: ExclusionReport, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    members[COHORT_COLUMNS].to_csv(out / "cohort.csv", index=False, date_format="%Y-%m-%d",
                                   lineterminator="\n")
    (out / "exclusions.json").write_text(json.dumps(report.to_json(), indent=1, sort_keys=True))


def read_cohort(path: str | Path) -> pd.DataFrame:
    return pd.read_csv(path, parse_dates=["prediction_date", "current_date"])
