"""Synthetic multi-source health-administrative population.

Every person draws from two private random streams keyed by
``(seed, person_id, stage)``, so output does not depend on how persons are
split across workers.  A latent risk score decides who is diagnosed;
a handful of planted features drift toward a diseased regime as the
diagnosis date approaches (exponential decay looking backward), which is
what makes window/buffer effects measurable downstream.

Tables produced:

* ``persons``       person_id, birth_year, gender, country_of_origin, landing_date,
                    latitude, longitude, lhin, rurality, deprivation_quintile
* ``observations``  person_id, source, date, column, token, value
* ``chronic``       person_id, disease, year, date, incidence, prevalence
* ``diagnoses``     person_id, diagnosis_date, route   (ground truth)
* ``latent``        person_id, latent_risk             (ground truth)
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ConfigError

log = logging.getLogger(__name__)

SOURCES = ("OLIS", "DAD", "NACRS", "ODB", "OHIP", "ERCLAIM")
DISEASES = ("Asthma", "CHF", "COPD", "HYPER", "OCCC", "ORAD")
DOMESTIC = "Canada"

OBS_COLUMNS = ["person_id", "source", "date", "column", "token", "value"]

# name -> (mean, sd) of a healthy result
LABS = {
    "4548-4": (5.5, 0.4),      # HbA1c %
    "71875-9": (37.0, 4.5),    # HbA1c mmol/mol
    "14771-0": (5.2, 0.5),     # fasting glucose
    "14749-6": (5.6, 0.8),     # random glucose
    "2093-3": (5.0, 0.9), "13457-7": (3.0, 0.8), "2085-9": (1.4, 0.35),
    "2571-8": (1.5, 0.7), "2160-0": (80.0, 18.0), "1742-6": (25.0, 10.0),
    "718-7": (140.0, 14.0), "3016-3": (2.0, 1.0), "2823-3": (4.2, 0.35),
    "2951-2": (140.0, 2.5), "6690-2": (7.0, 1.8), "777-3": (250.0, 55.0),
    "33914-3": (85.0, 18.0), "14959-1": (1.5, 1.0), "2276-4": (100.0, 60.0),
    "1989-3": (75.0, 25.0), "1988-5": (4.0, 4.0), "1975-2": (10.0, 4.0),
    "6301-6": (1.0, 0.1), "2857-1": (1.5, 1.2),
}
LAB_WEIGHTS = {"4548-4": 10, "71875-9": 5, "14771-0": 8, "14749-6": 10}

ICD9_POOL = {
    "401": 6, "272": 5, "300": 4, "724": 5, "780": 4, "786": 3, "465": 4, "477": 2,
    "530": 2, "564": 2, "599": 2, "692": 3, "706": 1.5, "715": 4, "719": 3, "V70": 4,
    "V22": 1, "2449": 1.5, "2859": 1, "311": 3, "296": 1.5, "345": 0.5, "346": 1.5,
    "32723": 0.3, "78053": 0.2, "7906": 0.5, "5718": 0.2, "278": 1, "414": 2, "427": 1.5,
    "428": 1, "493": 2, "496": 1, "008": 1, "079": 1.5, "174": 0.5, "185": 0.5, "626": 1,
    "650": 0.5, "616": 1, "847": 2, "959": 1, "E849": 0.2, "V65": 1,
}
ICD9_RARE = ("011 047 115 152 203 229 242 263 288 318 334 359 376 388 394 435 447 508 "
             "527 555 577 607 634 677 685 701 733 747 757 771").split()
ICD10_POOL = {
    "I10": 3, "I25": 2, "I50": 1.5, "J18": 2, "J44": 1.5, "K80": 1.5, "K35": 1, "N39": 1.5,
    "R07": 2, "R10": 2.5, "S72": 1, "S06": 1, "O80": 1, "Z51": 2, "F32": 1, "M54": 1.5,
    "M17": 1, "C34": 0.5, "C50": 0.5, "D64": 1, "G45": 0.5, "H25": 0.5, "H66": 0.5,
    "L03": 1, "A41": 0.5, "B34": 0.5, "E78": 1.5, "E03": 0.5, "Q21": 0.1, "P07": 0.1,
    "U07": 0.05, "V43": 0.2, "W19": 0.5, "T78": 0.3,
}
ICD10_RARE = ("A09 B02 C18 C61 D50 D12 E86 F10 G40 H40 H81 I48 I63 J45 K21 K57 L40 M81 N18 "
              "N20 O99 R55 S52 T81 Z96").split()
DRUGS = {
    "atorvastatin": 4, "rosuvastatin": 3, "ramipril": 3, "amlodipine": 3,
    "hydrochlorothiazide": 2, "levothyroxine": 2, "omeprazole": 2, "pantoprazole": 2,
    "salbutamol": 1.5, "fluticasone": 1, "acetaminophen_codeine": 1, "amoxicillin": 1.5,
    "ciprofloxacin": 0.8, "sertraline": 1, "citalopram": 1, "lorazepam": 0.8,
    "warfarin": 0.8, "furosemide": 1, "metoprolol": 1.5, "bisoprolol": 1,
    "allopurinol": 0.7, "prednisone": 0.8,
}
DRUGS_RARE = [f"drug_r{i:02d}" for i in range(1, 16)]
LHINS = {
    # token: (lat, lon, weight)
    "Erie St. Clair": (42.3, -82.4, 4.5), "South West": (43.0, -81.2, 7.0),
    "Waterloo Wellington": (43.5, -80.5, 5.5), "Hamilton Niagara": (43.2, -79.8, 10.0),
    "Central West": (43.7, -79.8, 6.5), "Mississauga Halton": (43.6, -79.7, 8.5),
    "Toronto Central": (43.7, -79.4, 9.0), "Central": (43.9, -79.4, 13.0),
    "Central East": (43.9, -78.9, 11.0), "South East": (44.3, -76.5, 3.5),
    "Champlain": (45.4, -75.7, 9.5), "North Simcoe Muskoka": (44.6, -79.4, 3.5),
    "North East": (46.5, -81.0, 4.5), "North West": (48.4, -89.2, 1.7),
}
COUNTRIES = {
    "India": 0.05, "China": 0.045, "Philippines": 0.035, "Pakistan": 0.025,
    "Sri Lanka": 0.02, "United Kingdom": 0.02, "Italy": 0.015, "Jamaica": 0.015,
    "Portugal": 0.01, "Poland": 0.01, "Vietnam": 0.01, "Iran": 0.01, "Guyana": 0.008,
    "Korea": 0.006, "Bangladesh": 0.006, "Mexico": 0.004, "Nigeria": 0.004,
}
SOUTH_ASIAN = {"India", "Pakistan", "Sri Lanka", "Bangladesh", "Guyana"}
CHRONIC_HAZARD = {"Asthma": 0.006, "CHF": 0.003, "COPD": 0.005, "HYPER": 0.02,
                  "OCCC": 0.0006, "ORAD": 0.0012}


@dataclass
class SourceSpec:
    rate: float                      # events per covered person-year
    coverage: float                  # fraction of persons present in the source
    available_since: int
    sparsity_target: float | None = None  # avg non-zero features per yearly vector, if pinned


@dataclass
class SignalSpec:
    feature: str    # "SOURCE|column|token"
    effect: float   # numeric keys: shift in healthy-sd units; categorical: log weight boost


def default_sources() -> dict[str, SourceSpec]:
    return {
        "OLIS": SourceSpec(rate=2.5, coverage=0.8, available_since=2006),
        "DAD": SourceSpec(rate=0.12, coverage=0.6, available_since=1989),
        "NACRS": SourceSpec(rate=0.4, coverage=0.7, available_since=1999),
        "ODB": SourceSpec(rate=3.0, coverage=0.45, available_since=1990),
        "OHIP": SourceSpec(rate=4.0, coverage=0.92, available_since=1990),
        "ERCLAIM": SourceSpec(rate=0.35, coverage=0.65, available_since=1991),
    }


def default_signal() -> list[SignalSpec]:
    return [
        SignalSpec("OLIS|loinc|4548-4", 3.0),
        SignalSpec("OLIS|loinc|14771-0", 2.6),
        SignalSpec("OLIS|loinc|14749-6", 2.6),
        SignalSpec("OLIS|loinc|71875-9", 2.6),
        SignalSpec("OHIP|dx|401", 2.0),
    ]


@dataclass
class GeneratorConfig:
    n_individuals: int = 20000
    disease_prevalence: float = 0.5
    seed: int = 20200214
    year_range: tuple[int, int] = (1998, 2017)
    study_years: tuple[int, int] = (2008, 2017)
    test_years: tuple[int, int] = (2016, 2017)
    test_year_weight: float = 0.65
    pre_study_fraction: float = 0.1
    young_fraction: float = 0.02
    violation_rate: float = 0.04
    stray_claim_rate: float = 0.02
    hospitalization_route: float = 0.15
    sources: dict[str, SourceSpec] = field(default_factory=default_sources)
    signal_spec: list[SignalSpec] = field(default_factory=default_signal)
    decay_half_life: float = 3.5
    latent_scale: float = 4.6          # sd of the risk logit
    predisposition: float = 0.25       # time-constant share of the planted effect
    chunk_size: int = 500

    def validate(self) -> None:
        if self.n_individuals < 1:
            raise ConfigError("n_individuals must be positive")
        if not 0.0 < self.disease_prevalence < 1.0:
            raise ConfigError("disease_prevalence must be in (0, 1)")
        if self.decay_half_life <= 0:
            raise ConfigError("decay_half_life must be positive")
        if not self.signal_spec:
            raise ConfigError("at least one informative feature is required")
        if self.year_range[0] > self.year_range[1]:
            raise ConfigError("year_range is reversed")
        for s in self.signal_spec:
            parts = s.feature.split("|")
            if len(parts) != 3 or parts[0] not in SOURCES:
                raise ConfigError(f"bad signal feature id {s.feature!r}")
        for name, spec in self.sources.items():
            if name not in SOURCES:
                raise ConfigError(f"unknown source {name!r}")
            if spec.rate < 0 or not 0.0 <= spec.coverage <= 1.0:
                raise ConfigError(f"{name}: rate must be >= 0 and coverage in [0, 1]")
            if spec.sparsity_target is not None:
                ceiling = _max_nonzero(name)
                if spec.sparsity_target < 0 or spec.sparsity_target > ceiling:
                    raise ConfigError(
                        f"{name}: sparsity target {spec.sparsity_target} unattainable "
                        f"(at most {ceiling} non-zero features per yearly vector)")
                if spec.sparsity_target > 0 and (spec.rate == 0 or spec.coverage == 0):
                    raise ConfigError(f"{name}: sparsity target > 0 with no events")

    def to_json(self) -> dict:
        d = asdict(self)
        d["year_range"] = list(self.year_range)
        d["study_years"] = list(self.study_years)
        d["test_years"] = list(self.test_years)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "GeneratorConfig":
        d = dict(d)
        if "sources" in d:
            base = default_sources()
            for k, v in d["sources"].items():
                base[k] = SourceSpec(**v)
            d["sources"] = base
        if "signal_spec" in d:
            d["signal_spec"] = [SignalSpec(**s) for s in d["signal_spec"]]
        for k in ("year_range", "study_years", "test_years"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def _max_nonzero(source: str) -> int:
    # mean+max per emittable token or numeric column, plus the count column
    n = {
        "OLIS": len(LABS) + 3,
        "DAD": len(ICD10_POOL) + len(ICD10_RARE) + 4 + 1,
        "NACRS": len(ICD10_POOL) + len(ICD10_RARE) + 2,
        "ODB": len(DRUGS) + len(DRUGS_RARE) + 1 + 2,
        "OHIP": len(ICD9_POOL) + len(ICD9_RARE) + 6 + 1,
        "ERCLAIM": 4 + 4 + 1,
    }[source]
    return 2 * n + 1


@dataclass
class Tables:
    persons: pd.DataFrame
    observations: pd.DataFrame
    chronic: pd.DataFrame
    diagnoses: pd.DataFrame
    latent: pd.DataFrame


# ---------------------------------------------------------------- helpers

class _Cat:
    """Weighted categorical sampler with optional per-event log-boosts on some tokens."""

    def __init__(self, weights: dict[str, float], rare: list[str] = (), rare_weight: float = 0.05):
        toks = list(weights) + list(rare)
        w = np.array(list(weights.values()) + [rare_weight] * len(rare), dtype=float)
        self.tokens = np.array(toks, dtype=object)
        self.w = w / w.sum()
        self.index = {t: i for i, t in enumerate(toks)}

    def draw(self, rng: np.random.Generator, n: int, boosts: list[tuple[int, np.ndarray]] = ()):
        if n == 0:
            return self.tokens[:0]
        if not boosts:
            return self.tokens[rng.choice(len(self.w), size=n, p=self.w)]
        # per-event reweighting of the boosted tokens only
        base = np.broadcast_to(self.w, (n, len(self.w))).copy()
        for idx, logboost in boosts:
            base[:, idx] *= np.exp(logboost)
        base /= base.sum(axis=1, keepdims=True)
        u = rng.random(n)
        choice = (base.cumsum(axis=1) < u[:, None]).sum(axis=1)
        return self.tokens[np.minimum(choice, len(self.w) - 1)]


_OHIP_DX = _Cat(ICD9_POOL, ICD9_RARE)
_ICD10_DX = _Cat(ICD10_POOL, ICD10_RARE)
_DRUG = _Cat(DRUGS, DRUGS_RARE, 0.06)
_LAB = _Cat({k: LAB_WEIGHTS.get(k, 2.0) for k in LABS})
_OHIP_LOC = _Cat({"O": 0.6, "H": 0.15, "E": 0.05, "C": 0.1, "L": 0.05, "X": 0.05})
_ER_LOC = _Cat({"E": 0.7, "H": 0.2, "O": 0.08, "X": 0.02})
_ER_SPEC = _Cat({"family": 0.5, "emergency": 0.35, "internal": 0.1, "other": 0.05})
_ADMIT = _Cat({"U": 0.6, "E": 0.3, "S": 0.05, "N": 0.05})
_YESNO_RARE = _Cat({"no": 0.97, "yes": 0.03})
_COUNTRY = _Cat({DOMESTIC: 1.0 - sum(COUNTRIES.values()), **COUNTRIES})
_LHIN = _Cat({k: v[2] for k, v in LHINS.items()})

_EPOCH = np.datetime64("1970-01-01", "D")


_YEARS = np.arange(1850, 2101)
_YEAR_STARTS = (np.array([f"{y}-01-01" for y in _YEARS], dtype="datetime64[D]") - _EPOCH).astype(np.int64)
_YEAR_LENS = np.diff(np.append(_YEAR_STARTS, (np.datetime64("2101-01-01", "D") - _EPOCH).astype(np.int64)))


def _year_start(y: int) -> int:
    return int(_YEAR_STARTS[y - 1850])


def _days_in_year(y: int) -> int:
    return int(_YEAR_LENS[y - 1850])


def _random_days(rng, years: np.ndarray) -> np.ndarray:
    idx = np.asarray(years, dtype=np.int64) - 1850
    return _YEAR_STARTS[idx] + (rng.random(len(idx)) * _YEAR_LENS[idx]).astype(np.int64)


def _signal_index(cfg: GeneratorConfig) -> dict[tuple[str, str], dict[str, float]]:
    out: dict[tuple[str, str], dict[str, float]] = {}
    for s in cfg.signal_spec:
        src, col, tok = s.feature.split("|")
        out.setdefault((src, col), {})[tok] = s.effect
    return out


# ---------------------------------------------------------------- phase 1: latent draws

def _person_latent(seed: int, pid: int, cfg: GeneratorConfig) -> dict:
    rng = np.random.default_rng([seed, pid, 0])
    gender = "F" if rng.random() < 0.5 else "M"
    ref_year = cfg.study_years[0] + 4
    if rng.random() < cfg.young_fraction:
        age = int(rng.integers(8, 19))
    else:
        age = int(np.clip(round(rng.triangular(24, 55, 92)), 24, 95))
    birth_year = ref_year - age
    country = str(_COUNTRY.draw(rng, 1)[0])
    landing = None
    if country != DOMESTIC:
        y = int(rng.integers(max(birth_year + 1, 1960), cfg.study_years[0] + 3))
        landing = int(_random_days(rng, np.array([y]))[0])
    lhin = str(_LHIN.draw(rng, 1)[0])
    lat, lon, _ = LHINS[lhin]
    lat += rng.normal(0, 0.25)
    lon += rng.normal(0, 0.35)
    rural = bool(rng.random() < 0.15)
    dep = int(rng.integers(1, 6))
    z = rng.standard_normal(3)
    # risk logit: dominated by latent traits, modest demographic tilt
    s = cfg.latent_scale * (0.8 * z[0] + 0.6 * z[1]) / 1.0
    s += 0.012 * (age - 55) + 0.15 * (dep - 3) + (0.6 if country in SOUTH_ASIAN else 0.0)
    s += 0.2 * (lhin in ("Central", "Central East", "Central West", "Mississauga Halton"))
    return dict(person_id=pid, birth_year=birth_year, gender=gender, country_of_origin=country,
                landing_day=landing, latitude=round(lat, 5), longitude=round(lon, 5), lhin=lhin,
                rurality=rural, deprivation_quintile=dep, z=z, score=s)


def _calibrate_offset(scores: np.ndarray, prevalence: float) -> float:
    lo, hi = -50.0, 50.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.mean(1.0 / (1.0 + np.exp(-(scores + mid)))) < prevalence:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------- phase 2: events

def _person_events(seed: int, p: dict, risk: float, cfg: GeneratorConfig, sig) -> dict:
    rng = np.random.default_rng([seed, p["person_id"], 1])
    pid = p["person_id"]
    y0, y1 = cfg.year_range
    diagnosed = rng.random() < risk
    diag_day = None
    route = None
    if diagnosed:
        if rng.random() < cfg.pre_study_fraction:
            dy = int(rng.integers(y0 + 2, cfg.study_years[0]))
        else:
            years = np.arange(cfg.study_years[0], cfg.study_years[1] + 1)
            w = np.where((years >= cfg.test_years[0]) & (years <= cfg.test_years[1]),
                         cfg.test_year_weight, 1.0)
            dy = int(rng.choice(years, p=w / w.sum()))
        diag_day = int(_random_days(rng, np.array([dy]))[0])
        route = "hospitalization" if rng.random() < cfg.hospitalization_route else "claims"
    severity = float(rng.lognormal(0.0, 0.25)) if diagnosed else 0.0
    # time-constant predisposition, correlated with the risk score
    predis = cfg.predisposition * (0.7 * p["z"][0] + 0.7 * rng.standard_normal())
    half = cfg.decay_half_life

    def intensity(days: np.ndarray) -> np.ndarray:
        base = np.full(len(days), predis)
        if diag_day is None:
            return base
        gap = (diag_day - days) / 365.25
        return base + severity * np.exp(-math.log(2.0) * np.clip(gap, 0.0, None) / half)

    rows = {k: [] for k in OBS_COLUMNS}

    def emit(src, days, column, tokens, values):
        n = len(days)
        if n == 0:
            return
        rows["person_id"].append(np.full(n, pid, dtype=np.int64))
        rows["source"].append(np.full(n, src, dtype=object))
        rows["date"].append(np.asarray(days, dtype=np.int64))
        rows["column"].append(np.full(n, column, dtype=object))
        rows["token"].append(np.asarray(tokens, dtype=object))
        rows["value"].append(np.asarray(values, dtype=float))

    for src in SOURCES:
        spec = cfg.sources[src]
        if rng.random() >= spec.coverage or spec.rate <= 0:
            continue
        mult = rng.gamma(4.0, 0.25)
        years = np.arange(max(y0, spec.available_since, p["birth_year"] + 16), y1 + 1)
        if src == "ODB":
            # drug benefits: seniors, plus a small always-eligible group
            if rng.random() > 0.15:
                years = years[years - p["birth_year"] >= 65]
        if len(years) == 0:
            continue
        counts = rng.poisson(spec.rate * mult, size=len(years))
        ev_years = np.repeat(years, counts)
        days = np.sort(_random_days(rng, ev_years))
        n = len(days)
        if n == 0:
            continue
        inten = intensity(days)
        if src == "OLIS":
            boosts = []
            lab = _LAB.draw(rng, n)
            vals = np.empty(n)
            offset = rng.standard_normal(len(LABS)) * 0.5
            for j, code in enumerate(LABS):
                m = lab == code
                if not m.any():
                    continue
                mean, sd = LABS[code]
                eff = sig.get(("OLIS", "loinc"), {}).get(code, 0.0)
                v = mean + sd * (offset[j] + 0.85 * rng.standard_normal(m.sum()) + eff * inten[m])
                vals[m] = np.maximum(v, 0.05 * mean)
            emit(src, days, "loinc", lab, np.round(vals, 3))
            means = np.array([LABS[c][0] for c in lab])
            sds = np.array([LABS[c][1] for c in lab])
            z = (vals - means) / sds
            rng_tok = np.where(z > 2.0, "high", np.where(z < -2.0, "low", "normal"))
            # only some labs report a reference-range flag
            flagged = rng.random(n) < 0.5
            emit(src, days[flagged], "range", rng_tok[flagged], np.ones(int(flagged.sum())))
        elif src == "OHIP":
            eff = sig.get(("OHIP", "dx"), {})
            boosts = [(_OHIP_DX.index[t], e * inten) for t, e in eff.items() if t in _OHIP_DX.index]
            emit(src, days, "dx", _OHIP_DX.draw(rng, n, boosts), np.ones(n))
            emit(src, days, "location", _OHIP_LOC.draw(rng, n), np.ones(n))
            emit(src, days, "fee", np.full(n, ""), np.round(rng.lognormal(3.5, 0.6, n), 2))
        elif src == "DAD":
            emit(src, days, "dx", _ICD10_DX.draw(rng, n), np.ones(n))
            emit(src, days, "admit", _ADMIT.draw(rng, n), np.ones(n))
            emit(src, days, "los", np.full(n, ""), rng.integers(1, 15, n).astype(float))
        elif src == "NACRS":
            emit(src, days, "dx", _ICD10_DX.draw(rng, n), np.ones(n))
            emit(src, days, "transfused", _YESNO_RARE.draw(rng, n), np.ones(n))
        elif src == "ODB":
            emit(src, days, "drug", _DRUG.draw(rng, n), np.ones(n))
            emit(src, days, "quantity", np.full(n, ""),
                 rng.choice([30.0, 60.0, 90.0, 100.0], n) + rng.integers(0, 3, n))
            emit(src, days, "ltc", _YESNO_RARE.draw(rng, n), np.ones(n))
        elif src == "ERCLAIM":
            emit(src, days, "location", _ER_LOC.draw(rng, n), np.ones(n))
            emit(src, days, "specialty", _ER_SPEC.draw(rng, n), np.ones(n))
            emit(src, days, "fee", np.full(n, ""), np.round(rng.lognormal(3.8, 0.5, n), 2))

    # labeling events (diabetes claims / hospitalization) and label noise
    last_day = _year_start(y1) + _days_in_year(y1) - 1
    if diagnosed:
        if route == "hospitalization":
            emit("DAD", [diag_day], "dx", ["E11.9"], [1.0])
        else:
            first = diag_day - int(rng.integers(20, 330))
            emit("OHIP", [first, diag_day], "dx", ["250", "250"], [1.0, 1.0])
        n_follow = int(rng.poisson(2.0 * max(0.0, (last_day - diag_day) / 365.25)))
        if n_follow:
            fdays = np.sort(diag_day + (rng.random(n_follow) * (last_day - diag_day)).astype(np.int64))
            emit("OHIP", fdays, "dx", ["250"] * n_follow, np.ones(n_follow))
        if rng.random() < cfg.violation_rate:
            # isolated early claim: ambiguous onset
            early = diag_day - int(rng.integers(3 * 365, 6 * 365))
            if early >= _year_start(y0):
                emit("OHIP", [early], "dx", ["250"], [1.0])
    elif rng.random() < cfg.stray_claim_rate:
        day = int(_random_days(rng, np.array([int(rng.integers(y0, y1 + 1))]))[0])
        emit("OHIP", [day], "dx", ["250"], [1.0])

    # chronic registries (yearly flags dated January 1st)
    chronic = []
    for d in DISEASES:
        h = CHRONIC_HAZARD[d] * math.exp(0.03 * (y0 - p["birth_year"] - 50))
        if d == "HYPER":
            h *= math.exp(0.3 * p["z"][0])
        elif d in ("Asthma", "ORAD"):
            h *= math.exp(0.25 * p["z"][1] + 0.4 * diagnosed)
        else:
            h *= math.exp(0.15 * p["z"][0])
        adult_years = max(0, y0 - max(p["birth_year"] + 18, 1960))
        inc_year = None
        if rng.random() < 1.0 - math.exp(-h * adult_years):
            inc_year = y0 - 1  # prevalent before the data window
        else:
            for y in range(max(y0, p["birth_year"] + 1), y1 + 1):
                if rng.random() < h:
                    inc_year = y
                    break
        if inc_year is not None:
            for y in range(max(inc_year, y0), y1 + 1):
                chronic.append((pid, d, y, y == inc_year, True))

    obs = {k: (np.concatenate(v) if v else np.array([], dtype=object)) for k, v in rows.items()}
    return dict(obs=obs, chronic=chronic, diag_day=diag_day, route=route)


def _days_to_dates(days) -> np.ndarray:
    return (_EPOCH + np.asarray(days, dtype=np.int64)).astype("datetime64[ns]")


def generate(config: GeneratorConfig, threads: int = 1) -> Tables:
    """Generate the full synthetic population for ``config``.

    The result is a pure function of the config; ``threads`` only changes
    wall time.
    """
    config.validate()
    pids = list(range(1, config.n_individuals + 1))
    chunks = [pids[i:i + config.chunk_size] for i in range(0, len(pids), config.chunk_size)]

    def run(fn, items):
        if threads <= 1:
            return [fn(c) for c in items]
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, items))

    latent_chunks = run(lambda c: [_person_latent(config.seed, pid, config) for pid in c], chunks)
    people = [p for chunk in latent_chunks for p in chunk]
    scores = np.array([p["score"] for p in people])
    offset = _calibrate_offset(scores, config.disease_prevalence)
    risk = 1.0 / (1.0 + np.exp(-(scores + offset)))
    sig = _signal_index(config)

    def events(chunk_idx):
        lo = chunk_idx * config.chunk_size
        return [_person_events(config.seed, people[lo + k], float(risk[lo + k]), config, sig)
                for k in range(len(chunks[chunk_idx]))]

    ev_chunks = run(events, range(len(chunks)))
    evs = [e for chunk in ev_chunks for e in chunk]

    persons = pd.DataFrame({
        "person_id": [p["person_id"] for p in people],
        "birth_year": [p["birth_year"] for p in people],
        "gender": [p["gender"] for p in people],
        "country_of_origin": [p["country_of_origin"] for p in people],
        "landing_date": pd.to_datetime(
            [None if p["landing_day"] is None else _days_to_dates([p["landing_day"]])[0]
             for p in people]),
        "latitude": [p["latitude"] for p in people],
        "longitude": [p["longitude"] for p in people],
        "lhin": [p["lhin"] for p in people],
        "rurality": [p["rurality"] for p in people],
        "deprivation_quintile": [p["deprivation_quintile"] for p in people],
    })

    cols = {k: [e["obs"][k] for e in evs if len(e["obs"]["person_id"])] for k in OBS_COLUMNS}
    obs = pd.DataFrame({k: (np.concatenate(v) if v else np.array([])) for k, v in cols.items()})
    if len(obs):
        obs["date"] = _days_to_dates(obs["date"].to_numpy())
        obs["person_id"] = obs["person_id"].astype(np.int64)
        obs["value"] = obs["value"].astype(float)
        obs["token"] = obs["token"].astype(str)
    else:
        obs = empty_observations()
    obs = obs.sort_values(["source", "person_id", "date", "column", "token"], kind="mergesort")
    obs = obs.reset_index(drop=True)

    chronic = pd.DataFrame([r for e in evs for r in e["chronic"]],
                           columns=["person_id", "disease", "year", "incidence", "prevalence"])
    chronic["date"] = pd.to_datetime(chronic["year"].astype(str) + "-01-01")
    chronic = chronic[["person_id", "disease", "year", "date", "incidence", "prevalence"]]

    diag = [(p["person_id"], e["diag_day"], e["route"]) for p, e in zip(people, evs)
            if e["diag_day"] is not None]
    diagnoses = pd.DataFrame({
        "person_id": np.array([d[0] for d in diag], dtype=np.int64),
        "diagnosis_date": _days_to_dates([d[1] for d in diag]),
        "route": [d[2] for d in diag],
    })
    latent = pd.DataFrame({"person_id": persons["person_id"], "latent_risk": risk})
    log.info("generated %d persons, %d observations, %d diagnosed",
             len(persons), len(obs), len(diagnoses))
    return Tables(persons, obs, chronic, diagnoses, latent)


def empty_observations() -> pd.DataFrame:
    return pd.DataFrame({
        "person_id": pd.Series([], dtype=np.int64),
        "source": pd.Series([], dtype=object),
        "date": pd.Series([], dtype="datetime64[ns]"),
        "column": pd.Series([], dtype=object),
        "token": pd.Series([], dtype=object),
        "value": pd.Series([], dtype=float),
    })


# ---------------------------------------------------------------- CSV I/O

_FLOAT_FMT = "%.10g"


def write_tables(tables: Tables, out_dir: str | Path) -> list[Path]:
    """Write persons.csv, chronic.csv, diagnoses.csv, latent.csv and obs_<SOURCE>.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(df, name):
        path = out / name
        df.to_csv(path, index=False, float_format=_FLOAT_FMT, date_format="%Y-%m-%d",
                  lineterminator="\n")
        written.append(path)

    put(tables.persons, "persons.csv")
    put(tables.chronic, "chronic.csv")
    put(tables.diagnoses, "diagnoses.csv")
    put(tables.latent, "latent.csv")
    for src in SOURCES:
        part = tables.observations[tables.observations["source"] == src]
        put(part[["person_id", "date", "column", "token", "value"]], f"obs_{src}.csv")
    return written


def read_tables(data_dir: str | Path) -> Tables:
    d = Path(data_dir)
    persons = pd.read_csv(d / "persons.csv", parse_dates=["landing_date"],
                          dtype={"country_of_origin": str, "lhin": str, "gender": str})
    chronic = pd.read_csv(d / "chronic.csv", parse_dates=["date"])
    diagnoses = pd.read_csv(d / "diagnoses.csv", parse_dates=["diagnosis_date"])
    latent = pd.read_csv(d / "latent.csv") if (d / "latent.csv").exists() else None
    parts = []
    for src in SOURCES:
        path = d / f"obs_{src}.csv"
        if not path.exists():
            continue
        part = pd.read_csv(path, parse_dates=["date"], dtype={"token": str, "column": str},
                           keep_default_na=False)
        part["value"] = part["value"].astype(float)
        part.insert(1, "source", src)
        parts.append(part)
    obs = pd.concat(parts, ignore_index=True) if parts else empty_observations()
    obs["token"] = obs["token"].astype(str)
    return Tables(persons, obs, chronic, diagnoses, latent)


def load_config(path: str | Path) -> GeneratorConfig:
    return GeneratorConfig.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- sparsity

def sparsity_report(observations: pd.DataFrame, schema, persons: pd.DataFrame | None = None,
                    chronic: pd.DataFrame | None = None,
                    years: tuple[int, int] = (2008, 2017)) -> dict[str, float]:
    """Average non-zero features per yearly feature vector, per source and in total.

    A yearly vector is one (person, calendar year) pair in ``years``.  Each
    distinct folded feature observed in a source-year contributes its mean
    and max column (2 non-zeros), plus 1 for the source's count column.
    Fixed and chronic blocks are reported when the tables are supplied.
    """
    from .featurize import fixed_block, fold_observations

    if persons is not None:
        pids = persons["person_id"].to_numpy()
    else:
        pids = observations["person_id"].unique()
    n_vectors = max(1, len(pids) * (years[1] - years[0] + 1))
    report: dict[str, float] = {}
    obs = observations[(observations["date"].dt.year >= years[0])
                       & (observations["date"].dt.year <= years[1])]
    obs = obs[obs["person_id"].isin(pids)]
    folded = fold_observations(obs, schema)
    for src in SOURCES:
        part = folded[folded["source"] == src]
        if len(part) == 0:
            report[src] = 0.0
            continue
        year = part["date"].dt.year
        keys = part.assign(year=year).drop_duplicates(["person_id", "year", "feature"])
        n_feat = 2 * len(keys)
        n_count = part.assign(year=year).drop_duplicates(["person_id", "year"]).shape[0]
        report[src] = (n_feat + n_count) / n_vectors
    if chronic is not None:
        c = chronic[(chronic["year"] >= years[0]) & (chronic["year"] <= years[1])
                    & chronic["person_id"].isin(pids)]
        report["chronic"] = float(c["prevalence"].astype(bool).sum() + c["incidence"].astype(bool).sum()) / n_vectors
    if persons is not None:
        fx = fixed_block(persons, schema, pd.Series(np.full(len(persons), np.datetime64(f"{years[0]}-01-01"))))
        report["fixed"] = fx.nnz / max(1, len(persons))
    report["total"] = float(sum(report.values()))
    return report
