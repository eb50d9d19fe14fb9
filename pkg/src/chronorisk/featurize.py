"""Windowed temporal featurization.

A member's history is cut into ``w`` one-year slots ending at the current
date (slot 0 is the most recent year).  Inside a slot every folded feature
contributes a mean and a max column, every source an observation-count
column, and the chronic registries their incidence/prevalence flags.  The
``w`` yearly blocks are then averaged or concatenated after the fixed
(demographic) block.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import scipy.sparse as sp

from .codemap import Vocabulary, build_vocab
from .errors import ContractViolation, LeakageError, SchemaError
from .synthgen import DISEASES, SOURCES

MODES = ("avg", "concat", "sequence")

# per-source (categorical %, meta-categorical %) thresholds, as fractions of rows
THRESHOLDS = {
    "ODD": (0.005, 0.0001),
    "OLIS": (0.001, 0.0005),
    "DAD": (0.005, 0.0005),
    "NACRS": (0.005, 0.0005),
    "ODB": (0.005, 0.0005),
    "OHIP": (0.005, 0.0005),
    "ERCLAIM": (0.005, 0.0005),
}
META_MAPS = {("OHIP", "dx"): "icd9", ("ERCLAIM", "dx"): "icd9",
             ("DAD", "dx"): "icd10", ("NACRS", "dx"): "icd10"}
FIXED_NUMERIC = ["age", "birth_year", "deprivation_quintile", "landing_year", "latitude", "longitude"]
FIXED_CATEGORICAL = ["country_of_origin", "gender", "lhin", "rurality"]
CHRONIC_SOURCE = "CHRONIC"


@dataclass(frozen=True)
class StudyDesign:
    w: int = 5
    b: int = 1
    mode: str = "avg"
    avg_denominator: str = "window"   # or "observed"

    def __post_init__(self):
        if self.w < 1 or self.b < 1:
            raise ContractViolation("window and buffer must be >= 1 year")
        if self.mode not in MODES:
            raise ContractViolation(f"mode must be one of {MODES}")
        if self.avg_denominator not in ("window", "observed"):
            raise ContractViolation("avg_denominator must be 'window' or 'observed'")

    @property
    def key(self) -> str:
        return f"w{self.w}_b{self.b}_{self.mode}"


@dataclass
class FeatureSchema:
    fixed_names: list[str]
    temporal_names: list[str]
    column_kinds: dict[str, str]                 # "SOURCE|column" -> cat | catval | num
    vocabs: dict[str, Vocabulary]                # "SOURCE|column" -> vocabulary (cat/catval)
    fixed_vocabs: dict[str, Vocabulary]
    feature_keys: list[str] = field(init=False)  # temporal feature id -> "SOURCE|column|token"

    def __post_init__(self):
        self.index = {n: i for i, n in enumerate(self.fixed_names + self.temporal_names)}
        self.temporal_index = {n: i for i, n in enumerate(self.temporal_names)}
        keys = []
        for n in self.temporal_names:
            if n.endswith("|mean"):
                keys.append(n[:-5])
        self.feature_keys = keys
        self._feature_id = {k: i for i, k in enumerate(keys)}

    @property
    def fixed_dim(self) -> int:
        return len(self.fixed_names)

    @property
    def temporal_dim(self) -> int:
        return len(self.temporal_names)

    def dim(self, design: StudyDesign) -> int:
        if design.mode == "concat":
            return self.fixed_dim + design.w * self.temporal_dim
        return self.fixed_dim + self.temporal_dim

    def names(self, design: StudyDesign) -> list[str]:
        if design.mode != "concat":
            return self.fixed_names + self.temporal_names
        out = list(self.fixed_names)
        for p in range(design.w):
            k = design.w - 1 - p
            out += [f"{n}@y{k}" for n in self.temporal_names]
        return out

    def feature_column(self, key: str, stat: str) -> int:
        """Temporal column of ``stat`` ("mean"/"max") for a folded feature key."""
        return self.temporal_index[f"{key}|{stat}"]

    def count_column(self, source: str) -> int:
        return self.temporal_index[f"{source}|count"]

    def fold(self, source: str, column: str, token: str) -> str | None:
        sc = f"{source}|{column}"
        kind = self.column_kinds.get(sc)
        if kind is None:
            return None
        if kind == "num":
            return f"{sc}|"
        return f"{sc}|{self.vocabs[sc].fold(token)}"

    def to_json(self) -> dict:
        return {
            "fixed_names": self.fixed_names,
            "temporal_names": self.temporal_names,
            "column_kinds": dict(sorted(self.column_kinds.items())),
            "vocabs": {k: v.to_json() for k, v in sorted(self.vocabs.items())},
            "fixed_vocabs": {k: v.to_json() for k, v in sorted(self.fixed_vocabs.items())},
        }

    @classmethod
    def from_json(cls, d: dict) -> "FeatureSchema":
        return cls(d["fixed_names"], d["temporal_names"], d["column_kinds"],
                   {k: Vocabulary.from_json(v) for k, v in d["vocabs"].items()},
                   {k: Vocabulary.from_json(v) for k, v in d["fixed_vocabs"].items()})

    @property
    def hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def save(self, path: str | Path, design: StudyDesign | None = None) -> None:
        d = self.to_json()
        d["hash"] = self.hash
        d["fixed_dim"] = self.fixed_dim
        d["temporal_dim"] = self.temporal_dim
        if design is not None:
            d["design"] = {"w": design.w, "b": design.b, "mode": design.mode,
                           "avg_denominator": design.avg_denominator}
            d["dim"] = self.dim(design)
        Path(path).write_text(json.dumps(d, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "FeatureSchema":
        return cls.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- schema

def _column_kind(values: np.ndarray, tokens: np.ndarray) -> str:
    if (tokens == "").all():
        return "num"
    if np.all(values == 1.0):
        return "cat"
    return "catval"


def build_schema(observations: pd.DataFrame, persons: pd.DataFrame, members: pd.DataFrame) -> FeatureSchema:
    """Fit vocabularies and column layout on the training members only.

    Rows considered are the train members' observations dated before their
    prediction date.
    """
    train = members[members["split"] == "train"]
    if train.empty:
        raise SchemaError("no training members")
    cut = train.set_index("person_id")["prediction_date"]
    obs = observations[observations["person_id"].isin(cut.index)]
    obs = obs[obs["date"].to_numpy() < cut.reindex(obs["person_id"]).to_numpy()]
    if obs.empty:
        raise SchemaError("training members have no observations")

    kinds: dict[str, str] = {}
    vocabs: dict[str, Vocabulary] = {}
    temporal: list[str] = []
    for src in SOURCES:
        part = obs[obs["source"] == src]
        if part.empty:
            continue
        src_names: list[str] = []
        for col in sorted(part["column"].unique()):
            rows = part[part["column"] == col]
            sc = f"{src}|{col}"
            kind = _column_kind(rows["value"].to_numpy(), rows["token"].to_numpy())
            kinds[sc] = kind
            if kind == "num":
                keys = [f"{sc}|"]
            else:
                cat_t, meta_t = THRESHOLDS.get(src, THRESHOLDS["DAD"])
                v = build_vocab(((src, col, t) for t in rows["token"].to_numpy()), cat_t, meta_t,
                                META_MAPS.get((src, col), "none"))
                vocabs[sc] = v
                keys = [f"{sc}|{t}" for t in v.output_tokens()]
            for k in keys:
                src_names += [f"{k}|mean", f"{k}|max"]
        temporal += src_names + [f"{src}|count"]
    for d in sorted(DISEASES):
        temporal += [f"{CHRONIC_SOURCE}|{d}|incidence", f"{CHRONIC_SOURCE}|{d}|prevalence"]

    tp = persons[persons["person_id"].isin(cut.index)]
    fixed_vocabs = {}
    fixed = list(FIXED_NUMERIC)
    cat_t, meta_t = THRESHOLDS["ODD"]
    for col in FIXED_CATEGORICAL:
        tokens = _fixed_tokens(tp, col)
        v = build_vocab((("RPDB", col, t) for t in tokens), cat_t, meta_t)
        fixed_vocabs[col] = v
        fixed += [f"{col}={t}" for t in v.output_tokens()]
    return FeatureSchema(fixed, temporal, kinds, vocabs, fixed_vocabs)


def _fixed_tokens(persons: pd.DataFrame, col: str) -> np.ndarray:
    if col == "rurality":
        return np.where(persons["rurality"].astype(bool), "yes", "no")
    return persons[col].astype(str).to_numpy()


# ---------------------------------------------------------------- fixed block

def fixed_block(persons: pd.DataFrame, schema: FeatureSchema, current_dates) -> sp.csr_matrix:
    """Demographic block, one row per entry of ``persons`` (aligned with ``current_dates``)."""
    current = pd.to_datetime(pd.Series(np.asarray(current_dates)))
    n = len(persons)
    cols = {name: i for i, name in enumerate(schema.fixed_names)}
    dense = np.zeros((n, schema.fixed_dim))
    cy = current.dt.year.to_numpy()
    dense[:, cols["age"]] = cy - persons["birth_year"].to_numpy()
    dense[:, cols["birth_year"]] = persons["birth_year"].to_numpy()
    dense[:, cols["deprivation_quintile"]] = persons["deprivation_quintile"].to_numpy()
    landing = pd.to_datetime(persons["landing_date"]).reset_index(drop=True)
    known = landing.notna().to_numpy() & (landing.to_numpy() < current.to_numpy())
    ly = np.where(known, landing.dt.year + (landing.dt.dayofyear - 1) / 365.25, 0.0)
    dense[:, cols["landing_year"]] = np.nan_to_num(ly)
    dense[:, cols["latitude"]] = persons["latitude"].to_numpy()
    dense[:, cols["longitude"]] = persons["longitude"].to_numpy()
    for col in FIXED_CATEGORICAL:
        v = schema.fixed_vocabs[col]
        folded = [v.fold(t) for t in _fixed_tokens(persons, col)]
        idx = np.array([cols[f"{col}={t}"] for t in folded], dtype=np.int64)
        dense[np.arange(n), idx] = 1.0
    return sp.csr_matrix(dense)


# ---------------------------------------------------------------- temporal rows

def fold_observations(observations: pd.DataFrame, schema: FeatureSchema) -> pd.DataFrame:
    """Attach the folded temporal feature id to every observation row.

    Returns ``person_id, source, date, feature, value`` with rows whose
    (source, column) is unknown to the schema dropped.
    """
    if observations.empty:
        return pd.DataFrame({"person_id": pd.Series([], dtype=np.int64),
                             "source": pd.Series([], dtype=object),
                             "date": pd.Series([], dtype="datetime64[ns]"),
                             "feature": pd.Series([], dtype=np.int64),
                             "value": pd.Series([], dtype=float)})
    grp = observations.groupby(["source", "column", "token"], sort=True)
    gid = grp.ngroup().to_numpy()
    combos = list(grp.groups.keys())
    lookup = np.full(len(combos), -1, dtype=np.int64)
    for i, (src, col, tok) in enumerate(combos):
        key = schema.fold(src, col, tok)
        if key is not None and key in schema._feature_id:
            lookup[i] = schema._feature_id[key]
    feat = lookup[gid]
    keep = feat >= 0
    return pd.DataFrame({
        "person_id": observations["person_id"].to_numpy()[keep],
        "source": observations["source"].to_numpy()[keep],
        "date": observations["date"].to_numpy()[keep],
        "feature": feat[keep],
        "value": observations["value"].to_numpy()[keep].astype(float),
    })


def year_slot(dates, current_dates) -> np.ndarray:
    """Slot k such that ``current - (k+1)y <= date < current - k*y`` (anniversary steps).

    Dates on or after the current date get negative slots.
    """
    d = pd.DatetimeIndex(np.asarray(dates, dtype="datetime64[ns]"))
    c = pd.DatetimeIndex(np.asarray(current_dates, dtype="datetime64[ns]"))
    dy = c.year.to_numpy() - d.year.to_numpy()
    md_d = d.month.to_numpy() * 100 + d.day.to_numpy()
    md_c = c.month.to_numpy() * 100 + c.day.to_numpy()
    slot = dy - (md_d >= md_c).astype(np.int64)
    before = d.to_numpy() < c.to_numpy()
    return np.where(before, np.maximum(slot, 0), -1)


@dataclass
class WindowRows:
    """Observation/chronic rows routed to (member, slot)."""
    member: np.ndarray
    slot: np.ndarray
    date: np.ndarray
    column: np.ndarray      # temporal column for "mean" (obs) or flag column (chronic)
    source: np.ndarray      # source index into SOURCES, -1 for chronic
    value: np.ndarray
    is_obs: np.ndarray


def select_window(folded: pd.DataFrame, chronic: pd.DataFrame | None, members: pd.DataFrame,
                  design: StudyDesign, schema: FeatureSchema) -> WindowRows:
    """Rows of each member's ``w``-year window ending strictly before the current date."""
    pos = pd.Series(np.arange(len(members)), index=members["person_id"].to_numpy())
    cur = members["current_date"].to_numpy(dtype="datetime64[ns]")
    src_idx = {s: i for i, s in enumerate(SOURCES)}

    f = folded[folded["person_id"].isin(pos.index)]
    m = pos.reindex(f["person_id"]).to_numpy()
    slot = year_slot(f["date"].to_numpy(), cur[m])
    keep = (slot >= 0) & (slot < design.w)
    mean_col = np.array([schema.temporal_index[f"{k}|mean"] for k in schema.feature_keys], dtype=np.int64)
    parts = [dict(member=m[keep], slot=slot[keep], date=f["date"].to_numpy()[keep],
                  column=mean_col[f["feature"].to_numpy()[keep]],
                  source=np.array([src_idx[s] for s in f["source"].to_numpy()[keep]], dtype=np.int64),
                  value=f["value"].to_numpy()[keep], is_obs=np.ones(keep.sum(), dtype=bool))]

    if chronic is not None and len(chronic):
        c = chronic[chronic["person_id"].isin(pos.index)]
        cm = pos.reindex(c["person_id"]).to_numpy()
        cslot = year_slot(c["date"].to_numpy(), cur[cm])
        ck = (cslot >= 0) & (cslot < design.w)
        c = c[ck]
        for flag in ("incidence", "prevalence"):
            on = c[flag].astype(bool).to_numpy()
            cols = np.array([schema.temporal_index[f"{CHRONIC_SOURCE}|{d}|{flag}"]
                             for d in c["disease"].to_numpy()[on]], dtype=np.int64)
            n = int(on.sum())
            parts.append(dict(member=cm[ck][on], slot=cslot[ck][on], date=c["date"].to_numpy()[on],
                              column=cols, source=np.full(n, -1, dtype=np.int64),
                              value=np.ones(n), is_obs=np.zeros(n, dtype=bool)))
    return WindowRows(**{k: np.concatenate([p[k] for p in parts]) for k in parts[0]})


def check_window(rows: WindowRows, members: pd.DataFrame, design: StudyDesign) -> None:
    """Hard failure on any row outside its member's window."""
    cur = members["current_date"].to_numpy(dtype="datetime64[ns]")[rows.member]
    dates = rows.date.astype("datetime64[ns]")
    future = dates >= cur
    if future.any():
        i = int(np.argmax(future))
        raise LeakageError(
            f"observation dated {pd.Timestamp(dates[i]).date()} is not before current date "
            f"{pd.Timestamp(cur[i]).date()} (member row {int(rows.member[i])})")
    slot = year_slot(dates, cur)
    bad = (slot != rows.slot) | (slot >= design.w)
    if bad.any():
        raise ContractViolation("row routed to a slot outside the observation window")


def aggregate_window(rows: WindowRows, n_members: int, schema: FeatureSchema,
                     design: StudyDesign) -> list[sp.csr_matrix]:
    """Yearly blocks (slot 0 = most recent), each ``n_members x temporal_dim``."""
    T = schema.temporal_dim
    w = design.w
    ent_r, ent_c, ent_v = [], [], []

    obs = rows.is_obs
    if obs.any():
        key = (rows.member[obs] * w + rows.slot[obs]) * T + rows.column[obs]
        val = rows.value[obs]
        order = np.argsort(key, kind="stable")
        key, val = key[order], val[order]
        starts = np.flatnonzero(np.r_[True, key[1:] != key[:-1]])
        sums = np.add.reduceat(val, starts)
        cnts = np.diff(np.r_[starts, len(key)])
        maxs = np.maximum.reduceat(val, starts)
        k = key[starts]
        row, col = k // T, k % T
        ent_r += [row, row]
        ent_c += [col, col + 1]
        ent_v += [sums / cnts, maxs]
        # observation rows per source-year
        count_col = np.array([schema.temporal_index.get(f"{s}|count", -1) for s in SOURCES], dtype=np.int64)
        ckey = (rows.member[obs] * w + rows.slot[obs]) * len(SOURCES) + rows.source[obs]
        uk, uc = np.unique(ckey, return_counts=True)
        ent_r.append(uk // len(SOURCES))
        ent_c.append(count_col[uk % len(SOURCES)])
        ent_v.append(uc.astype(float))
    chron = ~obs
    if chron.any():
        ent_r.append(rows.member[chron] * w + rows.slot[chron])
        ent_c.append(rows.column[chron])
        ent_v.append(rows.value[chron])

    if ent_r:
        r = np.concatenate(ent_r)
        c = np.concatenate(ent_c)
        v = np.concatenate(ent_v)
    else:
        r = c = np.zeros(0, dtype=np.int64)
        v = np.zeros(0)
    member, slot = r // w, r % w
    blocks = []
    for k in range(w):
        sel = slot == k
        m = sp.coo_matrix((v[sel], (member[sel], c[sel])), shape=(n_members, T)).tocsr()
        m.sum_duplicates()
        m.eliminate_zeros()
        blocks.append(m)
    return blocks


def assemble_blocks(fixed: sp.csr_matrix, blocks: list[sp.csr_matrix], design: StudyDesign):
    """Final design matrix from the fixed block and the yearly blocks (slot 0 newest)."""
    oldest_first = blocks[::-1]
    if design.mode == "concat":
        return sp.hstack([fixed] + oldest_first, format="csr")
    if design.mode == "sequence":
        return fixed, oldest_first
    total = oldest_first[0].copy()
    for b in oldest_first[1:]:
        total = total + b
    if design.avg_denominator == "window":
        temporal = total / design.w
    else:
        seen = np.zeros(total.shape[0])
        for b in oldest_first:
            seen += (b.getnnz(axis=1) > 0)
        temporal = sp.diags(1.0 / np.maximum(seen, 1.0)) @ total
    return sp.hstack([fixed, sp.csr_matrix(temporal)], format="csr")


@dataclass
class FeatureMatrix:
    X: sp.csr_matrix | tuple
    y: np.ndarray
    person_id: np.ndarray
    split: np.ndarray
    design: StudyDesign
    schema_hash: str
    names: list[str]

    def subset(self, mask) -> "FeatureMatrix":
        mask = np.asarray(mask)
        return FeatureMatrix(self.X[mask], self.y[mask], self.person_id[mask], self.split[mask],
                             self.design, self.schema_hash, self.names)

    @property
    def train(self) -> "FeatureMatrix":
        return self.subset(self.split == "train")

    @property
    def test(self) -> "FeatureMatrix":
        return self.subset(self.split == "test")

    def select_columns(self, cols) -> "FeatureMatrix":
        cols = np.asarray(cols, dtype=np.int64)
        return FeatureMatrix(self.X[:, cols], self.y, self.person_id, self.split, self.design,
                             self.schema_hash, [self.names[i] for i in cols])


class Featurizer:
    """Caches the folded observation table so several designs can be built cheaply."""

    def __init__(self, tables, schema: FeatureSchema):
        self.tables = tables
        self.schema = schema
        self.folded = fold_observations(tables.observations, schema)

    def window_rows(self, members: pd.DataFrame, design: StudyDesign) -> WindowRows:
        return select_window(self.folded, self.tables.chronic, members, design, self.schema)

    def build(self, members: pd.DataFrame, design: StudyDesign, rows: WindowRows | None = None) -> FeatureMatrix:
        from .cohort import with_buffer

        members = with_buffer(members, design.b).reset_index(drop=True)
        if rows is None:
            rows = self.window_rows(members, design)
        check_window(rows, members, design)
        blocks = aggregate_window(rows, len(members), self.schema, design)
        persons = self.tables.persons.set_index("person_id").loc[members["person_id"]].reset_index()
        fixed = fixed_block(persons, self.schema, members["current_date"])
        X = assemble_blocks(fixed, blocks, design)
        if design.mode != "sequence":
            if X.shape[1] != self.schema.dim(design):
                raise ContractViolation("dimension law violated")
            if not np.isfinite(X.data).all():
                raise ContractViolation("non-finite feature value")
        return FeatureMatrix(X, members["label"].to_numpy().astype(np.int8),
                             members["person_id"].to_numpy(), members["split"].to_numpy(),
                             design, self.schema.hash, self.schema.names(design))


def featurize(tables, members: pd.DataFrame, design: StudyDesign,
              schema: FeatureSchema | None = None) -> tuple[FeatureMatrix, FeatureSchema]:
    schema = schema or build_schema(tables.observations, tables.persons, members)
    return Featurizer(tables, schema).build(members, design), schema


# ---------------------------------------------------------------- single-member reference path

@dataclass
class FeatureVector:
    member_id: int
    mode: str
    entries: list[tuple[int, float]] | None
    label: int | None = None
    fixed: list[tuple[int, float]] | None = None
    blocks: list[list[tuple[int, float]]] | None = None


def yearly_aggregate(current_date, slot: int, observations: pd.DataFrame, chronic: pd.DataFrame | None,
                     schema: FeatureSchema) -> dict[int, float]:
    """One member-year: mean/max per folded feature, count per source, chronic flags.

    ``observations`` are raw rows (source, date, column, token, value) that
    must all fall in ``slot`` of the window ending at ``current_date``.
    """
    current = pd.Timestamp(current_date)
    block: dict[int, float] = {}
    if len(observations):
        dates = observations["date"].to_numpy(dtype="datetime64[ns]")
        if (dates >= np.datetime64(current)).any():
            raise LeakageError(f"observation on/after current date {current.date()}")
        slots = year_slot(dates, np.full(len(dates), np.datetime64(current)))
        if (slots != slot).any():
            raise ContractViolation("observation outside the requested window year")
        acc: dict[str, list[float]] = {}
        counts: dict[str, int] = {}
        for src, col, tok, val in observations[["source", "column", "token", "value"]].itertuples(index=False):
            key = schema.fold(src, col, tok)
            if key is None or key not in schema._feature_id:
                continue
            acc.setdefault(key, []).append(float(val))
            counts[src] = counts.get(src, 0) + 1
        for key, vals in acc.items():
            block[schema.feature_column(key, "mean")] = float(np.sum(vals) / len(vals))
            block[schema.feature_column(key, "max")] = float(np.max(vals))
        for src, n in counts.items():
            block[schema.count_column(src)] = float(n)
    if chronic is not None and len(chronic):
        dates = chronic["date"].to_numpy(dtype="datetime64[ns]")
        if (dates >= np.datetime64(current)).any():
            raise LeakageError(f"chronic record on/after current date {current.date()}")
        for d, inc, prev in chronic[["disease", "incidence", "prevalence"]].itertuples(index=False):
            if inc:
                block[schema.temporal_index[f"{CHRONIC_SOURCE}|{d}|incidence"]] = 1.0
            if prev:
                block[schema.temporal_index[f"{CHRONIC_SOURCE}|{d}|prevalence"]] = 1.0
    return {k: v for k, v in block.items() if v != 0.0}


def assemble(member_id: int, design: StudyDesign, schema: FeatureSchema,
             fixed: dict[int, float], blocks: list[dict[int, float]], label: int | None = None) -> FeatureVector:
    """Assemble one member's vector; ``blocks`` are ordered oldest -> newest, at most ``w``."""
    if len(blocks) > design.w:
        raise ContractViolation(f"{len(blocks)} yearly blocks for a {design.w}-year window")
    T, F = schema.temporal_dim, schema.fixed_dim
    for b in blocks:
        if any(not 0 <= i < T for i in b):
            raise ContractViolation("temporal index outside the temporal block")
    padded = [{}] * (design.w - len(blocks)) + list(blocks)
    fixed_entries = sorted((i, v) for i, v in fixed.items() if v != 0.0)
    if design.mode == "sequence":
        return FeatureVector(member_id, "sequence", None, label, fixed_entries,
                             [sorted(b.items()) for b in padded])
    if design.mode == "concat":
        ent = list(fixed_entries)
        for p, b in enumerate(padded):
            ent += [(F + p * T + i, v) for i, v in sorted(b.items())]
        return FeatureVector(member_id, "concat", ent, label)
    total: dict[int, float] = {}
    for b in padded:
        for i, v in b.items():
            total[i] = total.get(i, 0.0) + v
    denom = design.w if design.avg_denominator == "window" else max(1, sum(1 for b in padded if b))
    ent = fixed_entries + [(F + i, v / denom) for i, v in sorted(total.items()) if v != 0.0]
    return FeatureVector(member_id, "avg", ent, label)


# ---------------------------------------------------------------- persistence

def save_matrix(fm: FeatureMatrix, out_dir: str | Path, dense: bool = False) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    X = fm.X.tocoo()
    trip = pd.DataFrame({"member_id": fm.person_id[X.row], "column_index": X.col, "value": X.data})
    trip = trip.sort_values(["member_id", "column_index"], kind="mergesort")
    trip.to_csv(out / "features.csv", index=False, lineterminator="\n")
    pd.DataFrame({"member_id": fm.person_id, "label": fm.y, "split": fm.split}).to_csv(
        out / "labels.csv", index=False, lineterminator="\n")
    if dense:
        pd.DataFrame(fm.X.toarray(), columns=fm.names, index=pd.Index(fm.person_id, name="member_id")).to_csv(
            out / "features_dense.csv", float_format="%.12g", lineterminator="\n")


def load_matrix(out_dir: str | Path, schema: FeatureSchema, design: StudyDesign) -> FeatureMatrix:
    out = Path(out_dir)
    lab = pd.read_csv(out / "labels.csv")
    trip = pd.read_csv(out / "features.csv", float_precision="round_trip")
    pos = pd.Series(np.arange(len(lab)), index=lab["member_id"])
    X = sp.csr_matrix((trip["value"].to_numpy(), (pos.loc[trip["member_id"]].to_numpy(),
                                                   trip["column_index"].to_numpy())),
                      shape=(len(lab), schema.dim(design)))
    return FeatureMatrix(X, lab["label"].to_numpy().astype(np.int8), lab["member_id"].to_numpy(),
                         lab["split"].to_numpy().astype(object), design, schema.hash, schema.names(design))
