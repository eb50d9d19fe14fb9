"""Diagnosis-code maps and frequency-thresholded vocabularies.

ICD-10 and ICD-9 codes are collapsed onto coarse categories with ordered
rule tables (shipped as CSV under ``chronorisk/data``).  Categorical columns
are folded into vocabularies: frequent tokens are kept verbatim, rare ones
fall back to a coarse meta token (e.g. the ICD chapter) when that group is
frequent enough, and everything else becomes a single OTHER token.
"""
from __future__ import annotations

import csv
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping

from .errors import ConfigError, InputError

OTHER = "__OTHER__"
META_PREFIX = "cat:"

ICD10_CATEGORIES = frozenset(
    ["diabetes", "unknown"]
    + "I II III IV V VI VII VIII IX X XI XII XIII XIV XV XVI XVII XVIII XIX XX XXI XXII".split()
)
ICD9_CATEGORIES = frozenset(
    [
        "infectious", "neoplasms", "diabetes", "hypothyroidism", "immunity", "obesity",
        "anemia", "blood", "mental", "sleep apnea", "nervous", "hypertension",
        "circulatory", "respiratory", "chronic liver disease", "digestive",
        "genitourinary", "pregnancy", "skin", "musculoskeletal", "congenital",
        "perinatal", "hypersomnia", "blood chemistry", "fasting glucose",
        "abnormal glucose", "E", "V", "ill-defined",
    ]
)

_KIND_RANK = {"exact": 0, "range": 1, "letter": 2, "prefix": 2}


@dataclass(frozen=True)
class CodeRule:
    kind: str
    lo: str
    hi: str
    category: str


def load_rules(path: str | Path | None = None, *, table: str | None = None) -> list[CodeRule]:
    """Read a rule table (``pattern_kind,lo,hi,category``).

    With ``path=None`` the embedded table named ``table`` ("icd10" or "icd9")
    is used.  Rules are returned sorted by precedence (exact, range, then
    letter/prefix), keeping file order within a kind.
    """
    if path is None:
        text = resources.files("chronorisk.data").joinpath(f"{table}_map.csv").read_text()
    else:
        text = Path(path).read_text()
    rules = []
    for row in csv.DictReader(text.splitlines()):
        kind = row["pattern_kind"].strip().lower()
        if kind not in _KIND_RANK:
            raise ConfigError(f"unknown pattern_kind {kind!r}")
        rules.append(CodeRule(kind, row["lo"].strip().upper(), (row.get("hi") or "").strip().upper(),
                              row["category"].strip()))
    return sorted(rules, key=lambda r: _KIND_RANK[r.kind])


_ICD10_RE = re.compile(r"^([A-Z])(\d*)")


class Icd10Map:
    def __init__(self, rules: list[CodeRule] | None = None, fallback: str = "unknown"):
        self.rules = rules if rules is not None else load_rules(table="icd10")
        self.fallback = fallback

    def __call__(self, code: str) -> str:
        code = _clean(code)
        m = _ICD10_RE.match(code)
        if not m:
            return self.fallback
        letter, digits = m.group(1), m.group(2)
        # numeric tail compared as two zero-padded digits
        tail = int(digits[:2].rjust(2, "0")) if digits else None
        for r in self.rules:
            if r.kind == "range":
                if tail is None or r.lo[0] != letter:
                    continue
                if int(r.lo[1:]) <= tail <= int(r.hi[1:]):
                    return r.category
            elif r.kind == "letter" and r.lo == letter:
                return r.category
        return self.fallback


class Icd9Map:
    def __init__(self, rules: list[CodeRule] | None = None, fallback: str = "ill-defined"):
        self.rules = rules if rules is not None else load_rules(table="icd9")
        self.fallback = fallback

    @staticmethod
    def normalize(code: str) -> str:
        code = _clean(code)
        if code.isdigit():
            if len(code) > 3:
                code = code[:3] + "." + code[3:]
            else:
                code = code.rjust(3, "0")
        return code

    def __call__(self, code: str) -> str:
        code = self.normalize(code)
        m = re.match(r"^(\d{1,3})(?:\.(\d*))?$", code)
        stem = int(m.group(1)) if m else None
        for r in self.rules:
            if r.kind == "exact":
                if code == r.lo or (code.startswith(r.lo) and "." in r.lo):
                    return r.category
            elif r.kind == "range":
                if stem is not None and int(r.lo) <= stem <= int(r.hi):
                    return r.category
            elif r.kind == "prefix" and code.startswith(r.lo):
                return r.category
        return self.fallback


def _clean(code: str) -> str:
    if code is None:
        raise InputError("diagnosis code is missing")
    code = str(code).strip().upper()
    if not code:
        raise InputError("diagnosis code is empty")
    return code


_ICD10 = Icd10Map()
_ICD9 = Icd9Map()


def map_icd10(code: str) -> str:
    """Category for a raw ICD-10 code; unmatched codes give ``"unknown"``."""
    return _ICD10(code)


def map_icd9(code: str) -> str:
    """Category for a raw ICD-9 code; unmatched codes give ``"ill-defined"``."""
    return _ICD9(code)


# Meta maps usable by vocabularies; referenced by name so vocabularies stay JSON-serializable.
META_MAPS: dict[str, Callable[[str], str | None]] = {
    "none": lambda token: None,
    "icd10": map_icd10,
    "icd9": map_icd9,
}


@dataclass(frozen=True)
class Vocabulary:
    source: str
    column: str
    kept_categories: frozenset[str]
    meta_categories: frozenset[str]
    categorical_threshold: float
    meta_threshold: float
    meta_map: str | dict = "none"
    n_rows: int = 0
    fold_rule: Mapping[str, str] = field(default_factory=dict, compare=False)

    def _meta_of(self, token: str) -> str | None:
        if isinstance(self.meta_map, dict):
            return self.meta_map.get(token)
        try:
            return META_MAPS[self.meta_map](token)
        except InputError:
            return None

    def fold(self, token: str) -> str:
        """Total, idempotent token fold."""
        hit = self.fold_rule.get(token)
        if hit is not None:
            return hit
        if token in self.kept_categories or token == OTHER:
            return token
        if token.startswith(META_PREFIX) and token[len(META_PREFIX):] in self.meta_categories:
            return token
        meta = self._meta_of(token)
        if meta is not None and meta in self.meta_categories:
            return META_PREFIX + meta
        return OTHER

    def output_tokens(self) -> list[str]:
        """Every token ``fold`` can emit, in schema (lexicographic) order."""
        out = set(self.kept_categories) | {META_PREFIX + m for m in self.meta_categories} | {OTHER}
        return sorted(out)

    def to_json(self) -> dict:
        return {
            "source": self.source,
            "column": self.column,
            "kept_categories": sorted(self.kept_categories),
            "meta_categories": sorted(self.meta_categories),
            "categorical_threshold": self.categorical_threshold,
            "meta_threshold": self.meta_threshold,
            "meta_map": self.meta_map,
            "n_rows": self.n_rows,
            "fold_rule": dict(sorted(self.fold_rule.items())),
        }

    @classmethod
    def from_json(cls, d: dict) -> "Vocabulary":
        return cls(
            source=d["source"],
            column=d["column"],
            kept_categories=frozenset(d["kept_categories"]),
            meta_categories=frozenset(d["meta_categories"]),
            categorical_threshold=d["categorical_threshold"],
            meta_threshold=d["meta_threshold"],
            meta_map=d["meta_map"],
            n_rows=d["n_rows"],
            fold_rule=dict(d["fold_rule"]),
        )


def build_vocab(
    rows: Iterable[tuple[str, str, str]],
    categorical_threshold: float,
    meta_threshold: float,
    meta_map: str | dict = "none",
) -> Vocabulary:
    """Fit a vocabulary on a stream of ``(source, column, token)`` rows.

    Frequencies are fractions of the row count.  A token is kept verbatim
    when its frequency reaches ``categorical_threshold``.  The remaining
    tokens are pooled by meta token; a pool reaching ``meta_threshold``
    becomes a ``cat:<meta>`` output, and the residue folds to OTHER.
    """
    for name, t in (("categorical_threshold", categorical_threshold), ("meta_threshold", meta_threshold)):
        if not 0.0 < t < 1.0:
            raise ConfigError(f"{name} must be in (0, 1), got {t}")
    counts: Counter[str] = Counter()
    key = None
    for source, column, token in rows:
        if key is None:
            key = (source, column)
        elif key != (source, column):
            raise ConfigError(f"build_vocab got rows from {key} and {(source, column)}")
        counts[token] += 1
    n = sum(counts.values())
    if n == 0:
        raise ConfigError("cannot build a vocabulary from zero rows")

    proto = Vocabulary(key[0], key[1], frozenset(), frozenset(), categorical_threshold,
                       meta_threshold, meta_map, n)
    kept = {t for t, c in counts.items() if c / n >= categorical_threshold}
    pooled: Counter[str] = Counter()
    for t, c in counts.items():
        if t not in kept:
            meta = proto._meta_of(t)
            if meta is not None:
                pooled[meta] += c
    metas = {m for m, c in pooled.items() if c / n >= meta_threshold}
    vocab = Vocabulary(key[0], key[1], frozenset(kept), frozenset(metas), categorical_threshold,
                       meta_threshold, meta_map, n)
    rule = {t: vocab.fold(t) for t in sorted(counts)}
    return Vocabulary(key[0], key[1], frozenset(kept), frozenset(metas), categorical_threshold,
                      meta_threshold, meta_map, n, rule)


def save_vocabularies(vocabs: Iterable[Vocabulary], path: str | Path) -> None:
    payload = [v.to_json() for v in sorted(vocabs, key=lambda v: (v.source, v.column))]
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))


def load_vocabularies(path: str | Path) -> list[Vocabulary]:
    return [Vocabulary.from_json(d) for d in json.loads(Path(path).read_text())]
