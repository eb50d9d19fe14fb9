import string

import pytest
from hypothesis import given, settings, strategies as st

from chronorisk.codemap import (ICD9_CATEGORIES, ICD10_CATEGORIES, META_PREFIX, OTHER, Icd9Map,
                                Icd10Map, Vocabulary, build_vocab, load_rules, load_vocabularies,
                                map_icd9, map_icd10, save_vocabularies)
from chronorisk.errors import ConfigError, InputError


@pytest.mark.parametrize("code, cat", [
    ("E11", "diabetes"), ("E14.9", "diabetes"), ("E10", "diabetes"), ("E09", "IV"), ("E15", "IV"),
    ("C34", "II"), ("Q99", "XVII"), ("9X9", "unknown"), ("D20", "II"), ("D49", "unknown"),
    ("D50", "unknown"), ("D60", "III"), ("H10", "VII"), ("H65", "VIII"), ("A00", "I"), ("B99", "I"),
    ("I10", "IX"), ("Z00", "XXI"), ("U07", "XXII"), ("V01", "XX"), ("S72", "XIX"),
])
def test_icd10_table(code, cat):
    assert map_icd10(code) == cat


def test_icd10_normalizes_case_and_whitespace():
    assert map_icd10("  e11.9 ") == "diabetes"


def test_icd10_letter_without_digits_uses_letter_rule():
    assert map_icd10("C") == "II"
    assert map_icd10("Z") == "XXI"
    # E has only numeric ranges, so a bare letter falls through
    assert map_icd10("E") == "unknown"


@pytest.mark.parametrize("code, cat", [
    ("250", "diabetes"), ("250.02", "diabetes"), ("244.9", "hypothyroidism"), ("244.0", "immunity"),
    ("285.9", "anemia"), ("285.0", "blood"), ("327.23", "sleep apnea"), ("571.8", "chronic liver disease"),
    ("780.53", "hypersomnia"), ("790.6", "blood chemistry"), ("790.21", "fasting glucose"),
    ("790.29", "abnormal glucose"), ("E880", "E"), ("V70", "V"), ("401", "hypertension"),
    ("278", "obesity"), ("4019", "hypertension"), ("X12", "ill-defined"),
])
def test_icd9_table(code, cat):
    assert map_icd9(code) == cat


@pytest.mark.parametrize("code", ["", "   ", None])
def test_empty_codes_rejected(code):
    with pytest.raises(InputError):
        map_icd10(code)
    with pytest.raises(InputError):
        map_icd9(code)


def test_exceptions_differ_from_enclosing_range():
    # every exact-match row must override the range it sits in
    rules = load_rules(table="icd9")
    ranges = [r for r in rules if r.kind == "range"]
    for r in (r for r in rules if r.kind == "exact"):
        stem = int(r.lo.split(".")[0])
        enclosing = [q.category for q in ranges if int(q.lo) <= stem <= int(q.hi)] or ["ill-defined"]
        assert enclosing[0] != r.category
        assert map_icd9(r.lo) == r.category


icd10_codes = st.builds(lambda l, d: l + d, st.sampled_from(string.ascii_uppercase),
                        st.text(alphabet=string.digits + ".", max_size=5))
icd9_codes = st.one_of(
    st.text(alphabet=string.digits, min_size=1, max_size=5),
    st.builds(lambda a, b: a + "." + b, st.text(alphabet=string.digits, min_size=1, max_size=3),
              st.text(alphabet=string.digits, max_size=2)),
    st.builds(lambda p, d: p + d, st.sampled_from("EV"), st.text(alphabet=string.digits, max_size=4)),
)


@given(icd10_codes)
def test_icd10_exhaustive(code):
    assert map_icd10(code) in ICD10_CATEGORIES


@given(icd9_codes)
def test_icd9_exhaustive(code):
    assert map_icd9(code) in ICD9_CATEGORIES


@given(st.text(min_size=1).filter(lambda s: s.strip()))
def test_arbitrary_text_never_errors(code):
    assert map_icd10(code) in ICD10_CATEGORIES
    assert map_icd9(code) in ICD9_CATEGORIES


def test_rule_override_csv(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("pattern_kind,lo,hi,category\nletter,C,,neoplasm\n")
    m = Icd10Map(load_rules(p))
    assert m("C34") == "neoplasm"
    assert m("E11") == "unknown"


def _rows(counts, source="ODB", column="dx"):
    for tok, c in counts.items():
        for _ in range(c):
            yield (source, column, tok)


def test_vocab_keeps_frequent_token():
    v = build_vocab(_rows({"K21": 6, "Z00": 994}), 0.005, 0.0005, "icd10")
    assert v.fold("K21") == "K21"


def test_vocab_folds_to_chapter_then_other():
    counts = {"K21": 3, "J01": 1, "Z00": 996}
    # K-chapter pool = 3/1000 >= meta threshold; J chapter = 1/1000
    v = build_vocab(_rows(counts), 0.005, 0.002, "icd10")
    assert v.fold("K21") == META_PREFIX + "XI"
    assert v.fold("J01") == OTHER
    assert v.fold("unseen-token") == OTHER


def test_vocab_chapter_pool_example():
    counts = {"K21": 3, "K50": 77, "Z00": 920}
    v = build_vocab(_rows(counts), 0.1, 0.0005, "icd10")
    assert v.fold("K21") == "cat:XI"


@pytest.mark.parametrize("thr", [0.0, 1.0, -0.1, 1.5])
def test_vocab_threshold_range(thr):
    with pytest.raises(ConfigError):
        build_vocab(_rows({"a": 1}), thr, 0.1)
    with pytest.raises(ConfigError):
        build_vocab(_rows({"a": 1}), 0.1, thr)


def test_vocab_rejects_empty_and_mixed():
    with pytest.raises(ConfigError):
        build_vocab(iter([]), 0.1, 0.01)
    with pytest.raises(ConfigError):
        build_vocab([("A", "x", "t"), ("B", "x", "t")], 0.1, 0.01)


@settings(max_examples=60)
@given(st.dictionaries(st.sampled_from(["E11", "E12", "C34", "K21", "Q99", "J45", "Z00", "foo", "bar"]),
                       st.integers(1, 50), min_size=1),
       st.floats(0.01, 0.9), st.floats(0.001, 0.5), st.text(max_size=4))
def test_vocab_fold_total_and_idempotent(counts, cat_t, meta_t, probe):
    v = build_vocab(_rows(counts), cat_t, meta_t, "icd10")
    outs = set(v.output_tokens())
    n = sum(counts.values())
    for tok in list(counts) + [probe, OTHER]:
        f = v.fold(tok)
        assert f in outs
        assert v.fold(f) == f
    for tok in v.kept_categories:
        assert counts[tok] / n >= cat_t


def test_vocab_json_roundtrip(tmp_path):
    v = build_vocab(_rows({"E11": 10, "C34": 1, "x": 100}), 0.05, 0.001, "icd10")
    save_vocabularies([v], tmp_path / "v.json")
    (w,) = load_vocabularies(tmp_path / "v.json")
    assert w == v
    assert all(w.fold(t) == v.fold(t) for t in ["E11", "C34", "x", "E13", "zzz"])
