import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from chronorisk.codemap import OTHER
from chronorisk.errors import ContractViolation, LeakageError, SchemaError
from chronorisk.featurize import (FeatureSchema, Featurizer, StudyDesign, assemble, build_schema, fixed_block,
                                  load_matrix, save_matrix, year_slot, yearly_aggregate)

from conftest import make_obs


def _persons(ids):
    n = len(ids)
    return pd.DataFrame({
        "person_id": ids, "birth_year": [1960] * n, "gender": ["M", "F"] * (n // 2) + ["M"] * (n % 2),
        "country_of_origin": ["CAN"] * n, "lhin": ["Central"] * n, "rurality": [False] * n,
        "deprivation_quintile": [3] * n, "landing_date": pd.to_datetime([None] * n),
        "latitude": [43.7] * n, "longitude": [-79.4] * n,
    })


def _members(ids, pred="2015-06-01", split="train", b=1):
    m = pd.DataFrame({"person_id": ids, "label": [i % 2 for i in range(len(ids))],
                      "prediction_date": pd.to_datetime([pred] * len(ids)), "split": split})
    m["current_date"] = m["prediction_date"] - pd.DateOffset(years=b)
    return m


def _numeric_obs():
    rows = []
    for pid in (1, 2):
        for j, col in enumerate(["a", "b", "c"]):
            rows.append((pid, "OHIP", "2013-01-01", col, "", float(j + pid)))
        for j, col in enumerate(["p", "q", "r", "s", "t"]):
            rows.append((pid, "ODB", "2012-05-01", col, "", float(j)))
    return make_obs(rows)


@pytest.fixture(scope="module")
def tiny():
    obs = _numeric_obs()
    persons = _persons([1, 2])
    members = _members([1, 2])
    return obs, persons, members, build_schema(obs, persons, members)


# ---- schema

def test_schema_arithmetic(tiny):
    *_, schema = tiny
    assert schema.temporal_dim == 2 * (3 + 5) + 2 + 12
    assert schema.dim(StudyDesign(3, 1, "concat")) == schema.fixed_dim + 3 * 30


def test_schema_deterministic(tiny):
    obs, persons, members, schema = tiny
    again = build_schema(obs, persons, members)
    assert again.index == schema.index and again.hash == schema.hash


def test_schema_ignores_test_and_future_rows():
    obs = make_obs([(1, "OHIP", "2013-01-01", "a", "", 1.0), (1, "OHIP", "2016-01-01", "z", "", 1.0),
                    (2, "ODB", "2013-01-01", "q", "", 2.0)])
    members = pd.concat([_members([1]), _members([2], "2016-06-01", "test")], ignore_index=True)
    schema = build_schema(obs, _persons([1, 2]), members)
    names = set(schema.temporal_names)
    assert "OHIP|a||mean" in names
    assert not any(n.startswith("OHIP|z") or n.startswith("ODB") for n in names)


def test_schema_empty_training():
    with pytest.raises(SchemaError):
        build_schema(_numeric_obs(), _persons([1, 2]), _members([1, 2], split="test"))


def test_unseen_token_folds_to_other():
    rows = [(1, "DAD", "2013-01-01", "admit", t, 1.0) for t in ["urgent", "elective"] * 50]
    obs = make_obs(rows)
    schema = build_schema(obs, _persons([1]), _members([1]))
    before = schema.temporal_dim
    assert schema.fold("DAD", "admit", "never-seen") == f"DAD|admit|{OTHER}"
    assert schema.temporal_dim == before


def test_schema_json_roundtrip(tmp_path, tiny):
    *_, schema = tiny
    schema.save(tmp_path / "s.json", StudyDesign())
    back = FeatureSchema.load(tmp_path / "s.json")
    assert back.hash == schema.hash and back.names(StudyDesign()) == schema.names(StudyDesign())


# ---- year slots

def test_year_slot_anchoring():
    cur = np.datetime64("2015-06-01")
    dates = np.array(["2015-05-31", "2014-06-01", "2014-05-31", "2015-06-01", "2010-06-01"], dtype="datetime64[ns]")
    assert year_slot(dates, np.full(5, cur)).tolist() == [0, 0, 1, -1, 4]


# ---- yearly aggregate

def _cat_schema():
    rows = [(1, "OLIS", "2013-01-01", "loinc", t, v) for t, v in [("A", 4.0), ("B", 2.0)] * 50]
    rows += [(1, "OHIP", "2013-01-01", "dx", t, 1.0) for t in ["401", "250"] * 50]
    obs = make_obs(rows)
    return build_schema(obs, _persons([1]), _members([1]))


def test_mean_max_count():
    schema = _cat_schema()
    obs = make_obs([(1, "OLIS", "2014-01-01", "loinc", "A", 4.0), (1, "OLIS", "2014-02-01", "loinc", "A", 6.0)])
    block = yearly_aggregate("2014-06-01", 0, obs, None, schema)
    assert block[schema.feature_column("OLIS|loinc|A", "mean")] == 5.0
    assert block[schema.feature_column("OLIS|loinc|A", "max")] == 6.0
    assert block[schema.count_column("OLIS")] == 2.0


def test_categorical_mean_is_fraction():
    schema = _cat_schema()
    obs = make_obs([(1, "OHIP", "2014-01-01", "dx", "401", 1.0), (1, "OHIP", "2014-02-01", "dx", "401", 1.0),
                    (1, "OHIP", "2014-03-01", "dx", "250", 1.0)])
    block = yearly_aggregate("2014-06-01", 0, obs, None, schema)
    k = schema.fold("OHIP", "dx", "401")
    assert block[schema.feature_column(k, "mean")] == 1.0
    assert block[schema.feature_column(k, "max")] == 1.0
    assert block[schema.count_column("OHIP")] == 3.0


def test_empty_year_empty_block():
    assert yearly_aggregate("2014-06-01", 2, make_obs([]), None, _cat_schema()) == {}


def test_future_row_leaks():
    obs = make_obs([(1, "OLIS", "2014-06-01", "loinc", "A", 4.0)])
    with pytest.raises(LeakageError):
        yearly_aggregate("2014-06-01", 0, obs, None, _cat_schema())


def test_wrong_slot_violation():
    obs = make_obs([(1, "OLIS", "2012-01-01", "loinc", "A", 4.0)])
    with pytest.raises(ContractViolation):
        yearly_aggregate("2014-06-01", 0, obs, None, _cat_schema())


# ---- assemble

def test_avg_identical_blocks(tiny):
    *_, schema = tiny
    fv = assemble(1, StudyDesign(3, 1, "avg"), schema, {}, [{0: 2.5}] * 3)
    assert fv.entries == [(schema.fixed_dim, 2.5)]


def test_avg_one_year_of_history(tiny):
    *_, schema = tiny
    fv = assemble(1, StudyDesign(5, 1, "avg"), schema, {}, [{4: 3.0}])
    assert fv.entries == [(schema.fixed_dim + 4, 3.0 / 5)]
    obs = assemble(1, StudyDesign(5, 1, "avg", "observed"), schema, {}, [{4: 3.0}])
    assert obs.entries == [(schema.fixed_dim + 4, 3.0)]


def test_concat_layout(tiny):
    *_, schema = tiny
    F, T = schema.fixed_dim, schema.temporal_dim
    fv = assemble(1, StudyDesign(3, 1, "concat"), schema, {}, [{}, {2: 2.0}, {2: 4.0}])
    assert fv.entries == [(F + T + 2, 2.0), (F + 2 * T + 2, 4.0)]


def test_assemble_too_many_blocks(tiny):
    *_, schema = tiny
    with pytest.raises(ContractViolation):
        assemble(1, StudyDesign(2), schema, {}, [{}, {}, {}])
    with pytest.raises(ContractViolation):
        assemble(1, StudyDesign(2), schema, {}, [{schema.temporal_dim: 1.0}])


def test_design_validation():
    with pytest.raises(ContractViolation):
        StudyDesign(0, 1)
    with pytest.raises(ContractViolation):
        StudyDesign(1, 0)
    with pytest.raises(ContractViolation):
        StudyDesign(1, 1, "mean")


# ---- vectorized path against the reference path

@pytest.fixture(scope="module")
def real(small_tables, small_cohort):
    members, _ = small_cohort
    schema = build_schema(small_tables.observations, small_tables.persons, members)
    return small_tables, members.sort_values("person_id").reset_index(drop=True), schema, Featurizer(small_tables, schema)


def _reference(tables, schema, member, design):
    from chronorisk.cohort import shift_years

    cur = shift_years([member.prediction_date], design.b).iloc[0]
    obs = tables.observations[tables.observations["person_id"] == member.person_id]
    chron = tables.chronic[tables.chronic["person_id"] == member.person_id]
    blocks = []
    for k in range(design.w - 1, -1, -1):
        ok = year_slot(obs["date"].to_numpy(), np.full(len(obs), np.datetime64(cur, "ns"))) == k
        ck = year_slot(chron["date"].to_numpy(), np.full(len(chron), np.datetime64(cur, "ns"))) == k
        blocks.append(yearly_aggregate(cur, k, obs[ok], chron[ck], schema))
    persons = tables.persons[tables.persons["person_id"] == member.person_id]
    fx = fixed_block(persons, schema, [cur]).toarray()[0]
    fixed = {i: v for i, v in enumerate(fx) if v != 0}
    return assemble(member.person_id, design, schema, fixed, blocks)


@pytest.mark.parametrize("design", [StudyDesign(5, 1, "avg"), StudyDesign(3, 2, "concat"),
                                    StudyDesign(2, 1, "avg", "observed")], ids=lambda d: d.key)
def test_matrix_matches_reference(real, design):
    tables, members, schema, fz = real
    fm = fz.build(members, design)
    assert fm.X.shape == (len(members), schema.dim(design))
    for i in np.random.default_rng(1).choice(len(members), 25, replace=False):
        ref = _reference(tables, schema, members.iloc[i], design)
        row = fm.X[i].tocoo()
        got = sorted(zip(row.col.tolist(), row.data.tolist()))
        assert [c for c, _ in got] == [c for c, _ in ref.entries]
        np.testing.assert_allclose([v for _, v in got], [v for _, v in ref.entries], rtol=1e-12)


def test_avg_equals_mean_of_concat(real):
    _, members, schema, fz = real
    avg = fz.build(members, StudyDesign(4, 1, "avg")).X.toarray()
    cat = fz.build(members, StudyDesign(4, 1, "concat")).X.toarray()
    F, T = schema.fixed_dim, schema.temporal_dim
    slots = cat[:, F:].reshape(len(members), 4, T)
    np.testing.assert_allclose(avg[:, F:], slots.mean(axis=1), rtol=1e-12, atol=0)
    np.testing.assert_array_equal(avg[:, :F], cat[:, :F])


def test_no_entry_without_past_source_row(real):
    tables, members, schema, fz = real
    design = StudyDesign(1, 3)
    fm = fz.build(members, design)
    T0 = schema.fixed_dim
    counts = [schema.count_column(s) for s in ("OLIS", "OHIP") if f"{s}|count" in schema.temporal_index]
    X = fm.X.tocsc()
    for c in counts:
        has = set(fm.person_id[X[:, T0 + c].nonzero()[0]])
        obs = tables.observations
        for pid in list(has)[:20]:
            m = members[members["person_id"] == pid].iloc[0]
            cur = m.prediction_date - pd.DateOffset(years=3)
            assert (obs.loc[obs["person_id"] == pid, "date"] < cur).any()


def test_poisoned_future_row_aborts(real):
    tables, members, schema, fz = real
    design = StudyDesign(5, 1)
    rows = fz.window_rows(members, design)
    m0 = members.iloc[0]
    rows.date = rows.date.copy()
    i = int(np.flatnonzero(rows.member == 0)[0]) if (rows.member == 0).any() else 0
    rows.member = rows.member.copy()
    rows.member[i] = 0
    rows.date[i] = np.datetime64(m0.prediction_date - pd.DateOffset(years=1), "ns")
    with pytest.raises(LeakageError):
        fz.build(members, design, rows)


def test_matrix_roundtrip(tmp_path, real):
    _, members, schema, fz = real
    design = StudyDesign(2, 1, "concat")
    fm = fz.build(members, design)
    save_matrix(fm, tmp_path)
    back = load_matrix(tmp_path, schema, design)
    assert (back.X != fm.X).nnz == 0
    np.testing.assert_array_equal(back.y, fm.y)
    assert list(back.split) == list(fm.split)


@given(st.integers(1, 6), st.integers(1, 4))
@settings(max_examples=10, deadline=None)
def test_dimension_law(w, b):
    obs = _numeric_obs()
    schema = build_schema(obs, _persons([1, 2]), _members([1, 2]))
    for mode in ("avg", "concat"):
        d = StudyDesign(w, b, mode)
        expected = schema.fixed_dim + (w if mode == "concat" else 1) * schema.temporal_dim
        assert schema.dim(d) == expected == len(schema.names(d))
