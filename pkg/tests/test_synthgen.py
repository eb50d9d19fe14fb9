import filecmp
import json

import numpy as np
import pandas as pd
import pytest

from chronorisk.errors import ConfigError
from chronorisk.synthgen import (DISEASES, DOMESTIC, SOURCES, GeneratorConfig, SignalSpec, SourceSpec,
                                 empty_observations, generate, read_tables, sparsity_report, write_tables)


def test_thread_count_does_not_change_output(tmp_path):
    cfg = GeneratorConfig(n_individuals=600, chunk_size=50, seed=11)
    write_tables(generate(cfg, threads=1), tmp_path / "a")
    write_tables(generate(cfg, threads=8), tmp_path / "b")
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", files, shallow=False)
    assert not mismatch and not errors and len(match) == len(files) == 4 + len(SOURCES)


def test_prevalence_concentrates():
    # risk is calibrated so its mean equals the prevalence; Bernoulli noise at n=10000 is ~0.5%
    cfg = GeneratorConfig(n_individuals=10000, seed=5)
    t = generate(cfg)
    frac = len(t.diagnoses) / cfg.n_individuals
    assert abs(frac - 0.5) <= 0.02
    assert abs(t.latent["latent_risk"].mean() - 0.5) < 1e-6


def test_population_invariants(small_tables):
    p = small_tables.persons
    assert set(p["gender"]) <= {"M", "F"}
    assert p["deprivation_quintile"].between(1, 5).all()
    foreign = p["country_of_origin"] != DOMESTIC
    assert (p["landing_date"].notna() == foreign).all()
    obs = small_tables.observations
    assert set(obs["source"]) <= set(SOURCES)
    assert np.isfinite(obs["value"]).all()
    assert obs["date"].dt.year.between(1998, 2017).all()


def test_chronic_monotone_and_january_first(small_tables):
    c = small_tables.chronic
    assert set(c["disease"]) <= set(DISEASES)
    assert (c["date"].dt.month == 1).all() and (c["date"].dt.day == 1).all()
    for (_, _), g in c.groupby(["person_id", "disease"]):
        g = g.sort_values("year")
        prev = g["prevalence"].to_numpy()
        assert prev.all()            # rows start at incidence
        assert g["incidence"].sum() <= 1
        if g["incidence"].any():
            first = g.loc[g["incidence"], "year"].iloc[0]
            assert (g["year"] >= first).all()


def test_csv_roundtrip(tmp_path, small_tables):
    write_tables(small_tables, tmp_path)
    back = read_tables(tmp_path)
    a = small_tables.observations.reset_index(drop=True)
    b = back.observations.sort_values(["source", "person_id", "date", "column", "token"],
                                      kind="mergesort").reset_index(drop=True)
    pd.testing.assert_frame_equal(a[["person_id", "source", "date", "column", "token"]],
                                  b[["person_id", "source", "date", "column", "token"]])
    np.testing.assert_allclose(a["value"], b["value"], rtol=1e-9)


@pytest.mark.parametrize("field, value", [
    ("disease_prevalence", 0.0), ("disease_prevalence", 1.0), ("decay_half_life", 0.0),
    ("signal_spec", []), ("n_individuals", 0),
])
def test_config_validation(field, value):
    with pytest.raises(ConfigError):
        generate(GeneratorConfig(**{field: value}))


def test_unattainable_sparsity_target():
    srcs = {"OLIS": SourceSpec(2.0, 0.8, 2006, sparsity_target=10_000)}
    with pytest.raises(ConfigError):
        GeneratorConfig(sources=srcs).validate()


def test_config_json_roundtrip():
    cfg = GeneratorConfig(n_individuals=123, signal_spec=[SignalSpec("OLIS|loinc|4548-4", 1.0)])
    back = GeneratorConfig.from_json(json.loads(json.dumps(cfg.to_json())))
    assert back == cfg


def _schema(tables):
    from chronorisk.cohort import build_cohort
    from chronorisk.featurize import build_schema

    members, _ = build_cohort(tables)
    return build_schema(tables.observations, tables.persons, members)


def test_sparsity_empty_observations(small_tables):
    schema = _schema(small_tables)
    rep = sparsity_report(empty_observations(), schema)
    assert all(rep[s] == 0.0 for s in SOURCES)


def test_sparsity_three_distinct_features(small_tables):
    from tests.conftest import make_obs

    schema = _schema(small_tables)
    rows = [(1, "OLIS", "2012-03-01", "loinc", "4548-4", 6.0),
            (1, "OLIS", "2012-04-01", "loinc", "4548-4", 7.0),
            (1, "OLIS", "2012-05-01", "loinc", "2345-7", 5.0),
            (1, "OLIS", "2012-06-01", "loinc", "14771-0", 5.5)]
    rep = sparsity_report(make_obs(rows), schema, years=(2012, 2012))
    # 3 features x (mean, max) + 1 count column, one yearly vector
    assert rep["OLIS"] == 7.0


def test_sparsity_in_target_band(small_tables):
    schema = _schema(small_tables)
    rep = sparsity_report(small_tables.observations, schema, small_tables.persons, small_tables.chronic)
    assert 20 <= rep["total"] <= 80
