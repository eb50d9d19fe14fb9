import warnings

import numpy as np
import pandas as pd
import pytest

warnings.filterwarnings("ignore", message=".*TBB.*")

from chronorisk.cohort import build_cohort  # noqa: E402
from chronorisk.models import GBTParams, Tree, TreeEnsemble  # noqa: E402
from chronorisk.synthgen import GeneratorConfig, generate  # noqa: E402


@pytest.fixture(scope="session")
def small_tables():
    return generate(GeneratorConfig(n_individuals=1500, seed=7))


@pytest.fixture(scope="session")
def small_cohort(small_tables):
    members, report = build_cohort(small_tables, seed=3)
    return members, report


def make_obs(rows):
    """Observation frame from (person_id, source, date, column, token, value) tuples."""
    df = pd.DataFrame(rows, columns=["person_id", "source", "date", "column", "token", "value"])
    df["date"] = pd.to_datetime(df["date"])
    df["value"] = df["value"].astype(float)
    df["person_id"] = df["person_id"].astype(np.int64)
    return df


def random_tree(rng, d, depth):
    """Random binary tree with nodes laid out depth-first."""
    feature, threshold, dleft, left, right, value = [], [], [], [], [], []

    def node(level):
        i = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        dleft.append(False)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        if level < depth and rng.random() < 0.85:
            feature[i] = int(rng.integers(d))
            threshold[i] = float(rng.choice([rng.normal(), np.inf, -np.inf], p=[0.8, 0.1, 0.1]))
            dleft[i] = bool(rng.random() < 0.5)
            left[i] = node(level + 1)
            right[i] = node(level + 1)
        else:
            value[i] = float(rng.normal())
        return i

    node(0)
    n = len(feature)
    return Tree(np.array(feature), np.array(threshold), np.array(dleft), np.array(left), np.array(right),
                np.array(value), np.ones(n))


def random_ensemble(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(2, 9))
    trees = [random_tree(rng, d, int(rng.integers(1, 4))) for _ in range(int(rng.integers(1, 5)))]
    return TreeEnsemble(trees, d, GBTParams(learning_rate=float(rng.uniform(0.05, 1.0))), float(rng.normal())), rng


def sparse_rows(rng, n, d):
    X = rng.normal(size=(n, d))
    X[rng.random((n, d)) < 0.3] = 0.0
    return X


# acceptance verdicts, echoed in the terminal summary so they survive output capture
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
