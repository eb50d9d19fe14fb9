import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chronorisk import attribution as A
from chronorisk.errors import ConfigError, ContractViolation
from chronorisk.models import (GBTParams, HighwayParams, LinearModel, LRParams, Standardizer, Tree,
                               TreeEnsemble, train_gbt, train_highway, train_lr)
from chronorisk.models.highway import HighwayNet, init_params

from conftest import random_ensemble, random_tree, sparse_rows


# ---------------------------------------------------------------- linear

def _ident(d):
    return Standardizer(np.zeros(d), np.ones(d))


def test_linear_example():
    m = LinearModel(np.array([2.0, -1.0]), 0.5, _ident(2))
    a = A.shapley_linear(m, np.array([[1.0, 3.0]]), np.array([[0.0, 1.0]]))[0]
    np.testing.assert_allclose(a.phi, [2.0, -2.0])
    assert abs(a.phi.sum() - (a.logit - a.base_value)) < 1e-12
    assert a.logit - a.base_value == 0.0


def test_linear_at_mean_is_zero():
    m = LinearModel(np.array([2.0, -1.0, 0.3]), 0.1, Standardizer(np.array([1.0, 2, 3]), np.array([2.0, 1, 4])))
    bg = np.array([[0.0, 1, 2], [2.0, 3, 4]])
    a = A.shapley_linear(m, bg.mean(axis=0, keepdims=True), bg)[0]
    np.testing.assert_allclose(a.phi, 0.0, atol=1e-15)


def test_linear_matches_exact():
    rng = np.random.default_rng(0)
    X = sparse_rows(rng, 200, 8)
    y = (X[:, 0] - X[:, 1] + rng.normal(size=200) > 0).astype(int)
    m = train_lr(X, y, LRParams(C=10.0))
    bg = X[:20]
    for x in X[100:105]:
        lin = A.shapley_linear(m, x[None], bg)[0]
        ex = A.shapley_exact(m.predict_logit, x, bg)
        np.testing.assert_allclose(lin.phi, ex.phi, atol=1e-12)


# ---------------------------------------------------------------- exact

def test_exact_constant_predictor():
    a = A.shapley_exact(lambda Z: np.full(len(Z), 3.0), np.ones(4), np.zeros((3, 4)))
    np.testing.assert_array_equal(a.phi, 0.0)


def test_exact_symmetry():
    rng = np.random.default_rng(1)
    b = rng.normal(size=(10, 1))
    a = A.shapley_exact(lambda Z: Z[:, 0] + Z[:, 1], np.array([2.0, 2.0]), np.hstack([b, b]))
    assert abs(a.phi[0] - a.phi[1]) < 1e-12


def test_exact_product():
    a = A.shapley_exact(lambda Z: Z[:, 0] * Z[:, 1], np.array([1.0, 1.0]), np.zeros((1, 2)))
    np.testing.assert_allclose(a.phi, [0.5, 0.5])


def test_exact_refuses_many_players():
    with pytest.raises(ConfigError):
        A.shapley_exact(lambda Z: Z[:, 0], np.zeros(21), np.zeros((1, 21)))


def test_exact_dummy_feature():
    a = A.shapley_exact(lambda Z: np.sin(Z[:, 0]) * Z[:, 2], np.array([1.0, 5.0, 2.0]), np.zeros((2, 3)) + 0.3)
    assert a.phi[1] == 0.0


def test_exact_player_subset():
    f = lambda Z: Z[:, 0] * Z[:, 1] + Z[:, 2]
    x = np.array([1.0, 2.0, 3.0])
    bg = np.zeros((1, 3))
    a = A.shapley_exact(f, x, bg, players=[0, 2])
    # column 1 stays at x: f restricted is 2*x0 + x2
    np.testing.assert_allclose(a.phi, [2.0, 0.0, 3.0])


# ---------------------------------------------------------------- tree

def test_tree_matches_exact_on_random_ensembles():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(50):
        model, rng = random_ensemble(seed)
        d = model.n_features
        X = sparse_rows(rng, 4, d)
        B = sparse_rows(rng, 6, d)
        got = A.shapley_tree(model, X, B)
        for i, x in enumerate(X):
            ex = A.shapley_exact(model.predict_logit, x, B)
            worst = max(worst, np.max(np.abs(got[i].phi - ex.phi)))
            assert abs(got[i].residual) <= 1e-9
    assert worst <= 1e-9
    assert time.perf_counter() - t0 < 60


def test_tree_stump_only_its_feature():
    stump = Tree(np.array([2, -1, -1]), np.array([0.5, 0, 0]), np.array([True, False, False]),
                 np.array([1, -1, -1]), np.array([2, -1, -1]), np.array([0.0, 1.0, -1.0]), np.ones(3))
    m = TreeEnsemble([stump], 4, GBTParams(learning_rate=1.0), 0.0)
    rng = np.random.default_rng(0)
    a = A.shapley_tree(m, rng.normal(size=(5, 4)), rng.normal(size=(7, 4)))
    for att in a:
        assert np.count_nonzero(att.phi[[0, 1, 3]]) == 0


def test_tree_x_equals_background():
    model, rng = random_ensemble(3)
    x = sparse_rows(rng, 1, model.n_features)
    a = A.shapley_tree(model, x, x)[0]
    np.testing.assert_array_equal(a.phi, 0.0)


def test_tree_additive_over_trees():
    model, rng = random_ensemble(11)
    while len(model.trees) < 2:
        model, rng = random_ensemble(int(rng.integers(1000)))
    X = sparse_rows(rng, 3, model.n_features)
    B = sparse_rows(rng, 5, model.n_features)
    full = A.shapley_tree(model, X, B)
    parts = [A.shapley_tree(TreeEnsemble([t], model.n_features, model.params, 0.0), X, B) for t in model.trees]
    for i in range(3):
        np.testing.assert_allclose(full[i].phi, sum(p[i].phi for p in parts), atol=1e-12)


def test_tree_empty_background():
    model, rng = random_ensemble(0)
    with pytest.raises(ConfigError):
        A.shapley_tree(model, np.zeros((1, model.n_features)), np.zeros((0, model.n_features)))


def test_tree_on_trained_model():
    rng = np.random.default_rng(5)
    X = sparse_rows(rng, 300, 6)
    y = (X[:, 0] * X[:, 1] + X[:, 2] > 0).astype(int)
    m = train_gbt(X, y, GBTParams(n_rounds=30, max_depth=3, learning_rate=0.2))
    for x in X[:3]:
        np.testing.assert_allclose(A.shapley_tree(m, x[None], X[:15])[0].phi,
                                   A.shapley_exact(m.predict_logit, x, X[:15]).phi, atol=1e-9)


# ---------------------------------------------------------------- sampled

def test_sampled_unbiased():
    rng = np.random.default_rng(7)
    W = rng.normal(size=(8, 8))
    f = lambda Z: np.tanh(Z @ W).sum(axis=1)
    x = rng.normal(size=8)
    B = rng.normal(size=(5, 8))
    exact = A.shapley_exact(f, x, B).phi
    est = np.array([A.shapley_sampled(f, x, B, 20, seed=s).phi for s in range(50)])
    se = est.std(axis=0, ddof=1) / np.sqrt(len(est))
    assert (np.abs(est.mean(axis=0) - exact) <= 3 * se + 1e-12).all()


def test_sampled_single_permutation_efficiency():
    rng = np.random.default_rng(8)
    f = lambda Z: (Z ** 2).sum(axis=1) + Z[:, 0] * Z[:, 1]
    x = rng.normal(size=5)
    B = rng.normal(size=(1, 5))
    a = A.shapley_sampled(f, x, B, n_permutations=1, seed=3)
    assert abs(a.residual) < 1e-12


def test_sampled_reproducible_and_validated():
    rng = np.random.default_rng(9)
    f = lambda Z: Z.sum(axis=1) ** 2
    x, B = rng.normal(size=4), rng.normal(size=(3, 4))
    np.testing.assert_array_equal(A.shapley_sampled(f, x, B, 5, seed=1).phi, A.shapley_sampled(f, x, B, 5, seed=1).phi)
    assert A.shapley_sampled(f, x, B, 5, seed=1).se is not None
    with pytest.raises(ConfigError):
        A.shapley_sampled(f, x, B, 0)


# ---------------------------------------------------------------- integrated gradients

def _linear_net(w):
    """Highway net with closed gates and identity affines: logit = w.x."""
    d = len(w)
    p = init_params(d, (d,), np.random.default_rng(0), gate_bias=-1e6)
    p["A0.W"], p["A0.b"] = np.eye(d), np.zeros(d)
    p["out.W"], p["out.b"] = w.reshape(-1, 1), np.zeros(1)
    return HighwayNet(p, _ident(d), HighwayParams(hidden=(d,)))


@pytest.mark.parametrize("steps", [1, 7, 256])
def test_ig_linear_exact(steps):
    w = np.array([1.5, -2.0, 0.5])
    net = _linear_net(w)
    x, x0 = np.array([1.0, 2.0, -1.0]), np.array([0.5, 0.0, 0.0])
    a = A.integrated_gradients(net, x, x0, steps)
    np.testing.assert_allclose(a.phi, w * (x - x0), rtol=1e-12)


def test_ig_at_baseline_zero():
    net = _linear_net(np.array([1.0, 2.0]))
    a = A.integrated_gradients(net, np.array([0.3, 0.4]), np.array([0.3, 0.4]))
    np.testing.assert_array_equal(a.phi, 0.0)


def test_ig_completeness_trained_net():
    rng = np.random.default_rng(2)
    X = sparse_rows(rng, 300, 10)
    y = (X[:, 0] + X[:, 1] ** 2 > 0.5).astype(int)
    net = train_highway(X, y, HighwayParams(hidden=(16, 8), learning_rate=1e-2, max_epochs=20))
    for x in X[:10]:
        a = A.integrated_gradients(net, x, steps=256)
        assert abs(a.residual) <= 1e-3 * (1 + abs(a.logit - a.base_value))


# ---------------------------------------------------------------- aggregation

def _att(phi, h="s"):
    return A.Attribution(None, np.asarray(phi, dtype=float), 0.0, float(np.sum(phi)), "m", schema_hash=h)


def test_aggregate_no_cancellation():
    r = A.aggregate([_att([1.0, 0.0]), _att([-1.0, 0.0])], ["a", "b"])
    np.testing.assert_array_equal(r.phi_sum_abs, [2.0, 0.0])


def test_aggregate_zero_and_stable_ties():
    r = A.aggregate([_att([0.0, 0.0, 0.0])], ["a", "b", "c"])
    assert A.top_k(r, 3) == ["a", "b", "c"]


def test_aggregate_mixed_schema():
    with pytest.raises(ContractViolation):
        A.aggregate([_att([1.0], "x"), _att([1.0], "y")], ["a"])
    with pytest.raises(ContractViolation):
        A.aggregate([_att([1.0, 2.0])], ["a"])


@given(st.lists(st.floats(-10, 10), min_size=3, max_size=10), st.sampled_from([0.125, 0.5, 2.0, 64.0]))
@settings(max_examples=50, deadline=None)
def test_topk_scale_invariant(phi, c):
    names = [f"f{i}" for i in range(len(phi))]
    a = A.aggregate([_att(phi)], names)
    b = A.aggregate([_att(np.asarray(phi) * c)], names)
    assert A.top_k(a, 3) == A.top_k(b, 3)


def test_grouped_and_feature_key():
    assert A.feature_key("OLIS|loinc|4548-4|max@y3") == "OLIS|loinc|4548-4"
    assert A.feature_key("OHIP|count") == "OHIP|count"
    r = A.AttributionReport(["x|mean", "x|max", "y|count"], np.array([1.0, 2.0, 2.5]), "m", 1)
    g = A.grouped(r)
    assert g.names == ["x", "y|count"] and A.top_k(g, 1) == ["x"]


def test_report_csv(tmp_path):
    r = A.aggregate([_att([0.5, -2.0])], ["a", "b"])
    r.to_csv(tmp_path / "r.csv")
    text = (tmp_path / "r.csv").read_text().splitlines()
    assert text[0] == "feature_name,phi_sum_abs,rank,method"
    assert text[1].startswith("b,2,1")
