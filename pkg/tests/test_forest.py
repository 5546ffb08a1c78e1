import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hnnrf.container import ContainerVersionError
from hnnrf.forest import build_tree, load_forest, rf_predict, rf_predict_oob, rf_train, save_forest

from oracles import gini_split_scan


def separable(n=80, d=5, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    y = (X[:, 2] > 0.1).astype(int)
    return X, y


def test_separable_set_is_learned():
    X, y = separable()
    m = rf_train(X, y, n_trees=25, mtry=2, seed=1)
    p = rf_predict(m, X)
    assert ((p >= 0.5) == y).mean() >= 0.95
    Xt, yt = separable(200, seed=9)
    assert ((rf_predict(m, Xt) >= 0.5) == yt).mean() >= 0.9


def test_single_tree_without_bootstrap_fits_training_labels():
    X, y = separable(60, seed=3)
    y = y ^ (np.arange(60) % 7 == 0)  # label noise, still distinct rows
    m = rf_train(X, y, n_trees=1, mtry=5, bootstrap=False)
    np.testing.assert_array_equal(rf_predict(m, X), y)


def test_training_errors():
    X, y = separable()
    with pytest.raises(ValueError, match="both classes"):
        rf_train(X, np.zeros(len(y), dtype=int))
    with pytest.raises(ValueError, match="binary"):
        rf_train(X, np.where(y == 1, 2, 0))
    with pytest.raises(ValueError):
        rf_train(X, y[:-1])
    with pytest.raises(ValueError):
        rf_train(X, y, mtry=0)
    with pytest.raises(ValueError):
        rf_train(X, y, mtry=6)
    bad = X.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError, match="finite"):
        rf_train(bad, y)
    with pytest.raises(ValueError):
        rf_train(X, y, n_trees=2, bootstrap_indices=[np.arange(5)])


def test_two_trees_that_disagree_vote_one_half():
    X = np.array([[0.0], [1.0]])
    # each tree sees one class only, so each is a single pure leaf
    m = rf_train(X, [0, 1], n_trees=2, mtry=1, bootstrap_indices=[[0, 0], [1, 1]])
    assert [t.n_nodes for t in m.trees] == [1, 1]
    np.testing.assert_array_equal(rf_predict(m, np.array([[-5.0], [0.3], [7.0]])), 0.5)


def test_predict_range_and_scalar_in_scalar_out():
    X, y = separable(seed=4)
    m = rf_train(X, y, n_trees=7, mtry=3, seed=2)
    p = rf_predict(m, np.random.default_rng(0).normal(size=(50, 5)) * 10)
    assert np.all((p >= 0) & (p <= 1))
    assert isinstance(rf_predict(m, X[0]), float)
    with pytest.raises(ValueError):
        rf_predict(m, np.zeros((3, 4)))


def test_duplicated_samples_give_identical_trees():
    X, y = separable(30, seed=5)
    Xd, yd = np.vstack([X, X]), np.concatenate([y, y])
    rng = np.random.default_rng(0)
    boots = [rng.integers(0, 30, 30) for _ in range(4)]
    a = rf_train(X, y, n_trees=4, mtry=2, seed=3, bootstrap_indices=boots)
    # the same draws, pointed at the second copy of each row
    b = rf_train(Xd, yd, n_trees=4, mtry=2, seed=3, bootstrap_indices=[bt + 30 for bt in boots])
    for ta, tb in zip(a.trees, b.trees):
        np.testing.assert_array_equal(ta.feature, tb.feature)
        np.testing.assert_array_equal(ta.threshold, tb.threshold)
        np.testing.assert_array_equal(ta.value, tb.value)


def test_seed_determinism():
    X, y = separable(seed=6)
    a = rf_train(X, y, n_trees=5, mtry=2, seed=11)
    b = rf_train(X, y, n_trees=5, mtry=2, seed=11)
    np.testing.assert_array_equal(rf_predict(a, X), rf_predict(b, X))
    c = rf_train(X, y, n_trees=5, mtry=2, seed=12)
    assert not all(np.array_equal(p, q) for p, q in zip(a.inbag, c.inbag))


def test_oob_uses_only_trees_that_missed_the_sample():
    X, y = separable(40, seed=7)
    m = rf_train(X, y, n_trees=9, mtry=2, seed=4)
    oob = rf_predict_oob(m, X)
    for i in range(5):
        votes = [t.predict(X[i : i + 1])[0] for t, b in zip(m.trees, m.inbag) if i not in set(b.tolist())]
        expect = np.mean(votes) if votes else rf_predict(m, X[i])
        assert oob[i] == pytest.approx(expect)
    with pytest.raises(ValueError):
        rf_predict_oob(m, X[:-1])


def test_save_load_round_trip(tmp_path):
    X, y = separable(seed=8)
    m = rf_train(X, y, n_trees=6, mtry=2, seed=5)
    m.meta = {"threshold": 0.35, "aggregation": "max"}
    save_forest(tmp_path / "f.rf", m)
    back = load_forest(tmp_path / "f.rf")
    np.testing.assert_array_equal(rf_predict(back, X), rf_predict(m, X))
    np.testing.assert_array_equal(rf_predict_oob(back, X), rf_predict_oob(m, X))
    assert back.meta == m.meta and back.mtry == 2 and back.seed == 5


def test_load_rejects_wrong_kind(tmp_path):
    from hnnrf import hnn

    path = tmp_path / "net.hnn"
    hnn.save_params(path, hnn.init_params(hnn.HnnConfig()))
    with pytest.raises(ContainerVersionError):
        load_forest(path)


@given(st.integers(0, 2**31), st.integers(4, 30))
def test_root_split_matches_midpoint_scan(seed, n):
    rng = np.random.default_rng(seed)
    x = np.round(rng.normal(size=n), 1)
    y = (rng.random(n) < 0.5).astype(int)
    if y.min() == y.max() or np.unique(x).size < 2:
        return
    tree = build_tree(x[:, None], y, 1, np.random.default_rng(0))
    score, _ = gini_split_scan(x.tolist(), y.tolist())
    left = y[x <= tree.threshold[0]]
    right = y[x > tree.threshold[0]]

    def g(s):
        p = s.mean()
        return 2 * p * (1 - p)

    got = (left.size * g(left) + right.size * g(right)) / n
    assert tree.feature[0] == 0
    assert got == pytest.approx(score, abs=1e-12)
    assert x[x <= tree.threshold[0]].max() < tree.threshold[0] < x[x > tree.threshold[0]].min()


def test_twenty_point_separable_set_and_unanimous_vote():
    rng = np.random.default_rng(2)
    X = rng.uniform(-1, 1, (20, 2))
    y = (X[:, 0] + X[:, 1] > 0).astype(int)
    m = rf_train(X, y, n_trees=50, mtry=1, seed=0)
    assert ((rf_predict(m, X) >= 0.5) == y).all()
    # a point deep in the positive half-plane gets every tree's vote
    assert rf_predict(m, [5.0, 5.0]) == 1.0
