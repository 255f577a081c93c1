import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wblab.linalg import ContractError, RngStream
from wblab.metrics import (
    FdrSingularError,
    bn_stats,
    cosine_matrix,
    fdr,
    feature_stats,
    forgetting_scores,
    mean_norms,
    random_probe_fdr,
    scatter_matrices,
    write_matrix_csv,
    write_rows_csv,
)
from wblab.network import NetSpec, init_network


def brute_fdr(X, y):
    """Loop-level scatter matrices and an explicit inverse."""
    classes = sorted(set(y.tolist()))
    d = X.shape[1]
    means = {k: sum(X[i] for i in range(len(y)) if y[i] == k) / sum(1 for v in y if v == k) for k in classes}
    mu = sum(means.values()) / len(classes)
    S_B, S_W = np.zeros((d, d)), np.zeros((d, d))
    for k in classes:
        n_k = sum(1 for v in y if v == k)
        S_B += n_k * np.outer(means[k] - mu, means[k] - mu)
    for i in range(len(y)):
        S_W += np.outer(X[i] - means[y[i]], X[i] - means[y[i]])
    return float(np.trace(np.linalg.inv(S_W) @ S_B))


def blobs(seed, C=3, n=20, d=4, sep=3.0):
    g = np.random.default_rng(seed)
    centers = g.normal(size=(C, d)) * sep
    y = np.repeat(np.arange(C), n)
    return centers[y] + g.normal(size=(C * n, d)), y


def test_fdr_one_dimensional_hand_case():
    X = np.array([[-1.0], [1.0], [3.0], [5.0]])
    y = np.array([0, 0, 1, 1])
    S_B, S_W = scatter_matrices(X, y)
    assert S_W[0, 0] == 4.0 and S_B[0, 0] == 16.0
    assert fdr(X, y, jitter=0.0) == 4.0
    assert brute_fdr(X, y) == pytest.approx(4.0)


def test_fdr_degenerate_within_class():
    X = np.array([[0.0], [0.0], [2.0], [2.0]])
    y = np.array([0, 0, 1, 1])
    with pytest.raises(FdrSingularError, match="larger jitter"):
        fdr(X, y, jitter=0.0)
    assert fdr(X, y, jitter=0.5) == pytest.approx(4.0 / 0.5)


def test_fdr_uses_mean_of_class_means():
    X = np.array([[0.0], [0.2], [-0.2], [0.1], [-0.1], [4.0], [4.4]])
    y = np.array([0, 0, 0, 0, 0, 1, 1])
    S_B, _ = scatter_matrices(X, y)
    # mu = (0 + 4.2)/2 = 2.1, not the pooled mean
    assert S_B[0, 0] == pytest.approx(5 * 2.1**2 + 2 * 2.1**2)


@pytest.mark.parametrize("seed", range(4))
def test_fdr_against_brute_force(seed):
    X, y = blobs(seed)
    assert fdr(X, y, 0.0) == pytest.approx(brute_fdr(X, y), rel=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_true_labels_beat_shuffled(seed):
    X, y = blobs(seed)
    shuffled = np.random.default_rng(seed + 100).permutation(y)
    assert fdr(X, y) > fdr(X, shuffled)


@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_fdr_rotation_and_scale_invariant(seed, scale):
    X, y = blobs(seed % 50)
    Q = np.linalg.qr(np.random.default_rng(seed).normal(size=(4, 4)))[0]
    base = fdr(X, y, 0.0)
    assert abs(fdr(X @ Q, y, 0.0) - base) <= 1e-6 * base
    assert abs(fdr(scale * X, y, 0.0) - base) <= 1e-6 * base


def test_fdr_preconditions():
    with pytest.raises(ContractError):
        fdr(np.ones((3, 1)), [0, 0, 0])
    with pytest.raises(ContractError):
        fdr(np.ones((2, 1)), [0, 1])


def test_feature_stats():
    X = np.array([[1.0, 0.0], [3.0, 0.0], [0.0, 5.0]])
    st_ = feature_stats(X, [0, 0, 1])
    np.testing.assert_allclose(st_.class_means, [[2, 0], [0, 5]])
    np.testing.assert_allclose(st_.global_mean, [1, 2.5])
    with pytest.raises(ContractError):
        feature_stats(X, [0, 0, 2], C=3)


def test_cosine_cases():
    X = np.tile([[1.0, 2.0]], (6, 1))
    cm = cosine_matrix(X, [0, 0, 1, 1, 2, 2])
    np.testing.assert_allclose(cm.values, 1.0)
    X = np.array([[1.0, 0], [2.0, 0], [0, 3.0], [0, 1.0]])
    cm = cosine_matrix(X, [0, 0, 1, 1])
    np.testing.assert_allclose(cm.values, np.eye(2), atol=1e-15)
    assert cm.pair_counts[0, 0] == 2 and cm.pair_counts[0, 1] == 4


def test_cosine_exhaustive_small_instance(rng):
    X = rng.normal(size=(9, 4))
    y = np.repeat([0, 1, 2], 3)
    cm = cosine_matrix(X, y, max_pairs_per_cell=9)
    U = X / np.linalg.norm(X, axis=1, keepdims=True)
    for j, k in itertools.product(range(3), repeat=2):
        pairs = [(a, b) for a in range(9) for b in range(9) if y[a] == j and y[b] == k and a != b]
        assert cm.values[j, k] == pytest.approx(np.mean([U[a] @ U[b] for a, b in pairs]), abs=1e-15)
    assert cm.exact.all()
    assert np.array_equal(cm.values, cm.values.T)


def test_cosine_subsampled_and_degenerate(rng):
    X = rng.normal(size=(60, 3))
    y = np.repeat([0, 1], 30)
    sub = cosine_matrix(X, y, max_pairs_per_cell=50, rng=RngStream(1))
    full = cosine_matrix(X, y)
    assert not sub.exact[0, 1] and sub.pair_counts[0, 1] == 50
    assert np.array_equal(sub.values, sub.values.T)
    assert np.all(np.abs(sub.values) <= 1)
    assert abs(sub.values[0, 1] - full.values[0, 1]) < 0.3
    one = cosine_matrix(np.array([[1.0, 0], [0, 1.0], [0, 0]]), [0, 1, 1])
    assert one.excluded == 1 and (0, 0) in one.undefined and np.isnan(one.values[0, 0])
    cmm = cosine_matrix(X, y, mode="class_mean")
    assert cmm.values.shape == (2, 2) and cmm.values[0, 0] == pytest.approx(1.0)


def test_mean_norms():
    X = np.array([[3.0, 4.0], [1.0, 1.0], [-1.0, -1.0]])
    np.testing.assert_allclose(mean_norms(X, [0, 1, 1]), [5.0, 0.0])


def test_bn_stats():
    net = init_network(NetSpec(3, 2, depth=2, width=4), RngStream(0))
    assert bn_stats(net) == {"gamma_mean": 1.0, "gamma_std": 0.0, "beta_mean": 0.0, "beta_std": 0.0}
    for bn in net.bn_layers():
        bn.fix_gamma(0.05)
    s = bn_stats(net)
    assert s["gamma_mean"] == pytest.approx(0.05) and s["gamma_std"] == pytest.approx(0.0, abs=1e-17)
    with pytest.raises(ContractError):
        bn_stats(init_network(NetSpec(3, 2, depth=0), RngStream(0)))


def test_forgetting_cases():
    assert forgetting_scores(np.ones((4, 3), bool)).per_sample.tolist() == [0, 0, 0]
    assert forgetting_scores([[1], [0], [1], [0]]).per_sample.tolist() == [2]
    rec = forgetting_scores([[1, 1], [0, 1]], labels=[0, 1])
    assert rec.per_class.tolist() == [1.0, 0.0]
    with pytest.raises(ContractError):
        forgetting_scores([[1, 0]])


@given(st.integers(2, 12), st.integers(1, 8), st.integers(0, 10_000))
def test_forgetting_brute_force(E, N, seed):
    h = np.random.default_rng(seed).integers(0, 2, size=(E, N)).astype(bool)
    brute = [sum(1 for e in range(E - 1) if h[e, i] and not h[e + 1, i]) for i in range(N)]
    got = forgetting_scores(h).per_sample
    assert got.tolist() == brute and got.max(initial=0) <= E - 1


def test_probe_zero_layer_reported():
    X, y = blobs(0)
    out = random_probe_fdr(X, y, 2, RngStream(0), layers=[(np.zeros((4, 4)), np.zeros(4))] * 2)
    assert out[0] is not None and out[1:] == [None, None]


def test_probe_identity_layer_keeps_fdr():
    X, y = blobs(1)
    X = np.abs(X)
    out = random_probe_fdr(X, y, 1, RngStream(0), layers=[(np.eye(4), np.zeros(4))])
    assert out[1] == pytest.approx(out[0], rel=1e-12)


def test_probe_random_layers_deterministic():
    X, y = blobs(2, d=8)
    a = random_probe_fdr(X, y, 3, RngStream(5))
    assert a == random_probe_fdr(X, y, 3, RngStream(5)) and len(a) == 4
    with pytest.raises(ContractError):
        random_probe_fdr(X, y, 0, RngStream(5))


def test_csv_writers(tmp_path):
    write_matrix_csv(tmp_path / "m.csv", np.array([[0.1, 1.0]]))
    assert (tmp_path / "m.csv").read_text().strip() == "0.10000000000000001,1"
    write_rows_csv(tmp_path / "r.csv", ["k", "v"], [(0, 0.5)])
    assert (tmp_path / "r.csv").read_text().splitlines() == ["k,v", "0,0.5"]
