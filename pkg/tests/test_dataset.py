import gzip
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from wblab.dataset import (
    CIFAR10_LT_THRESHOLDS,
    Group,
    LabeledSet,
    LongTailProfile,
    assign_groups,
    class_sizes,
    harmonic_mean,
    load_idx,
    load_labeled_set,
    save_labeled_set,
    subsample_longtailed,
    synth_gaussian_lt,
    tertile_thresholds,
    write_idx_images,
    write_idx_labels,
)
from wblab.linalg import ContractError, RngStream

# 50-digit decimal evaluation of 4980 * 100**(-k/9), rounded half-to-even
CIFAR10_LT_COUNTS = [4980, 2985, 1790, 1073, 643, 386, 231, 139, 83, 50]


def test_class_sizes_cases():
    assert class_sizes(LongTailProfile(3, 100, 100)) == [100, 10, 1]
    assert class_sizes(LongTailProfile(5, 50, 1)) == [50] * 5
    assert class_sizes(LongTailProfile(10, 4980, 100)) == CIFAR10_LT_COUNTS


def test_profile_validation():
    for bad in [(1, 10, 2), (3, 0, 2), (3, 10, 0.5)]:
        with pytest.raises(ContractError):
            LongTailProfile(*bad)


@given(st.integers(2, 60), st.integers(1, 5000), st.floats(1, 500))
def test_class_sizes_monotone_and_bounded(C, N1, rho):
    n = class_sizes(LongTailProfile(C, N1, rho))
    assert n[0] == N1
    assert n[-1] == max(1, round(N1 / rho))
    assert all(a >= b for a, b in zip(n, n[1:]))
    assert all(max(1, round(N1 / rho)) <= v <= N1 for v in n)


def test_harmonic_mean_cases():
    assert harmonic_mean([7, 7, 7]) == 7
    assert harmonic_mean([1]) == 1
    assert harmonic_mean([100, 10, 1]) == pytest.approx(float(Fraction(3) / Fraction(111, 100)), rel=1e-15)
    with pytest.raises(ContractError):
        harmonic_mean([1, 0])


@given(st.lists(st.integers(1, 10_000), min_size=1, max_size=30))
def test_harmonic_below_arithmetic(counts):
    h, a = harmonic_mean(counts), float(np.mean(counts))
    assert h <= a * (1 + 1e-12)
    if len(set(counts)) == 1:
        assert h == pytest.approx(a, rel=1e-12)
    else:
        assert h < a


def test_synth_degenerate_and_counts():
    tr, va, te = synth_gaussian_lt(LongTailProfile(3, 100, 100), 4, 2.0, 0.0, RngStream(0))
    assert tr.class_counts == (100, 10, 1)
    assert va.class_counts == (20, 20, 20)
    assert te.class_counts == (100, 100, 100)
    for k in range(3):
        rows = tr.X[tr.y == k]
        assert np.all(rows == rows[0])
        assert np.linalg.norm(rows[0]) == pytest.approx(2.0)
    # least squares on one-hot targets with an intercept separates distinct points
    A = np.hstack([tr.X, np.ones((tr.N, 1))])
    coef = np.linalg.lstsq(A, np.eye(3)[tr.y], rcond=None)[0]
    assert np.all(np.argmax(A @ coef, axis=1) == tr.y)


def test_synth_rejects_bad_separation():
    with pytest.raises(ContractError):
        synth_gaussian_lt(LongTailProfile(3, 10, 2), 4, 0.0, 1.0, RngStream(0))


def test_synth_deterministic():
    a = synth_gaussian_lt(LongTailProfile(4, 30, 5), 3, 3.0, 1.0, RngStream(11))
    b = synth_gaussian_lt(LongTailProfile(4, 30, 5), 3, 3.0, 1.0, RngStream(11))
    for x, y in zip(a, b):
        assert np.array_equal(x.X, y.X) and np.array_equal(x.y, y.y)


def _balanced(C, n, p=2, seed=0):
    X = np.random.default_rng(seed).normal(size=(C * n, p))
    return LabeledSet(X, np.repeat(np.arange(C), n), C)


def test_subsample_identity_and_permutation():
    src = _balanced(3, 20)
    out = subsample_longtailed(src, LongTailProfile(3, 20, 1), RngStream(4))
    assert sorted(map(tuple, out.X)) == sorted(map(tuple, src.X))
    assert out.class_counts == src.class_counts


def test_subsample_mnist_scale_counts():
    src = _balanced(10, 5000, p=1)
    out = subsample_longtailed(src, LongTailProfile(10, 4980, 100), RngStream(2))
    assert list(out.class_counts) == CIFAR10_LT_COUNTS


def test_subsample_deterministic_and_error():
    src = _balanced(3, 20)
    prof = LongTailProfile(3, 15, 5)
    a = subsample_longtailed(src, prof, RngStream(9))
    b = subsample_longtailed(src, prof, RngStream(9))
    assert np.array_equal(a.X, b.X)
    with pytest.raises(ContractError, match="class 0"):
        subsample_longtailed(src, LongTailProfile(3, 25, 5), RngStream(9))


def test_idx_single_pixel_and_labels(tmp_path):
    write_idx_images(tmp_path / "i", np.array([[[255]]], dtype=np.uint8))
    write_idx_labels(tmp_path / "l", [0])
    ds = load_idx(tmp_path / "i", tmp_path / "l")
    assert ds.X.tolist() == [[1.0]]
    write_idx_images(tmp_path / "i3", np.zeros((3, 2, 2), dtype=np.uint8))
    write_idx_labels(tmp_path / "l3", [0, 1, 2])
    assert load_idx(tmp_path / "i3", tmp_path / "l3").class_counts == (1, 1, 1)


def test_idx_roundtrip_and_gzip(tmp_path):
    g = np.random.default_rng(0)
    imgs = g.integers(0, 256, size=(7, 3, 4), dtype=np.uint8)
    labs = g.integers(0, 5, size=7)
    write_idx_images(tmp_path / "i", imgs)
    write_idx_labels(tmp_path / "l", labs)
    (tmp_path / "i.gz").write_bytes(gzip.compress((tmp_path / "i").read_bytes()))
    for name in ("i", "i.gz"):
        ds = load_idx(tmp_path / name, tmp_path / "l", C=5)
        assert np.array_equal(np.rint(ds.X * 255).astype(np.uint8), imgs.reshape(7, -1))
        assert np.array_equal(ds.y, labs)


def test_idx_format_errors(tmp_path):
    write_idx_images(tmp_path / "i", np.zeros((2, 2, 2), dtype=np.uint8))
    write_idx_labels(tmp_path / "l", [0, 1])
    with pytest.raises(ValueError, match="bad magic .* at byte 0"):
        load_idx(tmp_path / "l", tmp_path / "l")
    (tmp_path / "t").write_bytes((tmp_path / "i").read_bytes()[:-1])
    with pytest.raises(ValueError, match="truncated payload at byte 23"):
        load_idx(tmp_path / "t", tmp_path / "l")


def test_assign_groups_cases():
    g = assign_groups(CIFAR10_LT_COUNTS, CIFAR10_LT_THRESHOLDS)
    assert [x.value for x in g.groups] == ["Many"] * 4 + ["Medium"] * 3 + ["Few"] * 3
    assert all(x == Group.MANY for x in assign_groups([5, 5, 5], (0, 0)).groups)
    assert [x.value for x in assign_groups([100, 10, 1], (50, 5)).groups] == ["Many", "Medium", "Few"]
    with pytest.raises(ContractError):
        assign_groups([1, 2], (5, 10))


@given(st.lists(st.integers(1, 5000), min_size=2, max_size=40))
def test_groups_partition_and_order(counts):
    ga = assign_groups(counts, tertile_thresholds(counts))
    assert len(ga.groups) == len(counts)
    many = [counts[k] for k in ga.members(Group.MANY)]
    med = [counts[k] for k in ga.members(Group.MEDIUM)]
    few = [counts[k] for k in ga.members(Group.FEW)]
    assert len(many) + len(med) + len(few) == len(counts)
    for hi, lo in [(many, med), (med, few), (many, few)]:
        if hi and lo:
            assert min(hi) > max(lo)


def test_tertile_thresholds():
    lo, hi = 1, 1000
    many_min, few_max = tertile_thresholds([hi, 10, lo])
    assert many_min == pytest.approx(100) and few_max == pytest.approx(10)
    assert tertile_thresholds([4, 4]) == (0.0, 0.0)
    assert math.isclose(tertile_thresholds([8, 1])[1], 2.0)


def test_labeled_set_invariants_and_serialization(tmp_path):
    ds = LabeledSet(np.ones((3, 2)), [0, 2, 2], 3)
    assert ds.class_counts == (1, 0, 2) and sum(ds.class_counts) == ds.N
    with pytest.raises(ContractError):
        LabeledSet(np.ones((2, 2)), [0, 3], 3)
    with pytest.raises(ValueError):
        ds.X[0, 0] = 5.0
    save_labeled_set(tmp_path, "train", ds)
    back = load_labeled_set(tmp_path, "train")
    assert np.array_equal(back.X, ds.X) and np.array_equal(back.y, ds.y) and back.C == 3
