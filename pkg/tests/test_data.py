import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from modgrok.data import (
    InvalidModulusError,
    ModAddDataset,
    TaskKind,
    apply_data_permutation,
    default_train_size,
    gen_full_population,
    most_frequent_c_count,
    sample_split,
)
from modgrok.equivariance import PermTriple


def test_regression_population_p2():
    ds = gen_full_population(2, TaskKind.REGRESSION)
    assert len(ds) == 8
    pts = {(pt.a, pt.b, pt.c): pt.label for pt in ds}
    assert pts[(1, 1, 0)] == 2.0
    assert pts[(1, 1, 1)] == 0.0


def test_classification_population_p3():
    ds = gen_full_population(3, "classification")
    assert len(ds) == 9
    assert ds[1 * 3 + 2] == (1, 2, None, 0)


def test_regression_p5_positive_count():
    ds = gen_full_population(5, TaskKind.REGRESSION)
    assert len(ds) == 125
    assert int(np.sum(ds.labels == 5)) == 25
    assert set(np.unique(ds.labels)) == {0.0, 5.0}


@pytest.mark.parametrize("p", [2, 3, 7])
def test_population_order_and_labels(p):
    reg = gen_full_population(p, TaskKind.REGRESSION)
    assert np.array_equal(reg.keys(), np.arange(p**3))
    assert reg.labels.sum() == p * p**2
    cls = gen_full_population(p, TaskKind.CLASSIFICATION)
    assert np.array_equal(cls.keys(), np.arange(p**2))
    assert np.array_equal(cls.labels, (cls.a + cls.b) % p)


@pytest.mark.parametrize("bad", [1, 0, -3])
def test_invalid_modulus(bad):
    with pytest.raises(InvalidModulusError):
        gen_full_population(bad, TaskKind.CLASSIFICATION)


def test_split_full_leaves_empty_test():
    pop = gen_full_population(2, TaskKind.REGRESSION)
    tr, te = sample_split(pop, 8, seed=123)
    assert len(tr) == 8 and len(te) == 0


def test_split_deterministic_and_disjoint():
    pop = gen_full_population(7, TaskKind.REGRESSION)
    a1, b1 = sample_split(pop, 100, seed=5)
    a2, b2 = sample_split(pop, 100, seed=5)
    assert a1 == a2 and b1 == b2
    assert len(set(a1.keys()) & set(b1.keys())) == 0
    assert len(a1) + len(b1) == len(pop)
    assert len(set(a1.keys())) == 100
    a3, _ = sample_split(pop, 100, seed=6)
    assert not a1 == a3


@pytest.mark.parametrize("n", [0, 10**6])
def test_split_range(n):
    pop = gen_full_population(5, TaskKind.CLASSIFICATION)
    with pytest.raises(ValueError):
        sample_split(pop, n, seed=0)


def test_default_train_size_p97_classification():
    n = default_train_size(97, TaskKind.CLASSIFICATION)
    assert n == math.ceil(2 * 97 ** (5 / 3))
    pop = gen_full_population(97, TaskKind.CLASSIFICATION)
    tr, te = sample_split(pop, n, seed=0)
    assert len(tr) == n and len(te) == 97**2 - n


def test_default_train_size_regression():
    assert default_train_size(47, "regression") == math.ceil(2 * 47**2.25)


def test_permutation_identity_and_cycle():
    pop = gen_full_population(3, TaskKind.CLASSIFICATION)
    assert apply_data_permutation(pop, PermTriple.identity(3)) == pop
    moved = apply_data_permutation(pop, PermTriple.cycle(3, which=3))
    i = 1 * 3 + 2
    assert (moved[i].a, moved[i].b, moved[i].label) == (1, 2, 1)


def test_permutation_modulus_mismatch():
    with pytest.raises(ValueError):
        apply_data_permutation(gen_full_population(3, "classification"), PermTriple.identity(5))


perm_seeds = st.integers(min_value=0, max_value=2**32 - 1)


@settings(max_examples=30, deadline=None)
@given(p=st.integers(2, 7), s1=perm_seeds, s2=perm_seeds, task=st.sampled_from(list(TaskKind)))
def test_permutation_is_group_action(p, s1, s2, task):
    pop = gen_full_population(p, task)
    f = PermTriple.random(p, np.random.default_rng(s1))
    g = PermTriple.random(p, np.random.default_rng(s2))
    lhs = apply_data_permutation(apply_data_permutation(pop, g), f)
    rhs = apply_data_permutation(pop, f.compose(g))
    assert lhs == rhs
    assert apply_data_permutation(apply_data_permutation(pop, f), f.inverse()) == pop


@settings(max_examples=20, deadline=None)
@given(p=st.integers(2, 7), seed=perm_seeds)
def test_permuted_classification_labels_remain_consistent_with_relabelled_sum(p, seed):
    # labels move through s3 and stay unique per input pair
    sig = PermTriple.random(p, np.random.default_rng(seed))
    moved = apply_data_permutation(gen_full_population(p, "classification"), sig)
    assert len(set(zip(moved.a.tolist(), moved.b.tolist()))) == p * p
    assert sorted(np.bincount(moved.labels, minlength=p).tolist()) == [p] * p


def test_dataset_is_read_only():
    ds = gen_full_population(3, "regression")
    with pytest.raises(ValueError):
        ds.a[0] = 2


@pytest.mark.parametrize("task", list(TaskKind))
def test_csv_round_trip(tmp_path, task):
    pop = gen_full_population(5, task)
    tr, _ = sample_split(pop, 17, seed=1)
    path = tmp_path / "d.csv"
    tr.to_csv(path)
    header = path.read_text().splitlines()[0]
    assert header == ("a,b,c,label" if task is TaskKind.REGRESSION else "a,b,label")
    assert ModAddDataset.from_csv(path, 5) == tr


def test_csv_out_of_range(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b,label\n0,7,1\n")
    with pytest.raises(ValueError):
        ModAddDataset.from_csv(path, 5)


def test_rho_c():
    pop = gen_full_population(7, "regression")
    idx = np.flatnonzero(pop.c == 0)[:10]
    from modgrok.data import Provenance

    assert most_frequent_c_count(pop.subset(idx, Provenance("sampled"))) == 10
    with pytest.raises(ValueError):
        most_frequent_c_count(gen_full_population(3, "classification"))
