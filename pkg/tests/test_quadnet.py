import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from modgrok.data import TaskKind, gen_full_population, sample_split
from modgrok.fourier import ConstructionSpec, build_8p
from modgrok.quadnet import (
    LossKind,
    QuadNetParams,
    accuracy,
    batch_loss,
    forward_class,
    forward_onehot,
    forward_reg,
    forward_reg_batch,
    grad_batch,
    grad_batch_scaled,
    grad_reg,
    linf_norm,
    logits_batch,
    margin,
    margins,
    normalized_margin,
    predict_classes,
    scale,
)


def random_params(p, h, seed=0, s=1.0):
    rng = np.random.default_rng(seed)
    return QuadNetParams(rng.uniform(-s, s, (h, 2 * p)), rng.uniform(-s, s, (p, h)))


def test_shape_validation():
    with pytest.raises(ValueError):
        QuadNetParams(np.zeros((4, 10)), np.zeros((4, 4)))
    th = QuadNetParams.zeros(5, 7)
    assert (th.p, th.h) == (5, 7)


def test_zero_W_gives_zero_logits():
    th = QuadNetParams(np.zeros((6, 10)), np.ones((5, 6)))
    assert np.all(forward_class(th, 2, 3) == 0)


def test_fourier_logits_p5():
    th = build_8p(ConstructionSpec(5))
    out = forward_class(th, 2, 4)
    assert np.allclose(out, [0, 20, 0, 0, 0], atol=1e-9)
    assert forward_reg(th, 2, 4, 1) == pytest.approx(20.0, abs=1e-9)


@pytest.mark.parametrize("c", [0.5, 2.0, 3.0])
def test_three_homogeneity(c):
    th = random_params(5, 12, seed=1)
    base = logits_batch(th, np.arange(5), np.arange(5)[::-1])
    scaled = logits_batch(scale(th, c), np.arange(5), np.arange(5)[::-1])
    np.testing.assert_allclose(scaled, c**3 * base, rtol=1e-10)


def test_reg_is_coordinate_of_class():
    th = random_params(5, 9, seed=2)
    logits = forward_class(th, 3, 1)
    assert sum(forward_reg(th, 3, 1, c) for c in range(5)) == pytest.approx(logits.sum(), rel=1e-12)


def test_zero_row_of_V():
    th = random_params(5, 9, seed=3)
    V = th.V.copy()
    V[2] = 0.0
    assert forward_reg(QuadNetParams(th.W, V), 1, 1, 2) == 0.0


@settings(max_examples=25, deadline=None)
@given(p=st.integers(2, 7), h=st.integers(1, 12), seed=st.integers(0, 10**6))
def test_onehot_equivalence(p, h, seed):
    th = random_params(p, h, seed)
    rng = np.random.default_rng(seed)
    a, b, c = (rng.integers(0, p, 20) for _ in range(3))
    eye = np.eye(p)
    x2 = np.hstack([eye[a], eye[b]])
    x3 = np.hstack([x2, eye[c]])
    np.testing.assert_allclose(logits_batch(th, a, b), forward_onehot(th, x2), atol=1e-12, rtol=1e-12)
    np.testing.assert_allclose(forward_reg_batch(th, a, b, c), forward_onehot(th, x3), atol=1e-12, rtol=1e-12)


def test_residue_out_of_range():
    with pytest.raises(ValueError):
        forward_class(random_params(3, 2), 3, 0)


def test_linf_and_scale():
    assert linf_norm(QuadNetParams.zeros(3, 4)) == 0.0
    th = random_params(3, 4)
    assert linf_norm(scale(th, -2.0)) == pytest.approx(2.0 * linf_norm(th))
    assert linf_norm(build_8p(ConstructionSpec(7))) == pytest.approx(1.0, abs=1e-15)


# ---------------------------------------------------------------- gradients

def _central_diff(fun, vec, idx, eps=1e-5):
    e = np.zeros_like(vec)
    e[idx] = eps
    return (fun(vec + e) - fun(vec - e)) / (2 * eps)


def test_grad_reg_finite_difference():
    p, h = 5, 16
    th = random_params(p, h, seed=4)
    point = (1, 3, 2)
    g = grad_reg(th, point).flat()
    vec = th.flat()

    def fun(v):
        return forward_reg(QuadNetParams.from_flat(v, p, h), *point)

    rng = np.random.default_rng(0)
    active = np.flatnonzero(g)
    coords = np.concatenate([active, rng.choice(len(vec), 50, replace=False)])
    for i in coords:
        fd = _central_diff(fun, vec, i)
        assert abs(fd - g[i]) <= 1e-6 * max(1.0, abs(g[i]))


def test_grad_reg_zero_W_and_sparsity():
    th = QuadNetParams(np.zeros((8, 10)), np.ones((5, 8)))
    g = grad_reg(th, (1, 2, 3))
    assert np.all(g.W == 0) and np.all(g.V == 0)
    th = random_params(5, 8, seed=5)
    g = grad_reg(th, (1, 2, 3), weight=0.7)
    cols = np.flatnonzero(np.any(g.W != 0, axis=0))
    assert set(cols.tolist()) <= {1, 5 + 2}
    assert set(np.flatnonzero(np.any(g.V != 0, axis=1)).tolist()) <= {3}


@pytest.mark.parametrize("loss,task", [(LossKind.SQUARE, TaskKind.REGRESSION),
                                       (LossKind.CROSS_ENTROPY, TaskKind.CLASSIFICATION)])
def test_grad_batch_finite_difference(loss, task):
    p, h, n = 5, 16, 50
    pop = gen_full_population(p, task)
    ds, _ = sample_split(pop, min(n, len(pop) - 1), seed=2)
    th = random_params(p, h, seed=6, s=0.5)
    value, g, _ = grad_batch(th, ds, loss)
    assert value == pytest.approx(batch_loss(th, ds, loss), rel=1e-12)
    vec, gflat = th.flat(), g.flat()

    def fun(v):
        return batch_loss(QuadNetParams.from_flat(v, p, h), ds, loss)

    rng = np.random.default_rng(1)
    worst = 0.0
    for i in rng.choice(len(vec), 100, replace=False):
        fd = _central_diff(fun, vec, i)
        worst = max(worst, abs(fd - gflat[i]) / max(abs(gflat[i]), 1e-3))
    assert worst < 1e-6


def test_interpolating_construction_has_zero_square_loss_and_gradient():
    th = build_8p(ConstructionSpec(5, output_scale=0.25))
    ds = gen_full_population(5, TaskKind.REGRESSION)
    value, g, _ = grad_batch(th, ds, "square")
    assert value < 1e-24
    assert g.l2_norm() < 1e-10


def test_uniform_logits_cross_entropy_is_log_p():
    p = 7
    th = QuadNetParams(np.zeros((3, 2 * p)), np.ones((p, 3)))
    ds = gen_full_population(p, TaskKind.CLASSIFICATION)
    assert grad_batch(th, ds, "cross_entropy")[0] == pytest.approx(math.log(p), rel=1e-14)


def test_task_loss_mismatch():
    ds = gen_full_population(3, TaskKind.REGRESSION)
    with pytest.raises(ValueError):
        grad_batch(random_params(3, 4), ds, "cross_entropy")


def test_scaled_gradient_survives_saturation():
    # margins in the hundreds: the plain gradient underflows but the direction does not
    th = scale(build_8p(ConstructionSpec(5)), 4.0)
    ds = gen_full_population(5, TaskKind.CLASSIFICATION)
    loss, G, _, log_scale = grad_batch_scaled(th, ds, "cross_entropy")
    assert log_scale < -1000
    assert G.l2_norm() > 0
    assert loss >= 0.0


def test_scaled_gradient_matches_plain_when_representable():
    th = random_params(5, 8, seed=9, s=0.3)
    ds = gen_full_population(5, TaskKind.CLASSIFICATION)
    _, g, _ = grad_batch(th, ds, "cross_entropy")
    _, G, _, ls = grad_batch_scaled(th, ds, "cross_entropy")
    np.testing.assert_allclose(G.flat() * math.exp(ls), g.flat(), rtol=1e-12, atol=1e-15)


# ---------------------------------------------------------------- margins / accuracy

def test_fourier_margin_full_population():
    th = build_8p(ConstructionSpec(5))
    pop = gen_full_population(5, TaskKind.CLASSIFICATION)
    assert margin(th, pop) == pytest.approx(20.0, abs=1e-9)
    assert normalized_margin(th, pop) == pytest.approx(20.0, abs=1e-9)
    qmin, q = margins(th, pop)
    assert q.shape == (25,) and q.min() == qmin


def test_zero_theta_margin():
    pop = gen_full_population(3, TaskKind.CLASSIFICATION)
    assert margin(QuadNetParams.zeros(3, 4), pop) == 0.0


def test_margin_errors():
    with pytest.raises(ValueError):
        margin(random_params(3, 2), gen_full_population(3, TaskKind.REGRESSION))
    pop = gen_full_population(3, TaskKind.CLASSIFICATION)
    with pytest.raises(ValueError):
        margin(random_params(3, 2), pop.subset(np.array([], dtype=int), pop.provenance))


def test_argmax_tie_break_smallest_index():
    th = QuadNetParams.zeros(4, 2)
    assert predict_classes(th, [0, 1], [2, 3]).tolist() == [0, 0]


def test_regression_accuracy_pair_rule():
    th = build_8p(ConstructionSpec(5, output_scale=0.25))
    pop = gen_full_population(5, TaskKind.REGRESSION)
    assert accuracy(th, pop) == 1.0
    neg = pop.subset(np.flatnonzero(pop.labels == 0), pop.provenance)
    assert math.isnan(accuracy(th, neg))


def test_misclassification_bounded_by_square_loss():
    p = 5
    pop = gen_full_population(p, TaskKind.REGRESSION)
    pairs = gen_full_population(p, TaskKind.CLASSIFICATION)
    for seed in range(20):
        th = random_params(p, 10, seed=seed, s=1.2)
        L2 = batch_loss(th, pop, "square")
        err = 1.0 - accuracy(th, pairs)
        assert err <= 2.0 * L2 / p + 1e-12


def test_checkpoint_round_trip(tmp_path):
    th = random_params(5, 7, seed=3)
    th.save(tmp_path / "ck", "regression")
    back = QuadNetParams.load(tmp_path / "ck")
    assert np.array_equal(back.W, th.W) and np.array_equal(back.V, th.V)
    raw = np.fromfile(tmp_path / "ck.bin", dtype="<f8")
    assert np.array_equal(raw[: th.W.size], th.W.ravel())
