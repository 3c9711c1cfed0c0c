import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from modgrok.bounds import (
    BoundReport,
    brute_covariance,
    c_d,
    classification_gen_bound,
    closed_form_covariance,
    empirical_rademacher_estimate,
    expected_dist_sq,
    fiber_basis,
    g_d_identity_check,
    grid,
    kernel_lower_bound_rhs,
    least_squares_lhs,
    lower_bound_vacuous_threshold,
    margin_regime,
    misclass_from_l2,
    project_out_slices,
    rademacher_bound,
    random_equivariant_kernel,
    random_projected_unit,
    regression_gen_bound,
    reports_to_json,
    slice_basis,
    smooth_loss_bound,
    standard_report,
    top_eig_sum_bound,
)


def enumerate_c_d(p, m, d):
    """Average of Psi(x) Psi(x') over every permutation tuple, for one pair at distance d."""
    x = (0,) * m
    y = tuple(1 if i < d else 0 for i in range(m))
    total = count = 0
    for sig in itertools.product(itertools.permutations(range(p)), repeat=m):
        sx = sum(sig[i][x[i]] for i in range(m)) % p == 0
        sy = sum(sig[i][y[i]] for i in range(m)) % p == 0
        total += sx and sy
        count += 1
    return total / count


@pytest.mark.parametrize("p,m", [(3, 2), (3, 3), (4, 2)])
def test_c_d_matches_enumeration(p, m):
    for d in range(m + 1):
        assert abs(c_d(p, d) - enumerate_c_d(p, m, d)) < 1e-12


def test_c_d_values():
    assert c_d(3, 0) == pytest.approx(1 / 3)
    assert c_d(3, 1) == 0.0
    assert c_d(3, 2) == pytest.approx(1 / 6)
    with pytest.raises(ValueError):
        c_d(1, 0)


@pytest.mark.parametrize("p,m", [(3, 2), (3, 3), (4, 2)])
def test_brute_covariance_closed_form(p, m):
    cov = brute_covariance(p, m)
    assert cov.exact
    np.testing.assert_allclose(cov.matrix, closed_form_covariance(p, m), atol=1e-12)
    assert np.trace(cov.matrix) == pytest.approx(p ** (m - 1))


def test_monte_carlo_covariance_within_error():
    cov = brute_covariance(3, 2, trials=20000, seed=1, force_mc=True)
    assert not cov.exact
    exact = closed_form_covariance(3, 2)
    assert np.all(np.abs(cov.matrix - exact) <= 5 * cov.stderr + 1e-12)


def test_fiber_span_contains_slice_span():
    p, m = 3, 3
    F, S = fiber_basis(p, m), slice_basis(p, m)
    coef, *_ = np.linalg.lstsq(F.T, S.T, rcond=None)
    np.testing.assert_allclose(F.T @ coef, S.T, atol=1e-10)


@pytest.mark.parametrize("p,m", [(3, 2), (3, 3), (4, 2), (4, 3)])
def test_g_d_identity(p, m):
    rng = np.random.default_rng(0)
    for _ in range(10):
        v = random_projected_unit(p, m, rng)
        for d in range(m + 1):
            lhs, rhs = g_d_identity_check(p, m, d, v)
            assert abs(lhs - rhs) < 1e-8


def test_slice_projection_is_not_enough_for_three_coordinates():
    v = random_projected_unit(3, 3, np.random.default_rng(0), space="slice")
    gaps = [abs(np.subtract(*g_d_identity_check(3, 3, d, v, space="slice"))) for d in range(4)]
    assert max(gaps) > 1e-3


def test_projection_rejects_unknown_space():
    with pytest.raises(ValueError):
        project_out_slices(np.ones(9), 3, 2, space="plane")


@pytest.mark.parametrize("m", [2, 3])
def test_eigen_sandwich(m):
    w = np.sort(np.linalg.eigvalsh(brute_covariance(3, m).matrix))[::-1]
    for n in range(1, 3**m + 1):
        assert w[:n].sum() <= top_eig_sum_bound(3, m, n) + 1e-9


def test_spot_values():
    assert kernel_lower_bound_rhs(5, 3, 0) == pytest.approx(20.0)
    assert top_eig_sum_bound(5, 3, 10) == pytest.approx(5 + 2 * math.exp(0.5))
    assert kernel_lower_bound_rhs(5, 3, lower_bound_vacuous_threshold(5, 3)) == pytest.approx(0.0, abs=1e-9)
    assert rademacher_bound(1, 1, 40, 5, 1000) == pytest.approx(324 * 40 * math.sqrt(5) / math.sqrt(1000))
    assert regression_gen_bound(1, 40, 5, 10**4, 0.1) == pytest.approx(
        1600 / 1e4 * (5 * math.log(1e4) ** 3 + math.log(10)))


def test_rademacher_monotone():
    assert rademacher_bound(1, 2, 10, 5, 100) == rademacher_bound(2, 1, 10, 5, 100)
    assert rademacher_bound(1, 1, 10, 5, 400) == pytest.approx(rademacher_bound(1, 1, 10, 5, 100) / 2)


def test_empirical_rademacher_below_bound():
    pts = np.random.default_rng(0).integers(0, 5, (50, 3))
    est = empirical_rademacher_estimate(pts, 5, 4, 1.0, 1.0, sign_draws=5, searches=20)
    assert 0 < est <= rademacher_bound(1, 1, 4, 5, 50)


def test_least_squares_lhs_above_rhs():
    rng = np.random.default_rng(2)
    cov = brute_covariance(3, 2).matrix
    for _ in range(3):
        K = random_equivariant_kernel(3, 2, rng)
        for n in range(1, 6):
            assert least_squares_lhs(3, 2, n, K, cov) >= kernel_lower_bound_rhs(3, 2, n) - 1e-9


def test_least_squares_explicit_matches_shortcut():
    K = random_equivariant_kernel(3, 2, np.random.default_rng(4))
    cov = brute_covariance(3, 2).matrix
    for n in (1, 3):
        assert least_squares_lhs(3, 2, n, K, cov, explicit=True) == pytest.approx(
            least_squares_lhs(3, 2, n, K, cov), abs=1e-9)


def test_dist_to_empty_span_is_trace():
    cov = closed_form_covariance(3, 2)
    assert expected_dist_sq(cov, np.zeros((9, 0))) == pytest.approx(3.0)
    assert expected_dist_sq(cov, np.eye(9)) == pytest.approx(0.0, abs=1e-12)


def test_equivariant_kernel_invariance():
    p, m = 3, 2
    K = random_equivariant_kernel(p, m, np.random.default_rng(0))
    X = grid(p, m)
    perm = [np.array([2, 0, 1]), np.array([1, 0, 2])]
    Y = np.stack([perm[i][X[:, i]] for i in range(m)], axis=1)
    idx = Y @ (p ** np.arange(m)[::-1])
    np.testing.assert_allclose(K[np.ix_(idx, idx)], K)


def test_smooth_loss_bound_reduces_at_zero_loss():
    v = smooth_loss_bound(0.0, 0.1, 100, 0.05, H=1, b=2)
    assert v == pytest.approx(math.log(100) ** 3 * 0.01 + 2 * math.log(20) / 100)


def test_classification_bound_regimes():
    regime, t = margin_regime(1e9, 1.0, 8, 0.05)
    assert regime == "*" and t > 1
    assert margin_regime(1.0, 1.0, 8, 0.05)[0] == "**"
    small = classification_gen_bound(1e6, 1.0, 40, 5, 10**6, 0.05)
    big = classification_gen_bound(1e6, 1.0, 40, 5, 10**4, 0.05)
    assert small < big
    with pytest.raises(ValueError):
        classification_gen_bound(-1.0, 1.0, 40, 5, 100, 0.05)


@settings(max_examples=50, deadline=None)
@given(L2=st.floats(0, 100), p=st.integers(2, 100))
def test_misclass_from_l2_in_unit_interval(L2, p):
    v = misclass_from_l2(L2, p)
    assert 0 <= v <= 1
    assert v == min(1.0, 2 * L2 / p)


def test_report_json_round_trip():
    import json

    reps = standard_report(5, 3, n=1000)
    names = {r.name for r in reps}
    assert {"kernel_lower_bound_rhs", "rademacher_bound", "classification_gen_bound"} <= names
    data = json.loads(reports_to_json(reps))
    assert data[0]["value"] == pytest.approx(20.0 * (1 - 1000 / 125 / 0.8 * math.exp(0.5)))
    with pytest.raises(ValueError):
        BoundReport("x", {}, float("nan"))
