"""Families, the longitudinal container, H and the working update."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from pglmm.family import LinkFamily, evaluate_family, quasi_loglik
from pglmm.model import (LongitudinalDataset, VarianceComponents, assemble_H, random_effect_predictor,
                         random_effect_transpose, working_update)

G, B = LinkFamily.GAUSSIAN, LinkFamily.BINOMIAL


def small_data(rng, m=4, r=2, p=0):
    counts = rng.integers(1, 4, m)
    s = np.repeat(np.arange(m), counts)
    n = s.size
    Z = np.column_stack([np.ones(n), rng.normal(size=n)])[:, :r]
    Gm = rng.integers(0, 3, (m, p)).astype(float)[s] if p else None
    return LongitudinalDataset(rng.normal(size=n), np.column_stack([np.ones(n), rng.normal(size=n)]), Z, s, G=Gm)


def test_gaussian_family_values():
    mu, gp, nu = evaluate_family(G, np.array([0.5]))
    assert (mu, gp, nu) == (0.5, 1.0, 1.0)


def test_logit_at_zero():
    mu, gp, nu = evaluate_family(B, np.array([0.0]))
    assert mu[0] == 0.5 and gp[0] == 4.0 and nu[0] == 0.25


def test_logit_at_log3():
    # exact values: 3/4, 16/3, 3/16
    mu, gp, nu = evaluate_family(B, np.array([np.log(3.0)]))
    assert abs(mu[0] - 0.75) < 1e-15
    assert abs(gp[0] - 16 / 3) < 1e-13
    assert abs(nu[0] - 3 / 16) < 1e-15


def test_logit_clamped():
    mu, _, _ = evaluate_family(B, np.array([-800.0, 800.0]))
    assert mu[0] == 1e-6 and mu[1] == 1 - 1e-6


def test_nonfinite_eta_names_index():
    with pytest.raises(ValueError, match="index 2"):
        evaluate_family(G, np.array([0.0, 1.0, np.nan]))


def test_parse_aliases():
    assert LinkFamily.parse("binary") is B and LinkFamily.parse("Normal") is G
    with pytest.raises(ValueError):
        LinkFamily.parse("poisson")


@given(st.floats(1e-6, 1 - 1e-6), st.sampled_from([G, B]))
def test_canonical_link_identity(mu, fam):
    mu = np.array([mu])
    assert abs(fam.link_derivative(mu)[0] * fam.variance(mu)[0] - 1.0) < 1e-12


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.2, 4), st.floats(0.2, 3))
def test_gaussian_quasi_score_matches_integral(y, mu, phi, a):
    # the quasi-likelihood is the integral of a (y - t) / (phi nu(t)) from y to mu
    direct = integrate.quad(lambda t: a * (y - t) / phi, y, mu)[0]
    assert abs(quasi_loglik(G, [y], [mu], phi, [a])[0] - direct) < 1e-9 * (1 + abs(direct))
    h = 1e-5
    fd = (quasi_loglik(G, [y], [mu + h], phi, [a])[0] - quasi_loglik(G, [y], [mu - h], phi, [a])[0]) / (2 * h)
    assert abs(fd - a * (y - mu) / phi) <= 1e-6 * max(1.0, abs(a * (y - mu) / phi))


@given(st.sampled_from([0.0, 1.0]), st.floats(0.01, 0.99))
def test_binomial_quasi_loglik_matches_integral(y, mu):
    # (y - t) / (t (1 - t)) simplifies to 1/t for y = 1 and -1/(1 - t) for y = 0
    f = (lambda t: 1.0 / t) if y == 1 else (lambda t: -1.0 / (1.0 - t))
    direct = integrate.quad(f, y, mu)[0]
    assert abs(quasi_loglik(B, [y], [mu])[0] - direct) < 1e-9


def test_dataset_rejects_bad_layouts():
    with pytest.raises(ValueError, match="subject-major"):
        LongitudinalDataset([1, 2, 3], np.ones((3, 1)), np.ones((3, 1)), [0, 1, 0])
    with pytest.raises(ValueError, match="0..m-1"):
        LongitudinalDataset([1, 2], np.ones((2, 1)), np.ones((2, 1)), [0, 2])
    with pytest.raises(ValueError, match="constant within subject"):
        LongitudinalDataset([1, 2], np.ones((2, 1)), np.ones((2, 1)), [0, 0], G=[[0.0], [1.0]])
    with pytest.raises(ValueError, match="missing"):
        LongitudinalDataset([1, np.nan], np.ones((2, 1)), np.ones((2, 1)), [0, 1])


def test_default_weights_are_one():
    d = small_data(np.random.default_rng(0))
    assert np.all(d.weights == 1.0)


def test_H_three_subjects_intercept_and_slope():
    s = np.repeat([0, 1, 2], 2)
    t = np.array([1.0, 2, 3, 4, 5, 6])
    d = LongitudinalDataset(np.zeros(6), np.ones((6, 1)), np.column_stack([np.ones(6), t]), s)
    H = assemble_H(d).toarray()
    L = np.zeros((6, 3))
    L[np.arange(6), s] = 1
    # b0 block, then Z1 = 1 block, then Z2 = t block
    assert np.array_equal(H, np.hstack([L, L, L * t[:, None]]))
    assert np.all((H != 0).sum(axis=1) == 3)


def test_H_without_slopes_is_indicator():
    s = np.array([0, 0, 1, 2, 2])
    d = LongitudinalDataset(np.zeros(5), np.ones((5, 1)), np.zeros((5, 0)), s)
    H = assemble_H(d).toarray()
    assert np.array_equal(H, np.eye(3)[s])


def test_H_single_subject():
    d = LongitudinalDataset(np.zeros(3), np.ones((3, 1)), np.column_stack([np.ones(3), [1.0, 2, 3]]), [0, 0, 0])
    H = assemble_H(d).toarray()
    assert H.shape == (3, 3) and np.all(H[:, 0] == 1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(0, 3))
def test_H_products_match_explicit(seed, m, r):
    rng = np.random.default_rng(seed)
    d = small_data(rng, m=m, r=r) if r else LongitudinalDataset(
        rng.normal(size=m), np.ones((m, 1)), np.zeros((m, 0)), np.arange(m))
    b = rng.normal(size=d.m * (d.r + 1))
    B_ = b.reshape(d.r + 1, d.m)
    expect = B_[0, d.subject_of] + sum(d.Z[:, k] * B_[k + 1, d.subject_of] for k in range(d.r))
    H = assemble_H(d)
    assert np.array_equal(random_effect_predictor(d, b), expect)
    np.testing.assert_allclose(H @ b, expect, atol=1e-14)
    v = rng.normal(size=d.n)
    np.testing.assert_allclose(random_effect_transpose(d, v), H.T @ v, atol=1e-12)


def test_working_update_gaussian_weights():
    d = small_data(np.random.default_rng(1))
    vc = VarianceComponents([0.5], np.eye(2), 2.0)
    st_ = working_update(d, G, vc, Theta=np.zeros(2))
    assert np.all(st_.W == 0.5)


def test_working_update_binomial_at_half():
    d = small_data(np.random.default_rng(2))
    d = d.with_outcome((d.y > 0).astype(float))
    st_ = working_update(d, B, VarianceComponents([0.5], np.eye(2), 1.0), Theta=np.zeros(2))
    assert np.all(st_.W == 0.25)
    np.testing.assert_allclose(st_.y_work, st_.eta + 4 * (d.y - 0.5))


def test_working_update_exact_fit_gives_eta():
    rng = np.random.default_rng(3)
    d = small_data(rng)
    Theta = rng.normal(size=2)
    b = rng.normal(size=d.m * 3)
    eta = d.C @ Theta + random_effect_predictor(d, b)
    st_ = working_update(d.with_outcome(eta), G, VarianceComponents([1.0], np.eye(2)), Theta=Theta, b=b)
    assert np.array_equal(st_.y_work, st_.eta)
    np.testing.assert_allclose(st_.eta, eta, atol=1e-14)


def test_working_update_flags_underflow():
    d = small_data(np.random.default_rng(4))
    st_ = working_update(d, G, VarianceComponents([1.0], np.eye(2), 1e13), Theta=np.zeros(2))
    assert st_.weight_underflow == d.n


def test_variance_components_validation_and_vector():
    vc = VarianceComponents([0.3], [[0.4, -0.2], [-0.2, 0.5]], 1.5)
    v = vc.to_vector(True)
    assert np.array_equal(v, [1.5, 0.3, 0.4, -0.2, 0.5])
    back = VarianceComponents.from_vector(v, 1, 2, True)
    assert np.array_equal(back.D, vc.D) and back.phi == 1.5
    assert VarianceComponents.parameter_names(1, 2, True) == ["phi", "tau", "psi11", "psi12", "psi22"]
    with pytest.raises(ValueError):
        VarianceComponents([-1.0], np.eye(2)).validate()
    with pytest.raises(ValueError):
        VarianceComponents([1.0], [[1, 2], [2, 1]]).validate()
    with pytest.raises(ValueError):
        VarianceComponents([1.0], np.eye(2), 2.0).validate(B)
