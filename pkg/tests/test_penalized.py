"""Prior eigenbasis, ridge and coordinate-descent updates, and full paths."""

import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import dense_kernel, prox_grad_lasso, random_instance
from pglmm.grm import Grm, relatedness_blocks, sparsify
from pglmm.model import LongitudinalDataset, VarianceComponents, assemble_H
from pglmm.null_fit import fit_null
from pglmm.penalized import (LassoPath, PathConfig, adaptive_weights, bcd_theta_update, compute_lambda_max,
                             eigen_prior, fit_lasso_path, fit_path, lambda_grid, predict, r2_mspe,
                             ridge_delta_update)
from pglmm.simulate import SimConfig, simulate_dataset


def soft(z, t):
    return np.sign(z) * max(abs(z) - t, 0.0)


@settings(deadline=None)
@given(st.floats(-5, 5), st.integers(0, 2**32 - 1))
def test_soft_threshold_closed_form(z, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=9)
    x /= np.linalg.norm(x)
    y = z * x  # inner product with x is z
    beta, ok, _ = bcd_theta_update(x[:, None], np.ones(9), y, 0.0, np.zeros(1), np.array([1.0]))
    assert ok and abs(beta[0] - soft(z, 1.0)) < 1e-12


def lasso_objective(A, y, w, c0, pen, coef):
    r = y - A @ coef
    return 0.5 * np.sum(w * r * r) + np.sum(pen * np.abs(coef[c0:]))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.9), st.booleans())
def test_cd_matches_proximal_gradient(seed, frac, weighted):
    rng = np.random.default_rng(seed)
    n, p = 40, 12
    Xu = np.column_stack([np.ones(n), rng.normal(size=n)])
    Xp = rng.normal(size=(n, p))
    y = Xp[:, :3] @ np.array([1.5, -1.0, 0.5]) + rng.normal(size=n)
    w = rng.uniform(0.5, 2.0, n) if weighted else np.ones(n)
    # lambda as a fraction of the largest useful value
    r0 = y - Xu @ np.linalg.lstsq(Xu * np.sqrt(w)[:, None], y * np.sqrt(w), rcond=None)[0]
    lam = frac * np.max(np.abs(Xp.T @ (w * r0)))
    A = np.hstack([Xu, Xp])
    pen = np.r_[0.0, 0.0, np.full(p, lam)]
    coef, ok, _ = bcd_theta_update(A, w, y, 0.0, np.zeros(p + 2), pen, tol=1e-12)
    ref = prox_grad_lasso(Xu, Xp, y, lam, w)
    assert ok
    f = lasso_objective(A, y, w, 2, lam, coef)
    assert abs(f - lasso_objective(A, y, w, 2, lam, ref)) < 1e-8 * max(1.0, abs(f))
    # KKT
    g = A.T @ (w * (y - A @ coef))
    assert np.max(np.abs(g[:2])) < 1e-6
    b, gb = coef[2:], g[2:]
    act = b != 0
    assert np.all(np.abs(gb[act] - lam * np.sign(b[act])) < 1e-6 * lam)
    assert np.all(np.abs(gb[~act]) <= lam * (1 + 1e-6))


def test_zero_variance_column_held_at_zero():
    rng = np.random.default_rng(0)
    X = np.column_stack([rng.normal(size=10), np.zeros(10)])
    beta, _, _ = bcd_theta_update(X, np.ones(10), rng.normal(size=10), 0.0, np.zeros(2), np.array([0.1, 0.1]))
    assert beta[1] == 0.0


def test_lambda_max_formula():
    x = np.array([1.0, 2.0, 0.0])
    r = np.array([1.0, 1.0, 5.0])  # x . r = 3
    assert compute_lambda_max(x[:, None], np.ones(3), r, [1.0]) == 3.0
    X = np.column_stack([x, 0.5 * x])
    assert compute_lambda_max(X, np.ones(3), r, [2.0, 1.0]) == 1.5
    assert compute_lambda_max(X, np.ones(3), r, [0.0, 1.0]) == 1.5
    with pytest.raises(ValueError):
        compute_lambda_max(X, np.ones(3), r, [0.0, 0.0])


def test_lambda_grid():
    g = lambda_grid(2.0)
    assert g.size == 100 and g[0] == pytest.approx(2.0) and g[-1] == pytest.approx(0.02)
    assert np.all(np.diff(g) < 0)
    np.testing.assert_allclose(np.diff(np.log10(g)), -2 / 99)


def test_adaptive_weight_examples():
    np.testing.assert_allclose(adaptive_weights([1.0, 4.0], 0.25), [1.0, 1 / np.sqrt(2)])
    with pytest.warns(RuntimeWarning, match="capped"):
        assert adaptive_weights([0.0, 1.0], 1.0)[0] == 1e6
    assert np.array_equal(adaptive_weights([0.0, 3.0, -2.0], 0.0), [1.0, 1.0, 1.0])


def test_eigen_prior_diagonal_inputs():
    pe = eigen_prior(VarianceComponents([2.0], np.zeros((0, 0))), Grm(np.eye(3)), m=3, r=0)
    np.testing.assert_allclose(np.abs(pe.dense_U()), np.eye(3))
    np.testing.assert_allclose(pe.Lambda, [2.0, 2.0, 2.0])
    pe = eigen_prior(VarianceComponents([1.0], np.diag([0.4, 0.5])), Grm(np.eye(2)), m=2, r=2)
    assert sorted(np.round(pe.Lambda, 12).tolist()) == [0.4, 0.4, 0.5, 0.5, 1.0, 1.0]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.booleans())
def test_eigen_prior_reconstructs(seed, sparse):
    rng = np.random.default_rng(seed)
    data, grm, blocks, vc, unit = random_instance(rng, m=6, sparse=sparse)
    pe = eigen_prior(vc, blocks, data.m, data.r)
    U = pe.dense_U()
    M = data.m
    target = np.zeros((3 * M, 3 * M))
    target[:M, :M] = vc.tau[0] * dense_kernel(grm)
    target[M:, M:] = np.kron(vc.D, np.eye(M))
    assert np.max(np.abs(U.T @ U - np.eye(3 * M))) < 1e-10
    assert np.max(np.abs(U @ np.diag(pe.Lambda) @ U.T - target)) < 1e-9
    assert np.all(np.diff(pe.Lambda) <= 0) and np.all(pe.Lambda > 0)
    np.testing.assert_allclose(pe.u_h(data), assemble_H(data).toarray() @ U, atol=1e-12)
    d = rng.normal(size=3 * M)
    np.testing.assert_allclose(pe.to_b(d), U @ d, atol=1e-12)
    np.testing.assert_allclose(pe.to_delta(U @ d), d, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(3, 8), st.booleans())
def test_ridge_update_equals_newton_b(seed, m, sparse):
    rng = np.random.default_rng(seed)
    data, grm, blocks, vc, unit = random_instance(rng, m=max(m, 4) if sparse else m, sparse=sparse)
    pe = eigen_prior(vc, blocks, data.m, data.r)
    W = 1.0 / unit
    Theta = rng.normal(size=2)
    delta = ridge_delta_update(pe, W, data.y, data.C, Theta, data=data)
    H = assemble_H(data).toarray()
    M = data.m
    Gp = np.zeros((3 * M, 3 * M))
    Gp[:M, :M] = vc.tau[0] * dense_kernel(grm)
    Gp[M:, M:] = np.kron(vc.D, np.eye(M))
    e = data.y - data.C @ Theta
    b_newton = np.linalg.solve(H.T @ (W[:, None] * H) + np.linalg.inv(Gp), H.T @ (W * e))
    assert np.max(np.abs(pe.to_b(delta) - b_newton)) < 1e-9 * max(1.0, np.max(np.abs(b_newton)))
    # first-order condition in delta space
    UH = pe.u_h(data)
    grad = UH.T @ (W * (e - UH @ delta)) - delta / pe.Lambda
    assert np.max(np.abs(grad)) < 1e-8 * max(1.0, np.max(np.abs(UH.T @ (W * e))))


def test_tight_prior_shrinks_delta():
    rng = np.random.default_rng(3)
    data, grm, blocks, _, unit = random_instance(rng, m=5)
    pe = eigen_prior(VarianceComponents([1e-9], 1e-9 * np.eye(2)), blocks, data.m, data.r)
    delta = ridge_delta_update(pe, 1 / unit, data.y, data.C, np.zeros(2), data=data)
    assert np.max(np.abs(delta)) < 1e-7


def sim(seed, **kw):
    base = dict(m=80, p=60, n_causal=5, h2_S=0.3, h2_g=0.3, visits_min=2, visits_max=4, pedigree="sibships",
                family_size=4, related_fraction=1.0, n_markers=3000, seed=seed, D=[[0.4, 0.1], [0.1, 0.3]])
    base.update(kw)
    return simulate_dataset(SimConfig(**base))


@pytest.fixture(scope="module")
def gaussian_fit():
    data, truth, ex = sim(0)
    null = fit_null(data, "gaussian", ex["grm"])
    path = fit_path(data, "gaussian", null, ex["grm"], PathConfig(n_lambda=30))
    return data, truth, ex, null, path


def test_path_invariants(gaussian_fit):
    data, truth, ex, null, path = gaussian_fit
    assert path.converged.all()
    assert path.df[0] == 0 and path.lambdas[0] == pytest.approx(path.lambda_max)
    assert np.all(path.kkt < 1e-6)
    # Gaussian: one update cycle plus the cycle that confirms it
    assert path.cycles.max() <= 2
    # covariates are never shrunk: at lambda_max they equal the null GLS estimate
    np.testing.assert_allclose(path.theta_std[0], null.theta, rtol=1e-6, atol=1e-6)
    np.testing.assert_allclose(path.b[0], null.b_hat, rtol=1e-5, atol=1e-6)


def test_lambda_max_brackets_selection(gaussian_fit):
    data, truth, ex, null, path = gaussian_fit
    lm = path.lambda_max
    p2 = fit_path(data, "gaussian", null, ex["grm"], PathConfig(lambdas=[lm * (1 + 1e-6), lm * (1 - 1e-3)]))
    assert p2.df.tolist()[0] == 0 and p2.df[1] > 0
    p3 = fit_lasso_path(data, "gaussian", PathConfig(n_lambda=3))
    p4 = fit_lasso_path(data, "gaussian", PathConfig(lambdas=[p3.lambda_max * (1 + 1e-6), p3.lambda_max * (1 - 1e-3)]))
    assert p4.df[0] == 0 and p4.df[1] > 0


def test_original_scale_coefficients(gaussian_fit):
    data, truth, ex, null, path = gaussian_fit
    k = len(path.lambdas) - 1
    np.testing.assert_allclose(path.coef[k] * path.g_sd, path.coef_std[k], atol=1e-12)
    # the linear predictor is the same on both scales
    from pglmm.genotype_io import standardize_counts
    Gs, _ = standardize_counts(data.G)
    lhs = data.C @ path.theta[k] + data.G @ path.coef[k]
    rhs = data.C @ path.theta_std[k] + Gs @ path.coef_std[k]
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_null_data_selects_few():
    dfs = []
    for seed in range(3):
        # far more variants than observations
        data, truth, ex = sim(10 + seed, m=60, p=400, n_causal=0, h2_S=0.0)
        null = fit_null(data, "gaussian", ex["grm"])
        path = fit_path(data, "gaussian", null, ex["grm"], PathConfig(n_lambda=20))
        assert path.df[-1] < data.p / 2
        dfs.append(path.df)
    assert np.all(np.diff(np.mean(dfs, axis=0)) >= -0.5)


def test_binary_path_kkt():
    data, truth, ex = sim(4, binary=True, m=120)
    null = fit_null(data, "binomial", ex["grm"])
    path = fit_path(data, "binomial", null, sparsify(ex["grm"]), PathConfig(n_lambda=10))
    assert path.converged.all() and np.all(path.kkt < 1e-6)
    mu = predict(path, 9, data)
    assert np.all((mu > 0) & (mu < 1))


def test_adaptive_weights_enter_penalty(gaussian_fit):
    data, truth, ex, null, path = gaussian_fit
    nu = np.ones(data.p)
    nu[truth.causal] = 0.0  # unpenalized columns enter at every lambda
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        p2 = fit_path(data, "gaussian", null, ex["grm"], PathConfig(n_lambda=5), weights=nu)
    assert set(truth.causal) <= set(p2.active_set(0).tolist())


def test_predict_uses_blups_for_seen_subjects(gaussian_fit):
    data, truth, ex, null, path = gaussian_fit
    k = 10
    seen = predict(path, k, data)
    expect = data.C @ path.theta[k] + data.G @ path.coef[k] + assemble_H(data) @ path.b[k]
    np.testing.assert_allclose(seen, expect, atol=1e-10)
    import dataclasses
    unseen = dataclasses.replace(data, subject_ids=[f"new{i}" for i in range(data.m)], check_genotypes=False)
    np.testing.assert_allclose(predict(path, k, unseen), data.C @ path.theta[k] + data.G @ path.coef[k],
                               atol=1e-10)


def test_path_roundtrip(tmp_path, gaussian_fit):
    path = gaussian_fit[-1]
    path.save(str(tmp_path / "p.json"))
    back = LassoPath.load(str(tmp_path / "p.json"))
    assert np.array_equal(back.coef, path.coef) and np.array_equal(back.b, path.b)
    path.write_tables(str(tmp_path / "p.tsv"), str(tmp_path / "c.tsv"))
    lines = (tmp_path / "p.tsv").read_text().splitlines()
    assert lines[0].split("\t")[:3] == ["index", "lambda", "df"] and len(lines) == 31


def test_r2_contract():
    rng = np.random.default_rng(0)
    y = rng.normal(size=50)
    assert r2_mspe(y, y) == 1.0
    assert r2_mspe(y, np.full(50, y.mean())) == 0.0
    assert r2_mspe(y, y.mean() - 2 * (y - y.mean())) < 0
    with pytest.warns(RuntimeWarning):
        assert np.isnan(r2_mspe(np.ones(3), np.zeros(3)))
    with pytest.raises(ValueError):
        r2_mspe([], [])
