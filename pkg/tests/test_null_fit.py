"""Structured covariance algebra, REML derivatives and the AI-REML fit."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import (brute_force_reml, dense_kernel, dense_sigma, finite_difference_score, random_instance,
                     reml_loglik)
from pglmm.grm import Grm, relatedness_blocks, sparsify
from pglmm.model import LongitudinalDataset, VarianceComponents, assemble_H, random_effect_predictor
from pglmm.null_fit import (NullFitConfig, NullFitResult, RankDeficientError, SigmaDerivatives, SigmaOps,
                            apply_projection, expected_information, fit_null, gls, reml_objective,
                            reml_score_and_ai, sigma_inverse_apply, solve_mixed_equations)
from pglmm.simulate import SimConfig, simulate_dataset


def ops_for(seed, **kw):
    rng = np.random.default_rng(seed)
    data, grm, blocks, vc, unit = random_instance(rng, **kw)
    return rng, data, grm, SigmaOps(data, blocks, vc, unit), vc, unit


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.booleans(), st.integers(1, 3))
def test_inverse_matches_dense(seed, sparse, r):
    rng, data, grm, ops, vc, unit = ops_for(seed, m=int(np.random.default_rng(seed).integers(4, 12)), r=r,
                                            sparse=sparse)
    S = dense_sigma(data, dense_kernel(grm), vc, unit)
    x = rng.normal(size=(data.n, 2))
    ref = np.linalg.solve(S, x)
    assert np.linalg.norm(sigma_inverse_apply(ops, x) - ref) <= 1e-8 * np.linalg.norm(ref)
    # self-consistency probe
    k = int(rng.integers(data.n))
    e = np.zeros(data.n)
    e[k] = 1.0
    assert np.max(np.abs(sigma_inverse_apply(ops, S[:, k]) - e)) < 1e-8
    # logdet from the factorization
    assert abs(ops.logdet - np.linalg.slogdet(S)[1]) < 1e-8 * max(1, abs(ops.logdet))


def test_tau_zero_limit_is_blockwise():
    rng = np.random.default_rng(1)
    data, grm, blocks, vc, unit = random_instance(rng, m=6)
    vc0 = VarianceComponents([0.0], vc.D, vc.phi)
    ops = SigmaOps(data, blocks, vc0, unit)
    x = rng.normal(size=data.n)
    R = dense_sigma(data, np.zeros((data.m, data.m)), vc0, unit)
    np.testing.assert_allclose(sigma_inverse_apply(ops, x), np.linalg.solve(R, x), rtol=1e-10, atol=1e-12)


def test_weinstein_aronszajn_logdet():
    rng, data, grm, ops, vc, unit = ops_for(2, m=7)
    H = assemble_H(data).toarray()
    Gp = np.zeros((data.m * 3, data.m * 3))
    Gp[:data.m, :data.m] = vc.tau[0] * dense_kernel(grm)
    Gp[data.m:, data.m:] = np.kron(vc.D, np.eye(data.m))
    W = 1.0 / (vc.phi * unit)
    S = dense_sigma(data, dense_kernel(grm), vc, unit)
    lhs = np.linalg.slogdet(S * W[:, None])[1]
    rhs = np.linalg.slogdet(Gp @ H.T @ (W[:, None] * H) + np.eye(Gp.shape[0]))[1]
    assert abs(lhs - rhs) < 1e-8
    assert abs((ops.logdet + np.log(W).sum()) - rhs) < 1e-8


def test_henderson_system_and_residual_identity():
    rng, data, grm, ops, vc, unit = ops_for(3, m=5)
    X = data.C
    y = data.y
    theta, b = solve_mixed_equations(ops, X, y)
    H = assemble_H(data).toarray()
    Winv = vc.phi * unit
    Gp = np.zeros((data.m * 3, data.m * 3))
    Gp[:data.m, :data.m] = vc.tau[0] * dense_kernel(grm)
    Gp[data.m:, data.m:] = np.kron(vc.D, np.eye(data.m))
    Ri = np.diag(1 / Winv)
    top = np.hstack([X.T @ Ri @ X, X.T @ Ri @ H])
    bot = np.hstack([H.T @ Ri @ X, H.T @ Ri @ H + np.linalg.inv(Gp)])
    sol = np.linalg.solve(np.vstack([top, bot]), np.concatenate([X.T @ Ri @ y, H.T @ Ri @ y]))
    np.testing.assert_allclose(theta, sol[:2], rtol=1e-9, atol=1e-10)
    np.testing.assert_allclose(b, sol[2:], rtol=1e-8, atol=1e-10)
    eta = X @ theta + random_effect_predictor(data, b)
    np.testing.assert_allclose(y - eta, Winv * sigma_inverse_apply(ops, y - X @ theta), atol=1e-8)


def test_tiny_components_reduce_to_wls():
    rng = np.random.default_rng(4)
    data, grm, blocks, _, unit = random_instance(rng, m=6)
    ops = SigmaOps(data, blocks, VarianceComponents([1e-10], 1e-10 * np.eye(2), 1.0), unit)
    theta, b = solve_mixed_equations(ops, data.C, data.y)
    w = 1 / unit
    wls = np.linalg.solve(data.C.T @ (w[:, None] * data.C), data.C.T @ (w * data.y))
    np.testing.assert_allclose(theta, wls, rtol=1e-7)
    assert np.max(np.abs(b)) < 1e-8


def test_rank_deficient_design_is_named():
    rng, data, grm, ops, vc, unit = ops_for(5, m=5)
    X = np.column_stack([data.C, 2 * data.C[:, 1]])
    with pytest.raises(RankDeficientError, match="dependent columns: (x|dup)$"):
        solve_mixed_equations(ops, X, data.y, names=["intercept", "x", "dup"])


def test_projection_annihilates_design():
    rng, data, grm, ops, vc, unit = ops_for(6, m=8)
    fit = gls(ops, data.C, data.y)
    P = apply_projection(ops, fit, np.eye(data.n))
    assert np.max(np.abs(P @ data.C)) < 1e-9
    assert np.max(np.abs(P - P.T)) < 1e-9
    S = dense_sigma(data, dense_kernel(grm), vc, unit)
    Si = np.linalg.inv(S)
    ref = Si - Si @ data.C @ np.linalg.solve(data.C.T @ Si @ data.C, data.C.T @ Si)
    assert np.max(np.abs(P - ref)) < 1e-9


def test_objective_matches_dense_formula():
    rng, data, grm, ops, vc, unit = ops_for(7, m=8)
    ref = reml_loglik(data, dense_kernel(grm), vc, unit, data.C, data.y)
    assert abs(reml_objective(ops, data.C, data.y) - ref) < 1e-9 * abs(ref)


@pytest.mark.parametrize("seed,r,sparse", [(10, 2, False), (11, 3, False), (12, 2, True), (13, 1, False)])
def test_score_matches_finite_differences(seed, r, sparse):
    rng, data, grm, ops, vc, unit = ops_for(seed, m=8, r=r, sparse=sparse)
    score, AI = reml_score_and_ai(ops, data.C, data.y)
    fd = finite_difference_score(data, dense_kernel(grm), vc, unit, data.C, data.y)
    assert np.max(np.abs(score - fd) / np.maximum(np.abs(fd), 1e-3)) < 1e-5
    assert np.max(np.abs(AI - AI.T)) < 1e-10


def dense_derivatives(data, V, unit):
    s = data.subject_of
    same = s[:, None] == s[None, :]
    mats = [np.diag(unit), V[np.ix_(s, s)]]
    for u, v in zip(*np.triu_indices(data.r)):
        E = np.zeros((data.r, data.r))
        E[u, v] = E[v, u] = 1.0
        mats.append(same * (data.Z @ E @ data.Z.T))
    return mats


@pytest.mark.parametrize("sparse", [False, True])
def test_information_matrices_match_dense(sparse):
    rng, data, grm, ops, vc, unit = ops_for(20, m=9, sparse=sparse)
    fit = gls(ops, data.C, data.y)
    deriv = SigmaDerivatives(data, ops.blocks, unit, True)
    S = dense_sigma(data, dense_kernel(grm), vc, unit)
    Si = np.linalg.inv(S)
    P = Si - Si @ data.C @ np.linalg.solve(data.C.T @ Si @ data.C, data.C.T @ Si)
    dS = dense_derivatives(data, dense_kernel(grm), unit)
    Py = P @ data.y
    AI_ref = np.array([[0.5 * Py @ A @ P @ B @ Py for B in dS] for A in dS])
    EI_ref = np.array([[0.5 * np.trace(P @ A @ P @ B) for B in dS] for A in dS])
    tr_ref = np.array([np.trace(Si @ A) for A in dS])
    _, AI = reml_score_and_ai(ops, data.C, data.y, deriv=deriv, fit=fit)
    np.testing.assert_allclose(AI, AI_ref, rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(expected_information(ops, fit, deriv, "exact"), EI_ref, rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(deriv.trace_sigma_inverse(ops), tr_ref, rtol=1e-9)
    for j, A in enumerate(dS):
        x = rng.normal(size=data.n)
        np.testing.assert_allclose(deriv.apply(j, x), A @ x, atol=1e-12)
    # stochastic traces converge on the exact ones
    hut = expected_information(ops, fit, deriv, "hutchinson", n_probes=4000, seed=1)
    assert np.max(np.abs(hut - EI_ref)) < 0.1 * np.max(np.abs(EI_ref))


def sim(seed, **kw):
    base = dict(m=60, p=5, n_causal=0, h2_S=0.0, visits_min=3, visits_max=6, pedigree="sibships",
                family_size=5, related_fraction=1.0, n_markers=3000, seed=seed, h2_g=0.5,
                D=[[0.5, 0.1], [0.1, 0.3]])
    base.update(kw)
    return simulate_dataset(SimConfig(**base))


def test_reml_never_decreases_and_converges():
    data, truth, ex = sim(0)
    res = fit_null(data, "gaussian", ex["grm"])
    assert res.converged
    for h in res.history:
        assert h["ql_after"] >= h["ql_before"] - 1e-8 * (1 + abs(h["ql_before"]))
    last = res.history[-1]
    assert last["rel_change"] < 1e-6 or last["stopped_by"] == "objective"


def test_gaussian_fit_matches_brute_force_intercept_only():
    # random intercept only (D is 1 x 1), a two-variance-component model plus phi
    data, truth, ex = sim(1, D=[[0.6]], m=40)
    res = fit_null(data, "gaussian", ex["grm"])
    X = data.C[:, res.design_columns]
    V = ex["grm"].V
    vc, best = brute_force_reml(data, V, X, data.y, truth.vc, restarts=2, grid_points=21)
    ql = reml_loglik(data, V, res.vc, np.ones(data.n), X, data.y)
    assert ql >= best - 1e-3
    a, b = res.vc.to_vector(True), vc.to_vector(True)
    assert np.max(np.abs(a - b) / np.abs(b)) < 1e-3


def test_zero_polygenic_variance_hits_boundary():
    hits = 0
    for seed in range(4):
        data, truth, ex = sim(seed, h2_g=0.0, D=[[1.0, 0.0], [0.0, 0.3]])
        res = fit_null(data, "gaussian", ex["grm"])
        if "tau" in res.boundary:
            hits += 1
            assert res.vc.tau[0] == pytest.approx(1e-8)
    assert hits >= 1


def test_flat_ridge_stops_on_objective():
    # D close to singular: the parameters drift along a flat direction
    cfg = dict(m=50, p=10, visits_min=4, visits_max=8, family_size=10, n_markers=5000, h2_g=0.6,
               D=[[0.2, -0.05], [-0.05, 0.15]])
    data, truth, ex = sim(5, **cfg)
    res = fit_null(data, "gaussian", ex["grm"])
    assert res.converged and res.iterations < 100
    assert res.history[-1]["stopped_by"] == "objective"
    assert "D" in res.boundary


def test_binary_fit_and_sparse_grm():
    data, truth, ex = sim(2, binary=True, m=80)
    res = fit_null(data, "binomial", sparsify(ex["grm"]))
    assert res.converged and res.vc.phi == 1.0
    assert "phi" not in res.parameter_names


def test_duplicate_covariate_is_dropped():
    data, truth, ex = sim(3)
    import dataclasses
    d2 = dataclasses.replace(data, C=np.column_stack([data.C, data.C[:, 1]]),
                             covariate_names=list(data.covariate_names) + ["sex_copy"], check_genotypes=False)
    res = fit_null(d2, "gaussian", ex["grm"])
    assert res.dropped_columns == ["sex_copy"]
    assert res.theta[-1] == 0.0


def test_result_roundtrip(tmp_path):
    data, truth, ex = sim(4, m=30)
    res = fit_null(data, "gaussian", ex["grm"], NullFitConfig(max_iter=5))
    res.save(str(tmp_path / "n.json"))
    back = NullFitResult.load(str(tmp_path / "n.json"))
    assert np.array_equal(back.vc.D, res.vc.D) and np.array_equal(back.y_work, res.y_work)
    assert back.design_columns == res.design_columns and back.subject_ids == res.subject_ids
    with pytest.raises(ValueError):
        NullFitConfig.from_dict({"nope": 1})
