"""Simulator distributions, thresholding and configuration checks."""

import numpy as np
import pytest
from scipy import stats

from pglmm.genotype_io import GenotypeMatrix, standardize_counts
from pglmm.grm import Grm, build_grm
from pglmm.simulate import SimConfig, SimTruth, binarize, simulate_dataset

D3 = [[0.4, -0.2, 0.1], [-0.2, 0.5, 0.2], [0.1, 0.2, 0.3]]


def genotypes(rng, m, p):
    f = rng.uniform(0.05, 0.5, p)
    calls = rng.binomial(2, f, size=(m, p))
    return GenotypeMatrix(calls, [f"v{j}" for j in range(p)], [f"s{i}" for i in range(m)])


def test_fixed_seed_is_deterministic():
    cfg = dict(m=40, p=30, n_causal=3, n_markers=500, seed=11)
    a, ta, _ = simulate_dataset(SimConfig(**cfg))
    b, tb, _ = simulate_dataset(SimConfig(**cfg))
    assert a.y.tobytes() == b.y.tobytes() and a.C.tobytes() == b.C.tobytes()
    assert a.G.tobytes() == b.G.tobytes() and np.array_equal(ta.causal, tb.causal)
    c, _, _ = simulate_dataset(SimConfig(**{**cfg, "seed": 12}))
    assert c.y.tobytes() != a.y.tobytes()


def test_slope_covariance_matches_D():
    rng = np.random.default_rng(0)
    m = 500
    G = genotypes(rng, m, 5)
    draws = []
    for seed in range(40):  # 20000 subject draws in total
        cfg = SimConfig(m=m, p=5, n_causal=0, D=D3, visits_max=1, seed=seed)
        _, truth, _ = simulate_dataset(cfg, G, Grm(np.eye(m)))
        draws.append(truth.b1)
    emp = np.cov(np.vstack(draws).T)
    assert np.max(np.abs(emp - np.array(D3))) < 0.02


def test_binarize_rank_arithmetic():
    y, c = binarize(np.arange(1, 11), 0.2)
    assert y.sum() == 2 and y[-2:].tolist() == [1.0, 1.0]
    rng = np.random.default_rng(1)
    z = rng.normal(size=1001)
    z = np.concatenate([z, -z])
    _, c = binarize(z, 0.5)
    assert abs(c - np.median(z)) < 1e-12
    for n in (7, 50, 333):
        yb, _ = binarize(rng.normal(size=n), 0.2)
        assert abs(yb.mean() - 0.2) <= 1 / n
    with pytest.raises(ValueError):
        binarize(np.ones(5), 0.2)
    with pytest.raises(ValueError):
        binarize(np.arange(5), 1.0)


def test_default_prevalence():
    assert SimConfig().prevalence == 0.2
    data, truth, _ = simulate_dataset(SimConfig(m=60, p=10, n_causal=2, n_markers=300, binary=True, seed=2))
    assert set(np.unique(data.y)) <= {0.0, 1.0} and truth.cutoff is not None
    assert abs(data.y.mean() - 0.2) <= 1 / data.n


def test_variance_decomposition():
    rng = np.random.default_rng(5)
    m, p = 2000, 200
    G = genotypes(rng, m, p)
    Xs, _ = standardize_counts(rng.binomial(2, 0.3, size=(m, 2000)))
    grm = build_grm(Xs)
    vg, vb = [], []
    for seed in range(10):
        cfg = SimConfig(m=m, p=p, n_causal=20, h2_S=0.2, h2_g=0.3, visits_min=1, visits_max=1, seed=seed)
        data, truth, _ = simulate_dataset(cfg, G, grm)
        Gs, _ = standardize_counts(G.calls)
        vg.append(np.var(Gs @ truth.beta))
        vb.append(np.var(truth.b0))
    assert abs(np.mean(vg) / (0.2 * 2.0) - 1) < 0.15
    assert abs(np.mean(vb) / (0.3 * 2.0 * np.mean(np.diag(grm.V))) - 1) < 0.15


def test_visit_counts_uniform():
    rng = np.random.default_rng(3)
    m = 5000
    G = genotypes(rng, m, 2)
    data, _, _ = simulate_dataset(SimConfig(m=m, p=2, n_causal=0, seed=3), G, Grm(np.eye(m)))
    counts = np.bincount(np.bincount(data.subject_of), minlength=6)[1:]
    assert stats.chisquare(counts).pvalue > 0.01
    ages = [np.diff(data.Z[data.subject_of == i, 1]) for i in range(50)]
    assert all(np.all(a >= 0) for a in ages)  # time-ascending within subject


def test_all_random_structure_off():
    rng = np.random.default_rng(4)
    m = 500
    G = genotypes(rng, m, 5)
    cfg = SimConfig(m=m, p=5, n_causal=0, h2_S=0.0, h2_g=0.0, D=[[1e-12]], phi=1.5, seed=4)
    data, truth, ex = simulate_dataset(cfg, G, Grm(np.eye(m)))
    fixed = data.C @ np.linalg.lstsq(data.C, data.y, rcond=None)[0]
    assert abs(np.var(data.y - fixed) / 1.5 - 1) < 0.1


def test_config_validation():
    bad = [dict(h2_S=0.5, h2_g=0.5), dict(n_causal=11, p=10), dict(prevalence=1.0),
           dict(D=[[0.1, 0.5], [0.5, 0.1]]), dict(D=[[1.0, 0.0], [0.1, 1.0]]), dict(pedigree="twins"),
           dict(visits_min=3, visits_max=2)]
    for kw in bad:
        with pytest.raises(ValueError):
            SimConfig(**{"p": 10, **kw}).validate()
    with pytest.raises(ValueError, match="GRM"):
        simulate_dataset(SimConfig(m=4, p=2, n_causal=0), genotypes(np.random.default_rng(0), 4, 2), Grm(np.eye(3)))


def test_truth_contract(tmp_path):
    data, truth, _ = simulate_dataset(SimConfig(m=50, p=40, n_causal=6, n_markers=400, seed=9))
    assert len(truth.causal) == 6 and len(set(truth.causal.tolist())) == 6
    assert np.count_nonzero(truth.beta) == 6
    assert truth.causal_ids == [data.variant_ids[j] for j in truth.causal]
    truth.save(str(tmp_path / "t.json"))
    back = SimTruth.load(str(tmp_path / "t.json"))
    assert np.array_equal(back.beta, truth.beta) and np.array_equal(back.vc.D, truth.vc.D)
    assert SimConfig.from_dict(SimConfig(seed=3).as_dict()) == SimConfig(seed=3)


@pytest.mark.parametrize("design", ["extended", "sibships", "unrelated"])
def test_pedigree_designs_relatedness(design):
    data, truth, ex = simulate_dataset(SimConfig(m=60, p=10, n_causal=1, pedigree=design, related_fraction=1.0,
                                                 n_markers=4000, seed=1))
    V = ex["grm"].V
    off = V[~np.eye(60, dtype=bool)]
    fam = truth.family
    same = (fam[:, None] == fam[None, :]) & ~np.eye(60, dtype=bool)
    if design == "unrelated":
        assert np.max(np.abs(off)) < 0.15
    else:
        assert same.any() and np.mean(V[same]) > 0.15
