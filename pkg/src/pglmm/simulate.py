"""Synthetic longitudinal cohorts with population structure and pedigrees.

Genotypes come from a Balding-Nichols model: ancestral allele frequencies
``U(0.05, 0.5)`` drift to per-population frequencies with divergence ``fst``.
Founders are sampled from their population's frequencies and descendants
inherit one random haplotype from each parent at every locus (no linkage).
The GRM used for the polygenic effect is built from a separate marker panel.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .genotype_io import GenotypeMatrix, standardize_counts
from .grm import Grm, build_grm
from .model import LongitudinalDataset, VarianceComponents

DEFAULT_D = [[0.4, -0.2, 0.1], [-0.2, 0.5, 0.2], [0.1, 0.2, 0.3]]

# members of an extended clan that enter the sample: two first-cousin
# parents and two children each (the children are second cousins across
# branches)
_EXTENDED_SIZE = 6


@dataclass
class SimConfig:
    m: int = 300
    p: int = 1000
    n_causal: int = 20
    h2_S: float = 0.1
    h2_g: float = 0.2
    sigma2: float = 2.0
    D: list = field(default_factory=lambda: [row[:] for row in DEFAULT_D])
    phi: float = 1.0
    n_populations: int = 3
    intercept_range: tuple = (0.1, 0.3)
    fst: float = 0.01
    maf_range: tuple = (0.05, 0.5)
    visits_min: int = 1
    visits_max: int = 5
    age_mean: float = 10.0
    age_sd: float = 3.0
    age_range: tuple = (5.0, 16.0)
    binary: bool = False
    prevalence: float = 0.2
    pedigree: str = "extended"
    related_fraction: float = 0.5
    family_size: int = 5
    n_markers: int = 20000
    population_covariates: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.m < 1 or self.p < 1:
            raise ValueError("m and p must be positive")
        if not 0 <= self.n_causal <= self.p:
            raise ValueError("n_causal must lie in [0, p]")
        if self.h2_S < 0 or self.h2_g < 0 or not self.h2_S + self.h2_g < 1:
            raise ValueError("heritability fractions must satisfy 0 <= h2_S + h2_g < 1")
        if self.sigma2 <= 0 or self.phi <= 0:
            raise ValueError("sigma2 and phi must be positive")
        D = np.asarray(self.D, dtype=float)
        if D.ndim != 2 or D.shape[0] != D.shape[1] or D.shape[0] > 3:
            raise ValueError("D must be a square matrix with at most 3 rows")
        if not np.allclose(D, D.T):
            raise ValueError("D must be symmetric")
        try:
            np.linalg.cholesky(D)
        except np.linalg.LinAlgError:
            raise ValueError("D must be positive definite") from None
        if not 0 < self.prevalence < 1:
            raise ValueError("prevalence must lie in (0, 1)")
        if not 1 <= self.visits_min <= self.visits_max:
            raise ValueError("visit counts must satisfy 1 <= visits_min <= visits_max")
        if self.n_populations < 1:
            raise ValueError("n_populations must be positive")
        lo, hi = self.intercept_range
        if not 0 < lo <= hi < 1:
            raise ValueError("population intercept range must lie in (0, 1)")
        if self.pedigree not in ("extended", "sibships", "unrelated"):
            raise ValueError(f"unknown pedigree design {self.pedigree!r}")
        if not 0 <= self.related_fraction <= 1:
            raise ValueError("related_fraction must lie in [0, 1]")
        if self.n_markers < 1:
            raise ValueError("n_markers must be positive")
        if not 0 < self.fst < 1:
            raise ValueError("fst must lie in (0, 1)")

    @property
    def tau(self) -> float:
        return self.h2_g * self.sigma2

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown simulation settings: {sorted(unknown)}")
        d = dict(d)
        for key in ("intercept_range", "maf_range", "age_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class SimTruth:
    causal: np.ndarray
    beta: np.ndarray
    b0: np.ndarray
    b1: np.ndarray
    vc: VarianceComponents
    population: np.ndarray
    pop_intercepts: np.ndarray
    family: np.ndarray
    cutoff: float | None = None
    variant_ids: list = field(default_factory=list)

    @property
    def causal_ids(self) -> list:
        return [self.variant_ids[j] for j in self.causal]

    def to_dict(self) -> dict:
        return {"kind": "sim-truth", "producer": "simulate", "causal": self.causal.tolist(),
                "causal_ids": self.causal_ids, "beta": self.beta.tolist(), "b0": self.b0.tolist(),
                "b1": self.b1.tolist(), "vc": self.vc.as_dict(), "population": self.population.tolist(),
                "pop_intercepts": self.pop_intercepts.tolist(), "family": self.family.tolist(),
                "cutoff": self.cutoff, "variant_ids": list(self.variant_ids)}

    @classmethod
    def from_dict(cls, d: dict) -> "SimTruth":
        if d.get("kind") != "sim-truth":
            raise ValueError(f"expected a 'sim-truth' document, got {d.get('kind')!r}")
        return cls(causal=np.asarray(d["causal"], dtype=np.int64), beta=np.asarray(d["beta"]),
                   b0=np.asarray(d["b0"]), b1=np.asarray(d["b1"]),
                   vc=VarianceComponents.from_dict(d["vc"]), population=np.asarray(d["population"]),
                   pop_intercepts=np.asarray(d["pop_intercepts"]), family=np.asarray(d["family"]),
                   cutoff=d.get("cutoff"), variant_ids=d.get("variant_ids", []))

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path: str) -> "SimTruth":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class Cohort:
    """Sampled individuals: candidate and marker genotypes with labels."""

    candidates: GenotypeMatrix
    markers: GenotypeMatrix
    population: np.ndarray
    family: np.ndarray
    grm: Grm


def _clan_plan(cfg: SimConfig) -> list[tuple[str, int]]:
    """List of (design, size) units whose sizes sum to m."""
    plan = []
    related = int(round(cfg.related_fraction * cfg.m)) if cfg.pedigree != "unrelated" else 0
    unit = _EXTENDED_SIZE if cfg.pedigree == "extended" else max(cfg.family_size, 2)
    n_units = related // unit
    plan += [(cfg.pedigree, unit)] * n_units
    plan += [("single", 1)] * (cfg.m - n_units * unit)
    return plan


def _inherit(rng, mother: np.ndarray, father: np.ndarray) -> np.ndarray:
    """Child haplotype pair (2, L) from two parents' (2, L) haplotypes."""
    L = mother.shape[1]
    cols = np.arange(L)
    return np.stack([mother[rng.integers(0, 2, L), cols], father[rng.integers(0, 2, L), cols]])


def synthetic_cohort(cfg: SimConfig, rng: np.random.Generator) -> Cohort:
    L = cfg.p + cfg.n_markers
    lo, hi = cfg.maf_range
    anc = rng.uniform(lo, hi, L)
    a = anc * (1 - cfg.fst) / cfg.fst
    b = (1 - anc) * (1 - cfg.fst) / cfg.fst
    freqs = np.clip(rng.beta(a[None, :].repeat(cfg.n_populations, 0),
                             b[None, :].repeat(cfg.n_populations, 0)), 1e-4, 1 - 1e-4)

    def founder(pop):
        return (rng.random((2, L)) < freqs[pop]).astype(np.int8)

    plan = _clan_plan(cfg)
    haps, pops, fams = [], [], []
    for f, (design, size) in enumerate(plan):
        pop = f % cfg.n_populations
        if design == "single":
            members = [founder(pop)]
        elif design == "sibships":
            mother, father = founder(pop), founder(pop)
            members = [_inherit(rng, mother, father) for _ in range(size)]
        else:
            gm, gf = founder(pop), founder(pop)
            sib1, sib2 = _inherit(rng, gm, gf), _inherit(rng, gm, gf)
            cousin1 = _inherit(rng, sib1, founder(pop))
            cousin2 = _inherit(rng, sib2, founder(pop))
            members = []
            for parent in (cousin1, cousin2):
                spouse = founder(pop)
                members += [parent, _inherit(rng, parent, spouse), _inherit(rng, parent, spouse)]
        haps += members
        pops += [pop] * len(members)
        fams += [f] * len(members)
    counts = np.array([h.sum(axis=0) for h in haps], dtype=np.int8)
    ids = [f"s{i + 1}" for i in range(cfg.m)]
    fam_ids = [f"f{f + 1}" for f in fams]
    cand = GenotypeMatrix.from_allele_counts(counts[:, :cfg.p], variant_ids=[f"snp{j + 1}" for j in range(cfg.p)],
                                             sample_ids=ids, family_ids=fam_ids)
    mark = GenotypeMatrix.from_allele_counts(counts[:, cfg.p:],
                                             variant_ids=[f"mk{j + 1}" for j in range(cfg.n_markers)],
                                             sample_ids=ids, family_ids=fam_ids)
    pops = np.array(pops)
    V = ancestry_adjusted_grm(counts[:, cfg.p:].astype(float), pops, freqs[:, cfg.p:])
    grm = Grm(V=V, sample_ids=ids, n_markers=cfg.n_markers)
    return Cohort(cand, mark, pops, np.array(fams), grm)


def ancestry_adjusted_grm(counts, population, freqs) -> np.ndarray:
    """Kinship-style GRM standardizing markers by each sample's population frequencies.

    Using ancestry-specific frequencies removes the population-structure
    signal so that off-diagonal entries reflect recent relatedness only.
    """
    f = freqs[np.asarray(population)]
    X = (counts - 2 * f) / np.sqrt(2 * f * (1 - f))
    return X @ X.T / counts.shape[1]


def binarize(y, prevalence: float = 0.2) -> tuple[np.ndarray, float]:
    """``1{y > c}`` with ``c`` the empirical ``(1 - prevalence)`` quantile of ``y``."""
    if not 0 < prevalence < 1:
        raise ValueError("prevalence must lie in (0, 1)")
    y = np.asarray(y, dtype=float)
    if y.size == 0 or np.ptp(y) == 0:
        raise ValueError("cannot binarize a constant outcome")
    c = float(np.quantile(y, 1.0 - prevalence))
    return (y > c).astype(float), c


def _visits(cfg: SimConfig, rng: np.random.Generator, m: int):
    lo, hi = cfg.age_range
    a, b = (lo - cfg.age_mean) / cfg.age_sd, (hi - cfg.age_mean) / cfg.age_sd
    ages = stats.truncnorm.rvs(a, b, loc=cfg.age_mean, scale=cfg.age_sd, size=(m, cfg.visits_max),
                               random_state=rng)
    keep = rng.integers(cfg.visits_min, cfg.visits_max + 1, m)
    out = []
    for i in range(m):
        chosen = rng.choice(cfg.visits_max, keep[i], replace=False)
        out.append(np.sort(ages[i, chosen]))
    return out


def simulate_dataset(cfg: SimConfig, genotypes: GenotypeMatrix | None = None, grm: Grm | None = None,
                     population=None, family=None, rng: np.random.Generator | None = None):
    """Simulate outcomes on given (or synthetic) genotypes.

    Returns ``(dataset, truth, extras)``; ``extras`` holds the cohort, the
    GRM and the raw covariates used to write phenotype files.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    cohort = None
    if genotypes is None:
        cohort = synthetic_cohort(cfg, rng)
        genotypes = cohort.candidates
        population = cohort.population
        family = cohort.family
        if grm is None:
            grm = cohort.grm
    m, p = genotypes.m, genotypes.p
    if grm is None:
        raise ValueError("a GRM is required with user-supplied genotypes")
    if grm.m != m:
        raise ValueError("GRM dimension does not match the genotype sample count")
    if m != cfg.m or p != cfg.p:
        raise ValueError("genotype dimensions do not match the configuration")
    population = np.zeros(m, dtype=np.int64) if population is None else np.asarray(population)
    family = np.arange(m) if family is None else np.asarray(family)
    n_pop = int(population.max()) + 1

    G_std, _ = standardize_counts(genotypes.calls)
    causal = np.sort(rng.choice(p, cfg.n_causal, replace=False))
    beta = np.zeros(p)
    if cfg.n_causal:
        beta[causal] = rng.normal(0.0, np.sqrt(cfg.h2_S * cfg.sigma2 / cfg.n_causal), cfg.n_causal)
    w, Q = np.linalg.eigh(grm.V)
    b0 = Q @ (np.sqrt(np.maximum(w, 0.0)) * rng.normal(size=m)) * np.sqrt(cfg.tau)
    D = np.asarray(cfg.D, dtype=float)
    r = D.shape[0]
    b1 = rng.normal(size=(m, r)) @ np.linalg.cholesky(D).T
    pi0 = rng.uniform(*cfg.intercept_range, n_pop)
    sex = rng.integers(0, 2, m).astype(float)

    ages = _visits(cfg, rng, m)
    counts = np.array([a.size for a in ages])
    s = np.repeat(np.arange(m), counts)
    n = s.size
    age = np.concatenate(ages)
    exposure = rng.normal(size=n)
    z_all = np.column_stack([np.ones(n), (age - cfg.age_mean) / cfg.age_sd, exposure])
    Z = z_all[:, :r]
    eps = rng.normal(0.0, np.sqrt(cfg.phi), n)
    logit = np.log(pi0 / (1 - pi0))
    y = (logit[population[s]] - np.log(1.3) * sex[s] + np.log(1.05) * age + (G_std @ beta)[s]
         + b0[s] + np.sum(Z * b1[s], axis=1) + eps)
    cutoff = None
    if cfg.binary:
        y, cutoff = binarize(y, cfg.prevalence)

    cov_cols = [np.ones(n), sex[s], age]
    cov_names = ["intercept", "sex", "age"]
    if cfg.population_covariates:
        for k in range(1, n_pop):
            cov_cols.append((population[s] == k).astype(float))
            cov_names.append(f"pop{k + 1}")
    slope_names = ["intercept", "age_std", "exposure"][:r]
    data = LongitudinalDataset(
        y=y, C=np.column_stack(cov_cols), Z=Z, subject_of=s, G=genotypes.imputed()[s],
        subject_ids=genotypes.sample_ids, covariate_names=cov_names, slope_names=slope_names,
        variant_ids=genotypes.variant_ids, check_genotypes=False)
    vc = VarianceComponents(tau=[cfg.tau], D=D, phi=cfg.phi if not cfg.binary else 1.0)
    truth = SimTruth(causal=causal, beta=beta, b0=b0, b1=b1, vc=vc, population=population,
                     pop_intercepts=pi0, family=family, cutoff=cutoff,
                     variant_ids=list(genotypes.variant_ids))
    extras = {"cohort": cohort, "grm": grm, "age": age, "exposure": exposure, "sex": sex,
              "genotypes": genotypes}
    return data, truth, extras
