"""Longitudinal data model, variance components and the PQL working state.

Observations are stored subject-major and time-ascending.  The stacked random
effect vector is ``b = (b0_1..b0_m, b1_{1,1}..b1_{1,m}, ..., b1_{r,1}..b1_{r,m})``
so slope ``k`` of subject ``i`` lives at column ``m * (k + 1) + i`` of ``H``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .family import LinkFamily, evaluate_family

WEIGHT_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class LongitudinalDataset:
    """Stacked longitudinal outcome with covariates, genotypes and slopes.

    ``C`` carries the intercept as its first column.  ``Z`` holds the
    subject-specific random-effect covariates (the non-polygenic random
    intercept, when present, is an all-ones column).  ``G`` may have zero
    columns for null-model fits.
    """

    y: np.ndarray
    C: np.ndarray
    Z: np.ndarray
    subject_of: np.ndarray
    G: np.ndarray | None = None
    weights: np.ndarray | None = None
    subject_ids: Sequence[str] | None = None
    covariate_names: Sequence[str] | None = None
    slope_names: Sequence[str] | None = None
    variant_ids: Sequence[str] | None = None
    check_genotypes: bool = field(default=True, repr=False)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        n = y.size
        C = np.asarray(self.C, dtype=float).reshape(n, -1)
        Z = np.asarray(self.Z, dtype=float).reshape(n, -1)
        s = np.asarray(self.subject_of, dtype=np.int64).ravel()
        if s.size != n:
            raise ValueError("subject_of must have one entry per observation")
        if n == 0:
            raise ValueError("dataset has no observations")
        if np.any(np.diff(s) < 0):
            raise ValueError("observations must be ordered subject-major")
        m = int(s.max()) + 1
        if s.min() != 0 or np.unique(s).size != m:
            raise ValueError("subject_of must cover 0..m-1 with at least one observation each")
        G = np.zeros((n, 0)) if self.G is None else np.asarray(self.G, dtype=float)
        if G.ndim != 2 or G.shape[0] != n:
            raise ValueError("G must be an n x p matrix")
        a = np.ones(n) if self.weights is None else np.asarray(self.weights, dtype=float).ravel()
        if a.size != n or np.any(a <= 0):
            raise ValueError("prior weights must be positive, one per observation")
        for name, arr in (("y", y), ("C", C), ("Z", Z), ("G", G), ("weights", a)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains missing or non-finite values")
        if self.check_genotypes and G.shape[1]:
            first = np.r_[0, np.flatnonzero(np.diff(s)) + 1]
            if not np.array_equal(G, G[first][s]):
                raise ValueError("genotype rows must be constant within subject")
        ids = [str(i) for i in range(m)] if self.subject_ids is None else [str(i) for i in self.subject_ids]
        if len(ids) != m:
            raise ValueError("subject_ids length must equal the number of subjects")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "subject_of", s)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "weights", a)
        object.__setattr__(self, "subject_ids", ids)
        if self.covariate_names is None:
            object.__setattr__(self, "covariate_names",
                               ["intercept"] + [f"cov{j}" for j in range(1, C.shape[1])])
        if self.slope_names is None:
            object.__setattr__(self, "slope_names", [f"z{j}" for j in range(Z.shape[1])])
        if self.variant_ids is None:
            object.__setattr__(self, "variant_ids", [f"snp{j}" for j in range(G.shape[1])])

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def m(self) -> int:
        return int(self.subject_of[-1]) + 1

    @property
    def p(self) -> int:
        return self.G.shape[1]

    @property
    def r(self) -> int:
        return self.Z.shape[1]

    @cached_property
    def counts(self) -> np.ndarray:
        return np.bincount(self.subject_of, minlength=self.m)

    @cached_property
    def starts(self) -> np.ndarray:
        return np.r_[0, np.cumsum(self.counts)[:-1]]

    @cached_property
    def padded_index(self) -> tuple[np.ndarray, np.ndarray]:
        """``(idx, mask)`` of shape (m, q) with q the largest subject size.

        ``idx`` holds observation indices (0 where padded) and ``mask`` marks
        the real entries.
        """
        q = int(self.counts.max())
        pos = np.arange(self.n) - self.starts[self.subject_of]
        idx = np.zeros((self.m, q), dtype=np.int64)
        mask = np.zeros((self.m, q), dtype=bool)
        idx[self.subject_of, pos] = np.arange(self.n)
        mask[self.subject_of, pos] = True
        return idx, mask

    def subject_rows(self) -> np.ndarray:
        """Index of the first observation of each subject."""
        return self.starts

    def subset_subjects(self, keep) -> "LongitudinalDataset":
        keep = np.asarray(keep)
        if keep.dtype == bool:
            keep = np.flatnonzero(keep)
        keep = np.sort(keep)
        rows = np.flatnonzero(np.isin(self.subject_of, keep))
        remap = -np.ones(self.m, dtype=np.int64)
        remap[keep] = np.arange(keep.size)
        return dataclasses.replace(
            self, y=self.y[rows], C=self.C[rows], Z=self.Z[rows], G=self.G[rows],
            subject_of=remap[self.subject_of[rows]], weights=self.weights[rows],
            subject_ids=[self.subject_ids[i] for i in keep], check_genotypes=False)

    def with_outcome(self, y) -> "LongitudinalDataset":
        return dataclasses.replace(self, y=np.asarray(y, dtype=float), check_genotypes=False)


@dataclass(frozen=True, eq=False)
class VarianceComponents:
    """Polygenic variances ``tau``, subject random-effect covariance ``D``, dispersion ``phi``."""

    tau: np.ndarray
    D: np.ndarray
    phi: float = 1.0

    def __post_init__(self):
        tau = np.atleast_1d(np.asarray(self.tau, dtype=float))
        D = np.atleast_2d(np.asarray(self.D, dtype=float)) if np.size(self.D) else np.zeros((0, 0))
        if D.shape[0] != D.shape[1]:
            raise ValueError("D must be square")
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "D", 0.5 * (D + D.T))
        object.__setattr__(self, "phi", float(self.phi))

    @property
    def K(self) -> int:
        return self.tau.size

    @property
    def r(self) -> int:
        return self.D.shape[0]

    @property
    def psi(self) -> np.ndarray:
        iu = np.triu_indices(self.r)
        return self.D[iu]

    def validate(self, family: LinkFamily | None = None) -> None:
        if np.any(self.tau < 0):
            raise ValueError("tau must be non-negative")
        if self.r:
            try:
                np.linalg.cholesky(self.D)
            except np.linalg.LinAlgError:
                raise ValueError("D must be positive definite") from None
        if self.phi <= 0:
            raise ValueError("phi must be positive")
        if family is not None and LinkFamily.parse(family) is LinkFamily.BINOMIAL and self.phi != 1.0:
            raise ValueError("phi is fixed at 1 for the binomial family")

    def to_vector(self, estimate_phi: bool) -> np.ndarray:
        parts = [[self.phi]] if estimate_phi else []
        return np.concatenate(parts + [self.tau, self.psi])

    @classmethod
    def from_vector(cls, vec, K: int, r: int, estimate_phi: bool, phi: float = 1.0):
        vec = np.asarray(vec, dtype=float)
        off = 0
        if estimate_phi:
            phi = vec[0]
            off = 1
        tau = vec[off:off + K]
        psi = vec[off + K:]
        D = np.zeros((r, r))
        iu = np.triu_indices(r)
        D[iu] = psi
        D = D + np.triu(D, 1).T
        return cls(tau=tau, D=D, phi=phi)

    @staticmethod
    def parameter_names(K: int, r: int, estimate_phi: bool) -> list[str]:
        names = ["phi"] if estimate_phi else []
        names += ["tau"] if K == 1 else [f"tau{k + 1}" for k in range(K)]
        iu = np.triu_indices(r)
        names += [f"psi{u + 1}{v + 1}" for u, v in zip(*iu)]
        return names

    def as_dict(self) -> dict:
        return {"tau": self.tau.tolist(), "D": self.D.tolist(), "phi": self.phi}

    @classmethod
    def from_dict(cls, d: dict) -> "VarianceComponents":
        r = len(d["D"])
        return cls(tau=d["tau"], D=np.asarray(d["D"], dtype=float).reshape(r, r), phi=d["phi"])


@dataclass(frozen=True, eq=False)
class PqlState:
    """Working-model quantities at the current ``(Theta, b)``.

    ``inv_weight_unit`` is ``nu * g'^2 / a`` so that ``W^{-1} = phi * inv_weight_unit``.
    """

    eta: np.ndarray
    mu: np.ndarray
    W: np.ndarray
    delta_diag: np.ndarray
    y_work: np.ndarray
    Theta: np.ndarray
    b: np.ndarray
    inv_weight_unit: np.ndarray
    weight_underflow: int = 0


def assemble_H(data: LongitudinalDataset) -> sp.csr_matrix:
    """Random-effect design ``H`` (n x m(r+1)) with rows ``(1, Z_ij) kron L_i``."""
    n, m, r = data.n, data.m, data.r
    rows = np.repeat(np.arange(n), r + 1)
    cols = (data.subject_of[:, None] + m * np.arange(r + 1)[None, :]).ravel()
    vals = np.column_stack([np.ones(n), data.Z]).ravel()
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, m * (r + 1)))


def random_effect_predictor(data: LongitudinalDataset, b) -> np.ndarray:
    """``H b`` without forming ``H``."""
    m, r = data.m, data.r
    b = np.asarray(b, dtype=float)
    B = b.reshape(r + 1, m)
    s = data.subject_of
    out = B[0, s].copy()
    if r:
        out += np.einsum("nk,kn->n", data.Z, B[1:, s])
    return out


def random_effect_transpose(data: LongitudinalDataset, v) -> np.ndarray:
    """``H^T v`` without forming ``H``."""
    m, r = data.m, data.r
    v = np.asarray(v, dtype=float)
    out = np.empty((r + 1, m))
    out[0] = np.bincount(data.subject_of, weights=v, minlength=m)
    for k in range(r):
        out[k + 1] = np.bincount(data.subject_of, weights=v * data.Z[:, k], minlength=m)
    return out.ravel()


def linear_predictor(data: LongitudinalDataset, Theta, b) -> np.ndarray:
    X = data.C if Theta.size == data.C.shape[1] else np.hstack([data.C, data.G])
    return X @ Theta + random_effect_predictor(data, b)


def working_update(data: LongitudinalDataset, family, vc: VarianceComponents,
                   state: PqlState | None = None, *, Theta=None, b=None, eta=None) -> PqlState:
    """Recompute mean, weights and working vector at the current linear predictor.

    Either pass an existing ``state`` (its ``eta``, ``Theta`` and ``b`` are
    reused) or give ``Theta``/``b`` (and optionally a precomputed ``eta``).
    Weights below ``1e-12`` are counted in ``weight_underflow``; they are not
    clamped here.
    """
    family = LinkFamily.parse(family)
    if state is not None:
        Theta, b, eta = state.Theta, state.b, state.eta
    Theta = np.asarray(Theta, dtype=float)
    b = np.zeros(data.m * (data.r + 1)) if b is None else np.asarray(b, dtype=float)
    if eta is None:
        eta = linear_predictor(data, Theta, b)
    mu, gp, nu = evaluate_family(family, eta)
    unit = nu * gp ** 2 / data.weights
    W = 1.0 / (vc.phi * unit)
    y_work = eta + gp * (data.y - mu)
    under = int(np.count_nonzero(W < WEIGHT_FLOOR))
    return PqlState(eta=np.asarray(eta, dtype=float), mu=mu, W=W, delta_diag=gp, y_work=y_work,
                    Theta=Theta, b=b, inv_weight_unit=unit, weight_underflow=under)
