"""Lasso and adaptive-lasso regularization paths with frozen variance components.

At each lambda the fixed effects ``Theta = (theta, beta)`` and the random
effects (in the eigenbasis of their prior covariance, ``b = U delta``) are
updated in turn: coordinate descent for ``Theta`` with ``delta`` minimized out
(the working covariance ``Sigma`` carries the random effects), then a ridge
solve for ``delta`` given ``Theta``.  Binary traits refresh the working vector and weights between
cycles; Gaussian traits compute them once.
"""

from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from numba import njit

from .family import LinkFamily, quasi_loglik
from .genotype_io import standardize_counts
from .grm import RelatednessBlocks, relatedness_blocks
from .model import LongitudinalDataset, VarianceComponents, working_update
from .null_fit import NullFitResult, SigmaOps

log = logging.getLogger(__name__)

PATH_KIND = "lasso-path"
EIGEN_FLOOR = 1e-10
WEIGHT_CAP = 1e6
COLUMN_CHUNK = 256
GRAM_LIMIT = 4000


@dataclass
class PriorEigen:
    """Eigendecomposition of ``diag{sum_k tau_k V_k, D kron I_m}``.

    Stored by block: per-cluster eigenvectors of the polygenic part and the
    eigenvectors of ``D``.  ``order`` sorts the concatenated eigenvalues in
    decreasing order; ``Lambda`` and the columns of ``dense_U()`` follow it.
    """

    m: int
    r: int
    clusters: list
    poly_vectors: list
    poly_values: list
    D_vectors: np.ndarray
    D_values: np.ndarray
    order: np.ndarray
    Lambda: np.ndarray
    floored: int = 0

    @property
    def size(self) -> int:
        return self.m * (self.r + 1)

    def _raw_U(self) -> np.ndarray:
        M = self.size
        U = np.zeros((M, M))
        col = 0
        for idx, Qc in zip(self.clusters, self.poly_vectors):
            U[np.ix_(idx, np.arange(col, col + idx.size))] = Qc
            col += idx.size
        if self.r:
            U[self.m:, self.m:] = np.kron(self.D_vectors, np.eye(self.m))
        return U

    def dense_U(self) -> np.ndarray:
        return self._raw_U()[:, self.order]

    def u_h(self, data: LongitudinalDataset) -> np.ndarray:
        """``U_H = H U`` (n x m(r+1)), assembled from the block structure."""
        n, m = data.n, self.m
        s = data.subject_of
        out = np.zeros((n, self.size))
        col = 0
        for idx, Qc in zip(self.clusters, self.poly_vectors):
            local = -np.ones(m, dtype=np.int64)
            local[idx] = np.arange(idx.size)
            rows = np.flatnonzero(local[s] >= 0)
            out[rows, col:col + idx.size] = Qc[local[s[rows]]]
            col += idx.size
        if self.r:
            ZQ = data.Z @ self.D_vectors
            for k in range(self.r):
                out[np.arange(n), m + k * m + s] = ZQ[:, k]
        return out[:, self.order]

    def to_b(self, delta) -> np.ndarray:
        raw = np.zeros(self.size)
        raw[self.order] = delta
        b = np.zeros(self.size)
        col = 0
        for idx, Qc in zip(self.clusters, self.poly_vectors):
            b[idx] = Qc @ raw[col:col + idx.size]
            col += idx.size
        if self.r:
            b[self.m:] = (self.D_vectors @ raw[self.m:].reshape(self.r, self.m)).ravel()
        return b

    def to_delta(self, b) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        raw = np.zeros(self.size)
        col = 0
        for idx, Qc in zip(self.clusters, self.poly_vectors):
            raw[col:col + idx.size] = Qc.T @ b[idx]
            col += idx.size
        if self.r:
            raw[self.m:] = (self.D_vectors.T @ b[self.m:].reshape(self.r, self.m)).ravel()
        return raw[self.order]


def eigen_prior(vc: VarianceComponents, grm, m: int | None = None, r: int | None = None,
                subject_ids=None) -> PriorEigen:
    """Block eigendecomposition of the random-effect prior covariance."""
    if isinstance(grm, RelatednessBlocks):
        blocks = grm
    else:
        if subject_ids is None:
            if m is None:
                raise ValueError("m or subject_ids is required to align the GRM")
            subject_ids = [str(i) for i in range(m)]
        blocks = relatedness_blocks(grm, subject_ids)
    m = blocks.m if m is None else m
    r = vc.r if r is None else r
    if blocks.m != m or vc.r != r:
        raise ValueError("variance components do not match the requested dimensions")
    vecs, vals = [], []
    for c in range(blocks.n_clusters):
        A = sum(vc.tau[k] * blocks.block(c, k) for k in range(blocks.K))
        w, Q = np.linalg.eigh(A)
        vecs.append(Q)
        vals.append(w)
    if r:
        wd, Qd = np.linalg.eigh(vc.D)
    else:
        wd, Qd = np.zeros(0), np.zeros((0, 0))
    lam = np.concatenate(vals + [np.repeat(wd, m)])
    floored = int(np.count_nonzero(lam < EIGEN_FLOOR))
    if floored:
        log.warning("%d prior eigenvalues below %.0e were floored", floored, EIGEN_FLOOR)
        lam = np.maximum(lam, EIGEN_FLOOR)
    order = np.argsort(-lam, kind="stable")
    return PriorEigen(m, r, list(blocks.clusters), vecs, vals, Qd, wd, order, lam[order], floored)


class RidgeSolver:
    """Solves ``(U_H^T W U_H + Lambda^{-1}) delta = U_H^T W e`` in the scaled form
    ``(B^T B + I) zeta = B^T W^{1/2} e`` with ``B = W^{1/2} U_H Lambda^{1/2}``,
    ``delta = Lambda^{1/2} zeta``.  Uses the n x n push-through form when n is
    the smaller dimension.  The factorization is reused while ``W`` is fixed.
    """

    def __init__(self, UH: np.ndarray, Lambda: np.ndarray, W: np.ndarray):
        self.sl = np.sqrt(Lambda)
        self.sw = np.sqrt(W)
        self.B = (self.sw[:, None] * UH) * self.sl[None, :]
        n, M = self.B.shape
        self.primal = M <= n
        A = self.B.T @ self.B if self.primal else self.B @ self.B.T
        A[np.diag_indices_from(A)] += 1.0
        self.regularized = False
        try:
            self.cf = sla.cho_factor(A, lower=True)
        except np.linalg.LinAlgError:
            self.regularized = True
            A[np.diag_indices_from(A)] += 1e-10 * np.trace(A) / A.shape[0]
            self.cf = sla.cho_factor(A, lower=True)

    def solve(self, e) -> np.ndarray:
        t = self.sw * e
        if self.primal:
            zeta = sla.cho_solve(self.cf, self.B.T @ t)
        else:
            zeta = self.B.T @ sla.cho_solve(self.cf, t)
        return self.sl * zeta


def ridge_delta_update(pe: PriorEigen, W, y_work, X, Theta, UH: np.ndarray | None = None,
                       data: LongitudinalDataset | None = None) -> np.ndarray:
    """``argmin (e - U_H delta)^T W (e - U_H delta) + delta^T Lambda^{-1} delta`` with ``e = y - X Theta``."""
    if UH is None:
        if data is None:
            raise ValueError("either UH or data is required")
        UH = pe.u_h(data)
    e = np.asarray(y_work, dtype=float) - np.asarray(X) @ np.asarray(Theta)
    return RidgeSolver(UH, pe.Lambda, np.asarray(W, dtype=float)).solve(e)


@njit(cache=True)
def _cd_pass(X, Xg, resid, coef, xgx, scale, pen, idx):
    # gradient columns Xg are W X for diagonal weights or Sigma^{-1} X when
    # the random effects are profiled out; the residual is always y - X coef
    biggest = 0.0
    n = X.shape[0]
    for jj in range(idx.size):
        j = idx[jj]
        if xgx[j] <= 0.0:
            continue
        g = 0.0
        for i in range(n):
            g += Xg[i, j] * resid[i]
        old = coef[j]
        z = g + xgx[j] * old
        if pen[j] > 0.0:
            if z > pen[j]:
                new = (z - pen[j]) / xgx[j]
            elif z < -pen[j]:
                new = (z + pen[j]) / xgx[j]
            else:
                new = 0.0
        else:
            new = z / xgx[j]
        d = new - old
        if d != 0.0:
            for i in range(n):
                resid[i] -= d * X[i, j]
            coef[j] = new
            c = abs(d) * scale[j]
            if c > biggest:
                biggest = c
    return biggest


@njit(cache=True)
def _cov_solve(G, grad, coef, xgx, scale, pen, tol, max_sweeps):
    # active-set sweeps on cached inner products: grad_k = Xg_k^T resid
    k = coef.size
    sweeps = 0
    while sweeps < max_sweeps:
        biggest = 0.0
        for j in range(k):
            old = coef[j]
            z = grad[j] + xgx[j] * old
            if pen[j] > 0.0:
                if z > pen[j]:
                    new = (z - pen[j]) / xgx[j]
                elif z < -pen[j]:
                    new = (z + pen[j]) / xgx[j]
                else:
                    new = 0.0
            else:
                new = z / xgx[j]
            d = new - old
            if d != 0.0:
                for i in range(k):
                    grad[i] -= d * G[i, j]
                coef[j] = new
                c = abs(d) * scale[j]
                if c > biggest:
                    biggest = c
        sweeps += 1
        if biggest < tol:
            return sweeps, True
    return sweeps, False


def _coordinate_descent(X, Xg, y, Theta_init, penalty, wsum, tol, max_sweeps):
    X = np.asfortranarray(X, dtype=float)
    Xg = np.asfortranarray(Xg, dtype=float)
    coef = np.array(Theta_init, dtype=float)
    pen = np.ascontiguousarray(penalty, dtype=float)
    xgx = np.einsum("ij,ij->j", X, Xg)
    dead = xgx <= 1e-12 * max(float(np.max(xgx, initial=0.0)), float(wsum), 1e-300)
    xgx[dead] = 0.0
    coef[dead & (pen > 0)] = 0.0
    scale = np.sqrt(xgx / wsum)
    y = np.asarray(y, dtype=float)
    everything = np.arange(coef.size)
    sweeps = 0
    while sweeps < max_sweeps:
        # exact residual before every full pass
        resid = y - X @ coef
        change = _cd_pass(X, Xg, resid, coef, xgx, scale, pen, everything)
        sweeps += 1
        if change < tol:
            return coef, True, sweeps
        act = np.flatnonzero(((coef != 0.0) | (pen == 0.0)) & ~dead)
        if act.size > GRAM_LIMIT:
            resid = y - X @ coef
            while sweeps < max_sweeps:
                sweeps += 1
                if _cd_pass(X, Xg, resid, coef, xgx, scale, pen, act) < tol:
                    break
            continue
        XA, XgA = X[:, act], Xg[:, act]
        G = np.ascontiguousarray(XgA.T @ XA)
        grad = XgA.T @ (y - X @ coef)
        ca = coef[act].copy()
        used, _ = _cov_solve(G, grad, ca, xgx[act], scale[act], pen[act], float(tol), int(max_sweeps - sweeps))
        sweeps += used
        coef[act] = ca
    return coef, False, sweeps


def bcd_theta_update(X, W, y_work, offset, Theta_init, penalty, tol: float = 1e-7,
                     max_sweeps: int = 100000):
    """Coordinate descent for ``1/2 sum w (y - offset - X Theta)^2 + sum_j penalty_j |Theta_j|``.

    ``penalty`` is ``lambda * nu_j`` per column, 0 for unpenalized columns.
    Columns with zero weighted variance are held at 0.  Convergence is judged
    by the largest coordinate change measured in weighted-RMS units of its
    column.  Returns ``(Theta, converged, sweeps)``.
    """
    X = np.asarray(X, dtype=float)
    w = np.asarray(W, dtype=float)
    y = np.asarray(y_work, dtype=float) - np.asarray(offset, dtype=float)
    return _coordinate_descent(X, w[:, None] * X, y, Theta_init, penalty, float(w.sum()), tol, max_sweeps)


def profiled_theta_update(X, SinvX, y_work, Theta_init, penalty, wsum: float, tol: float = 1e-7,
                          max_sweeps: int = 100000):
    """Coordinate descent for ``1/2 (y - X Theta)^T Sigma^{-1} (y - X Theta) + sum_j penalty_j |Theta_j|``.

    This is the fixed-effect problem with the random effects minimized out
    exactly; ``SinvX`` is ``Sigma^{-1} X`` for the current weights.
    """
    return _coordinate_descent(X, SinvX, y_work, Theta_init, penalty, wsum, tol, max_sweeps)


def compute_lambda_max(X_pen, W, resid, weights) -> float:
    """``max_j |sum_i w_i x_ij r_i| / nu_j`` over columns with ``nu_j > 0``."""
    nu = np.asarray(weights, dtype=float)
    if not np.any(nu > 0):
        raise ValueError("no column is penalized (all weights are zero)")
    g = np.abs(np.asarray(X_pen).T @ (np.asarray(W) * np.asarray(resid)))
    return float(np.max(g[nu > 0] / nu[nu > 0]))


def adaptive_weights(beta_init, gamma: float, cap: float = WEIGHT_CAP) -> np.ndarray:
    """``nu_j = |beta_j|^-gamma``; zero (or tiny) estimates are capped at ``cap``."""
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    beta = np.abs(np.asarray(beta_init, dtype=float))
    if gamma == 0:
        return np.ones_like(beta)
    with np.errstate(divide="ignore"):
        nu = beta ** (-gamma)
    capped = ~(nu <= cap)
    if capped.any():
        warnings.warn(f"{int(capped.sum())} adaptive weights capped at {cap:g}", RuntimeWarning,
                      stacklevel=2)
        nu[capped] = cap
    return nu


def lambda_grid(lambda_max: float, n_lambda: int = 100, ratio: float = 0.01) -> np.ndarray:
    """Decreasing grid, evenly spaced on the log10 scale from ``lambda_max`` to ``ratio * lambda_max``."""
    if lambda_max <= 0:
        raise ValueError("lambda_max must be positive")
    return np.logspace(np.log10(lambda_max), np.log10(lambda_max * ratio), n_lambda)


@dataclass
class PathConfig:
    n_lambda: int = 100
    lambda_min_ratio: float = 0.01
    lambdas: list | None = None
    max_cycles: int = 50
    tol: float = 1e-6
    cd_tol: float = 1e-7
    max_sweeps: int = 100000
    standardize: str = "population"

    @classmethod
    def from_dict(cls, d: dict) -> "PathConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown path settings: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LassoPath:
    lambdas: np.ndarray
    lambda_max: float
    coef_std: np.ndarray
    coef: np.ndarray
    theta_std: np.ndarray
    theta: np.ndarray
    delta: np.ndarray
    b: np.ndarray
    objective: np.ndarray
    converged: np.ndarray
    cycles: np.ndarray
    kkt: np.ndarray
    weights: np.ndarray
    family: str
    variant_ids: list
    covariate_names: list
    subject_ids: list
    slope_names: list
    design_columns: list
    g_mean: np.ndarray
    g_sd: np.ndarray
    random_effects: bool = True
    provenance: dict = field(default_factory=dict)

    @property
    def df(self) -> np.ndarray:
        return np.count_nonzero(self.coef_std, axis=1)

    def active_set(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.coef_std[k])

    def to_dict(self) -> dict:
        arr = lambda a: np.asarray(a).tolist()  # noqa: E731
        return {"kind": PATH_KIND, "producer": "fit-path", "family": self.family,
                "lambdas": arr(self.lambdas), "lambda_max": self.lambda_max,
                "coef_std": arr(self.coef_std), "coef": arr(self.coef), "theta_std": arr(self.theta_std),
                "theta": arr(self.theta), "delta": arr(self.delta), "b": arr(self.b),
                "objective": arr(self.objective), "converged": arr(self.converged),
                "cycles": arr(self.cycles), "kkt": arr(self.kkt), "weights": arr(self.weights),
                "variant_ids": list(self.variant_ids), "covariate_names": list(self.covariate_names),
                "subject_ids": list(self.subject_ids), "slope_names": list(self.slope_names),
                "design_columns": [int(c) for c in self.design_columns], "g_mean": arr(self.g_mean),
                "g_sd": arr(self.g_sd), "random_effects": self.random_effects,
                "provenance": self.provenance}

    @classmethod
    def from_dict(cls, d: dict) -> "LassoPath":
        if d.get("kind") != PATH_KIND:
            raise ValueError(f"expected a {PATH_KIND!r} document, got {d.get('kind')!r}")
        a = lambda k, dt=float: np.asarray(d[k], dtype=dt)  # noqa: E731
        L = len(d["lambdas"])
        return cls(lambdas=a("lambdas"), lambda_max=d["lambda_max"],
                   coef_std=a("coef_std").reshape(L, -1), coef=a("coef").reshape(L, -1),
                   theta_std=a("theta_std").reshape(L, -1), theta=a("theta").reshape(L, -1),
                   delta=a("delta").reshape(L, -1), b=a("b").reshape(L, -1),
                   objective=a("objective"), converged=a("converged", bool), cycles=a("cycles", int),
                   kkt=a("kkt"), weights=a("weights"), family=d["family"],
                   variant_ids=d["variant_ids"], covariate_names=d["covariate_names"],
                   subject_ids=d["subject_ids"], slope_names=d["slope_names"],
                   design_columns=d["design_columns"], g_mean=a("g_mean"), g_sd=a("g_sd"),
                   random_effects=d["random_effects"], provenance=d.get("provenance", {}))

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path: str) -> "LassoPath":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def write_tables(self, path_table: str, coef_table: str) -> None:
        """Delimited path summary and the nonzero coefficients per lambda."""
        with open(path_table, "w", encoding="utf-8") as fh:
            fh.write("index\tlambda\tdf\tobjective\tconverged\tcycles\tkkt_max\n")
            for k, lam in enumerate(self.lambdas):
                fh.write(f"{k}\t{lam:.10g}\t{self.df[k]}\t{self.objective[k]:.10g}\t"
                         f"{int(self.converged[k])}\t{self.cycles[k]}\t{self.kkt[k]:.3g}\n")
        with open(coef_table, "w", encoding="utf-8") as fh:
            fh.write("index\tkind\tcolumn_id\tvalue_std\tvalue\n")
            for k in range(len(self.lambdas)):
                for j, name in enumerate(self.covariate_names):
                    if self.theta[k, j] != 0:
                        fh.write(f"{k}\tcovariate\t{name}\t{self.theta_std[k, j]:.10g}\t"
                                 f"{self.theta[k, j]:.10g}\n")
                for j in self.active_set(k):
                    fh.write(f"{k}\tvariant\t{self.variant_ids[j]}\t{self.coef_std[k, j]:.10g}\t"
                             f"{self.coef[k, j]:.10g}\n")


class _PathEngine:
    """Shared machinery for one dataset, family and frozen variance components."""

    def __init__(self, data, family, vc, pe, blocks, Xc, Gs, nu, cfg):
        self.data, self.family, self.vc, self.pe, self.cfg = data, family, vc, pe, cfg
        self.blocks = blocks
        self.c = Xc.shape[1]
        self.X = np.asfortranarray(np.hstack([Xc, Gs]))
        self.nu = nu
        self.UH = pe.u_h(data) if pe is not None else np.zeros((data.n, 0))
        self.Lambda = pe.Lambda if pe is not None else np.zeros(0)
        self.gaussian = family is LinkFamily.GAUSSIAN
        self._state = None
        self._ridge = None
        self._SinvX = None

    def eta(self, Theta, delta):
        return self.X @ Theta + self.UH @ delta

    def refresh(self, Theta, delta):
        st = working_update(self.data, self.family, self.vc, Theta=Theta, b=None,
                            eta=self.eta(Theta, delta))
        self._state = st
        if self.pe is not None:
            self._ridge = RidgeSolver(self.UH, self.Lambda, st.W)
            ops = SigmaOps(self.data, self.blocks, self.vc, st.inv_weight_unit)
            self._SinvX = np.empty_like(self.X)
            for a in range(0, self.X.shape[1], COLUMN_CHUNK):
                cols = slice(a, a + COLUMN_CHUNK)
                self._SinvX[:, cols] = ops.apply_inverse(self.X[:, cols]).reshape(self.data.n, -1)
        return st

    def penalty(self, lam):
        pen = np.zeros(self.X.shape[1])
        if np.isinf(lam):
            pen[self.c:] = np.where(self.nu > 0, np.inf, 0.0)
        else:
            pen[self.c:] = lam * self.nu
        return pen

    def solve(self, lam, Theta, delta):
        cfg = self.cfg
        pen = self.penalty(lam)
        converged = False
        cycles = 0
        if self._state is None or not self.gaussian:
            self.refresh(Theta, delta)
        for cycles in range(1, cfg.max_cycles + 1):
            st = self._state
            if self.pe is not None:
                Theta_new, _, _ = profiled_theta_update(self.X, self._SinvX, st.y_work, Theta, pen,
                                                        float(st.W.sum()), cfg.cd_tol, cfg.max_sweeps)
                delta_new = self._ridge.solve(st.y_work - self.X @ Theta_new)
            else:
                delta_new = delta
                Theta_new, _, _ = bcd_theta_update(self.X, st.W, st.y_work, 0.0, Theta, pen,
                                                   cfg.cd_tol, cfg.max_sweeps)
            old = np.concatenate([Theta, delta])
            new = np.concatenate([Theta_new, delta_new])
            change = float(np.max(np.abs(new - old)) / (np.max(np.abs(old)) + 1.0)) if old.size else 0.0
            Theta, delta = Theta_new, delta_new
            if not self.gaussian:
                prev = st.y_work
                st = self.refresh(Theta, delta)
                change = max(change, float(np.max(np.abs(st.y_work - prev)) / (np.max(np.abs(prev)) + 1.0)))
            if change < cfg.tol:
                converged = True
                break
        return Theta, delta, converged, cycles

    def gradient(self, Theta, delta):
        st = self._state
        resid = st.y_work - self.eta(Theta, delta)
        return self.X[:, self.c:].T @ (st.W * resid)

    def objective(self, lam, Theta, delta):
        mu = self.family.inverse_link(self.eta(Theta, delta))
        nll = -float(np.sum(quasi_loglik(self.family, self.data.y, mu, self.vc.phi, self.data.weights)))
        prior = 0.5 * float(np.sum(delta ** 2 / self.Lambda)) if delta.size else 0.0
        return nll + prior + lam * float(np.sum(self.nu * np.abs(Theta[self.c:])))

    def kkt(self, lam, Theta, delta, scale):
        g = self.gradient(Theta, delta)
        beta = Theta[self.c:]
        pen = lam * self.nu
        act = beta != 0
        viol = np.zeros_like(g)
        viol[act] = np.abs(g[act] - pen[act] * np.sign(beta[act]))
        viol[~act] = np.maximum(np.abs(g[~act]) - pen[~act], 0.0)
        return float(viol.max() / scale) if viol.size else 0.0


def _run_path(data, family, vc, pe, blocks, Theta0, delta0, cfg, weights, provenance, design_columns):
    family = LinkFamily.parse(family)
    if data.p == 0:
        raise ValueError("the dataset has no genotype columns to penalize")
    nu = np.ones(data.p) if weights is None else np.asarray(weights, dtype=float)
    if nu.size != data.p or np.any(nu < 0):
        raise ValueError("penalty weights must be non-negative, one per variant")
    Xc = data.C[:, design_columns]
    Gs, mono, gmean, gsd = standardize_counts(data.G, cfg.standardize, return_moments=True)
    if mono.any():
        log.info("%d monomorphic variants are held at zero", int(mono.sum()))
    eng = _PathEngine(data, family, vc, pe, blocks, Xc, Gs, nu, cfg)

    Theta = np.concatenate([Theta0, np.zeros(data.p)])
    delta = np.asarray(delta0, dtype=float)
    Theta, delta, ok0, _ = eng.solve(np.inf, Theta, delta)
    if not eng.gaussian:
        eng.refresh(Theta, delta)
    resid = eng._state.y_work - eng.eta(Theta, delta)
    lam_max = compute_lambda_max(Gs, eng._state.W, resid, nu)
    lambdas = (np.asarray(cfg.lambdas, dtype=float) if cfg.lambdas is not None
               else lambda_grid(lam_max, cfg.n_lambda, cfg.lambda_min_ratio))
    if np.any(np.diff(lambdas) >= 0) or np.any(lambdas <= 0):
        raise ValueError("lambda grid must be positive and strictly decreasing")

    L, p, c = lambdas.size, data.p, Xc.shape[1]
    out = {k: [] for k in ("coef_std", "theta_std", "delta", "b", "objective", "converged",
                           "cycles", "kkt")}
    for k, lam in enumerate(lambdas):
        Theta, delta, ok, cyc = eng.solve(lam, Theta, delta)
        if not ok:
            log.warning("lambda index %d (%.4g) did not converge in %d cycles", k, lam, cyc)
        if not eng.gaussian:
            eng.refresh(Theta, delta)
        out["coef_std"].append(Theta[c:].copy())
        out["theta_std"].append(Theta[:c].copy())
        out["delta"].append(delta.copy())
        out["b"].append(pe.to_b(delta) if pe is not None else np.zeros(data.m * (data.r + 1)))
        out["objective"].append(eng.objective(lam, Theta, delta))
        out["converged"].append(ok)
        out["cycles"].append(cyc)
        out["kkt"].append(eng.kkt(lam, Theta, delta, lam_max))

    coef_std = np.array(out["coef_std"]).reshape(L, p)
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where(gsd > 0, coef_std / np.where(gsd > 0, gsd, 1.0), 0.0)
    theta_full_std = np.zeros((L, data.C.shape[1]))
    theta_full_std[:, design_columns] = np.array(out["theta_std"]).reshape(L, c)
    theta_full = theta_full_std.copy()
    # fold the genotype centering into the intercept column
    theta_full[:, 0] -= coef @ gmean
    prov = dict(provenance)
    prov.update({"n_lambda": int(L), "lambda_min_ratio": cfg.lambda_min_ratio,
                 "grid": "log10" if cfg.lambdas is None else "user", "beta0_converged": bool(ok0)})
    return LassoPath(
        lambdas=lambdas, lambda_max=lam_max, coef_std=coef_std, coef=coef, theta_std=theta_full_std,
        theta=theta_full, delta=np.array(out["delta"]).reshape(L, -1),
        b=np.array(out["b"]).reshape(L, -1), objective=np.array(out["objective"]),
        converged=np.array(out["converged"], dtype=bool), cycles=np.array(out["cycles"]),
        kkt=np.array(out["kkt"]), weights=nu, family=family.value,
        variant_ids=list(data.variant_ids), covariate_names=list(data.covariate_names),
        subject_ids=list(data.subject_ids), slope_names=list(data.slope_names),
        design_columns=list(design_columns), g_mean=gmean, g_sd=gsd,
        random_effects=pe is not None, provenance=prov)


def fit_path(data: LongitudinalDataset, family, null_result: NullFitResult, grm,
             config: PathConfig | None = None, weights=None) -> LassoPath:
    """Regularization path of the penalized mixed model with ``vc`` frozen at the null fit."""
    t0 = time.perf_counter()
    cfg = config or PathConfig()
    if list(null_result.subject_ids) != list(data.subject_ids):
        raise ValueError("null fit and dataset disagree on subjects")
    blocks = grm if isinstance(grm, RelatednessBlocks) else relatedness_blocks(grm, data.subject_ids)
    pe = eigen_prior(null_result.vc, blocks, data.m, data.r)
    cols = list(null_result.design_columns)
    Theta0 = np.asarray(null_result.theta)[cols]
    delta0 = pe.to_delta(null_result.b_hat)
    prov = {"null_fit_iterations": null_result.iterations, "vc": null_result.vc.as_dict(),
            "eigen_floored": pe.floored}
    path = _run_path(data, family, null_result.vc, pe, blocks, Theta0, delta0, cfg, weights, prov, cols)
    path.provenance["elapsed"] = time.perf_counter() - t0
    return path


def fit_lasso_path(data: LongitudinalDataset, family, config: PathConfig | None = None,
                   weights=None) -> LassoPath:
    """Plain (no random effects) lasso path on the same design and grid rules."""
    from .null_fit import _glm_start, full_rank_columns

    cfg = config or PathConfig()
    family = LinkFamily.parse(family)
    cols, _ = full_rank_columns(data.C)
    Theta0 = _glm_start(data, family, data.C[:, cols])
    vc = VarianceComponents(tau=[0.0], D=np.zeros((data.r, data.r)), phi=1.0)
    return _run_path(data, family, vc, None, None, Theta0, np.zeros(0), cfg, weights,
                     {"comparator": "plain lasso"}, list(cols))


def predict(path: LassoPath, k: int, newdata: LongitudinalDataset, response: bool = True) -> np.ndarray:
    """Predictions at path entry ``k``.

    Subjects seen in training contribute their BLUPs; unseen subjects get a
    zero random effect.
    """
    family = LinkFamily.parse(path.family)
    if newdata.p != len(path.variant_ids):
        raise ValueError("newdata has a different variant count from the fitted path")
    eta = newdata.C @ path.theta[k] + newdata.G @ path.coef[k]
    m, r = len(path.subject_ids), len(path.slope_names)
    if r != newdata.r:
        raise ValueError("newdata has a different random-slope design from the fitted path")
    pos = {s: i for i, s in enumerate(path.subject_ids)}
    B = path.b[k].reshape(r + 1, m)
    train = np.array([pos.get(s, -1) for s in newdata.subject_ids])[newdata.subject_of]
    seen = train >= 0
    contrib = B[0, train[seen]].copy()
    if r:
        contrib += np.einsum("nk,kn->n", newdata.Z[seen], B[1:, train[seen]])
    eta[seen] += contrib
    return family.inverse_link(eta) if response else eta


def r2_mspe(y, y_hat) -> float:
    """``1 - sum (y - y_hat)^2 / sum (y - mean(y))^2`` on a test set."""
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.size == 0:
        raise ValueError("empty test set")
    if y.shape != y_hat.shape:
        raise ValueError("y and y_hat must have the same shape")
    ss = float(np.sum((y - y.mean()) ** 2))
    if ss == 0.0:
        warnings.warn("test outcome has zero variance; R2_MSPE is undefined", RuntimeWarning,
                      stacklevel=2)
        return float("nan")
    return 1.0 - float(np.sum((y - y_hat) ** 2)) / ss
