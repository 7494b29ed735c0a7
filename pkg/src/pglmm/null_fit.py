"""Null-model fit: PQL working solves for ``(theta, b)`` alternating with
AI-REML updates of the variance components ``(phi, tau, psi)``.

The marginal working covariance is

    Sigma = L A L^T + R,   A = sum_k tau_k V_k,
    R = Z~ (D kron I_m) Z~^T + W^{-1},

with ``R`` block diagonal by subject.  ``Sigma^{-1}`` is applied through the
Woodbury identity; the capacity matrix ``(L^T R^{-1} L + A^{-1})^{-1}`` is
formed as ``A - A S (I + S A S)^{-1} S A`` with ``S = diag(sqrt(d))`` so a
singular ``A`` (``tau -> 0`` or a rank-deficient GRM) needs no special case.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg as sla

from .family import LinkFamily, evaluate_family
from .grm import RelatednessBlocks, relatedness_blocks
from .model import (
    LongitudinalDataset,
    VarianceComponents,
    random_effect_transpose,
    working_update,
)

log = logging.getLogger(__name__)

RESULT_KIND = "null-fit"


class RankDeficientError(ValueError):
    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__("fixed-effect design is rank deficient; dependent columns: "
                         + ", ".join(map(str, self.columns)))


def full_rank_columns(X, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Split columns of ``X`` into an independent subset and the rest (pivoted QR)."""
    X = np.asarray(X, dtype=float)
    if X.shape[1] == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    _, R, piv = sla.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > tol * max(diag[0], np.finfo(float).tiny)))
    return np.sort(piv[:rank]), np.sort(piv[rank:])


def dense_sigma(data: LongitudinalDataset, blocks: RelatednessBlocks, vc: VarianceComponents,
                inv_weight_unit) -> np.ndarray:
    """Explicit ``n x n`` working covariance; for small problems and checks."""
    s = data.subject_of
    Sigma = blocks.dense(vc.tau)[np.ix_(s, s)]
    if data.r:
        same = s[:, None] == s[None, :]
        Sigma += same * (data.Z @ vc.D @ data.Z.T)
    Sigma[np.diag_indices(data.n)] += vc.phi * np.asarray(inv_weight_unit, dtype=float)
    return Sigma


class SigmaOps:
    """Factorized working covariance for one ``(vc, W)`` pair."""

    def __init__(self, data: LongitudinalDataset, blocks: RelatednessBlocks,
                 vc: VarianceComponents, inv_weight_unit):
        self.data = data
        self.blocks = blocks
        self.vc = vc
        self.unit = np.asarray(inv_weight_unit, dtype=float)
        idx, mask = data.padded_index
        self.idx, self.mask = idx, mask
        m, q = idx.shape
        self.Zp = data.Z[idx] * mask[..., None]
        R = self.Zp @ vc.D @ self.Zp.transpose(0, 2, 1) if data.r else np.zeros((m, q, q))
        # padded slots get a unit diagonal and never see nonzero input
        R[:, np.arange(q), np.arange(q)] += np.where(mask, vc.phi * self.unit[idx], 1.0)
        try:
            Lr = np.linalg.cholesky(R)
        except np.linalg.LinAlgError:
            raise np.linalg.LinAlgError("a subject covariance block is not positive definite") from None
        self.logdet_R = 2.0 * float(np.log(np.diagonal(Lr, axis1=1, axis2=2)).sum())
        Li = np.linalg.inv(Lr)
        self.Rinv = Li.transpose(0, 2, 1) @ Li
        self.u = np.einsum("mij,mj->mi", self.Rinv, mask.astype(float))
        self.d = self.u.sum(axis=1)
        self.dense_fallback = False
        self._build_capacity()

    def _build_capacity(self):
        self.K_groups = []
        logdet = 0.0
        try:
            for (gidx, _), A in zip(self.blocks.groups, self.blocks.combined(self.vc.tau)):
                sq = np.sqrt(self.d[gidx])
                SA = sq[:, :, None] * A
                M = np.eye(A.shape[-1]) + SA * sq[:, None, :]
                Lm = np.linalg.cholesky(M)
                logdet += 2.0 * float(np.log(np.diagonal(Lm, axis1=1, axis2=2)).sum())
                K = A - SA.transpose(0, 2, 1) @ np.linalg.solve(M, SA)
                self.K_groups.append(0.5 * (K + K.transpose(0, 2, 1)))
            self.logdet = self.logdet_R + logdet
        except np.linalg.LinAlgError:
            log.warning("capacity matrix is singular; falling back to a dense covariance solve")
            Sigma = dense_sigma(self.data, self.blocks, self.vc, self.unit)
            sign, ld = np.linalg.slogdet(Sigma)
            if sign <= 0:
                raise np.linalg.LinAlgError("working covariance is not positive definite") from None
            self.dense_fallback = True
            self._Sinv = np.linalg.inv(Sigma)
            self.logdet = float(ld)

    def capacity_apply(self, t) -> np.ndarray:
        out = np.zeros_like(t)
        for (gidx, _), K in zip(self.blocks.groups, self.K_groups):
            out[gidx] = K @ t[gidx]
        return out

    def capacity_diag(self) -> np.ndarray:
        out = np.zeros(self.data.m)
        for (gidx, _), K in zip(self.blocks.groups, self.K_groups):
            out[gidx] = np.diagonal(K, axis1=1, axis2=2)
        return out

    def apply_inverse(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        X = x.reshape(self.data.n, -1)
        if self.dense_fallback:
            out = self._Sinv @ X
        else:
            xp = X[self.idx] * self.mask[..., None]
            y = self.Rinv @ xp
            t = np.einsum("mq,mqk->mk", self.u, xp)
            y -= self.u[..., None] * self.capacity_apply(t)[:, None, :]
            out = y[self.mask]
        return out.ravel() if x.ndim == 1 else out

    def subject_inverse_blocks(self) -> np.ndarray:
        """Diagonal blocks ``(Sigma^{-1})_{ii}`` in padded layout (m, q, q)."""
        if self.dense_fallback:
            S = self._Sinv[self.idx[:, :, None], self.idx[:, None, :]]
            return S * (self.mask[:, :, None] & self.mask[:, None, :])
        kd = self.capacity_diag()
        return self.Rinv - kd[:, None, None] * self.u[:, :, None] * self.u[:, None, :]

    def kinship_space_blocks(self) -> list[np.ndarray]:
        """``L^T Sigma^{-1} L`` restricted to the relatedness block pattern, per group."""
        out = []
        if self.dense_fallback:
            s = self.data.subject_of
            LtSL = np.zeros((self.data.m, self.data.m))
            np.add.at(LtSL, (s[:, None], s[None, :]), self._Sinv)
            for gidx, _ in self.blocks.groups:
                out.append(LtSL[gidx[:, :, None], gidx[:, None, :]])
            return out
        for (gidx, _), K in zip(self.blocks.groups, self.K_groups):
            dg = self.d[gidx]
            B = -dg[:, :, None] * K * dg[:, None, :]
            ar = np.arange(gidx.shape[1])
            B[:, ar, ar] += dg
            out.append(B)
        return out

    def observation_rows(self, c: int) -> np.ndarray:
        subs = self.blocks.clusters[c]
        return self.idx[subs][self.mask[subs]]

    def cluster_inverse(self, c: int) -> np.ndarray:
        """Dense ``Sigma^{-1}`` restricted to the observations of relatedness cluster ``c``.

        ``Sigma`` is block diagonal over these observation clusters, so the
        restriction is exact.
        """
        rows = self.observation_rows(c)
        if self.dense_fallback:
            return self._Sinv[np.ix_(rows, rows)]
        subs = self.blocks.clusters[c]
        nc = rows.size
        pos = np.flatnonzero(self.mask[subs].ravel())
        Rb = sla.block_diag(*self.Rinv[subs]) if subs.size > 1 else self.Rinv[subs[0]]
        S = Rb[np.ix_(pos, pos)]
        U = np.zeros((nc, subs.size))
        U[np.arange(nc), np.repeat(np.arange(subs.size), self.data.counts[subs])] = \
            self.u[subs].ravel()[pos]
        g, slot = self.blocks.location[c]
        S -= U @ self.K_groups[g][slot] @ U.T
        return S


def sigma_inverse_apply(ops: SigmaOps, x) -> np.ndarray:
    return ops.apply_inverse(x)


@dataclass
class GlsFit:
    """Profiled fixed effects and the REML pieces at one covariance."""

    theta: np.ndarray
    resid: np.ndarray
    Py: np.ndarray
    T: np.ndarray
    Minv: np.ndarray
    logdet_M: float
    quad: float
    ql: float


def gls(ops: SigmaOps, X, y) -> GlsFit:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    T = ops.apply_inverse(X)
    M = X.T @ T
    M = 0.5 * (M + M.T)
    try:
        cf = sla.cho_factor(M, lower=True)
    except np.linalg.LinAlgError:
        raise RankDeficientError(["<design>"]) from None
    theta = sla.cho_solve(cf, T.T @ y)
    resid = y - X @ theta
    Py = ops.apply_inverse(resid)
    quad = float(resid @ Py)
    logdet_M = 2.0 * float(np.log(np.diag(cf[0])).sum())
    Minv = sla.cho_solve(cf, np.eye(M.shape[0]))
    ql = -0.5 * (ops.logdet + logdet_M + quad)
    return GlsFit(theta, resid, Py, T, Minv, logdet_M, quad, ql)


def apply_projection(ops: SigmaOps, fit: GlsFit, x) -> np.ndarray:
    """``P x = Sigma^{-1} x - Sigma^{-1} X (X^T Sigma^{-1} X)^{-1} X^T Sigma^{-1} x``."""
    x = np.asarray(x, dtype=float)
    Sx = ops.apply_inverse(x)
    return Sx - fit.T @ (fit.Minv @ (fit.T.T @ x))


def reml_objective(ops: SigmaOps, X, y_work) -> float:
    """Quasi-REML log-likelihood ``-1/2 (log|Sigma| + log|X^T Sigma^{-1} X| + r^T Sigma^{-1} r)``."""
    return gls(ops, X, y_work).ql


def solve_mixed_equations(ops: SigmaOps, X, y_work, names=None):
    """Fixed effects by GLS and random-effect BLUPs ``diag{A, D kron I} H^T Sigma^{-1} (y - X theta)``."""
    X = np.asarray(X, dtype=float)
    keep, dep = full_rank_columns(X)
    if dep.size:
        names = names if names is not None else [f"col{j}" for j in range(X.shape[1])]
        raise RankDeficientError([names[j] for j in dep])
    fit = gls(ops, X, y_work)
    return fit.theta, blup(ops, fit.Py)


def blup(ops: SigmaOps, Py) -> np.ndarray:
    data, vc = ops.data, ops.vc
    w = random_effect_transpose(data, Py).reshape(data.r + 1, data.m)
    b0 = ops.blocks.matvec(vc.tau, w[0])
    slopes = vc.D @ w[1:] if data.r else np.zeros((0, data.m))
    return np.concatenate([b0, slopes.ravel()])


class SigmaDerivatives:
    """``dSigma/dvartheta_j`` as operators.

    Order: ``phi`` (when estimated), ``tau_1..tau_K``, then the upper
    triangle of ``D`` row by row.
    """

    def __init__(self, data: LongitudinalDataset, blocks: RelatednessBlocks, inv_weight_unit,
                 estimate_phi: bool):
        self.data = data
        self.blocks = blocks
        self.unit = np.asarray(inv_weight_unit, dtype=float)
        self.kinds: list[tuple] = [("phi",)] if estimate_phi else []
        self.kinds += [("tau", k) for k in range(blocks.K)]
        self.kinds += [("psi", u, v) for u, v in zip(*np.triu_indices(data.r))]

    def __len__(self):
        return len(self.kinds)

    def _Lt(self, X):
        return np.add.reduceat(X, self.data.starts, axis=0)

    def apply(self, j: int, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        X = x.reshape(self.data.n, -1)
        s, Z = self.data.subject_of, self.data.Z
        kind = self.kinds[j]
        if kind[0] == "phi":
            out = self.unit[:, None] * X
        elif kind[0] == "tau":
            out = self.blocks.kernel_matvec(kind[1], self._Lt(X))[s]
        else:
            _, u, v = kind
            out = Z[:, u, None] * self._Lt(Z[:, v, None] * X)[s]
            if u != v:
                out += Z[:, v, None] * self._Lt(Z[:, u, None] * X)[s]
        return out.ravel() if x.ndim == 1 else out

    def trace_sigma_inverse(self, ops: SigmaOps) -> np.ndarray:
        """``tr(Sigma^{-1} dSigma_j)`` for every parameter, using block structure only."""
        out = np.zeros(len(self))
        Sblocks = None
        G = None
        LSL = None
        for j, kind in enumerate(self.kinds):
            if kind[0] == "tau":
                if LSL is None:
                    LSL = ops.kinship_space_blocks()
                out[j] = sum(float(np.sum(B * mats[kind[1]]))
                             for B, (_, mats) in zip(LSL, self.blocks.groups))
                continue
            if Sblocks is None:
                Sblocks = ops.subject_inverse_blocks()
            if kind[0] == "phi":
                diag = np.diagonal(Sblocks, axis1=1, axis2=2)[ops.mask]
                out[j] = float(self.unit @ diag)
            else:
                if G is None:
                    G = np.einsum("mqa,mqp,mpb->ab", ops.Zp, Sblocks, ops.Zp)
                _, u, v = kind
                out[j] = G[u, u] if u == v else G[u, v] + G[v, u]
        return out

    def cluster_products(self, c: int, S: np.ndarray, ops: SigmaOps, which=None) -> dict:
        """``S @ dSigma_j`` restricted to observation cluster ``c`` (``S`` is that block of Sigma^{-1})."""
        data = self.data
        subs = self.blocks.clusters[c]
        rows = ops.observation_rows(c)
        counts = data.counts[subs]
        local_starts = np.r_[0, np.cumsum(counts)[:-1]]
        sl = np.repeat(np.arange(subs.size), counts)
        Zc = data.Z[rows]
        out = {}
        SZ = {}
        for j in (range(len(self)) if which is None else which):
            kind = self.kinds[j]
            if kind[0] == "phi":
                out[j] = S * self.unit[rows][None, :]
            elif kind[0] == "tau":
                SL = np.add.reduceat(S, local_starts, axis=1)
                out[j] = (SL @ self.blocks.block(c, kind[1]))[:, sl]
            else:
                _, u, v = kind
                for a in (u, v):
                    if a not in SZ:
                        SZ[a] = np.add.reduceat(S * Zc[None, :, a], local_starts, axis=1)
                Y = SZ[u][:, sl] * Zc[None, :, v]
                if u != v:
                    Y += SZ[v][:, sl] * Zc[None, :, u]
                out[j] = Y
        return out


def _pd(M: np.ndarray) -> bool:
    if not np.all(np.isfinite(M)):
        return False
    w = np.linalg.eigvalsh(0.5 * (M + M.T))
    return bool(w[0] > 1e-12 * max(abs(w[-1]), 1e-300))


def reml_score_and_ai(ops: SigmaOps, X, y_work, theta_hat=None, deriv: SigmaDerivatives | None = None,
                      estimate_phi: bool = True, fit: GlsFit | None = None):
    """REML score and average-information matrix over the variance parameters.

    ``score_j = 1/2 {e^T Sigma^{-1} dSigma_j Sigma^{-1} e - tr(P dSigma_j)}`` with
    ``e = y - X theta``; ``AI_lj = 1/2 e^T Sigma^{-1} dSigma_l P dSigma_j Sigma^{-1} e``.
    With ``theta_hat`` the GLS estimate, ``Sigma^{-1} e = P y``.
    """
    if deriv is None:
        deriv = SigmaDerivatives(ops.data, ops.blocks, ops.unit, estimate_phi)
    if fit is None:
        fit = gls(ops, X, y_work)
    Se = fit.Py if theta_hat is None else ops.apply_inverse(np.asarray(y_work) - np.asarray(X) @ theta_hat)
    V = np.column_stack([deriv.apply(j, Se) for j in range(len(deriv))])
    quad = Se @ V
    tr = deriv.trace_sigma_inverse(ops)
    XV = [deriv.apply(j, fit.T) for j in range(len(deriv))]
    tr -= np.array([np.sum(fit.Minv * (fit.T.T @ A)) for A in XV])
    score = 0.5 * (quad - tr)
    PV = apply_projection(ops, fit, V)
    AI = 0.5 * V.T @ PV
    return score, 0.5 * (AI + AI.T)


def expected_information(ops: SigmaOps, fit: GlsFit, deriv: SigmaDerivatives, method: str = "auto",
                         n_probes: int = 64, exact_limit: int = 4000, seed: int = 0) -> np.ndarray:
    """``1/2 tr(P dSigma_l P dSigma_j)``.

    ``exact`` works cluster by cluster on the observation blocks of Sigma,
    ``hutchinson`` uses Rademacher probes; ``auto`` is exact when every
    observation cluster has at most ``exact_limit`` rows.
    """
    J = len(deriv)
    n = ops.data.n
    if method == "auto":
        largest = max(ops.observation_rows(c).size for c in range(ops.blocks.n_clusters))
        method = "exact" if largest <= exact_limit else "hutchinson"
    if method == "hutchinson":
        rng = np.random.default_rng(seed)
        Zr = rng.choice([-1.0, 1.0], size=(n, n_probes))
        PZ = apply_projection(ops, fit, Zr)
        Az = [deriv.apply(j, Zr) for j in range(J)]
        PAPz = [apply_projection(ops, fit, deriv.apply(j, PZ)) for j in range(J)]
        F = np.array([[np.sum(Az[l] * PAPz[j]) / n_probes for j in range(J)] for l in range(J)])
        return 0.25 * (F + F.T)
    if method != "exact":
        raise ValueError(f"unknown trace method {method!r}")
    F = np.zeros((J, J))
    for c in range(ops.blocks.n_clusters):
        S = ops.cluster_inverse(c)
        if S.shape[0] <= 1000:
            Y = deriv.cluster_products(c, S, ops)
            for l in range(J):
                for j in range(l, J):
                    F[l, j] += np.sum(Y[l] * Y[j].T)
        else:
            # large clusters: keep the expensive kinship products, rebuild the rest
            heavy = [j for j, k in enumerate(deriv.kinds) if k[0] == "tau"]
            cache = deriv.cluster_products(c, S, ops, heavy)
            for l in range(J):
                Yl = cache[l] if l in cache else deriv.cluster_products(c, S, ops, [l])[l]
                for j in range(l, J):
                    Yj = cache[j] if j in cache else (Yl if j == l else deriv.cluster_products(c, S, ops, [j])[j])
                    F[l, j] += np.sum(Yl * Yj.T)
    F = F + np.triu(F, 1).T
    # low-rank corrections from the fixed-effect projection
    AT = [deriv.apply(j, fit.T) for j in range(J)]
    SAT = [ops.apply_inverse(A) for A in AT]
    TAT = [fit.T.T @ A for A in AT]
    for l in range(J):
        for j in range(l, J):
            cross = np.sum(fit.Minv * (AT[l].T @ SAT[j]))
            low = np.sum((fit.Minv @ TAT[l]) * (fit.Minv @ TAT[j]).T)
            F[l, j] += -2.0 * cross + low
            F[j, l] = F[l, j]
    return 0.5 * F


@dataclass
class NullFitConfig:
    max_iter: int = 100
    tol: float = 1e-6
    tol_work: float = 1e-6
    tau_floor: float = 1e-8
    eig_floor: float = 1e-8
    max_halving: int = 10
    tol_objective: float = 1e-10    # relative REML change counted as flat
    stall_iter: int = 5
    cycle_window: int = 6
    min_damping: float = 1.0 / 64
    trace_method: str = "auto"
    n_probes: int = 64
    exact_limit: int = 4000
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "NullFitConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown null-fit settings: {sorted(unknown)}")
        return cls(**d)


@dataclass
class NullFitResult:
    vc: VarianceComponents
    theta: np.ndarray
    b_hat: np.ndarray
    converged: bool
    iterations: int
    reml_trace: list
    y_work: np.ndarray
    W: np.ndarray
    eta: np.ndarray
    inv_weight_unit: np.ndarray
    family: str
    boundary: list = field(default_factory=list)
    design_columns: list = field(default_factory=list)
    dropped_columns: list = field(default_factory=list)
    subject_ids: list = field(default_factory=list)
    covariate_names: list = field(default_factory=list)
    slope_names: list = field(default_factory=list)
    fallback_steps: int = 0
    weight_underflow: int = 0
    history: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    elapsed: float = 0.0

    @property
    def parameter_names(self) -> list[str]:
        est_phi = LinkFamily.parse(self.family).dispersion_free
        return VarianceComponents.parameter_names(self.vc.K, self.vc.r, est_phi)

    def to_dict(self) -> dict:
        arr = lambda a: np.asarray(a, dtype=float).tolist()  # noqa: E731
        return {
            "kind": RESULT_KIND, "producer": "fit-null", "family": self.family,
            "vc": self.vc.as_dict(), "theta": arr(self.theta), "b_hat": arr(self.b_hat),
            "converged": bool(self.converged), "iterations": int(self.iterations),
            "reml_trace": [float(v) for v in self.reml_trace], "y_work": arr(self.y_work),
            "W": arr(self.W), "eta": arr(self.eta), "inv_weight_unit": arr(self.inv_weight_unit),
            "boundary": list(self.boundary), "design_columns": [int(c) for c in self.design_columns],
            "dropped_columns": list(self.dropped_columns), "subject_ids": list(self.subject_ids),
            "covariate_names": list(self.covariate_names), "slope_names": list(self.slope_names),
            "fallback_steps": int(self.fallback_steps), "weight_underflow": int(self.weight_underflow),
            "history": self.history, "config": self.config, "elapsed": float(self.elapsed),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NullFitResult":
        if d.get("kind") != RESULT_KIND:
            raise ValueError(f"expected a {RESULT_KIND!r} document, got {d.get('kind')!r}")
        a = lambda k: np.asarray(d[k], dtype=float)  # noqa: E731
        return cls(vc=VarianceComponents.from_dict(d["vc"]), theta=a("theta"), b_hat=a("b_hat"),
                   converged=d["converged"], iterations=d["iterations"], reml_trace=d["reml_trace"],
                   y_work=a("y_work"), W=a("W"), eta=a("eta"), inv_weight_unit=a("inv_weight_unit"),
                   family=d["family"], boundary=d["boundary"], design_columns=d["design_columns"],
                   dropped_columns=d["dropped_columns"], subject_ids=d["subject_ids"],
                   covariate_names=d["covariate_names"], slope_names=d["slope_names"],
                   fallback_steps=d["fallback_steps"], weight_underflow=d["weight_underflow"],
                   history=d.get("history", []), config=d.get("config", {}),
                   elapsed=d.get("elapsed", 0.0))

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path: str) -> "NullFitResult":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _glm_start(data: LongitudinalDataset, family: LinkFamily, X: np.ndarray) -> np.ndarray:
    """Fixed effects of the GLM without random effects (IRLS)."""
    a = data.weights
    if family is LinkFamily.GAUSSIAN:
        sw = np.sqrt(a)
        return np.linalg.lstsq(X * sw[:, None], data.y * sw, rcond=None)[0]
    theta = np.zeros(X.shape[1])
    for _ in range(50):
        eta = X @ theta
        mu, gp, nu = evaluate_family(family, eta)
        w = a / (nu * gp ** 2)
        z = eta + gp * (data.y - mu)
        sw = np.sqrt(w)
        new = np.linalg.lstsq(X * sw[:, None], z * sw, rcond=None)[0]
        if np.max(np.abs(new - theta)) < 1e-10:
            return new
        theta = new
    return theta


def _project(vec, K: int, r: int, estimate_phi: bool, phi: float, floor: float, eig_floor: float):
    vc = VarianceComponents.from_vector(vec, K, r, estimate_phi, phi)
    tau = np.maximum(vc.tau, floor)
    D = vc.D
    if r:
        w, Q = np.linalg.eigh(D)
        if w[0] < eig_floor:
            D = (Q * np.maximum(w, eig_floor)) @ Q.T
    return VarianceComponents(tau=tau, D=D, phi=max(vc.phi, floor) if estimate_phi else phi)


def _bounded_step(J, S, vec, lower, floor, psi_slice=None, D=None, eig_floor=1e-8):
    """Newton step ``J^{-1} S`` subject to the active bounds.

    Parameters on their lower bound whose step points outward are held
    fixed; likewise eigen-directions of ``D`` sitting on the eigenvalue floor
    are held fixed to first order (``q^T dD q = 0``).
    """
    cons = []
    directions = []
    if D is not None and D.shape[0]:
        w, Q = np.linalg.eigh(D)
        edge = max(100.0 * eig_floor, 1e-6 * max(w[-1], 0.0))
        iu = np.triu_indices(D.shape[0])
        for k in np.flatnonzero(w <= edge):
            q = Q[:, k]
            a = np.zeros(vec.size)
            a[psi_slice] = np.where(iu[0] == iu[1], 1.0, 2.0) * q[iu[0]] * q[iu[1]]
            directions.append(a)
    at_floor = lower & (vec <= floor * (1 + 1e-6))
    for _ in range(vec.size + 1):
        if cons:
            A = np.array(cons)
            kkt = np.block([[J, A.T], [A, np.zeros((len(cons), len(cons)))]])
            rhs = np.concatenate([S, np.zeros(len(cons))])
            step = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:vec.size]
        else:
            step = np.linalg.lstsq(J, S, rcond=None)[0]
        added = False
        for j in np.flatnonzero(at_floor & (step < -1e-14 * (1 + abs(vec)))):
            e = np.zeros(vec.size)
            e[j] = 1.0
            cons.append(e)
            at_floor[j] = False
            added = True
        keep = []
        for a in directions:
            if a @ step < 0:
                cons.append(a)
                added = True
            else:
                keep.append(a)
        directions = keep
        if not added:
            return step
    return np.zeros(vec.size)


def fit_null(data: LongitudinalDataset, family, grm, config: NullFitConfig | None = None,
             init: VarianceComponents | None = None) -> NullFitResult:
    """Fit the model without genetic fixed effects.

    Returns the last iterate; ``converged`` is false when the iteration cap
    was reached first.
    """
    t0 = time.perf_counter()
    cfg = config or NullFitConfig()
    family = LinkFamily.parse(family)
    blocks = grm if isinstance(grm, RelatednessBlocks) else relatedness_blocks(grm, data.subject_ids)
    est_phi = family.dispersion_free
    K, r = blocks.K, data.r
    cols, dep = full_rank_columns(data.C)
    if dep.size:
        log.warning("dropping linearly dependent covariates: %s",
                    ", ".join(data.covariate_names[j] for j in dep))
    X = data.C[:, cols]
    Theta = np.zeros(data.C.shape[1])
    Theta[cols] = _glm_start(data, family, X)

    if init is None:
        mu, gp, _ = evaluate_family(family, data.C @ Theta)
        v = float(np.var(gp * (data.y - mu)))
        share = 0.5 * v / (K + r)
        init = VarianceComponents(tau=np.full(K, share), D=share * np.eye(r),
                                  phi=v if est_phi else 1.0)
    phi_fixed = 1.0 if not est_phi else init.phi
    vc = _project(init.to_vector(est_phi), K, r, est_phi, phi_fixed, cfg.tau_floor, cfg.eig_floor)
    names = VarianceComponents.parameter_names(K, r, est_phi)
    lower = np.array([nm == "phi" or nm.startswith("tau") for nm in names])
    psi_slice = slice(int(est_phi) + K, None)

    b = np.zeros(data.m * (r + 1))
    y_prev = None
    trace, history = [], []
    converged = False
    fallbacks = 0
    it = 0
    underflow = 0
    flat = 0
    stopped_by = None
    damp = 1.0
    changes = []
    for it in range(1, cfg.max_iter + 1):
        state = working_update(data, family, vc, Theta=Theta, b=b)
        underflow = state.weight_underflow
        unit = state.inv_weight_unit
        ops = SigmaOps(data, blocks, vc, unit)
        fit = gls(ops, X, state.y_work)
        deriv = SigmaDerivatives(data, blocks, unit, est_phi)
        score, AI = reml_score_and_ai(ops, X, state.y_work, deriv=deriv, fit=fit)
        vec = vc.to_vector(est_phi)

        EI = None
        methods = ["expected"] if it == 1 else (["average", "expected"] if _pd(AI) else ["expected"])
        if it > 1 and methods[0] == "expected":
            fallbacks += 1
        accepted = None
        used = None
        for meth in methods:
            if meth == "expected":
                if EI is None:
                    EI = expected_information(ops, fit, deriv, cfg.trace_method, cfg.n_probes,
                                              cfg.exact_limit, cfg.seed)
                Jm = EI
            else:
                Jm = AI
            step = _bounded_step(Jm, score, vec, lower, cfg.tau_floor, psi_slice, vc.D, cfg.eig_floor)
            t = damp
            for _ in range(cfg.max_halving + 1):
                cand = _project(vec + t * step, K, r, est_phi, phi_fixed, cfg.tau_floor, cfg.eig_floor)
                try:
                    ops_c = SigmaOps(data, blocks, cand, unit)
                    fit_c = gls(ops_c, X, state.y_work)
                except np.linalg.LinAlgError:
                    t *= 0.5
                    continue
                if fit_c.ql >= fit.ql - 1e-10 * (1.0 + abs(fit.ql)):
                    accepted = (cand, ops_c, fit_c)
                    break
                t *= 0.5
            if accepted is not None:
                used = meth
                break
            if meth == "average":
                fallbacks += 1
        if accepted is None:
            accepted = (vc, ops, fit)
            used = "none"
        vc_new, ops_new, fit_new = accepted

        b = blup(ops_new, fit_new.Py)
        Theta = np.zeros(data.C.shape[1])
        Theta[cols] = fit_new.theta
        new_vec = vc_new.to_vector(est_phi)
        dtheta = float(np.max(np.abs(new_vec - vec) / (np.abs(vec) + 1.0))) if vec.size else 0.0
        dwork = np.inf if y_prev is None else float(
            np.max(np.abs(state.y_work - y_prev)) / (np.max(np.abs(y_prev)) + 1.0))
        y_prev = state.y_work
        trace.append(fit_new.ql)
        history.append({"iteration": it, "ql_before": fit.ql, "ql_after": fit_new.ql,
                        "method": used, "damping": damp, "rel_change": dtheta, "work_change": dwork,
                        "vartheta": new_vec.tolist()})
        log.debug("iter %d ql=%.6f change=%.2e method=%s", it, fit_new.ql, dtheta, used)
        vc = vc_new
        changes.append(max(dtheta, dwork if np.isfinite(dwork) else dtheta))
        # a limit cycle between the working response and the bounded step:
        # shrink the steps once the changes stop contracting
        w = cfg.cycle_window
        if len(changes) >= 2 * w and min(changes[-w:]) > 0.5 * min(changes[-2 * w:-w]) \
                and damp > cfg.min_damping:
            damp = max(0.5 * damp, cfg.min_damping)
            changes.clear()
            log.debug("damping steps to %.3g", damp)
        if dtheta < cfg.tol and dwork < cfg.tol_work:
            converged, stopped_by = True, "parameters"
            break
        # along a nearly flat ridge (D close to singular) the parameters can
        # drift while the objective no longer moves
        flat = flat + 1 if abs(fit_new.ql - fit.ql) <= cfg.tol_objective * (1.0 + abs(fit.ql)) else 0
        if flat >= cfg.stall_iter and dwork < cfg.tol_work:
            converged, stopped_by = True, "objective"
            log.info("stopping on a flat objective after %d iterations", it)
            break

    if not converged:
        log.warning("null fit did not converge in %d iterations", cfg.max_iter)
    elif history:
        history[-1]["stopped_by"] = stopped_by
    final = working_update(data, family, vc, Theta=Theta, b=b)
    boundary = [nm for nm, val, lo in zip(names, vc.to_vector(est_phi), lower)
                if lo and val <= cfg.tau_floor * (1 + 1e-6)]
    if r and np.linalg.eigvalsh(vc.D)[0] <= cfg.eig_floor * (1 + 1e-6):
        boundary.append("D")
    if boundary:
        log.warning("parameters at the lower bound: %s", ", ".join(boundary))
    return NullFitResult(
        vc=vc, theta=Theta, b_hat=b, converged=converged, iterations=it, reml_trace=trace,
        y_work=final.y_work, W=final.W, eta=final.eta, inv_weight_unit=final.inv_weight_unit,
        family=family.value, boundary=boundary, design_columns=cols.tolist(),
        dropped_columns=[data.covariate_names[j] for j in dep], subject_ids=list(data.subject_ids),
        covariate_names=list(data.covariate_names), slope_names=list(data.slope_names),
        fallback_steps=fallbacks, weight_underflow=max(underflow, final.weight_underflow),
        history=history, config=asdict(cfg), elapsed=time.perf_counter() - t0)


def null_sigma_ops(result: NullFitResult, data: LongitudinalDataset, grm) -> tuple[SigmaOps, GlsFit]:
    """Rebuild the factorized covariance and GLS pieces at a stored null fit."""
    blocks = grm if isinstance(grm, RelatednessBlocks) else relatedness_blocks(grm, data.subject_ids)
    ops = SigmaOps(data, blocks, result.vc, result.inv_weight_unit)
    X = data.C[:, result.design_columns]
    return ops, gls(ops, X, result.y_work)
