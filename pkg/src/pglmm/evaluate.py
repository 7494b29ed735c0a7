"""Selection, bias and prediction summaries plus a single-variant score test."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .genotype_io import standardize_counts
from .model import LongitudinalDataset, VarianceComponents
from .null_fit import NullFitResult, apply_projection, null_sigma_ops
from .penalized import LassoPath

RECALL_GRID = np.round(np.linspace(0.05, 1.0, 20), 10)


@dataclass
class PrCurve:
    index: np.ndarray      # path entries that produced a point
    df: np.ndarray
    recall: np.ndarray
    precision: np.ndarray
    recall_grid: np.ndarray = field(default_factory=lambda: RECALL_GRID.copy())
    interpolated: np.ndarray | None = None

    def __post_init__(self):
        if self.interpolated is None:
            self.interpolated = np.array([interpolated_precision(self, r) for r in self.recall_grid])

    def at(self, recall: float) -> float:
        return interpolated_precision(self, recall)


def interpolated_precision(curve: PrCurve, recall: float) -> float:
    """Largest precision among points with recall at least ``recall``; 0 when none reach it."""
    ok = curve.recall >= recall - 1e-12
    return float(curve.precision[ok].max()) if ok.any() else 0.0


def selection_curve(active_sets, causal, p: int | None = None) -> PrCurve:
    """Precision and recall for a sequence of selected index sets."""
    causal = set(int(j) for j in causal)
    if not causal:
        raise ValueError("the causal set is empty; recall is undefined")
    idx, df, rec, prec = [], [], [], []
    for k, act in enumerate(active_sets):
        act = set(int(j) for j in act)
        if not act:
            continue
        tp = len(act & causal)
        idx.append(k)
        df.append(len(act))
        rec.append(tp / len(causal))
        prec.append(tp / len(act))
    return PrCurve(np.array(idx, dtype=np.int64), np.array(df, dtype=np.int64), np.array(rec, dtype=float),
                   np.array(prec, dtype=float))


def pr_curve(path: LassoPath, truth) -> PrCurve:
    """Precision-recall points along a path against the true causal variants.

    ``truth`` is a ``SimTruth`` or any object with ``causal_ids``; variants
    are matched by id.
    """
    ids = list(path.variant_ids)
    pos = {v: j for j, v in enumerate(ids)}
    causal_ids = list(truth.causal_ids)
    missing = [v for v in causal_ids if v not in pos]
    if causal_ids and len(missing) == len(causal_ids):
        raise ValueError("path and truth share no variant ids")
    if missing:
        warnings.warn(f"{len(missing)} causal variants are absent from the path", RuntimeWarning,
                      stacklevel=2)
    causal = [pos[v] for v in causal_ids if v in pos]
    return selection_curve([path.active_set(k) for k in range(len(path.lambdas))], causal)


@dataclass
class PrBand:
    recall_grid: np.ndarray
    mean: np.ndarray
    lower_se: np.ndarray
    upper_se: np.ndarray
    lower_q: np.ndarray
    upper_q: np.ndarray


def pr_band(curves: list[PrCurve]) -> PrBand:
    """Pointwise band of interpolated precision across replicates.

    Both ``mean +- 1.96 SE`` and the 2.5/97.5 percentiles are reported.
    """
    if not curves:
        raise ValueError("no curves to summarize")
    grid = curves[0].recall_grid
    M = np.array([c.interpolated for c in curves])
    mean = M.mean(axis=0)
    se = M.std(axis=0, ddof=1) / np.sqrt(len(curves)) if len(curves) > 1 else np.zeros_like(mean)
    return PrBand(grid, mean, mean - 1.96 * se, mean + 1.96 * se, np.percentile(M, 2.5, axis=0),
                  np.percentile(M, 97.5, axis=0))


@dataclass
class BiasReport:
    names: list
    relative: np.ndarray      # replicates x parameters
    median: np.ndarray
    q25: np.ndarray
    q75: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    excluded: list

    @property
    def iqr(self) -> np.ndarray:
        return self.q75 - self.q25

    def as_dict(self) -> dict:
        return {n: {"median": float(self.median[i]), "q25": float(self.q25[i]), "q75": float(self.q75[i]),
                    "mean": float(self.mean[i]), "sd": float(self.sd[i])} for i, n in enumerate(self.names)}


def bias_report(replicates, estimate_phi: bool = True) -> BiasReport:
    """Relative bias ``(estimate - truth) / truth`` per variance parameter.

    ``replicates`` holds ``(estimate, truth)`` pairs of ``VarianceComponents``
    or plain vectors.  Parameters whose truth is zero are excluded.
    """
    replicates = list(replicates)
    if len(replicates) < 2:
        raise ValueError("bias_report needs at least two replicates")
    est, tru, names = [], [], None
    for e, t in replicates:
        if isinstance(e, VarianceComponents):
            if names is None:
                names = e.parameter_names(len(e.tau), e.D.shape[0], estimate_phi)
            e, t = e.to_vector(estimate_phi), t.to_vector(estimate_phi)
        est.append(np.asarray(e, dtype=float))
        tru.append(np.asarray(t, dtype=float))
    est, tru = np.array(est), np.array(tru)
    if est.shape != tru.shape:
        raise ValueError("estimate and truth vectors differ in length")
    if names is None:
        names = [f"par{i + 1}" for i in range(est.shape[1])]
    zero = np.any(tru == 0, axis=0)
    excluded = [n for n, z in zip(names, zero) if z]
    if excluded:
        warnings.warn(f"parameters with zero truth excluded: {excluded}", RuntimeWarning, stacklevel=2)
    keep = ~zero
    rel = (est[:, keep] - tru[:, keep]) / tru[:, keep]
    q25, med, q75 = np.percentile(rel, [25, 50, 75], axis=0)
    return BiasReport([n for n, k in zip(names, keep) if k], rel, med, q25, q75, rel.mean(axis=0),
                      rel.std(axis=0, ddof=1), excluded)


@dataclass
class ScoreTestResult:
    statistic: np.ndarray
    p_value: np.ndarray
    flagged: np.ndarray     # g^T P g <= 0


def score_test(null_result: NullFitResult, data: LongitudinalDataset, grm, G=None,
               standardize: bool = True) -> ScoreTestResult:
    """Mixed-model score test ``T = (g^T P y)^2 / g^T P g`` per variant, ``chi2(1)`` p-values.

    ``G`` defaults to the dataset's observation-level genotype matrix.
    """
    if not null_result.converged:
        warnings.warn("score test on a null fit that did not converge", RuntimeWarning, stacklevel=2)
    G = data.G if G is None else np.asarray(G, dtype=float)
    G = G.reshape(data.n, -1)
    if standardize:
        G, _ = standardize_counts(G)
    ops, fit = null_sigma_ops(null_result, data, grm)
    PG = apply_projection(ops, fit, G).reshape(G.shape)
    num = (G.T @ fit.Py) ** 2
    den = np.einsum("ij,ij->j", G, PG)
    flagged = den <= 1e-12 * max(float(np.max(np.abs(den), initial=0.0)), 1e-300)
    with np.errstate(divide="ignore", invalid="ignore"):
        T = np.where(flagged, np.nan, num / np.where(flagged, 1.0, den))
    p = np.where(flagged, np.nan, stats.chi2.sf(T, 1))
    return ScoreTestResult(T, p, flagged)


def write_pr_table(path: str, curves: dict) -> None:
    """Rows of (method, replicate, path index, df, recall, precision)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("method\treplicate\tindex\tdf\trecall\tprecision\n")
        for method, reps in curves.items():
            for rep, c in enumerate(reps):
                for i in range(len(c.index)):
                    fh.write(f"{method}\t{rep}\t{c.index[i]}\t{c.df[i]}\t{c.recall[i]:.6g}\t{c.precision[i]:.6g}\n")


def write_band_table(path: str, bands: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("method\trecall\tmean\tlower_se\tupper_se\tlower_q\tupper_q\n")
        for method, b in bands.items():
            for i, r in enumerate(b.recall_grid):
                fh.write(f"{method}\t{r:.4g}\t{b.mean[i]:.6g}\t{b.lower_se[i]:.6g}\t{b.upper_se[i]:.6g}\t"
                         f"{b.lower_q[i]:.6g}\t{b.upper_q[i]:.6g}\n")


def write_bias_table(path: str, report: BiasReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("parameter\tmedian\tq25\tq75\tmean\tsd\n")
        for i, n in enumerate(report.names):
            fh.write(f"{n}\t{report.median[i]:.6g}\t{report.q25[i]:.6g}\t{report.q75[i]:.6g}\t"
                     f"{report.mean[i]:.6g}\t{report.sd[i]:.6g}\n")


def write_score_table(path: str, variant_ids, result: ScoreTestResult) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("variant\tstatistic\tp_value\tflag\n")
        for v, t, p, f in zip(variant_ids, result.statistic, result.p_value, result.flagged):
            fh.write(f"{v}\t{t:.6g}\t{p:.6g}\t{'degenerate' if f else ''}\n")
