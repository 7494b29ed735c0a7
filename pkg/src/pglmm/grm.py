"""Genetic relatedness matrices: dense construction, kinship thresholding and
block-diagonal storage with per-cluster factorizations."""

from __future__ import annotations

import logging
import zipfile
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 2.0 ** (-4.5)
JITTER_SCALE = 1e-8
JITTER_DOUBLINGS = 6


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    def __init__(self, cluster: int, msg: str = ""):
        self.cluster = cluster
        super().__init__(msg or f"relatedness block {cluster} is not positive definite after jitter")


@dataclass(eq=False)
class Grm:
    V: np.ndarray
    sample_ids: list | None = None
    n_markers: int | None = None

    def __post_init__(self):
        self.V = np.asarray(self.V, dtype=float)
        if self.V.ndim != 2 or self.V.shape[0] != self.V.shape[1]:
            raise ValueError("GRM must be square")
        if self.sample_ids is not None:
            self.sample_ids = [str(s) for s in self.sample_ids]
            if len(self.sample_ids) != self.m:
                raise ValueError("sample_ids length does not match GRM size")

    @property
    def m(self) -> int:
        return self.V.shape[0]


def build_grm(X_std, sample_ids=None) -> Grm:
    """``V = X X^T / p`` for standardized genotypes ``X`` (samples x markers)."""
    X = np.asarray(X_std, dtype=float)
    if X.ndim != 2 or X.shape[1] == 0:
        raise ValueError("at least one marker is required to build a GRM")
    V = X @ X.T / X.shape[1]
    V = 0.5 * (V + V.T)
    return Grm(V, sample_ids=sample_ids, n_markers=X.shape[1])


@dataclass(eq=False)
class SparseGrm:
    """Thresholded GRM stored as dense blocks over clusters of relatives.

    ``clusters[c]`` holds original sample indices (ascending); ``blocks[c]``
    the corresponding sub-matrix.  ``permutation`` lists original indices in
    cluster order, so ``to_dense()[perm][:, perm]`` is block diagonal.
    """

    m: int
    clusters: list
    blocks: list
    threshold: float
    sample_ids: list | None = None
    signed: bool = False
    _chol: dict = field(default_factory=dict, repr=False)
    jittered: dict = field(default_factory=dict, repr=False)

    @property
    def permutation(self) -> np.ndarray:
        return np.concatenate(self.clusters) if self.clusters else np.zeros(0, dtype=np.int64)

    @property
    def offsets(self) -> np.ndarray:
        return np.r_[0, np.cumsum([len(c) for c in self.clusters])]

    @property
    def cluster_sizes(self) -> np.ndarray:
        return np.array([len(c) for c in self.clusters])

    def to_dense(self) -> np.ndarray:
        V = np.zeros((self.m, self.m))
        for idx, B in zip(self.clusters, self.blocks):
            V[np.ix_(idx, idx)] = B
        return V

    def matvec(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for idx, B in zip(self.clusters, self.blocks):
            out[idx] = B @ x[idx]
        return out

    def cholesky(self, c: int) -> np.ndarray:
        """Lower Cholesky factor of block ``c``, with jitter repair when needed."""
        if c in self._chol:
            return self._chol[c]
        B = self.blocks[c]
        base = JITTER_SCALE * max(float(np.mean(np.diag(B))), 1e-12)
        jitter = 0.0
        for attempt in range(JITTER_DOUBLINGS + 2):
            try:
                L = np.linalg.cholesky(B + jitter * np.eye(len(B)))
                break
            except np.linalg.LinAlgError:
                if attempt > JITTER_DOUBLINGS:
                    raise NotPositiveDefiniteError(c) from None
                jitter = base if jitter == 0.0 else 2.0 * jitter
        if jitter:
            self.jittered[c] = jitter
            log.warning("relatedness block %d repaired with jitter %.3g", c, jitter)
        self._chol[c] = L
        return L


def _components(adjacency: np.ndarray) -> list[np.ndarray]:
    n_comp, labels = connected_components(sp.csr_matrix(adjacency), directed=False)
    comps = [np.flatnonzero(labels == k) for k in range(n_comp)]
    comps.sort(key=lambda c: c[0])
    return comps


def sparsify(grm: Grm, threshold: float = DEFAULT_THRESHOLD, signed: bool = False) -> SparseGrm:
    """Zero off-diagonal entries below ``threshold`` and group samples into clusters.

    Comparison uses ``|V_ij|`` unless ``signed`` is set.  Clusters are the
    connected components of the graph of surviving off-diagonal entries.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    V = grm.V
    keep = (V >= threshold) if signed else (np.abs(V) >= threshold)
    np.fill_diagonal(keep, False)
    clusters = _components(keep)
    blocks = []
    for idx in clusters:
        B = np.where(keep[np.ix_(idx, idx)], V[np.ix_(idx, idx)], 0.0)
        B[np.diag_indices(len(idx))] = np.diag(V)[idx]
        blocks.append(B)
    return SparseGrm(grm.m, clusters, blocks, float(threshold), grm.sample_ids, signed)


def block_solve(sg: SparseGrm, tau: float, rhs) -> np.ndarray:
    """Solve ``(tau * V_sparse) x = rhs`` cluster by cluster."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    rhs = np.asarray(rhs, dtype=float)
    out = np.empty_like(rhs)
    for c, idx in enumerate(sg.clusters):
        L = sg.cholesky(c)
        out[idx] = sla.cho_solve((L, True), rhs[idx]) / tau
    return out


def block_logdet(sg: SparseGrm, tau: float) -> float:
    if tau <= 0:
        raise ValueError("tau must be positive")
    total = sg.m * np.log(tau)
    for c in range(len(sg.clusters)):
        total += 2.0 * np.sum(np.log(np.diag(sg.cholesky(c))))
    return float(total)


class RelatednessBlocks:
    """``sum_k tau_k V_k`` restricted to a shared block-diagonal pattern.

    Blocks of equal size are stacked so per-block linear algebra runs batched.
    A dense matrix is the single-block special case.
    """

    def __init__(self, m: int, clusters: Sequence[np.ndarray], kernel_blocks: Sequence[Sequence[np.ndarray]]):
        self.m = m
        self.K = len(kernel_blocks)
        self.clusters = [np.asarray(c, dtype=np.int64) for c in clusters]
        sizes = np.array([len(c) for c in self.clusters])
        self.groups = []
        self.members = []
        # cluster c lives at position location[c] = (group, slot)
        self.location = [None] * len(self.clusters)
        for s in np.unique(sizes):
            members = np.flatnonzero(sizes == s)
            idx = np.stack([self.clusters[c] for c in members])
            mats = np.stack([np.stack([kernel_blocks[k][c] for c in members]) for k in range(self.K)])
            self.groups.append((idx, mats))
            self.members.append(members)
            for slot, c in enumerate(members):
                self.location[c] = (len(self.groups) - 1, slot)

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    @property
    def largest_block(self) -> int:
        return max(len(c) for c in self.clusters)

    def block(self, c: int, k: int = 0) -> np.ndarray:
        g, slot = self.location[c]
        return self.groups[g][1][k, slot]

    def combined(self, tau) -> list[np.ndarray]:
        """Per group: stacked blocks of ``sum_k tau_k V_k`` (nb, s, s)."""
        tau = np.asarray(tau, dtype=float)
        return [np.tensordot(tau, mats, axes=1) for _, mats in self.groups]

    def matvec(self, tau, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for (idx, _), A in zip(self.groups, self.combined(tau)):
            out[idx] = np.einsum("bij,bj...->bi...", A, x[idx])
        return out

    def kernel_matvec(self, k: int, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for idx, mats in self.groups:
            out[idx] = np.einsum("bij,bj...->bi...", mats[k], x[idx])
        return out

    def dense(self, tau=None, k: int | None = None) -> np.ndarray:
        out = np.zeros((self.m, self.m))
        for g, (idx, mats) in enumerate(self.groups):
            blocks = mats[k] if k is not None else np.tensordot(np.asarray(tau, float), mats, axes=1)
            for b in range(idx.shape[0]):
                out[np.ix_(idx[b], idx[b])] = blocks[b]
        return out


def _align(ids_from: list | None, size: int, target_ids: Sequence[str]) -> np.ndarray:
    if ids_from is None:
        if size != len(target_ids):
            raise ValueError("GRM has no sample ids and its size does not match the dataset")
        return np.arange(size)
    pos = {s: i for i, s in enumerate(ids_from)}
    missing = [s for s in target_ids if s not in pos]
    if missing:
        raise ValueError(f"{len(missing)} subjects are absent from the GRM (first: {missing[0]!r})")
    return np.array([pos[s] for s in target_ids], dtype=np.int64)


def subset_sparse(sg: SparseGrm, ids: Sequence[str]) -> SparseGrm:
    """Restrict to ``ids`` (in that order), splitting clusters that lose their links."""
    sel = _align(sg.sample_ids, sg.m, ids)
    new_of_old = -np.ones(sg.m, dtype=np.int64)
    new_of_old[sel] = np.arange(sel.size)
    clusters, blocks = [], []
    for idx, B in zip(sg.clusters, sg.blocks):
        local = np.flatnonzero(new_of_old[idx] >= 0)
        if not local.size:
            continue
        Bs = B[np.ix_(local, local)]
        adj = Bs != 0
        np.fill_diagonal(adj, False)
        for comp in _components(adj):
            new_idx = new_of_old[idx[local[comp]]]
            order = np.argsort(new_idx)
            clusters.append(new_idx[order])
            blocks.append(Bs[np.ix_(comp[order], comp[order])])
    order = np.argsort([c[0] for c in clusters])
    return SparseGrm(sel.size, [clusters[i] for i in order], [blocks[i] for i in order],
                     sg.threshold, [str(s) for s in ids], sg.signed)


def relatedness_blocks(grms, subject_ids: Sequence[str]) -> RelatednessBlocks:
    """Align one or more relatedness matrices to the dataset subject order.

    A single ``SparseGrm`` keeps its cluster structure; anything else is
    treated as dense (one block holding every subject).
    """
    if isinstance(grms, (Grm, SparseGrm)):
        grms = [grms]
    grms = list(grms)
    m = len(subject_ids)
    if len(grms) == 1 and isinstance(grms[0], SparseGrm):
        sg = subset_sparse(grms[0], subject_ids)
        blocks = []
        for c, B in enumerate(sg.blocks):
            sg.cholesky(c)
            blocks.append(B + sg.jittered.get(c, 0.0) * np.eye(len(B)))
        return RelatednessBlocks(m, sg.clusters, [blocks])
    mats = []
    for g in grms:
        if isinstance(g, SparseGrm):
            sel = _align(g.sample_ids, g.m, subject_ids)
            mats.append(g.to_dense()[np.ix_(sel, sel)])
        else:
            sel = _align(g.sample_ids, g.m, subject_ids)
            mats.append(g.V[np.ix_(sel, sel)])
    return RelatednessBlocks(m, [np.arange(m)], [[M] for M in mats])


def _savez_fixed(path: str, **arrays) -> None:
    """``np.savez`` with fixed entry timestamps so equal inputs give equal bytes."""
    path = path if str(path).endswith(".npz") else str(path) + ".npz"
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, np.asanyarray(arr), allow_pickle=False)


def save_grm(path: str, grm) -> None:
    """Write a dense or sparse GRM to a numpy ``.npz`` container."""
    ids = np.array(grm.sample_ids if grm.sample_ids is not None else [], dtype=str)
    if isinstance(grm, SparseGrm):
        payload = np.concatenate([B.ravel() for B in grm.blocks]) if grm.blocks else np.zeros(0)
        _savez_fixed(path, kind="sparse", m=grm.m, permutation=grm.permutation, offsets=grm.offsets,
                 payload=payload, threshold=grm.threshold, signed=grm.signed, sample_ids=ids)
    else:
        _savez_fixed(path, kind="dense", m=grm.m, V=grm.V, sample_ids=ids,
                 n_markers=-1 if grm.n_markers is None else grm.n_markers)


def load_grm(path: str):
    with np.load(path, allow_pickle=False) as z:
        kind = str(z["kind"])
        ids = [str(s) for s in z["sample_ids"]] or None
        if kind == "dense":
            nm = int(z["n_markers"])
            return Grm(z["V"], sample_ids=ids, n_markers=None if nm < 0 else nm)
        if kind != "sparse":
            raise ValueError(f"{path}: unknown GRM container kind {kind!r}")
        perm, offs, payload = z["permutation"], z["offsets"], z["payload"]
        clusters, blocks, pos = [], [], 0
        for a, b in zip(offs[:-1], offs[1:]):
            s = int(b - a)
            clusters.append(perm[a:b].astype(np.int64))
            blocks.append(payload[pos:pos + s * s].reshape(s, s).copy())
            pos += s * s
        return SparseGrm(int(z["m"]), clusters, blocks, float(z["threshold"]), ids, bool(z["signed"]))


def write_grm_text(path: str, grm: Grm) -> None:
    ids = grm.sample_ids or [str(i) for i in range(grm.m)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(["sample_id"] + ids) + "\n")
        for i, row in enumerate(grm.V):
            fh.write("\t".join([ids[i]] + [repr(float(v)) for v in row]) + "\n")


def read_grm_text(path: str) -> Grm:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        ids, rows = [], []
        for line in fh:
            if line.strip():
                parts = line.rstrip("\n").split("\t")
                ids.append(parts[0])
                rows.append([float(v) for v in parts[1:]])
    if ids != header[1:]:
        raise ValueError(f"{path}: row ids do not match header ids")
    return Grm(np.array(rows), sample_ids=ids)
