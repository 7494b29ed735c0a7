"""Packed biallelic genotype files and delimited phenotype tables.

The genotype container is the usual variant-major 2-bit layout: three header
bytes ``6C 1B 01`` followed by ``ceil(m / 4)`` bytes per variant, four
samples per byte, low bits first.  Codes are 00 (two copies of allele 1),
01 (missing), 10 (heterozygous) and 11 (zero copies of allele 1).
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import LongitudinalDataset

MISSING = -1
MAGIC = bytes([0x6C, 0x1B])
VARIANT_MAJOR = 0x01

# 2-bit code -> copies of allele 1 (-1 = missing)
_CODE_TO_COUNT = np.array([2, MISSING, 1, 0], dtype=np.int8)
# copies of allele 1 (index 0, 1, 2) -> 2-bit code; missing handled separately
_COUNT_TO_CODE = np.array([3, 2, 0], dtype=np.uint8)


class GenotypeFormatError(ValueError):
    pass


class BadMagicError(GenotypeFormatError):
    pass


class UnsupportedModeError(GenotypeFormatError):
    pass


class TruncatedPayloadError(GenotypeFormatError):
    pass


class PhenotypeError(ValueError):
    pass


@dataclass(eq=False)
class GenotypeMatrix:
    """Minor-allele counts (samples x variants, ``MISSING`` for no call).

    ``flipped[j]`` records that allele 1 of the file is the major allele of
    variant ``j``, so the stored counts are ``2 - (allele-1 copies)``.
    """

    calls: np.ndarray
    variant_ids: list
    sample_ids: list
    flipped: np.ndarray | None = None
    chrom: list | None = None
    position: np.ndarray | None = None
    allele1: list | None = None
    allele2: list | None = None
    family_ids: list | None = None

    def __post_init__(self):
        self.calls = np.asarray(self.calls, dtype=np.int8)
        m, p = self.calls.shape
        if len(self.variant_ids) != p or len(self.sample_ids) != m:
            raise ValueError("id lists do not match the call matrix shape")
        bad = (self.calls < MISSING) | (self.calls > 2)
        if bad.any():
            raise ValueError("genotype calls must be 0, 1, 2 or missing")
        self.variant_ids = [str(v) for v in self.variant_ids]
        self.sample_ids = [str(s) for s in self.sample_ids]
        if self.flipped is None:
            self.flipped = np.zeros(p, dtype=bool)
        self.flipped = np.asarray(self.flipped, dtype=bool)
        if self.chrom is None:
            self.chrom = ["1"] * p
        if self.position is None:
            self.position = np.arange(1, p + 1)
        if self.allele1 is None:
            self.allele1 = ["A"] * p
        if self.allele2 is None:
            self.allele2 = ["G"] * p
        if self.family_ids is None:
            self.family_ids = list(self.sample_ids)

    @classmethod
    def from_allele_counts(cls, counts, variant_ids=None, sample_ids=None, **kw):
        """Build from allele-1 counts, orienting every variant to its minor allele."""
        counts = np.asarray(counts, dtype=np.int8)
        m, p = counts.shape
        flipped = _allele1_frequency(counts) > 0.5
        calls = counts.copy()
        cols = np.flatnonzero(flipped)
        sub = calls[:, cols]
        obs = sub != MISSING
        sub[obs] = 2 - sub[obs]
        calls[:, cols] = sub
        return cls(calls=calls,
                   variant_ids=variant_ids or [f"rs{j + 1}" for j in range(p)],
                   sample_ids=sample_ids or [f"s{i + 1}" for i in range(m)],
                   flipped=flipped, **kw)

    @property
    def m(self) -> int:
        return self.calls.shape[0]

    @property
    def p(self) -> int:
        return self.calls.shape[1]

    @property
    def maf(self) -> np.ndarray:
        return _allele1_frequency(self.calls)

    def allele1_counts(self) -> np.ndarray:
        out = self.calls.copy()
        cols = np.flatnonzero(self.flipped)
        sub = out[:, cols]
        obs = sub != MISSING
        sub[obs] = 2 - sub[obs]
        out[:, cols] = sub
        return out

    def imputed(self) -> np.ndarray:
        """Float counts with missing calls replaced by the variant mean."""
        x = self.calls.astype(float)
        miss = self.calls == MISSING
        nobs = (~miss).sum(axis=0)
        mean = np.where(miss, 0.0, x).sum(axis=0) / np.maximum(nobs, 1)
        x[miss] = np.take(mean, np.nonzero(miss)[1])
        return x

    def select_samples(self, ids: Sequence[str]) -> "GenotypeMatrix":
        pos = {s: i for i, s in enumerate(self.sample_ids)}
        idx = [pos[s] for s in ids]
        return GenotypeMatrix(self.calls[idx], list(self.variant_ids), [self.sample_ids[i] for i in idx],
                              self.flipped.copy(), list(self.chrom), self.position.copy(),
                              list(self.allele1), list(self.allele2), [self.family_ids[i] for i in idx])


def _allele1_frequency(counts) -> np.ndarray:
    counts = np.asarray(counts)
    obs = counts != MISSING
    n_obs = obs.sum(axis=0)
    total = np.where(obs, counts, 0).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        freq = np.where(n_obs > 0, total / (2.0 * np.maximum(n_obs, 1)), 0.0)
    return freq


def decode_bed(payload: bytes, m: int, p: int) -> np.ndarray:
    """Decode a variant-major payload (header stripped) into allele-1 counts (m x p)."""
    nb = (m + 3) // 4
    raw = np.frombuffer(payload, dtype=np.uint8).reshape(p, nb)
    codes = (raw[:, :, None] >> np.array([0, 2, 4, 6], dtype=np.uint8)) & 3
    codes = codes.reshape(p, nb * 4)[:, :m]
    return _CODE_TO_COUNT[codes].T.copy()


def encode_bed(counts) -> bytes:
    """Encode allele-1 counts (m x p, ``MISSING`` allowed) into a full file image."""
    counts = np.asarray(counts, dtype=np.int8)
    m, p = counts.shape
    nb = (m + 3) // 4
    codes = np.zeros((p, nb * 4), dtype=np.uint8)
    c = counts.T
    miss = c == MISSING
    codes[:, :m] = np.where(miss, 1, _COUNT_TO_CODE[np.where(miss, 0, c)])
    codes = codes.reshape(p, nb, 4)
    packed = (codes[:, :, 0] | (codes[:, :, 1] << 2) | (codes[:, :, 2] << 4) | (codes[:, :, 3] << 6))
    return MAGIC + bytes([VARIANT_MAJOR]) + packed.astype(np.uint8).tobytes()


def _read_table(path: str, ncols: int) -> list[list[str]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != ncols:
                raise GenotypeFormatError(f"{path}:{lineno}: expected {ncols} columns, got {len(parts)}")
            rows.append(parts)
    return rows


def read_packed_genotypes(prefix: str) -> GenotypeMatrix:
    bim = _read_table(prefix + ".bim", 6)
    fam = _read_table(prefix + ".fam", 6)
    p, m = len(bim), len(fam)
    with open(prefix + ".bed", "rb") as fh:
        data = fh.read()
    if len(data) < 3 or data[:2] != MAGIC:
        raise BadMagicError(f"{prefix}.bed: bad magic bytes")
    if data[2] != VARIANT_MAJOR:
        raise UnsupportedModeError(f"{prefix}.bed: mode byte {data[2]:#04x} is not variant-major")
    expected = p * ((m + 3) // 4) + 3
    if len(data) != expected:
        raise TruncatedPayloadError(
            f"{prefix}.bed: {len(data)} bytes, expected {expected} for {p} variants x {m} samples")
    counts = decode_bed(data[3:], m, p)
    return GenotypeMatrix.from_allele_counts(
        counts,
        variant_ids=[row[1] for row in bim],
        sample_ids=[row[1] for row in fam],
        chrom=[row[0] for row in bim],
        position=np.array([int(row[3]) for row in bim]),
        allele1=[row[4] for row in bim],
        allele2=[row[5] for row in bim],
        family_ids=[row[0] for row in fam],
    )


def write_packed_genotypes(prefix: str, gm: GenotypeMatrix) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(prefix)), exist_ok=True)
    with open(prefix + ".bed", "wb") as fh:
        fh.write(encode_bed(gm.allele1_counts()))
    with open(prefix + ".bim", "w", encoding="utf-8") as fh:
        for j in range(gm.p):
            fh.write(f"{gm.chrom[j]}\t{gm.variant_ids[j]}\t0\t{int(gm.position[j])}\t"
                     f"{gm.allele1[j]}\t{gm.allele2[j]}\n")
    with open(prefix + ".fam", "w", encoding="utf-8") as fh:
        for i in range(gm.m):
            fh.write(f"{gm.family_ids[i]} {gm.sample_ids[i]} 0 0 0 -9\n")


def standardize_counts(x, method: str = "population", return_moments: bool = False):
    """Mean-impute, center and scale a count matrix (samples x variants).

    ``x`` uses ``NaN`` or ``MISSING`` for no-calls.  ``method`` is
    ``"population"`` (divide by m), ``"sample"`` (m - 1) or ``"binomial"``
    (``sqrt(2 f (1 - f))``).  Returns the matrix and a monomorphic flag per
    column; flagged columns are all zero.  With ``return_moments`` the
    column means and scales (0 where monomorphic) are appended.
    """
    x = np.array(x, dtype=float)
    x[x == MISSING] = np.nan
    miss = np.isnan(x)
    nobs = (~miss).sum(axis=0)
    mean = np.where(nobs > 0, np.nansum(x, axis=0) / np.maximum(nobs, 1), 0.0)
    x[miss] = np.take(mean, np.nonzero(miss)[1])
    x -= mean
    m = x.shape[0]
    if method == "population":
        sd = np.sqrt((x ** 2).sum(axis=0) / m)
    elif method == "sample":
        sd = np.sqrt((x ** 2).sum(axis=0) / max(m - 1, 1))
    elif method == "binomial":
        f = mean / 2.0
        sd = np.sqrt(2.0 * f * (1.0 - f))
    else:
        raise ValueError(f"unknown standardization {method!r}")
    mono = (nobs == 0) | (sd <= 1e-12 * np.maximum(1.0, np.abs(mean)))
    out = np.zeros_like(x)
    keep = ~mono
    out[:, keep] = x[:, keep] / sd[keep]
    if return_moments:
        return out, mono, mean, np.where(keep, sd, 0.0)
    return out, mono


def standardize(gm: GenotypeMatrix, method: str = "population") -> tuple[np.ndarray, np.ndarray]:
    return standardize_counts(gm.calls, method)


@dataclass
class PhenotypeSchema:
    outcome: str
    covariates: list = field(default_factory=list)
    slopes: list = field(default_factory=list)
    sample_col: str = "sample_id"
    visit_col: str = "visit"
    weight: str | None = None
    random_intercept: bool = True

    def as_dict(self) -> dict:
        return {"outcome": self.outcome, "covariates": list(self.covariates),
                "slopes": list(self.slopes), "sample_col": self.sample_col,
                "visit_col": self.visit_col, "weight": self.weight,
                "random_intercept": self.random_intercept}


@dataclass(eq=False)
class PhenotypeTable:
    sample_ids: list
    visits: np.ndarray
    outcome: np.ndarray
    covariates: np.ndarray
    slopes: np.ndarray
    weights: np.ndarray
    line_numbers: np.ndarray
    schema: PhenotypeSchema


def _sniff_delimiter(header: str) -> str:
    return "\t" if "\t" in header else ","


def read_phenotypes(path: str, schema: PhenotypeSchema) -> PhenotypeTable:
    with open(path, encoding="utf-8", newline="") as fh:
        header_line = fh.readline()
        if not header_line.strip():
            raise PhenotypeError(f"{path}: missing header row")
        delim = _sniff_delimiter(header_line)
        header = next(csv.reader([header_line.strip("\r\n")], delimiter=delim))
        header = [h.strip() for h in header]
        needed = [schema.sample_col, schema.visit_col, schema.outcome, *schema.covariates, *schema.slopes]
        if schema.weight:
            needed.append(schema.weight)
        missing = [c for c in needed if c not in header]
        if missing:
            raise PhenotypeError(f"{path}: columns not found in header: {', '.join(missing)}")
        col = {h: i for i, h in enumerate(header)}
        ids, visits, ys, covs, slopes, wts, lines = [], [], [], [], [], [], []
        seen = {}
        for lineno, row in enumerate(csv.reader(fh, delimiter=delim), 2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise PhenotypeError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")

            def num(name):
                cell = row[col[name]].strip()
                try:
                    v = float(cell)
                except ValueError:
                    raise PhenotypeError(f"{path}:{lineno}: non-numeric value {cell!r} in column {name!r}") from None
                if not np.isfinite(v):
                    raise PhenotypeError(f"{path}:{lineno}: missing value in column {name!r}")
                return v

            sid = row[col[schema.sample_col]].strip()
            visit = num(schema.visit_col)
            key = (sid, visit)
            if key in seen:
                raise PhenotypeError(f"{path}:{lineno}: duplicate (sample, visit) {key}, first seen at line {seen[key]}")
            seen[key] = lineno
            ids.append(sid)
            visits.append(visit)
            ys.append(num(schema.outcome))
            covs.append([num(c) for c in schema.covariates])
            slopes.append([num(c) for c in schema.slopes])
            wts.append(num(schema.weight) if schema.weight else 1.0)
            lines.append(lineno)
    if not ids:
        raise PhenotypeError(f"{path}: no data rows")
    return PhenotypeTable(ids, np.array(visits), np.array(ys),
                          np.array(covs, dtype=float).reshape(len(ids), len(schema.covariates)),
                          np.array(slopes, dtype=float).reshape(len(ids), len(schema.slopes)),
                          np.array(wts), np.array(lines), schema)


def write_phenotypes(path: str, columns: dict) -> None:
    """Write a comma-delimited table from ordered ``{name: values}``."""
    names = list(columns)
    n = len(columns[names[0]])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for i in range(n):
            w.writerow([_fmt(columns[c][i]) for c in names])


def _fmt(v) -> str:
    if isinstance(v, (str, np.str_)):
        return str(v)
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def join(gm: GenotypeMatrix | None, table: PhenotypeTable) -> LongitudinalDataset:
    """Merge phenotypes with genotypes into a subject-major, visit-ascending dataset.

    Subjects follow the genotype file order (or first appearance when no
    genotypes are given); visit ties keep file order.  Missing genotype calls
    are imputed to the variant mean.
    """
    schema = table.schema
    if gm is not None:
        pos = {s: i for i, s in enumerate(gm.sample_ids)}
        unknown = [(sid, ln) for sid, ln in zip(table.sample_ids, table.line_numbers) if sid not in pos]
        if len(unknown) == len(table.sample_ids):
            raise PhenotypeError("no phenotype sample id matches a genotyped sample")
        if unknown:
            sid, ln = unknown[0]
            raise PhenotypeError(f"line {ln}: unknown sample id {sid!r} "
                                 f"({len(unknown)} rows reference ungenotyped samples)")
        order_key = np.array([pos[s] for s in table.sample_ids])
    else:
        first = {}
        for s in table.sample_ids:
            first.setdefault(s, len(first))
        order_key = np.array([first[s] for s in table.sample_ids])
    rows = np.lexsort((np.arange(len(order_key)), table.visits, order_key))
    subj_keys, subject_of = np.unique(order_key[rows], return_inverse=True)
    ids = [table.sample_ids[rows[i]] for i in np.r_[0, np.flatnonzero(np.diff(subject_of)) + 1]]
    C = np.column_stack([np.ones(rows.size), table.covariates[rows]])
    Z_parts = [np.ones((rows.size, 1))] if schema.random_intercept else []
    Z = np.hstack(Z_parts + [table.slopes[rows]]) if (Z_parts or table.slopes.shape[1]) else np.zeros((rows.size, 0))
    if gm is not None:
        G_subj = gm.select_samples(ids).imputed()
        G = G_subj[subject_of]
        variant_ids = list(gm.variant_ids)
    else:
        G = None
        variant_ids = None
    slope_names = (["intercept"] if schema.random_intercept else []) + list(schema.slopes)
    return LongitudinalDataset(
        y=table.outcome[rows], C=C, Z=Z, subject_of=subject_of, G=G,
        weights=table.weights[rows], subject_ids=ids,
        covariate_names=["intercept"] + list(schema.covariates),
        slope_names=slope_names, variant_ids=variant_ids, check_genotypes=False)
