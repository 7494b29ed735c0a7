"""Command-line front end: simulate, grm, fit-null, fit-path, predict, evaluate.

Settings come from built-in defaults, then an optional JSON config file
(``--config``; either flat or keyed by subcommand name), then flags.  Each
command writes ``run-<command>.json`` into its output directory with the
resolved settings, sha256 digests of inputs and outputs, and stage timings.

Exit codes: 0 success, 2 configuration error, 3 runtime error, 4 an input
file was produced by the wrong stage or does not match the other inputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__

log = logging.getLogger("pglmm")

EXIT_CONFIG, EXIT_RUNTIME, EXIT_STAGE = 2, 3, 4

# document kind -> stage that writes it
PRODUCERS = {"null-fit": "fit-null", "lasso-path": "fit-path", "sim-truth": "simulate", "grm": "grm"}


class ConfigError(Exception):
    pass


class StageError(Exception):
    pass


def build_hash() -> str:
    """Digest of the installed package sources."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:12]


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------- arguments

def _schema_args(p):
    p.add_argument("--pheno", required=True, help="phenotype table (CSV or TSV)")
    p.add_argument("--schema", help="JSON phenotype schema (outcome, covariates, slopes, ...)")
    p.add_argument("--outcome")
    p.add_argument("--covariates", nargs="*")
    p.add_argument("--slopes", nargs="*")
    p.add_argument("--sample-col")
    p.add_argument("--visit-col")
    p.add_argument("--weight-col")
    p.add_argument("--no-random-intercept", action="store_true", default=None)


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pglmm", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="store_true", help="print version and build hash")
    ap.add_argument("--threads", type=int, default=None, help="thread count (default 1)")
    ap.add_argument("--config", help="JSON config file; flags override it")
    ap.add_argument("--log-level", default="INFO")
    sub = ap.add_subparsers(dest="command")

    s = sub.add_parser("simulate", help="simulate a longitudinal cohort")
    s.add_argument("--out", required=True)
    for flag, typ in [("--m", int), ("--p", int), ("--causal", int), ("--h2s", float), ("--h2g", float),
                      ("--sigma2", float), ("--phi", float), ("--populations", int), ("--fst", float),
                      ("--visits-min", int), ("--visits-max", int), ("--prevalence", float),
                      ("--pedigree", str), ("--related-fraction", float), ("--family-size", int),
                      ("--markers", int), ("--seed", int)]:
        s.add_argument(flag, type=typ)
    s.add_argument("--binary", action="store_true", default=None)

    g = sub.add_parser("grm", help="build or sparsify a genetic relatedness matrix")
    g.add_argument("--out", required=True)
    src = g.add_mutually_exclusive_group(required=True)
    src.add_argument("--geno", help="packed genotype prefix")
    src.add_argument("--input-grm", help="existing GRM container to sparsify")
    g.add_argument("--sparse", nargs="?", type=float, const=-1.0, default=None,
                   help="zero entries below THRESHOLD (default 2^-4.5) and block by cluster")
    g.add_argument("--signed", action="store_true", default=None, help="threshold signed values")
    g.add_argument("--name", default="grm")

    f = sub.add_parser("fit-null", help="AI-REML fit of the null model")
    f.add_argument("--out", required=True)
    f.add_argument("--grm", required=True)
    f.add_argument("--family")
    f.add_argument("--max-iter", type=int)
    f.add_argument("--tol", type=float)
    f.add_argument("--trace-method", choices=["auto", "exact", "hutchinson"])
    f.add_argument("--seed", type=int)
    _schema_args(f)

    pth = sub.add_parser("fit-path", help="lasso or adaptive-lasso regularization path")
    pth.add_argument("--out", required=True)
    pth.add_argument("--geno", required=True)
    pth.add_argument("--grm")
    pth.add_argument("--null")
    pth.add_argument("--family")
    pth.add_argument("--no-random-effects", action="store_true", default=None,
                     help="plain lasso without random effects")
    pth.add_argument("--n-lambda", type=int)
    pth.add_argument("--lambda-min-ratio", type=float)
    pth.add_argument("--max-cycles", type=int)
    pth.add_argument("--adaptive", action="store_true", default=None)
    pth.add_argument("--gamma", type=float)
    pth.add_argument("--init-coefs", help="variant<TAB>estimate table for adaptive weights")
    _schema_args(pth)

    pr = sub.add_parser("predict", help="predict outcomes from a fitted path")
    pr.add_argument("--out", required=True)
    pr.add_argument("--path", required=True)
    pr.add_argument("--geno", required=True)
    which = pr.add_mutually_exclusive_group()
    which.add_argument("--index", type=int)
    which.add_argument("--lambda", dest="lam", type=float)
    pr.add_argument("--link", action="store_true", default=None, help="report the linear predictor")
    _schema_args(pr)

    ev = sub.add_parser("evaluate", help="precision-recall, bias and score-test summaries")
    ev.add_argument("--out", required=True)
    ev.add_argument("--truth", nargs="*", default=[])
    ev.add_argument("--paths", nargs="*", default=[])
    ev.add_argument("--labels", nargs="*")
    ev.add_argument("--null-fits", nargs="*", default=[])
    ev.add_argument("--score", action="store_true", default=None,
                    help="score test each variant against the first null fit")
    ev.add_argument("--grm")
    ev.add_argument("--geno")
    ev.add_argument("--pheno")
    ev.add_argument("--schema")
    ev.add_argument("--outcome")
    ev.add_argument("--covariates", nargs="*")
    ev.add_argument("--slopes", nargs="*")
    ev.add_argument("--sample-col")
    ev.add_argument("--visit-col")
    ev.add_argument("--weight-col")
    ev.add_argument("--no-random-intercept", action="store_true", default=None)
    return ap


def _file_config(path, command) -> dict:
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    if command in cfg and isinstance(cfg[command], dict):
        return dict(cfg[command])
    return {k: v for k, v in cfg.items() if not isinstance(v, dict)}


def _resolve(defaults: dict, file_cfg: dict, flags: dict) -> dict:
    unknown = set(file_cfg) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown settings in config file: {sorted(unknown)}")
    out = dict(defaults)
    out.update(file_cfg)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


# ---------------------------------------------------------------- helpers

class Run:
    """Bookkeeping for one command: timings, digests and the run record."""

    def __init__(self, command, out_dir, settings, threads):
        self.command, self.settings, self.threads = command, settings, threads
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs, self.outputs, self.timings = {}, [], {}
        self._t = time.perf_counter()

    def input(self, path):
        if path:
            for p in _expand(path):
                self.inputs[str(p)] = sha256_file(p)
        return path

    def output(self, name) -> str:
        p = self.out / name
        self.outputs.append(p)
        return str(p)

    def stage(self, name, t0):
        dt = time.perf_counter() - t0
        self.timings[name] = dt
        log.info("%s: %s took %.3f s", self.command, name, dt)

    def finish(self, extra=None):
        self.timings["total"] = time.perf_counter() - self._t
        record = {"command": self.command, "version": __version__, "build": build_hash(),
                  "threads": self.threads, "config": self.settings, "inputs": self.inputs,
                  "outputs": {str(p): sha256_file(p) for p in self.outputs if p.exists()},
                  "timings": self.timings}
        if extra:
            record.update(extra)
        with open(self.out / f"run-{self.command}.json", "w", encoding="utf-8") as fh:
            json.dump(record, fh, indent=1, sort_keys=True)


def _expand(path):
    p = Path(path)
    if p.exists():
        return [p]
    found = [Path(str(p) + ext) for ext in (".bed", ".bim", ".fam")]
    return [q for q in found if q.exists()]


def _load_doc(path, expected_kind, loader):
    """Load a stage output, exiting with a stage error if it is the wrong kind."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise StageError(f"{path}: not a JSON document; expected the output of "
                         f"'{PRODUCERS[expected_kind]}'") from None
    kind = doc.get("kind") if isinstance(doc, dict) else None
    if kind != expected_kind:
        got = PRODUCERS.get(kind, "an unknown stage") if kind else "an unknown stage"
        raise StageError(f"{path}: expected the output of '{PRODUCERS[expected_kind]}' "
                         f"({expected_kind}) but it was produced by '{got}'")
    return loader(doc)


def _load_grm(path):
    from .grm import load_grm

    try:
        return load_grm(path)
    except (ValueError, KeyError, OSError) as e:
        if not os.path.exists(path):
            raise ConfigError(f"GRM file not found: {path}") from None
        raise StageError(f"{path}: not a GRM container from 'grm' or 'simulate' ({e})") from None


def _schema(a, file_cfg):
    from .genotype_io import PhenotypeSchema

    d = {}
    if a.schema:
        try:
            with open(a.schema, encoding="utf-8") as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read schema {a.schema}: {e}") from None
    d.update(file_cfg.get("schema", {}))
    flags = {"outcome": a.outcome, "covariates": a.covariates, "slopes": a.slopes,
             "sample_col": a.sample_col, "visit_col": a.visit_col, "weight": a.weight_col}
    d.update({k: v for k, v in flags.items() if v is not None})
    if a.no_random_intercept:
        d["random_intercept"] = False
    if not d.get("outcome"):
        raise ConfigError("the phenotype schema needs an outcome column (--outcome or --schema)")
    try:
        return PhenotypeSchema(**d)
    except TypeError as e:
        raise ConfigError(f"bad phenotype schema: {e}") from None


def _dataset(a, file_cfg, run, geno=None):
    from .genotype_io import join, read_packed_genotypes, read_phenotypes

    schema = _schema(a, file_cfg)
    run.input(a.pheno)
    t0 = time.perf_counter()
    gm = None
    if geno:
        run.input(geno)
        gm = read_packed_genotypes(geno)
    data = join(gm, read_phenotypes(a.pheno, schema))
    run.stage("read inputs", t0)
    return data, schema


# ---------------------------------------------------------------- commands

SIM_FLAGS = {"m": "m", "p": "p", "causal": "n_causal", "h2s": "h2_S", "h2g": "h2_g", "sigma2": "sigma2",
             "phi": "phi", "populations": "n_populations", "fst": "fst", "visits_min": "visits_min",
             "visits_max": "visits_max", "prevalence": "prevalence", "pedigree": "pedigree",
             "related_fraction": "related_fraction", "family_size": "family_size",
             "markers": "n_markers", "seed": "seed", "binary": "binary"}


def cmd_simulate(a, file_cfg, threads):
    import numpy as np

    from .genotype_io import write_packed_genotypes, write_phenotypes
    from .grm import save_grm
    from .simulate import SimConfig, simulate_dataset

    flags = {SIM_FLAGS[k]: getattr(a, k) for k in SIM_FLAGS}
    settings = _resolve(SimConfig().as_dict(), file_cfg, flags)
    try:
        cfg = SimConfig.from_dict(settings)
        cfg.validate()
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from None
    run = Run("simulate", a.out, cfg.as_dict(), threads)
    t0 = time.perf_counter()
    data, truth, ex = simulate_dataset(cfg)
    run.stage("simulate", t0)

    t0 = time.perf_counter()
    write_packed_genotypes(str(run.out / "geno"), ex["genotypes"])
    for ext in (".bed", ".bim", ".fam"):
        run.output("geno" + ext)
    s = data.subject_of
    visit = np.concatenate([np.arange(1, c + 1) for c in data.counts])
    cols = {"sample_id": [data.subject_ids[i] for i in s], "visit": visit, "y": data.y,
            "sex": ex["sex"][s], "age": ex["age"]}
    for j, name in enumerate(data.covariate_names):
        if name.startswith("pop"):
            cols[name] = data.C[:, j]
    cols["age_std"] = data.Z[:, 1] if data.r > 1 else (ex["age"] - cfg.age_mean) / cfg.age_sd
    cols["exposure"] = ex["exposure"]
    write_phenotypes(run.output("pheno.csv"), cols)
    schema = {"outcome": "y", "covariates": data.covariate_names[1:],
              "slopes": data.slope_names[1:], "random_intercept": True}
    with open(run.output("schema.json"), "w", encoding="utf-8") as fh:
        json.dump(schema, fh, indent=1)
    truth.save(run.output("truth.json"))
    save_grm(run.output("grm.npz"), ex["grm"])
    run.stage("write outputs", t0)
    run.finish({"summary": {"n": data.n, "m": data.m, "p": data.p}})
    print(f"simulated {data.m} subjects, {data.n} observations, {data.p} variants -> {run.out}")


def cmd_grm(a, file_cfg, threads):
    from .genotype_io import read_packed_genotypes, standardize
    from .grm import DEFAULT_THRESHOLD, build_grm, save_grm, sparsify

    settings = _resolve({"sparse": None, "signed": False}, file_cfg, {"sparse": a.sparse, "signed": a.signed})
    thr = settings["sparse"]
    if thr is not None and thr < 0:
        thr = DEFAULT_THRESHOLD
    if thr is not None and thr <= 0:
        raise ConfigError("the sparsity threshold must be positive")
    settings["sparse"] = thr
    run = Run("grm", a.out, settings, threads)
    t0 = time.perf_counter()
    if a.geno:
        run.input(a.geno)
        gm = read_packed_genotypes(a.geno)
        X, mono = standardize(gm)
        if mono.any():
            log.info("%d monomorphic variants contribute nothing to the GRM", int(mono.sum()))
        grm = build_grm(X, sample_ids=gm.sample_ids)
    else:
        run.input(a.input_grm)
        grm = _load_grm(a.input_grm)
        if not hasattr(grm, "V"):
            raise StageError(f"{a.input_grm}: already sparse; give a dense GRM to sparsify")
    run.stage("build", t0)
    out = grm
    extra = {}
    if thr is not None:
        t0 = time.perf_counter()
        out = sparsify(grm, thr, signed=bool(settings["signed"]))
        run.stage("sparsify", t0)
        sizes = out.cluster_sizes
        extra = {"clusters": int(len(sizes)), "largest_cluster": int(max(sizes))}
    save_grm(run.output(f"{a.name}.npz"), out)
    run.finish(extra)
    print(f"wrote {run.out / (a.name + '.npz')}")


def cmd_fit_null(a, file_cfg, threads):
    from .family import LinkFamily
    from .null_fit import NullFitConfig, fit_null

    defaults = {"family": "gaussian", **NullFitConfig().__dict__}
    flags = {"family": a.family, "max_iter": a.max_iter, "tol": a.tol, "trace_method": a.trace_method,
             "seed": a.seed}
    settings = _resolve(defaults, {k: v for k, v in file_cfg.items() if k != "schema"}, flags)
    try:
        family = LinkFamily.parse(settings["family"])
        cfg = NullFitConfig.from_dict({k: v for k, v in settings.items() if k != "family"})
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from None
    run = Run("fit-null", a.out, settings, threads)
    data, schema = _dataset(a, file_cfg, run)
    run.settings["schema"] = schema.as_dict()
    grm = _load_grm(run.input(a.grm))
    _check_ids(grm.sample_ids, data.subject_ids, a.grm, "grm")
    t0 = time.perf_counter()
    res = fit_null(data, family, grm, cfg)
    run.stage("fit", t0)
    res.save(run.output("null.json"))
    run.finish({"converged": bool(res.converged), "iterations": int(res.iterations),
                "variance_components": res.vc.as_dict()})
    print(f"null fit {'converged' if res.converged else 'did NOT converge'} in {res.iterations} "
          f"iterations ({run.timings['fit']:.2f} s) -> {run.out / 'null.json'}")


def _check_ids(grm_ids, subject_ids, path, stage):
    if grm_ids is None:
        return
    missing = set(subject_ids) - set(grm_ids)
    if missing:
        raise StageError(f"{path}: {len(missing)} subjects are absent from this '{stage}' output "
                         f"(e.g. {sorted(missing)[0]!r})")


def _read_init_coefs(path, variant_ids):
    import numpy as np

    vals = {}
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) < 2:
                raise ConfigError(f"{path}:{ln}: expected 'variant value'")
            try:
                vals[parts[0]] = float(parts[1])
            except ValueError:
                if ln == 1:
                    continue  # header
                raise ConfigError(f"{path}:{ln}: non-numeric estimate {parts[1]!r}") from None
    missing = [v for v in variant_ids if v not in vals]
    if missing:
        raise ConfigError(f"{path}: no initial estimate for {len(missing)} variants (e.g. {missing[0]!r})")
    return np.array([vals[v] for v in variant_ids])


def cmd_fit_path(a, file_cfg, threads):
    from .family import LinkFamily
    from .null_fit import NullFitResult
    from .penalized import PathConfig, adaptive_weights, fit_lasso_path, fit_path

    defaults = {"family": None, "random_effects": True, "adaptive": False, "gamma": 1.0,
                **PathConfig().__dict__}
    flags = {"family": a.family, "n_lambda": a.n_lambda, "lambda_min_ratio": a.lambda_min_ratio,
             "max_cycles": a.max_cycles, "adaptive": a.adaptive, "gamma": a.gamma,
             "random_effects": None if a.no_random_effects is None else not a.no_random_effects}
    settings = _resolve(defaults, {k: v for k, v in file_cfg.items() if k != "schema"}, flags)
    if settings["adaptive"] and not a.init_coefs:
        raise ConfigError("--adaptive needs --init-coefs with initial estimates")
    if settings["random_effects"] and not (a.null and a.grm):
        raise ConfigError("the mixed-model path needs --null and --grm (or use --no-random-effects)")
    try:
        cfg = PathConfig.from_dict({k: v for k, v in settings.items()
                                    if k in PathConfig.__dataclass_fields__})
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from None
    run = Run("fit-path", a.out, settings, threads)
    null = None
    if settings["random_effects"]:
        null = _load_doc(run.input(a.null), "null-fit", NullFitResult.from_dict)
    family = LinkFamily.parse(settings["family"] or (null.family if null else "gaussian"))
    if null is not None and family.value != null.family:
        raise StageError(f"{a.null}: 'fit-null' used family {null.family!r}, not {family.value!r}")
    data, schema = _dataset(a, file_cfg, run, geno=a.geno)
    run.settings["schema"] = schema.as_dict()
    weights = None
    if settings["adaptive"]:
        run.input(a.init_coefs)
        weights = adaptive_weights(_read_init_coefs(a.init_coefs, data.variant_ids), settings["gamma"])
    t0 = time.perf_counter()
    if null is not None:
        if list(null.subject_ids) != list(data.subject_ids):
            raise StageError(f"{a.null}: the 'fit-null' output covers different subjects than {a.pheno}")
        grm = _load_grm(run.input(a.grm))
        _check_ids(grm.sample_ids, data.subject_ids, a.grm, "grm")
        path = fit_path(data, family, null, grm, cfg, weights=weights)
    else:
        path = fit_lasso_path(data, family, cfg, weights=weights)
    run.stage("path", t0)
    path.save(run.output("path.json"))
    path.write_tables(run.output("path.tsv"), run.output("coefs.tsv"))
    run.finish({"lambda_max": float(path.lambda_max), "all_converged": bool(path.converged.all()),
                "max_kkt": float(path.kkt.max())})
    print(f"path with {len(path.lambdas)} lambdas ({run.timings['path']:.2f} s) -> {run.out}")


def cmd_predict(a, file_cfg, threads):
    import numpy as np

    from .penalized import LassoPath, predict, r2_mspe

    settings = _resolve({"index": None, "lambda": None, "link": False}, file_cfg,
                        {"index": a.index, "lambda": a.lam, "link": a.link})
    run = Run("predict", a.out, settings, threads)
    path = _load_doc(run.input(a.path), "lasso-path", LassoPath.from_dict)
    data, schema = _dataset(a, {k: v for k, v in file_cfg.items() if k == "schema"}, run, geno=a.geno)
    if list(data.variant_ids) != list(path.variant_ids):
        raise StageError(f"{a.path}: the 'fit-path' output was fitted on different variants")
    if settings["lambda"] is not None:
        k = int(np.argmin(np.abs(np.log(path.lambdas) - np.log(settings["lambda"]))))
    else:
        k = len(path.lambdas) - 1 if settings["index"] is None else int(settings["index"])
    if not 0 <= k < len(path.lambdas):
        raise ConfigError(f"path index {k} outside 0..{len(path.lambdas) - 1}")
    yhat = predict(path, k, data, response=not settings["link"])
    with open(run.output("predictions.tsv"), "w", encoding="utf-8") as fh:
        fh.write("sample_id\trow\ty\tprediction\n")
        for i in range(data.n):
            fh.write(f"{data.subject_ids[data.subject_of[i]]}\t{i}\t{data.y[i]:.10g}\t{yhat[i]:.10g}\n")
    r2 = r2_mspe(data.y, yhat) if not settings["link"] else None
    run.finish({"index": k, "lambda": float(path.lambdas[k]), "r2_mspe": r2})
    print(f"predictions at index {k} (lambda {path.lambdas[k]:.4g})"
          + (f", R2_MSPE {r2:.4f}" if r2 is not None else ""))


def cmd_evaluate(a, file_cfg, threads):
    from .evaluate import (bias_report, pr_band, pr_curve, score_test, write_band_table, write_bias_table,
                           write_pr_table, write_score_table)
    from .null_fit import NullFitResult
    from .penalized import LassoPath
    from .simulate import SimTruth

    run = Run("evaluate", a.out, {"paths": a.paths, "labels": a.labels, "null_fits": a.null_fits,
                                  "truth": a.truth, "score": bool(a.score)}, threads)
    truths = [_load_doc(run.input(t), "sim-truth", SimTruth.from_dict) for t in a.truth]
    did = False
    if a.paths:
        if not truths:
            raise ConfigError("precision-recall needs --truth")
        labels = a.labels or ["path"]
        if len(labels) not in (1, len(a.paths)):
            raise ConfigError("give one label, or one label per path")
        curves = {}
        for i, p in enumerate(a.paths):
            path = _load_doc(run.input(p), "lasso-path", LassoPath.from_dict)
            truth = truths[i] if len(truths) == len(a.paths) else truths[0]
            label = labels[i] if len(labels) > 1 else labels[0]
            curves.setdefault(label, []).append(pr_curve(path, truth))
        write_pr_table(run.output("pr.tsv"), curves)
        write_band_table(run.output("pr_band.tsv"), {k: pr_band(v) for k, v in curves.items()})
        did = True
    nulls = [_load_doc(run.input(p), "null-fit", NullFitResult.from_dict) for p in a.null_fits]
    if len(nulls) >= 2:
        if len(truths) not in (1, len(nulls)):
            raise ConfigError("give one truth file, or one per null fit")
        pairs = [(n.vc, (truths[i] if len(truths) > 1 else truths[0]).vc) for i, n in enumerate(nulls)]
        write_bias_table(run.output("bias.tsv"), bias_report(pairs))
        did = True
    if a.score:
        if not (nulls and a.grm and a.geno and a.pheno):
            raise ConfigError("--score needs --null-fits, --grm, --geno and --pheno")
        data, _ = _dataset(a, {k: v for k, v in file_cfg.items() if k == "schema"}, run, geno=a.geno)
        if list(nulls[0].subject_ids) != list(data.subject_ids):
            raise StageError(f"{a.null_fits[0]}: the 'fit-null' output covers different subjects")
        t0 = time.perf_counter()
        res = score_test(nulls[0], data, _load_grm(run.input(a.grm)))
        run.stage("score test", t0)
        write_score_table(run.output("score.tsv"), data.variant_ids, res)
        did = True
    if not did:
        raise ConfigError("nothing to evaluate: give --paths, two or more --null-fits, or --score")
    run.finish()
    print(f"evaluation tables -> {run.out}")


COMMANDS = {"simulate": cmd_simulate, "grm": cmd_grm, "fit-null": cmd_fit_null, "fit-path": cmd_fit_path,
            "predict": cmd_predict, "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    ap = make_parser()
    a = ap.parse_args(argv)
    if a.version:
        print(f"pglmm {__version__} (build {build_hash()})")
        return 0
    if not a.command:
        ap.print_usage(sys.stderr)
        print("pglmm: error: a subcommand is required", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=getattr(logging, str(a.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        file_cfg = _file_config(a.config, a.command)
        threads = a.threads if a.threads is not None else int(file_cfg.pop("threads", 1))
        file_cfg.pop("threads", None)
        if threads < 1:
            raise ConfigError("--threads must be at least 1")
        _set_threads(threads)
        COMMANDS[a.command](a, file_cfg, threads)
    except ConfigError as e:
        print(f"pglmm {a.command}: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as e:
        print(f"pglmm {a.command}: input mismatch: {e}", file=sys.stderr)
        return EXIT_STAGE
    except Exception as e:  # noqa: BLE001
        from .genotype_io import GenotypeFormatError, PhenotypeError

        if isinstance(e, (GenotypeFormatError, PhenotypeError, FileNotFoundError)):
            print(f"pglmm {a.command}: bad input: {e}", file=sys.stderr)
            return EXIT_CONFIG
        log.debug("failure", exc_info=True)
        print(f"pglmm {a.command}: error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


def _set_threads(n: int) -> None:
    # BLAS pools read these at first use; numba is set directly
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


if __name__ == "__main__":
    sys.exit(main())
