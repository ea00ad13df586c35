"""Batch command-line front end: estimate, simulate, diagnose."""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__, effects
from .bootstrap import BootstrapPlan, bootstrap_pipeline, summarize, uniform_band
from .dataset import DataError, filter_positive_proxy, load_csv, load_schema
from .diagnostics import CellScheme, means_test
from .effects import EstimatorSettings
from .montecarlo import STUDY_TAUS, DgpConfig, run_study

_FLOAT_FMT = "%.10g"


def _parse_taus(text: str) -> tuple:
    taus = tuple(float(x) for x in text.split(",") if x.strip())
    return taus


def _write_manifest(outdir: Path, command: str, config: dict, seed):
    payload = json.dumps(config, sort_keys=True, default=str)
    manifest = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": config,
        "config_digest": hashlib.sha256(payload.encode()).hexdigest(),
    }
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2,
                                                     sort_keys=True, default=str))


def _add_common_bootstrap_flags(p):
    p.add_argument("--bootstrap", type=int, default=300, metavar="B",
                   help="number of bootstrap replicates (0 disables inference)")
    p.add_argument("--boot-scheme", choices=["multinomial", "bayesian"],
                   default="multinomial")
    p.add_argument("--boot-level", choices=["auto", "row", "cluster"],
                   default="auto")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alpha", type=float, default=0.05)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ranksim",
        description="Rank-similarity decomposition of intention-to-treat effects",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="estimate effects from a trial CSV")
    est.add_argument("--data", required=True)
    est.add_argument("--schema", required=True,
                     help="JSON file mapping roles to column names")
    est.add_argument("--mode", choices=["one-sided", "two-sided"],
                     default="one-sided")
    est.add_argument("--link", choices=["logit", "probit", "cloglog", "cauchit"],
                     default="logit")
    est.add_argument("--taus", type=_parse_taus,
                     default=tuple(np.round(np.arange(0.1, 0.91, 0.1), 10)))
    est.add_argument("--cap", type=int, default=500)
    est.add_argument("--late-factor", choices=["appendix", "maintext"],
                     default="appendix")
    est.add_argument("--positive-proxy-only", action="store_true",
                     help="drop rows with proxy <= 0 before estimation")
    est.add_argument("--workers", type=int, default=1)
    est.add_argument("--outdir", required=True)
    _add_common_bootstrap_flags(est)

    sim = sub.add_parser("simulate", help="run the Monte Carlo study")
    sim.add_argument("--dgp", choices=["e1", "e2"], default="e1")
    sim.add_argument("--phi", type=float, default=0.203)
    sim.add_argument("--clusters", type=int, default=150)
    sim.add_argument("--size", type=int, default=10)
    sim.add_argument("--reps", type=int, default=500)
    sim.add_argument("--censoring", action="store_true")
    sim.add_argument("--dependent-w", action="store_true")
    sim.add_argument("--estimators", default="rs,ols,iv")
    sim.add_argument("--taus", type=_parse_taus, default=STUDY_TAUS)
    sim.add_argument("--link", choices=["logit", "probit", "cloglog", "cauchit"],
                     default="logit")
    sim.add_argument("--cap", type=int, default=500)
    sim.add_argument("--workers", type=int, default=None)
    sim.add_argument("--outdir", required=True)
    _add_common_bootstrap_flags(sim)

    diag = sub.add_parser("diagnose", help="rank-similarity means test")
    diag.add_argument("--data", required=True)
    diag.add_argument("--schema", required=True)
    diag.add_argument("--cells", required=True,
                      help="JSON cell config: {\"columns\": [{\"name\": ..., \"cuts\": [...]}]}")
    diag.add_argument("--mode", choices=["one-sided", "two-sided"],
                      default="one-sided")
    diag.add_argument("--all-rows", action="store_true",
                      help="skip the positive outcome/proxy sample selection")
    diag.add_argument("--outdir", required=True)
    _add_common_bootstrap_flags(diag)
    return parser


def cmd_estimate(args) -> int:
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    ds = load_csv(args.data, args.schema, mode=args.mode)
    if args.positive_proxy_only:
        ds = filter_positive_proxy(ds)
    two_sided = args.mode == "two-sided"
    settings = EstimatorSettings(
        link=args.link, cap=args.cap, taus=tuple(args.taus),
        late_factor=args.late_factor,
        include_late=two_sided, include_two_sided=two_sided,
    )
    plan = BootstrapPlan(scheme=args.boot_scheme, level=args.boot_level,
                         n_replicates=args.bootstrap, seed=args.seed,
                         alpha=args.alpha)
    point, draws = bootstrap_pipeline(ds, settings, plan, workers=args.workers)

    scalar_names = ["ITT", "ITTTA", "ITTNA", "ATT_envelope"]
    if two_sided:
        scalar_names += ["two_sided_ITTNA", "LATE_net"]
    rows = []
    for name in scalar_names:
        rec = {"name": name, "point": point[name]}
        if name in draws and draws[name].size >= 2:
            se, lo, hi = summarize(draws[name], point[name], plan.alpha)
            rec.update(se=se, ci_low=lo, ci_high=hi)
            rec["stars"] = effects.EffectEstimate(name, point[name], se=se).stars()
        rows.append(rec)
    for d, name in ((None, "OLS_ITT"), (1, "OLS_ITTTA"), (0, "OLS_ITTNA")):
        est = effects.ols_baselines(ds, d)
        rows.append({"name": est.name, "point": est.point, "se": est.se,
                     "ci_low": est.ci_low, "ci_high": est.ci_high,
                     "stars": est.stars()})
    est = effects.iv_att(ds)
    rows.append({"name": est.name, "point": est.point, "se": est.se,
                 "ci_low": est.ci_low, "ci_high": est.ci_high,
                 "stars": est.stars()})
    pd.DataFrame(rows).to_csv(outdir / "estimates.csv", index=False,
                              float_format=_FLOAT_FMT)

    taus = np.asarray(settings.taus, dtype=float)
    for d in (1, 0):
        key = f"QTT_d{d}"
        frame = {"tau": taus, "estimate": point[key]}
        if key in draws and draws[key].shape[0] >= 2:
            lo, hi = np.quantile(draws[key], [plan.alpha / 2, 1 - plan.alpha / 2],
                                 axis=0)
            band = uniform_band(draws[key], point[key], plan.alpha, taus)
            frame.update(lo=lo, hi=hi, band_lo=band.lo, band_hi=band.hi)
        pd.DataFrame(frame).to_csv(outdir / f"quantile_diff_d{d}.csv",
                                   index=False, float_format=_FLOAT_FMT)

    for d, cf in point["_cfs"].items():
        cf.to_frame().to_csv(outdir / f"cf_cdf_{d}.csv", index=False,
                             float_format=_FLOAT_FMT)
    diag_frames = []
    for model_name, model in point["_models"].items():
        f = model.diagnostics_frame()
        f.insert(0, "model", model_name)
        diag_frames.append(f)
    pd.concat(diag_frames, ignore_index=True).to_csv(
        outdir / "fit_diagnostics.csv", index=False, float_format=_FLOAT_FMT)

    counts = ds.counts()
    _write_manifest(outdir, "estimate", {**vars(args), "counts": counts}, args.seed)
    print(f"rows={counts['n']} n11={counts['n_11']} n10={counts['n_10']} "
          f"n0={counts['n_0']} clusters={counts['n_clusters']}")
    for rec in rows:
        se = rec.get("se")
        extra = "" if se is None else f"  se={se:.4g} {rec.get('stars', '')}"
        print(f"{rec['name']:>16s}  {rec['point']: .6g}{extra}")
    return 0


def cmd_simulate(args) -> int:
    if not 0.0 <= args.phi <= 1.0:
        raise DataError(f"phi must lie in [0,1], got {args.phi}")
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    cfg = DgpConfig(variant=args.dgp, phi=args.phi, clusters=args.clusters,
                    cluster_size=args.size, censoring=args.censoring,
                    dependent_w=args.dependent_w, seed=args.seed)
    estimators = tuple(e.strip() for e in args.estimators.split(",") if e.strip())
    report = run_study(cfg, estimators=estimators, reps=args.reps,
                       n_bootstrap=args.bootstrap, seed=args.seed,
                       taus=args.taus, workers=args.workers, link=args.link,
                       cap=args.cap)
    report.to_frame().to_csv(outdir / "simulation_report.csv", index=False,
                             float_format=_FLOAT_FMT)
    truths = {k: (v.tolist() if isinstance(v, np.ndarray) else v)
              for k, v in report.truths.items()}
    (outdir / "truths.json").write_text(json.dumps(truths, indent=2, sort_keys=True))
    _write_manifest(outdir, "simulate", vars(args), args.seed)
    print(report.to_frame().to_string(index=False))
    if report.n_failures:
        print(f"note: {report.n_failures} failed reps recorded", file=sys.stderr)
    return 0


def cmd_diagnose(args) -> int:
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    ds = load_csv(args.data, args.schema, mode=args.mode)
    cells = CellScheme.from_config(json.loads(Path(args.cells).read_text()))
    plan = BootstrapPlan(scheme=args.boot_scheme, level=args.boot_level,
                         n_replicates=args.bootstrap, seed=args.seed,
                         alpha=args.alpha)
    result = means_test(ds, cells, plan, positive_only=not args.all_rows)
    result.to_frame().to_csv(outdir / "means_test_cells.csv", index=False,
                             float_format=_FLOAT_FMT)
    summary = {
        "statistic": result.statistic,
        "dof": result.dof,
        "p_value": result.p_value,
        "n_cells": result.n_cells,
        "n": result.n,
        "n_replicates": result.n_replicates,
    }
    (outdir / "means_test.json").write_text(json.dumps(summary, indent=2,
                                                       sort_keys=True))
    _write_manifest(outdir, "diagnose", vars(args), args.seed)
    print(f"statistic={result.statistic:.6g} dof={result.dof} "
          f"p_value={result.p_value:.6g}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "estimate":
            return cmd_estimate(args)
        if args.command == "simulate":
            return cmd_simulate(args)
        return cmd_diagnose(args)
    except (DataError, ValueError, RuntimeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
