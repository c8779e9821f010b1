"""Command-line front end.

    modelmix fit CONFIG        sample a mixture / compute BMA weights into a run directory
    modelmix predict RUN_DIR   predictive summaries (and weight fields) on a grid
    modelmix evaluate RUN_DIR  rms table and ECP curve against train/test data
    modelmix evidence CONFIG   evidence and weights for every model and method
    modelmix weights RUN_DIR   posterior weights (global or per location)

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bma import (
    bma_predict,
    bma_weights,
    compute_evidences,
    conjugate_predictive_draws,
    write_evidence_csv,
)
from .config import BMA_VARIANTS, ConfigError, RunConfig
from .dataset import positive_domain
from .diagnostics import summarize, write_diagnostics, write_trace
from .mixtures import build
from .predict import PredictiveSummary, ecp, posterior_predictive, rms, weight_field
from .samplers import PosteriorSamples, sample

SNAPSHOT = "config.ini"


def _write_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, default=float)
        fh.write("\n")


def _run_info(cfg, command):
    return {"version": __version__, "seed": cfg.seed, "variant": cfg.variant, "command": command}


def _prepare_outdir(cfg, override):
    out = Path(override) if override else cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    cfg.parser["output"]["dir"] = str(out.resolve())
    return out


def _build_spec(cfg, data):
    options = {}
    if cfg.variant == "lbmm-gld":
        options["intercept"] = cfg._bool("model", "intercept")
    return build(cfg.variant, data, cfg.priors(), cfg.use_corrections, **options)


def _bma_residuals(cfg, data):
    F = data.effective(cfg.use_corrections)
    return {name: data.y - F[:, k] for k, name in enumerate(data.model_names)}


def _evidence_data(cfg, tables):
    ev = cfg.load("evidence", tables)
    return ev if ev is not None else cfg.load("train", tables)


def _bma_weights(cfg, tables, method):
    data = _evidence_data(cfg, tables)
    exact, approx = cfg.bma_priors()
    prior = exact if method == "exact" else approx
    res = compute_evidences(
        _bma_residuals(cfg, data), method, prior, n_mc=cfg.get("bma", "n_mc", int),
        seed=cfg.seed, discrepancy=cfg._bool("bma", "discrepancy"),
    )
    return res, bma_weights(res), data


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


def cmd_fit(cfg, outdir=None):
    out = _prepare_outdir(cfg, outdir)
    tables = cfg.model_tables()
    if cfg.is_bma:
        results, weights, _ = _bma_weights(cfg, tables, BMA_VARIANTS[cfg.variant])
        write_evidence_csv(results, weights, out / "evidence.csv")
        _write_json({r.model_name: r.diagnostics for r in results}, out / "diagnostics.json")
    else:
        data = cfg.load("train", tables)
        spec = _build_spec(cfg, data)
        samples = sample(spec, cfg.sampler_config())
        np.save(out / "draws.npy", samples.draws)
        np.save(out / "chain.npy", samples.chain)
        report = summarize(samples, spec)
        write_diagnostics(report, out / "diagnostics.json")
        write_trace(samples, spec, out / "trace.csv")
        _write_json(spec.metadata(), out / "model.json")
    cfg.write(out / SNAPSHOT)
    _write_json(_run_info(cfg, "fit"), out / "run.json")
    return out


def _load_run(run_dir):
    run_dir = Path(run_dir)
    snap = run_dir / SNAPSHOT
    if not snap.exists():
        raise FileNotFoundError(f"{run_dir} is not a run directory (no {SNAPSHOT})")
    cfg = RunConfig.from_file(snap)
    return run_dir, cfg


def _load_fit(run_dir, cfg, tables):
    if not (run_dir / "draws.npy").exists():
        raise FileNotFoundError(f"{run_dir}: missing samples (draws.npy); run 'fit' first")
    data = cfg.load("train", tables)
    spec = _build_spec(cfg, data)
    samples = PosteriorSamples(
        np.load(run_dir / "draws.npy"), np.load(run_dir / "chain.npy"), cfg.sampler_config(),
        packing=spec.packing,
    )
    if samples.draws.shape[1] != spec.d:
        raise ValueError(f"{run_dir}: draws have {samples.draws.shape[1]} columns, model needs {spec.d}")
    return spec, samples


def _predictive(cfg, run_dir, tables, grid, noise=True):
    """Predictive draws at ``grid`` for a fitted mixture or a BMA run."""
    seed = cfg.get("predict", "seed", int)
    if cfg.is_bma:
        results, weights, evdata = _bma_weights(cfg, tables, BMA_VARIANTS[cfg.variant])
        exact, _ = cfg.bma_priors()
        res = _bma_residuals(cfg, evdata)
        Fg = grid.effective(cfg.use_corrections)
        nd = cfg.get("bma", "predictive_draws", int)
        seeds = np.random.SeedSequence(seed).spawn(len(res) + 1)
        per = np.stack([
            conjugate_predictive_draws(res[name], Fg[:, k], exact, nd, np.random.default_rng(seeds[k]),
                                       cfg._bool("bma", "discrepancy"))
            for k, name in enumerate(grid.model_names)
        ])
        if not noise:
            # expected value of each model's predictive, mixed with the weights
            return (weights.weights[:, None, None] * per).sum(axis=0), None, None
        return bma_predict(weights, per, np.random.default_rng(seeds[-1])), None, None
    spec, samples = _load_fit(run_dir, cfg, tables)
    draws = posterior_predictive(
        spec, samples, grid, rng=seed, max_draws=cfg.get("predict", "max_draws", int),
        resample_weights=cfg._bool("model", "resample_weights"), noise=noise,
    )
    return draws, spec, samples


# ---------------------------------------------------------------------------
# predict / evaluate / weights
# ---------------------------------------------------------------------------


def cmd_predict(run_dir, grid_path=None):
    run_dir, cfg = _load_run(run_dir)
    if grid_path:
        cfg.parser["data"]["grid"] = str(Path(grid_path).resolve())
    tables = cfg.model_tables()
    grid = cfg.grid(tables)
    draws, spec, samples = _predictive(cfg, run_dir, tables, grid)
    summary = PredictiveSummary.from_draws(grid.locations, draws)
    summary.write_csv(run_dir / "predictive.csv", cfg.coords)
    if spec is not None and spec.variant != "gbmm-l":
        if cfg.domain == "even-even" and not grid_path:
            # weight fields live where the posterior-mean mixture is positive
            keep = positive_domain(tables, prediction=dict(zip(grid.locations, summary.mean)))
            grid = grid.take([i for i, loc in enumerate(grid.locations) if loc in keep])
        wf = weight_field(spec, samples, grid, rng=cfg.get("predict", "seed", int),
                          max_draws=cfg.get("predict", "max_draws", int),
                          resample_weights=cfg._bool("model", "resample_weights"))
        wf.write_csv(run_dir / "weight_field.csv", cfg.coords)
    return run_dir


def _sigma_mean(spec, samples):
    if spec is None:
        return None
    return float(np.exp(samples.draws[:, spec.packing["log_sigma"].slice]).mean())


def cmd_evaluate(run_dir, test_path=None):
    run_dir, cfg = _load_run(run_dir)
    if test_path:
        cfg.parser["data"]["test"] = str(Path(test_path).resolve())
    tables = cfg.model_tables()
    sets = {"train": cfg.load("train", tables), "test": cfg.load("test", tables)}
    point = cfg.parser["predict"]["point"].strip()
    rows = []
    # individual models first, as in an rms table
    for k, name in enumerate(sets["train"].model_names):
        row = {"model": name}
        for split, data in sets.items():
            row[f"rms_{split}"] = None if data is None else rms(data.effective(cfg.use_corrections)[:, k], data.y)
        row["sigma"] = None
        rows.append(row)
    mix = {"model": cfg.variant}
    ecp_curve = None
    spec = samples = None
    for split, data in sets.items():
        if data is None:
            mix[f"rms_{split}"] = None
            continue
        draws, spec, samples = _predictive(cfg, run_dir, tables, data)
        summary = PredictiveSummary.from_draws(data.locations, draws)
        mix[f"rms_{split}"] = rms(summary.point(point), data.y)
        if split == "test" or sets["test"] is None:
            ecp_curve = ecp(draws, data.y, cfg.levels)
    mix["sigma"] = _sigma_mean(spec, samples)
    rows.append(mix)
    with open(run_dir / "metrics.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ["model", "rms_train", "rms_test", "sigma"])
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if v is None else (v if isinstance(v, str) else f"{v:.6g}")) for k, v in r.items()})
    ecp_curve.write_csv(run_dir / "ecp.csv")
    return run_dir


def cmd_weights(run_dir):
    run_dir, cfg = _load_run(run_dir)
    tables = cfg.model_tables()
    path = run_dir / "weights.csv"
    if cfg.is_bma:
        _, weights, _ = _bma_weights(cfg, tables, BMA_VARIANTS[cfg.variant])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "weight"])
            for name, v in weights.as_dict().items():
                w.writerow([name, repr(v)])
        return path
    spec, samples = _load_fit(run_dir, cfg, tables)
    if spec.local:
        wf = weight_field(spec, samples, cfg.grid(tables), rng=cfg.get("predict", "seed", int),
                          max_draws=cfg.get("predict", "max_draws", int))
        wf.write_csv(path, cfg.coords)
        return path
    W = np.array([spec.weights(t) for t in samples.draws])
    lo, hi = np.quantile(W, [0.05, 0.95], axis=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "mean", "sd", "q05", "q95"])
        for k, name in enumerate(spec.model_names):
            w.writerow([name, repr(float(W[:, k].mean())), repr(float(W[:, k].std(ddof=1))),
                        repr(float(lo[k])), repr(float(hi[k]))])
    return path


def cmd_evidence(cfg, outdir=None):
    out = _prepare_outdir(cfg, outdir)
    tables = cfg.model_tables()
    path = out / "evidence.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "method", "log_evidence", "weight", "se"])
        for method in ("exact", "mc", "laplace"):
            results, weights, _ = _bma_weights(cfg, tables, method)
            wmap = weights.as_dict()
            for r in results:
                w.writerow([r.model_name, r.method, repr(r.log_evidence), repr(wmap[r.model_name]),
                            "" if r.mc_se is None else repr(r.mc_se)])
    cfg.write(out / SNAPSHOT)
    _write_json(_run_info(cfg, "evidence"), out / "run.json")
    return path


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _parser():
    p = argparse.ArgumentParser(prog="modelmix", description="Bayesian model averaging and mixing.")
    p.add_argument("--version", action="version", version=f"modelmix {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def config_cmd(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("config", help="INI run configuration")
        s.add_argument("--variant", help="override [model] variant")
        s.add_argument("--seed", type=int, help="override [sampler] seed")
        s.add_argument("--draws", type=int, help="override [sampler] total_draws (per chain)")
        s.add_argument("--chains", type=int, help="override [sampler] chains")
        s.add_argument("--out", help="output directory (overrides [output] dir)")
        s.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override any config value (repeatable)")
        return s

    config_cmd("fit", "fit a model and write a run directory")
    config_cmd("evidence", "evidence and BMA weights for all three methods")
    s = sub.add_parser("predict", help="predictive summaries for a run")
    s.add_argument("run_dir")
    s.add_argument("--grid", help="CSV of prediction locations (default: models' common domain)")
    s = sub.add_parser("evaluate", help="rms and ECP for a run")
    s.add_argument("run_dir")
    s.add_argument("--test", help="observation CSV to evaluate against")
    s = sub.add_parser("weights", help="posterior model weights for a run")
    s.add_argument("run_dir")
    return p


def _overrides(args):
    ov = list(args.set)
    if args.variant:
        ov.append(f"model.variant={args.variant}")
    if args.seed is not None:
        ov.append(f"sampler.seed={args.seed}")
    if args.draws is not None:
        ov.append(f"sampler.total_draws={args.draws}")
    if args.chains is not None:
        ov.append(f"sampler.chains={args.chains}")
    return ov


def main(argv=None):
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        if args.command in ("fit", "evidence"):
            cfg = RunConfig.from_file(args.config, _overrides(args))
            fn = cmd_fit if args.command == "fit" else cmd_evidence
            result = fn(cfg, args.out)
        elif args.command == "predict":
            result = cmd_predict(args.run_dir, args.grid)
        elif args.command == "evaluate":
            result = cmd_evaluate(args.run_dir, args.test)
        else:
            result = cmd_weights(args.run_dir)
    except ConfigError as e:
        print(f"modelmix: usage error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # surface any module error with its origin
        module = type(e).__module__.rsplit(".", 1)[-1]
        print(f"modelmix: error [{module}] {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
