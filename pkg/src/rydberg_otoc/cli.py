"""Command-line entry point.

Exit codes: 0 success, 2 invalid config or input schema, 3 runtime failure.
Site labels on the command line are 1-based.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis, outputs
from .config import ConfigError, ExperimentConfig, check_oracle_size, load_config
from .design import convergence_scan
from .evolution import NOISE_PRESETS
from .protocol import oracle_series, run_experiment, scatter_export
from .pulses import AtomGeometry

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
OUT_DIR_ENV = "RYDBERG_OTOC_OUT_DIR"

log = logging.getLogger("rydberg_otoc")


def _common(p: argparse.ArgumentParser, config_positional: bool = True) -> None:
    if config_positional:
        p.add_argument("config_path", nargs="?", help="config JSON or packaged preset name")
        p.add_argument("--config", dest="config_flag", help="config JSON or packaged preset name")
    p.add_argument("--seed", type=int, help="master seed override")
    p.add_argument("--out-dir", help=f"output directory (env {OUT_DIR_ENV} also works)")
    p.add_argument("--noise-preset", choices=sorted(NOISE_PRESETS))
    p.add_argument("--mask-site", type=int, action="append", help="1-based site to exclude (repeatable)")
    p.add_argument("--threshold", type=float, help="arrival threshold as a fraction of each site's drop")
    p.add_argument("--cutoff-time", type=float, help="ignore times beyond this (us) when locating arrivals")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rydberg-otoc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run-otoc", help="randomized-measurement OTOC run")
    _common(p)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--shots", type=int, help="shots per instance and time (0 = exact expectations)")
    p.add_argument("--instances", type=int, help="number of quench instances N_U")
    p.add_argument("--keep-shots", action="store_true", help="write branches.jsonl with raw shot records")
    p.add_argument("--quiet", action="store_true", help="suppress per-instance progress lines")

    p = sub.add_parser("m2-scan", help="second-moment convergence versus number of quenches")
    _common(p)
    p.add_argument("--n-quench", type=int, nargs="+", help="quench counts to scan")
    p.add_argument("--instances", type=int)
    p.add_argument("--atoms", type=int, help="chain length for the scan")

    p = sub.add_parser("oracle", help="exact infinite-temperature OTOC series")
    _common(p)
    p.add_argument("--atoms", type=int, help="override the chain length")

    p = sub.add_parser("analyze", help="lightcone fit and series comparison")
    _common(p, config_positional=False)
    p.add_argument("--config", dest="config_flag", help="config supplying default mask/threshold")
    p.add_argument("--fit", metavar="CSV", help="otoc_series CSV to fit")
    p.add_argument("--compare", nargs=2, metavar=("A", "B"), help="two otoc_series CSVs to compare")
    p.add_argument("--orientation", choices=("t_vs_d", "d_vs_t"), default="t_vs_d")
    p.add_argument("--t-max", type=float, help="restrict comparison to t <= T")
    return parser


def _resolve_config(args) -> ExperimentConfig:
    ref = args.config_flag or getattr(args, "config_path", None)
    if ref is None:
        raise ConfigError("no config given (positional path or --config)")
    cfg = load_config(ref)
    return cfg.with_overrides(
        seed=args.seed, noise_preset=args.noise_preset, mask_sites=args.mask_site,
        threshold=args.threshold, cutoff_time=args.cutoff_time,
        n_shots=getattr(args, "shots", None), n_instances=getattr(args, "instances", None),
    )


def _out_dir(args, cfg: ExperimentConfig | None, default: str) -> Path:
    chosen = args.out_dir or os.environ.get(OUT_DIR_ENV) or (cfg.output_dir if cfg else None)
    return Path(chosen or default)


def _progress_printer(manifest: outputs.RunManifest, quiet: bool):
    t0 = time.perf_counter()
    done = [0]

    def report(instance: int, total: int) -> None:
        done[0] += 1
        manifest.progress = {"completed": done[0], "total": total}
        if not quiet:
            line = {"event": "instance", "instance": instance, "completed": done[0], "total": total,
                    "elapsed_s": round(time.perf_counter() - t0, 3)}
            print(json.dumps(line), file=sys.stderr, flush=True)

    return report


def _series_meta(series, cfg: ExperimentConfig) -> None:
    series.metadata.update({
        "config_hash": cfg.config_hash,
        "preset": cfg.name,
        "mask_sites": list(cfg.mask_sites),
        "butterfly_site": cfg.experiment.butterfly.site,
    })


def cmd_run_otoc(args) -> int:
    cfg = _resolve_config(args)
    exp = cfg.experiment
    out = _out_dir(args, cfg, f"runs/{cfg.name}")
    out.mkdir(parents=True, exist_ok=True)
    manifest = outputs.RunManifest("run-otoc", cfg.config_hash, {"master": exp.seed}, out)
    manifest.progress = {"completed": 0, "total": exp.n_instances}
    try:
        with manifest.stage("simulate"):
            branches, series = run_experiment(exp, workers=args.workers, keep_shots=args.keep_shots,
                                               progress=_progress_printer(manifest, args.quiet))
        with manifest.stage("write"):
            _series_meta(series, cfg)
            manifest.record(outputs.write_series_csv(out / "otoc_series.csv", series))
            scatter_r = {}
            for t in cfg.scatter_times:
                k = int(np.argmin(np.abs(np.asarray(exp.times) - t)))
                tables, rs = {}, {}
                for site in range(exp.n_atoms):
                    tables[site], rs[site + 1] = scatter_export(branches, k, site, exp.observable)
                meta = {"config_hash": cfg.config_hash, "t": exp.times[k], "pearson_r": rs}
                scatter_r[f"{exp.times[k]:.2f}"] = rs
                manifest.record(outputs.write_scatter_csv(out / f"scatter_t{exp.times[k]:.2f}.csv", tables, meta))
            if args.keep_shots:
                path = out / "branches.jsonl"
                with open(path, "w") as fh:
                    for b in branches:
                        fh.write(json.dumps({"instance": b.instance_id, "branch": b.branch,
                                             "fingerprint": b.fingerprint, "shots": b.shots}) + "\n")
                manifest.record(path)
            manifest.record(outputs.write_json(out / "config.json", exp.to_dict()))
    except Exception as exc:
        return _fail(manifest, exc)
    manifest.status = "complete"
    manifest.write()
    print(json.dumps({"event": "done", "out_dir": str(out), "scatter_pearson_r": scatter_r}))
    return EXIT_OK


def cmd_m2_scan(args) -> int:
    cfg = _resolve_config(args)
    scan = cfg.scan
    n_atoms = args.atoms or scan.n_atoms
    values = tuple(args.n_quench or scan.n_quench_values)
    n_inst = args.instances or scan.n_instances
    exp = cfg.experiment
    template = exp.resolved_quench()
    geom = AtomGeometry.chain(n_atoms, scan.spacing_um)
    out = _out_dir(args, cfg, f"runs/{cfg.name}")
    out.mkdir(parents=True, exist_ok=True)
    manifest = outputs.RunManifest("m2-scan", cfg.config_hash, {"master": exp.seed}, out)
    try:
        with manifest.stage("scan"):
            rows = convergence_scan(template, values, n_inst, geom, exp.profile, exp.seed,
                                    prop_config=exp.propagator)
        meta = {"config_hash": cfg.config_hash, "n_atoms": n_atoms, "t_quench": template.t_quench,
                "over_budget": [r.n_quench for r in rows if not r.within_budget]}
        manifest.record(outputs.write_scan_csv(out / "m2_scan.csv", rows, meta))
    except Exception as exc:
        return _fail(manifest, exc)
    manifest.status = "complete"
    manifest.write()
    for r in rows:
        print(f"n_quench={r.n_quench:2d}  M2={r.m2_mean:.6f}  Haar={r.m2_haar:.6f}  "
              f"|diff|={r.abs_diff:.6f} +- {r.stderr:.6f}" + ("" if r.within_budget else "  (over budget)"))
    return EXIT_OK


def cmd_oracle(args) -> int:
    cfg = _resolve_config(args)
    exp = cfg.experiment
    if args.atoms:
        exp = replace(exp, geometry=AtomGeometry.chain(args.atoms, exp.geometry.lattice_spacing or 9.5),
                      butterfly=replace(exp.butterfly, site=args.atoms - 1))
        cfg = replace(cfg, experiment=exp, mask_sites=tuple(s for s in cfg.mask_sites if s < args.atoms))
    check_oracle_size(exp.n_atoms)
    out = _out_dir(args, cfg, f"runs/{cfg.name}")
    out.mkdir(parents=True, exist_ok=True)
    manifest = outputs.RunManifest("oracle", cfg.config_hash, {}, out)
    try:
        with manifest.stage("oracle"):
            series = oracle_series(exp.geometry, exp.drive_schedule(), exp.butterfly, exp.times, exp.profile,
                                   observable=exp.observable, prop_config=exp.propagator)
        _series_meta(series, cfg)
        manifest.record(outputs.write_series_csv(out / "oracle_series.csv", series))
    except Exception as exc:
        return _fail(manifest, exc)
    manifest.status = "complete"
    manifest.write()
    print(json.dumps({"event": "done", "out_dir": str(out)}))
    return EXIT_OK


def _analysis_settings(args, series) -> tuple[list[int], float, float]:
    mask = series.metadata.get("mask_sites", [])
    threshold, cutoff = 0.5, 4.0
    if args.config_flag:
        cfg = load_config(args.config_flag)
        mask, threshold, cutoff = list(cfg.mask_sites), cfg.threshold, cfg.cutoff_time
    if args.mask_site:
        mask = [s - 1 for s in args.mask_site]
    if args.threshold is not None:
        threshold = args.threshold
    if args.cutoff_time is not None:
        cutoff = args.cutoff_time
    return mask, threshold, cutoff


def cmd_analyze(args) -> int:
    if not args.fit and not args.compare:
        raise ConfigError("analyze needs --fit and/or --compare")
    first = args.fit or args.compare[0]
    out = _out_dir(args, None, str(Path(first).parent))
    out.mkdir(parents=True, exist_ok=True)
    loaded = {p: outputs.read_series_csv(p) for p in ([args.fit] if args.fit else []) + list(args.compare or [])}
    manifest = outputs.RunManifest("analyze", "", {}, out)
    try:
        if args.fit:
            series = loaded[args.fit]
            manifest.config_hash = series.metadata.get("config_hash", "")
            mask, threshold, cutoff = _analysis_settings(args, series)
            origin = _origin(series)
            hm = analysis.Heatmap.from_series(series, mask)
            manifest.record(outputs.write_heatmap_csv(out / "heatmap.csv", hm.sites, hm.times, hm.values,
                                                      {"source": str(args.fit)}))
            arrivals = analysis.arrival_times(hm, threshold, cutoff)
            fit = analysis.fit_lightcone(arrivals, origin, threshold, args.orientation)
            report = fit.to_dict()
            report["sites"] = [s + 1 for s in report["sites"]]
            report["origin_site"] = origin + 1
            report["cutoff_time"] = cutoff
            report["masked_sites"] = [s + 1 for s in mask]
            report["missing_sites"] = [a.site + 1 for a in arrivals if not a.present]
            report["reference_check"] = analysis.reference_slope_check(fit)
            manifest.record(outputs.write_json(out / "lightcone_fit.json", report))
            us, us_err = fit.us_per_site
            print(f"lightcone: {us:.4f} +- {us_err:.4f} us/site "
                  f"({fit.sites_per_us[0]:.4f} sites/us), chi2_red={fit.chi2_red:.3g}")
        if args.compare:
            a, b = (loaded[p] for p in args.compare)
            mask, threshold, cutoff = _analysis_settings(args, a)
            rep = analysis.compare_series(a, b, mask, _origin(a), threshold, cutoff, args.t_max)
            data = rep.to_dict(site_base=1)
            data["inputs"] = list(args.compare)
            manifest.record(outputs.write_json(out / "compare_report.json", data))
            print(rep.summary(site_base=1))
    except (analysis.FitError, ValueError) as exc:
        return _fail(manifest, exc)
    manifest.status = "complete"
    manifest.write()
    return EXIT_OK


def _origin(series) -> int:
    site = series.metadata.get("butterfly_site")
    return int(site) if site is not None else int(series.sites.max())


def _fail(manifest: outputs.RunManifest, exc: Exception) -> int:
    manifest.status = "failed"
    manifest.error = f"{type(exc).__name__}: {exc}"
    manifest.write()
    print(f"error: {manifest.error}", file=sys.stderr)
    return EXIT_RUNTIME


COMMANDS = {"run-otoc": cmd_run_otoc, "m2-scan": cmd_m2_scan, "oracle": cmd_oracle, "analyze": cmd_analyze}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, outputs.SchemaError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
