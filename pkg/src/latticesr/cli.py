"""Command-line entry points.

Subcommands: simulate, reconstruct-lsf, fit-wavefront, analyze,
calibrate-lattice, bench-fig7, bench-precision. Every stochastic scenario
requires a seed (from the config file or ``--seed``); outputs are CSV/JSON
files that are byte-stable for a fixed seed.

Exit codes: 0 success, 2 configuration error, 3 calibration input missing,
4 benchmark check failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import constants
from .bench import (RunConfig, amplitude_bounds_for, default_ccd_lsf,
                    default_optical_lsf, emit_reports, extract_main_roi,
                    localize_window, run_benchmark_fig7, run_precision_sweep,
                    simulate_sites_frame, write_csv)
from .imaging import integrate_transverse, load_frame, save_frame
from .localize import analyze_profile, calibrate_lattice, fit_photon_histogram
from .lsf import load_lsf, reconstruct_lsf
from .noise import NoiseParams
from .wavefront import fit_wavefront

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CALIBRATION = 3
EXIT_CHECK = 4


class ConfigError(Exception):
    pass


class CalibrationMissing(Exception):
    pass


class CheckFailure(Exception):
    pass


def _load_config(args, scenario: str) -> RunConfig:
    data = {}
    if args.config:
        data = json.loads(Path(args.config).read_text())
    data["scenario"] = scenario
    if args.seed is not None:
        data["seed"] = args.seed
    if args.frames is not None:
        data["frames"] = args.frames
    if args.out is not None:
        data["out"] = args.out
    try:
        return RunConfig.from_dict(data)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def _cmd_simulate(args) -> None:
    cfg = _load_config(args, "simulate")
    noise = cfg.noise_params()
    lattice = cfg.lattice_model()
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    lsf_opt = default_optical_lsf()
    center = int(round(cfg.n_px / 2 / lattice.a_px))
    sites = [center + 5 * i for i in range(cfg.n_atoms)]
    for frame in range(cfg.frames):
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, frame)))
        img, _ = simulate_sites_frame(rng, sites,
                                      cfg.amplitude * cfg.exposure_s, noise,
                                      lattice, lsf_opt, cfg.n_px, cfg.n_rows,
                                      cfg.exposure_s)
        save_frame(img, outdir / f"frame_{frame:05d}", noise=noise,
                   seed=[cfg.seed, frame])
    emit_reports({}, outdir, cfg)
    print(f"wrote {cfg.frames} frames to {outdir}")


def _cmd_reconstruct_lsf(args) -> None:
    cfg = _load_config(args, "reconstruct-lsf")
    noise = cfg.noise_params()
    lattice = cfg.lattice_model()
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    lsf_opt = default_optical_lsf()
    center = int(round(cfg.n_px / 2 / lattice.a_px))
    profiles = []
    for frame in range(cfg.frames):
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, frame)))
        img, _ = simulate_sites_frame(rng, [center],
                                      cfg.amplitude * cfg.exposure_s, noise,
                                      lattice, lsf_opt, cfg.n_px, cfg.n_rows,
                                      cfg.exposure_s)
        window = extract_main_roi(img, noise)
        if window is not None:
            profiles.append(window)
    rec = reconstruct_lsf(profiles)
    rec.lsf.save(outdir / "lsf", extra={
        "iterations": rec.n_iterations, "converged": rec.converged,
        "n_profiles_used": rec.n_profiles_used,
    })
    emit_reports({}, outdir, cfg)
    print(f"reconstructed response from {rec.n_profiles_used} profiles "
          f"in {rec.n_iterations} iterations -> {outdir / 'lsf.csv'}")


def _cmd_fit_wavefront(args) -> None:
    cfg = _load_config(args, "fit-wavefront")
    if cfg.lsf_path is None:
        raise CalibrationMissing("fit-wavefront needs lsf_path (a "
                                 "reconstructed response) in the config")
    if not Path(cfg.lsf_path).with_suffix(".csv").exists():
        raise CalibrationMissing(f"response file not found: {cfg.lsf_path}")
    measured = load_lsf(cfg.lsf_path)
    fit = fit_wavefront(measured)
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    from .wavefront import strehl_and_rms
    strehl, rms = strehl_and_rms(fit.wavefront)
    report = {
        "coefficients": {f"{n}{m}": c
                         for (n, m), c in fit.wavefront.coeffs.items()},
        "na": fit.wavefront.na,
        "strehl": strehl,
        "rms_error_waves": rms,
        "uncertainties": fit.uncertainties,
        "residual_rms": fit.residual_rms,
        "converged": fit.converged,
    }
    (outdir / "wavefront.json").write_text(json.dumps(report, sort_keys=True,
                                                      indent=1))
    print(f"fitted NA={fit.wavefront.na:.3f}, rms={rms:.4f} waves, "
          f"strehl={strehl:.3f} -> {outdir / 'wavefront.json'}")


def _cmd_analyze(args) -> None:
    cfg = _load_config(args, "analyze")
    frames_dir = Path(args.frames_dir) if args.frames_dir else Path(cfg.out)
    frame_files = sorted(frames_dir.glob("frame_*.csv"))
    if not frame_files:
        raise ConfigError(f"no frame_*.csv files in {frames_dir}")
    if cfg.lsf_path is not None:
        if not Path(cfg.lsf_path).with_suffix(".csv").exists():
            raise CalibrationMissing(f"response file not found: {cfg.lsf_path}")
        lsf_ccd = load_lsf(cfg.lsf_path)
    else:
        lsf_ccd = default_ccd_lsf()
    noise = cfg.noise_params()
    lattice = cfg.lattice_model()
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)

    records = []
    rows = []
    for path in frame_files:
        img, _ = load_frame(path)
        profile = integrate_transverse(img)
        analysis = analyze_profile(profile, lsf_ccd, noise, lattice,
                                   m_known=cfg.m_known)
        rec = analysis.to_record()
        rec["frame"] = path.stem
        records.append(rec)
        for entry in rec["rois"]:
            est = entry.get("refined") or entry.get("continuous")
            if est is None:
                continue
            for xi, amp, p in zip(est["xi"], est["A"],
                                  est["p"] or [None] * len(est["xi"])):
                rows.append({"frame": path.stem, "roi_start": entry["start"],
                             "m": entry["m"], "xi_px": xi, "A_e": amp,
                             "site": -(10 ** 9) if p is None else p,
                             "chi2": est["chi2"], "dof": est["dof"]})
    (outdir / "results.json").write_text(json.dumps(records, sort_keys=True,
                                                    indent=1))
    write_csv(rows, outdir / "results.csv")
    emit_reports({}, outdir, cfg)
    print(f"analyzed {len(frame_files)} frames -> {outdir / 'results.json'}")


def _cmd_calibrate_lattice(args) -> None:
    cfg = _load_config(args, "calibrate-lattice")
    noise = cfg.noise_params()
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    if cfg.distances_path is not None:
        distances = np.loadtxt(cfg.distances_path, delimiter=",").ravel()
    else:
        lattice = cfg.lattice_model()
        lsf_opt = default_optical_lsf()
        lsf_ccd = default_ccd_lsf()
        amplitude = cfg.amplitude * cfg.exposure_s
        bounds = amplitude_bounds_for(amplitude, noise)
        center = int(round(cfg.n_px / 2 / lattice.a_px))
        distances = []
        for frame in range(cfg.frames):
            rng = np.random.default_rng(
                np.random.SeedSequence((cfg.seed, frame)))
            gap = int(rng.integers(5, 15))
            img, _ = simulate_sites_frame(rng, [center, center + gap],
                                          amplitude, noise, lattice, lsf_opt,
                                          cfg.n_px, cfg.n_rows, cfg.exposure_s)
            window = extract_main_roi(img, noise)
            if window is None:
                continue
            try:
                est, _ = localize_window(window, 2, lsf_ccd, noise, bounds,
                                         None)
            except ValueError:
                continue
            distances.append(float(est.xi[1] - est.xi[0]))
        distances = np.asarray(distances)
    cal = calibrate_lattice(distances)
    report = {
        "a_px": cal.lattice.a_px,
        "a_nm": cal.lattice.a_nm,
        "residual_rms_px": cal.residual_rms,
        "coherence": cal.coherence,
        "n_used": cal.n_used,
    }
    (outdir / "lattice.json").write_text(json.dumps(report, sort_keys=True,
                                                    indent=1))
    print(f"a_px = {cal.lattice.a_px:.4f} +- {cal.residual_rms:.4f} "
          f"-> {outdir / 'lattice.json'}")


def _cmd_bench_fig7(args) -> None:
    cfg = _load_config(args, "bench-fig7")
    rows = run_benchmark_fig7(cfg, verbose=True)
    emit_reports({"benchmark_fig7": rows}, cfg.out, cfg)
    print(f"wrote {Path(cfg.out) / 'benchmark_fig7.csv'}")
    if args.check:
        worst = min(r["success_rate"] for r in rows
                    if r["method"] == "discrete")
        if worst < 0.88:
            raise CheckFailure(
                f"discrete success rate dropped to {worst:.3f} (< 0.88)")


def _cmd_bench_precision(args) -> None:
    cfg = _load_config(args, "bench-precision")
    rows = run_precision_sweep(cfg, verbose=True)
    emit_reports({"precision_sweep": rows}, cfg.out, cfg)
    print(f"wrote {Path(cfg.out) / 'precision_sweep.csv'}")
    if args.check:
        ref = [r for r in rows if r["n_photons"] == 1300.0]
        if ref and abs(ref[0]["empirical_rms_nm"] - ref[0]["bound_nm"]) \
                > 0.2 * ref[0]["bound_nm"]:
            raise CheckFailure("empirical precision at N=1300 deviates from "
                               "the analytic bound by more than 20%")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latticesr",
        description="Simulate and super-resolve emitters on a 1D lattice")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "simulate": _cmd_simulate,
        "reconstruct-lsf": _cmd_reconstruct_lsf,
        "fit-wavefront": _cmd_fit_wavefront,
        "analyze": _cmd_analyze,
        "calibrate-lattice": _cmd_calibrate_lattice,
        "bench-fig7": _cmd_bench_fig7,
        "bench-precision": _cmd_bench_precision,
    }
    for name, func in commands.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--frames", type=int)
        p.add_argument("--out")
        if name == "analyze":
            p.add_argument("--frames-dir", help="directory of simulated frames")
        if name.startswith("bench-"):
            p.add_argument("--check", action="store_true",
                           help="exit nonzero when below target")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else 0
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CalibrationMissing as exc:
        print(f"calibration missing: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION
    except CheckFailure as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
