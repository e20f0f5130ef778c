"""Run configuration, benchmark orchestration and report emission.

The reliability benchmark simulates four equally spaced emitters at
separations of 1..9 lattice sites and scores three analysis variants per
frame: discrete lattice refinement, the continuous fit with the true
detector response, and the continuous fit with a Gaussian substitute.
Success means all three inter-emitter distances come out exactly right.

The precision sweep localizes isolated single emitters over a range of
photon numbers and compares the empirical RMS error against the analytic
bound.

Every stochastic run derives per-frame random streams from
``(seed, point index, frame index)``, so results are independent of worker
scheduling and bit-stable across reruns.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed

from . import constants
from .imaging import (AtomConfig, LatticeModel, PixelImage, Profile1D,
                      integrate_transverse, simulate_exposure,
                      subtract_background)
from .localize import (analyze_profile, lattice_refine, music_estimate,
                       nlls_fit, precision_bound, segment_rois,
                       signal_free_regions, wiener_deconvolve)
from .lsf import ResponseLsf
from .noise import NoiseParams
from .wavefront import (CANONICAL_ANGLES, TABLE_MODES, ZernikeWavefront,
                        lsf_from_wavefront)

__all__ = [
    "RunConfig",
    "default_wavefront",
    "default_optical_lsf",
    "default_ccd_lsf",
    "gaussian_ccd_lsf",
    "amplitude_bounds_for",
    "run_benchmark_fig7",
    "run_precision_sweep",
    "emit_reports",
]

TABLE1_COEFFS = {(2, 0): 0.016, (2, 2): 0.048, (3, 1): -0.007,
                 (3, 3): -0.025, (4, 0): 0.013}

_SCENARIOS = ("simulate", "reconstruct-lsf", "fit-wavefront", "analyze",
              "calibrate-lattice", "bench-fig7", "bench-precision")
_STOCHASTIC = ("simulate", "reconstruct-lsf", "analyze", "calibrate-lattice",
               "bench-fig7", "bench-precision")


@dataclass(frozen=True)
class RunConfig:
    """Validated run configuration; unknown keys are rejected on load."""

    scenario: str
    seed: int | None = None
    frames: int = 1000
    out: str = "out"
    exposure_s: float = 1.0
    noise: dict = field(default_factory=dict)
    lattice: dict = field(default_factory=dict)
    amplitude: float = constants.PHOTOELECTRONS_PER_ATOM_S
    n_atoms: int = 4
    spacings: tuple = tuple(range(1, 10))
    photon_counts: tuple = (200.0, 400.0, 800.0, 1300.0, 2600.0, 5200.0, 10400.0)
    n_px: int = constants.SENSOR_COLS
    n_rows: int = constants.SENSOR_ROWS_INTEGRATED
    lsf_path: str | None = None
    distances_path: str | None = None
    m_known: int | None = None
    jobs: int = -1

    def __post_init__(self):
        if self.scenario not in _SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; "
                             f"choose from {_SCENARIOS}")
        if self.scenario in _STOCHASTIC and self.seed is None:
            raise ValueError(f"scenario {self.scenario!r} is stochastic; "
                             "a seed is mandatory")
        if self.frames < 1:
            raise ValueError("frames must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("spacings", "photon_counts"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def noise_params(self) -> NoiseParams:
        base = NoiseParams().to_dict()
        unknown = set(self.noise) - set(base)
        if unknown:
            raise ValueError(f"unknown noise keys: {sorted(unknown)}")
        base.update(self.noise)
        p = NoiseParams.from_dict(base)
        if self.exposure_s != 1.0:
            p = p.replace(
                cic_rate=p.cic_rate * self.exposure_s,
                dark_rate=p.dark_rate * self.exposure_s,
                stray_rate=p.stray_rate * self.exposure_s,
                sigma_b=None)
        return p

    def lattice_model(self) -> LatticeModel:
        base = {"a_px": constants.LATTICE_PX, "a_nm": constants.LATTICE_NM,
                "delta_L": 0.0}
        unknown = set(self.lattice) - set(base)
        if unknown:
            raise ValueError(f"unknown lattice keys: {sorted(unknown)}")
        base.update(self.lattice)
        return LatticeModel(**base)

    def effective_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["noise_effective"] = self.noise_params().to_dict()
        d["lattice_effective"] = dataclasses.asdict(self.lattice_model())
        d["spacings"] = list(self.spacings)
        d["photon_counts"] = list(self.photon_counts)
        return d


# ---------------------------------------------------------------------------
# shipped simulated calibration defaults
# ---------------------------------------------------------------------------

def default_wavefront(pupil_grid: int = 512) -> ZernikeWavefront:
    """Reference aberrated wavefront of the measured imaging system."""
    return ZernikeWavefront(coeffs=dict(TABLE1_COEFFS), na=constants.NA_DEFAULT,
                            pupil_grid=pupil_grid,
                            angles=dict(CANONICAL_ANGLES))


@lru_cache(maxsize=4)
def default_optical_lsf(s: int = 8) -> ResponseLsf:
    """Optical response of the reference wavefront (no pixel aperture)."""
    return lsf_from_wavefront(default_wavefront(), s=s)


@lru_cache(maxsize=4)
def default_ccd_lsf(s: int = 8) -> ResponseLsf:
    """Pixel-data response: the optical response folded with the aperture."""
    return default_optical_lsf(s).with_pixel_aperture(1.0)


@lru_cache(maxsize=4)
def gaussian_ccd_lsf(s: int = 8) -> ResponseLsf:
    """Gaussian stand-in response of the nominal rms width."""
    return ResponseLsf.gaussian(constants.RMS_PSF_PX, s=s,
                                half_width_px=64).with_pixel_aperture(1.0)


def amplitude_bounds_for(amplitude: float, noise: NoiseParams,
                         n_par: int = 50,
                         n_perp: int = constants.SENSOR_ROWS_INTEGRATED
                         ) -> tuple[float, float]:
    """One-atom total +- five predicted widths of the one-atom peak."""
    w1 = math.sqrt(noise.c1 ** 2 * amplitude
                   + n_par * n_perp * noise.sigma_b ** 2)
    return max(amplitude - 5.0 * w1, 0.0), amplitude + 5.0 * w1


# ---------------------------------------------------------------------------
# frame helpers shared by benchmarks and the CLI
# ---------------------------------------------------------------------------

def simulate_sites_frame(rng, sites, amplitude, noise: NoiseParams,
                         lattice: LatticeModel, lsf_opt: ResponseLsf,
                         n_px: int, n_rows: int,
                         exposure_s: float = 1.0) -> tuple[PixelImage, LatticeModel]:
    """One frame of emitters on given sites, with a uniform lattice phase."""
    delta = float(rng.uniform(0.0, lattice.a_px))
    frame_lattice = LatticeModel(a_px=lattice.a_px, delta_L=delta,
                                 a_nm=lattice.a_nm)
    config = AtomConfig.from_sites(sites, np.full(len(sites), amplitude),
                                   frame_lattice)
    img = simulate_exposure(config, lsf_opt, noise, frame_lattice, rng,
                            n_px=n_px, n_rows=n_rows, exposure_s=exposure_s)
    return img, frame_lattice


def extract_main_roi(img: PixelImage, noise: NoiseParams) -> Profile1D | None:
    """Background-subtract and return the dominant ROI window, if any."""
    profile = integrate_transverse(img)
    med = float(np.median(profile.values))
    coarse = Profile1D(values=profile.values - med, origin_px=0,
                       background_subtracted=True, n_perp=profile.n_perp)
    rois = segment_rois(coarse, noise)
    free = signal_free_regions(rois, len(profile))
    if rois and free:
        clean = subtract_background(profile, free, rois=rois)
        rois = segment_rois(clean, noise)
    else:
        clean = coarse
    if not rois:
        return None
    roi = max(rois, key=lambda r: r.integrated_e)
    return Profile1D(values=clean.values[roi.start:roi.stop],
                     origin_px=roi.start, background_subtracted=True,
                     n_perp=clean.n_perp)


def localize_window(window: Profile1D, m: int, lsf_ccd: ResponseLsf,
                    noise: NoiseParams, bounds, lattice: LatticeModel | None):
    """Wiener + MUSIC + weighted fit, optionally lattice-refined."""
    spec = wiener_deconvolve(window, lsf_ccd, noise)
    seeds = music_estimate(spec, m)
    est = nlls_fit(window, lsf_ccd, m, seeds, noise, bounds)
    refined = None
    if lattice is not None:
        refined = lattice_refine(window, est, lattice, lsf_ccd, noise,
                                 amplitude_bounds=bounds)
    return est, refined


# ---------------------------------------------------------------------------
# Fig.-7-style reliability benchmark
# ---------------------------------------------------------------------------

def _fig7_frame(seed_key, spacing, sites, amplitude, noise, lattice,
                lsf_opt, lsf_true, lsf_gauss, bounds, n_px, n_rows,
                exposure_s):
    rng = np.random.default_rng(np.random.SeedSequence(seed_key))
    img, _ = simulate_sites_frame(rng, sites, amplitude, noise, lattice,
                                  lsf_opt, n_px, n_rows, exposure_s)
    window = extract_main_roi(img, noise)
    m = len(sites)
    truth = np.diff(sites)
    if window is None or len(window) < 2 * m + 4:
        return False, False, False
    try:
        est_true, refined = localize_window(window, m, lsf_true, noise,
                                            bounds, lattice)
        est_gauss, _ = localize_window(window, m, lsf_gauss, noise,
                                       bounds, None)
    except (ValueError, np.linalg.LinAlgError):
        return False, False, False
    ok_disc = bool(np.array_equal(np.diff(refined.p), truth))
    ok_cont = bool(np.array_equal(
        np.round(np.diff(est_true.xi) / lattice.a_px).astype(int), truth))
    ok_gauss = bool(np.array_equal(
        np.round(np.diff(est_gauss.xi) / lattice.a_px).astype(int), truth))
    return ok_disc, ok_cont, ok_gauss


def run_benchmark_fig7(config: RunConfig, verbose: bool = False) -> list[dict]:
    """Success rates of the three deconvolution variants per separation."""
    noise = config.noise_params()
    lattice = config.lattice_model()
    amplitude = config.amplitude * config.exposure_s
    lsf_opt = default_optical_lsf()
    lsf_true = default_ccd_lsf()
    lsf_gauss = gaussian_ccd_lsf()
    bounds = amplitude_bounds_for(amplitude, noise)
    m = config.n_atoms

    rows = []
    for spacing in config.spacings:
        center_site = int(round(config.n_px / 2 / lattice.a_px))
        first = center_site - (m - 1) * spacing // 2
        sites = [first + i * spacing for i in range(m)]
        tasks = (delayed(_fig7_frame)(
            (config.seed, int(spacing), frame), spacing, sites, amplitude,
            noise, lattice, lsf_opt, lsf_true, lsf_gauss, bounds,
            config.n_px, config.n_rows, config.exposure_s)
            for frame in range(config.frames))
        outcomes = Parallel(n_jobs=config.jobs)(tasks)
        arr = np.asarray(outcomes, dtype=bool)
        for j, method in enumerate(("discrete", "continuous_true_lsf",
                                    "continuous_gaussian_lsf")):
            rate = float(arr[:, j].mean())
            rows.append({
                "separation_sites": int(spacing),
                "method": method,
                "success_rate": rate,
                "stderr": math.sqrt(rate * (1.0 - rate) / config.frames),
                "n_frames": config.frames,
            })
        if verbose:
            disc, cont, gauss = arr.mean(axis=0)
            print(f"spacing {spacing}: discrete {disc:.3f} "
                  f"continuous {cont:.3f} gaussian {gauss:.3f}")
    return rows


# ---------------------------------------------------------------------------
# precision sweep
# ---------------------------------------------------------------------------

def _precision_frame(seed_key, n_photons, noise, lattice, lsf_opt, lsf_ccd,
                     n_px, n_rows, exposure_s):
    rng = np.random.default_rng(np.random.SeedSequence(seed_key))
    site = int(round(n_px / 2 / lattice.a_px))
    img, frame_lattice = simulate_sites_frame(
        rng, [site], n_photons, noise, lattice, lsf_opt, n_px, n_rows,
        exposure_s)
    truth = site * lattice.a_px + frame_lattice.delta_L
    window = extract_main_roi(img, noise)
    if window is None:
        return np.nan
    w1 = math.sqrt(noise.c1 ** 2 * n_photons
                   + len(window) * n_rows * noise.sigma_b ** 2)
    bounds = (max(n_photons - 5 * w1, 0.0), n_photons + 5 * w1)
    try:
        est, _ = localize_window(window, 1, lsf_ccd, noise, bounds, None)
    except (ValueError, np.linalg.LinAlgError):
        return np.nan
    return float(est.xi[0] - truth)


def run_precision_sweep(config: RunConfig, verbose: bool = False) -> list[dict]:
    """Empirical single-emitter RMS error vs photon number, with the bound.

    Uses a Gaussian optical response of the nominal rms width so the
    analytic bound applies directly.
    """
    noise = config.noise_params()
    lattice = config.lattice_model()
    lsf_opt = ResponseLsf.gaussian(constants.RMS_PSF_PX, s=8, half_width_px=64)
    lsf_ccd = lsf_opt.with_pixel_aperture(1.0)

    rows = []
    for idx, n_photons in enumerate(config.photon_counts):
        tasks = (delayed(_precision_frame)(
            (config.seed, idx, frame), float(n_photons), noise, lattice,
            lsf_opt, lsf_ccd, config.n_px, config.n_rows, config.exposure_s)
            for frame in range(config.frames))
        errors = np.asarray(Parallel(n_jobs=config.jobs)(tasks))
        errors = errors[np.isfinite(errors)]
        rms_nm = float(np.sqrt(np.mean(errors ** 2))
                       * constants.DELTA_S_UM * 1e3)
        bound_nm = precision_bound(
            constants.RMS_PSF_UM, constants.DELTA_P_UM, float(n_photons),
            noise.sigma_b, config.n_rows, emccd=True) * 1e3
        stderr_nm = rms_nm / math.sqrt(2.0 * max(errors.size - 1, 1))
        rows.append({
            "n_photons": float(n_photons),
            "empirical_rms_nm": rms_nm,
            "bound_nm": bound_nm,
            "stderr_nm": stderr_nm,
            "n_frames": int(errors.size),
        })
        if verbose:
            print(f"N={n_photons:g}: empirical {rms_nm:.1f} nm, "
                  f"bound {bound_nm:.1f} nm")
    return rows


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------

def _format_value(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def write_csv(rows: list[dict], path: Path) -> None:
    if not rows:
        path.write_text("")
        return
    cols = list(rows[0].keys())
    lines = [",".join(cols)]
    lines += [",".join(_format_value(r[c]) for c in cols) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def emit_reports(results: dict, outdir, config: RunConfig) -> list[Path]:
    """Write result CSVs plus a JSON metadata sidecar.

    The metadata echoes the full effective configuration (noise defaults
    applied), the seed, the package version and a hash of the canonical
    config; no timestamps, so reruns with the same seed are byte-stable.
    """
    from . import __version__

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, rows in results.items():
        path = outdir / f"{name}.csv"
        write_csv(rows, path)
        written.append(path)
    effective = config.effective_dict()
    canonical = json.dumps(effective, sort_keys=True)
    meta = {
        "config": effective,
        "config_hash": hashlib.sha256(canonical.encode()).hexdigest(),
        "seed": config.seed,
        "version": __version__,
        "outputs": sorted(p.name for p in written),
    }
    meta_path = outdir / "metadata.json"
    meta_path.write_text(json.dumps(meta, sort_keys=True, indent=1))
    written.append(meta_path)
    return written
