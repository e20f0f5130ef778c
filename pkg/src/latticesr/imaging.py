"""Forward image-formation model and EMCCD frame simulator.

The continuous fluorescence distribution of point emitters on a 1D lattice
is the amplitude-weighted superposition of shifted copies of the optical
line spread function. A CCD pixel records the average of that distribution
over its aperture; the simulator then draws, per pixel, Poisson photo- and
spurious electrons, amplifies the total through the stochastic EM register,
adds Gaussian read-out noise, and divides by the mean gain.

All 1D coordinates (positions, profile indices, LSF support) are in CCD
pixel units; ``delta_s``/``delta_p`` metadata anchor them to micrometres.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, TYPE_CHECKING

import numpy as np
from numpy.polynomial.legendre import leggauss

from . import constants
from .noise import NoiseParams

if TYPE_CHECKING:
    from .lsf import ResponseLsf

__all__ = [
    "PixelImage",
    "Profile1D",
    "AtomConfig",
    "LatticeModel",
    "continuous_image",
    "sample_to_ccd",
    "em_amplify",
    "simulate_exposure",
    "integrate_transverse",
    "subtract_background",
    "save_frame",
    "load_frame",
]


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class PixelImage:
    """2D grid of detector counts (photoelectrons, after gain division)."""

    counts: np.ndarray
    delta_s: float = constants.DELTA_S_UM
    delta_p: float = constants.DELTA_P_UM
    exposure_s: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "counts", _readonly(np.atleast_2d(self.counts)))
        if self.counts.shape[0] < 1 or self.counts.shape[1] < 1:
            raise ValueError("image must have positive dimensions")
        if not np.all(np.isfinite(self.counts)):
            raise ValueError("counts must be finite")
        if not (np.isfinite(self.delta_s) and np.isfinite(self.delta_p)
                and np.isfinite(self.exposure_s)):
            raise ValueError("geometry fields must be finite")
        if self.delta_p > self.delta_s:
            raise ValueError("delta_p must not exceed delta_s")

    @property
    def n_rows(self) -> int:
        return self.counts.shape[0]

    @property
    def n_cols(self) -> int:
        return self.counts.shape[1]


@dataclass(frozen=True)
class Profile1D:
    """Transversely integrated (optionally background-subtracted) 1D signal."""

    values: np.ndarray
    origin_px: int = 0
    background_subtracted: bool = False
    n_perp: int = 1

    def __post_init__(self):
        object.__setattr__(self, "values", _readonly(np.atleast_1d(self.values)))
        if self.values.size < 1:
            raise ValueError("profile must be non-empty")
        if self.n_perp < 1:
            raise ValueError("n_perp must be >= 1")

    def __len__(self) -> int:
        return self.values.size

    @property
    def pixels(self) -> np.ndarray:
        """Absolute pixel coordinates of the samples."""
        return self.origin_px + np.arange(self.values.size)


@dataclass(frozen=True)
class AtomConfig:
    """Emitter positions (px, strictly increasing) and expected totals (e-)."""

    positions: np.ndarray
    amplitudes: np.ndarray
    all_distinct_sites: bool = True

    def __post_init__(self):
        object.__setattr__(self, "positions", _readonly(np.atleast_1d(self.positions)))
        object.__setattr__(self, "amplitudes", _readonly(np.atleast_1d(self.amplitudes)))
        if self.positions.size != self.amplitudes.size:
            raise ValueError("positions and amplitudes must have equal length")
        if self.positions.size and np.any(np.diff(self.positions) <= 0):
            raise ValueError("positions must be strictly increasing")
        if np.any(self.amplitudes < 0):
            raise ValueError("amplitudes must be >= 0")

    @property
    def n_atoms(self) -> int:
        return self.positions.size

    @classmethod
    def from_sites(cls, sites, amplitudes, lattice: "LatticeModel") -> "AtomConfig":
        """Place emitters on integer lattice sites, ``xi = a_px * p``.

        The lattice phase offset ``delta_L`` is applied by the simulator,
        not here, so the same configuration can be reused across frames
        with different phases.
        """
        sites = np.asarray(sites)
        if np.any(np.diff(np.sort(sites)) == 0):
            raise ValueError("two emitters cannot occupy the same lattice site")
        order = np.argsort(sites)
        return cls(positions=lattice.a_px * sites[order],
                   amplitudes=np.asarray(amplitudes, dtype=float)[order])


@dataclass(frozen=True)
class LatticeModel:
    """Lattice geometry: ``xi = a_px * p + delta_L`` (Eq. of the site model)."""

    a_px: float = constants.LATTICE_PX
    delta_L: float = 0.0
    a_nm: float = constants.LATTICE_NM

    def __post_init__(self):
        if not (np.isfinite(self.a_px) and self.a_px > 0):
            raise ValueError("a_px must be positive")


# ---------------------------------------------------------------------------
# forward model
# ---------------------------------------------------------------------------

def continuous_image(config: AtomConfig, lsf: "ResponseLsf") -> Callable:
    """Continuous 1D intensity ``x -> sum_l A_l * L(x - xi_l)``.

    ``lsf`` must be unit-area normalized; the returned callable accepts
    scalars or arrays (pixel units) and is linear in the amplitudes.
    """
    positions = config.positions
    amplitudes = config.amplitudes

    def intensity(x):
        x = np.asarray(x, dtype=float)
        if positions.size == 0:
            return np.zeros_like(x)
        shifted = x[None, ...] - positions.reshape((-1,) + (1,) * x.ndim)
        return np.tensordot(amplitudes, lsf.evaluate(shifted), axes=1)

    return intensity


_GL_NODES, _GL_WEIGHTS = leggauss(16)


def sample_to_ccd(intensity: Callable, delta_s: float, delta_p: float,
                  n_px: int, origin: float = 0.0) -> Profile1D:
    """Sample a continuous intensity onto ``n_px`` CCD pixels.

    Pixel ``i`` (centered at ``origin + i*delta_s``) records the mean of the
    intensity over its aperture of width ``delta_p``, i.e. the aperture
    integral divided by ``delta_p``. 16-point Gauss-Legendre quadrature per
    pixel keeps the error far below shot noise for band-limited inputs.
    """
    if delta_p > delta_s:
        raise ValueError("delta_p must not exceed delta_s")
    if delta_p <= 0 or delta_s <= 0:
        raise ValueError("delta_p and delta_s must be positive")
    centers = origin + delta_s * np.arange(n_px)
    pts = centers[:, None] + 0.5 * delta_p * _GL_NODES[None, :]
    vals = np.asarray(intensity(pts.ravel()), dtype=float).reshape(pts.shape)
    values = vals @ (0.5 * _GL_WEIGHTS)
    return Profile1D(values=values, origin_px=0, background_subtracted=False,
                     n_perp=1)


def em_amplify(x, g: float, rng) -> np.ndarray | float:
    """Stochastic EM-register amplification of integer electron counts.

    For ``x >= 1`` draws from the Gamma density ``y^(x-1) e^(-y/g) /
    (g^x (x-1)!)``; zero electrons stay zero. Sample mean tends to ``g*x``
    and variance to ``g^2*x``.
    """
    if g < 1:
        raise ValueError("gain must be >= 1")
    rng = np.random.default_rng(rng)
    shape = np.asarray(x, dtype=float)
    if np.any(shape < 0):
        raise ValueError("electron counts must be >= 0")
    out = rng.gamma(shape, g)
    if np.ndim(x) == 0:
        return float(out)
    return out


def simulate_exposure(config: AtomConfig, lsf: "ResponseLsf",
                      noise: NoiseParams, lattice: LatticeModel, seed,
                      *, n_px: int = constants.SENSOR_COLS,
                      n_rows: int = constants.SENSOR_ROWS_INTEGRATED,
                      delta_s: float = constants.DELTA_S_UM,
                      delta_p: float | None = None,
                      exposure_s: float = 1.0,
                      atom_loss_prob: float = 0.0) -> PixelImage:
    """Draw one statistically faithful EMCCD frame.

    Emitters sit at ``config.positions + lattice.delta_L``. Per pixel the
    draw is: Poisson fluorescence (the sampled model spread uniformly over
    the ``n_rows`` transverse rows), Poisson stray light, Poisson
    clock-induced charges and Poisson dark counts; the summed electron
    count is EM-amplified, Gaussian read-out noise of width ``sigma_ro``
    is added, and the result is divided by the gain. ``g == 1`` bypasses
    the EM register (identity; conventional CCD mode). Identical seeds
    give bit-identical frames.

    With ``atom_loss_prob`` one uniformly chosen emitter is, with that
    probability, truncated at a uniform random fraction of the exposure.
    """
    if delta_p is None:
        delta_p = delta_s
    if delta_p > delta_s:
        raise ValueError("delta_p must not exceed delta_s")
    rng = np.random.default_rng(seed)

    amplitudes = np.array(config.amplitudes, dtype=float)
    if atom_loss_prob > 0 and config.n_atoms > 0:
        lost = rng.random() < atom_loss_prob
        which = rng.integers(config.n_atoms)
        fraction = rng.random()
        if lost:
            amplitudes[which] *= fraction

    if config.n_atoms > 0:
        shifted = AtomConfig(positions=config.positions + lattice.delta_L,
                             amplitudes=amplitudes,
                             all_distinct_sites=config.all_distinct_sites)
        model = sample_to_ccd(continuous_image(shifted, lsf),
                              1.0, delta_p / delta_s, n_px).values
        model = np.maximum(model, 0.0)
    else:
        model = np.zeros(n_px)

    shape = (n_rows, n_px)
    n_fluo = rng.poisson(np.broadcast_to(model / n_rows, shape))
    n_stray = rng.poisson(noise.stray_rate, size=shape)
    n_cic = rng.poisson(noise.cic_rate, size=shape)
    n_dark = rng.poisson(noise.dark_rate, size=shape)
    electrons = n_fluo + n_stray + n_cic + n_dark

    if noise.g == 1.0:
        amplified = electrons.astype(float)
    else:
        amplified = em_amplify(electrons, noise.g, rng)
    counts = (amplified + rng.normal(0.0, noise.sigma_ro, size=shape)) / noise.g

    return PixelImage(counts=counts, delta_s=delta_s, delta_p=delta_p,
                      exposure_s=exposure_s)


def integrate_transverse(img: PixelImage, row_range: tuple[int, int] | None = None
                         ) -> Profile1D:
    """Sum image rows into a 1D profile along the lattice direction."""
    if row_range is None:
        row_range = (0, img.n_rows)
    lo, hi = row_range
    if not (0 <= lo < hi <= img.n_rows):
        raise ValueError(f"row_range {row_range} invalid for {img.n_rows} rows")
    values = img.counts[lo:hi].sum(axis=0)
    return Profile1D(values=values, origin_px=0, background_subtracted=False,
                     n_perp=hi - lo)


def subtract_background(profile: Profile1D, signal_free_regions,
                        rois=None) -> Profile1D:
    """Subtract the mean of the signal-free pixels from the profile.

    ``signal_free_regions`` is a sequence of ``(start, stop)`` index ranges
    into ``profile.values``. If ``rois`` (same convention) is given, any
    overlap between the two is rejected.
    """
    regions = [(int(a), int(b)) for a, b in signal_free_regions]
    if not regions or all(b <= a for a, b in regions):
        raise ValueError("signal-free regions must be non-empty")
    if rois is not None:
        for a, b in regions:
            for lo, hi in ((r.start, r.stop) if hasattr(r, "start") else r
                           for r in rois):
                if a < hi and lo < b:
                    raise ValueError("signal-free region overlaps an ROI")
    mask = np.zeros(len(profile), dtype=bool)
    for a, b in regions:
        mask[max(a, 0):min(b, len(profile))] = True
    if not mask.any():
        raise ValueError("signal-free regions select no pixels")
    baseline = profile.values[mask].mean()
    return Profile1D(values=profile.values - baseline,
                     origin_px=profile.origin_px,
                     background_subtracted=True,
                     n_perp=profile.n_perp)


# ---------------------------------------------------------------------------
# frame I/O: CSV grid + JSON sidecar, deterministic round trip
# ---------------------------------------------------------------------------

def save_frame(img: PixelImage, path, noise: NoiseParams | None = None,
               seed=None) -> tuple[Path, Path]:
    """Write ``<path>.csv`` (grid, full precision) and ``<path>.json``."""
    base = Path(path)
    if base.suffix == ".csv":
        base = base.with_suffix("")
    csv_path = base.with_suffix(".csv")
    json_path = base.with_suffix(".json")
    np.savetxt(csv_path, img.counts, fmt="%.17g", delimiter=",")
    sidecar = {
        "delta_s": img.delta_s,
        "delta_p": img.delta_p,
        "exposure_s": img.exposure_s,
        "shape": list(img.counts.shape),
        "noise": noise.to_dict() if noise is not None else None,
        "seed": seed,
    }
    json_path.write_text(json.dumps(sidecar, sort_keys=True, indent=1))
    return csv_path, json_path


def load_frame(path) -> tuple[PixelImage, dict]:
    """Load a frame written by :func:`save_frame`; exact round trip."""
    base = Path(path)
    if base.suffix == ".csv":
        base = base.with_suffix("")
    counts = np.loadtxt(base.with_suffix(".csv"), delimiter=",", ndmin=2)
    sidecar = json.loads(base.with_suffix(".json").read_text())
    img = PixelImage(counts=counts, delta_s=sidecar["delta_s"],
                     delta_p=sidecar["delta_p"],
                     exposure_s=sidecar["exposure_s"])
    return img, sidecar
