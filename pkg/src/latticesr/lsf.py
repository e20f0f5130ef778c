"""Sub-pixel line-spread-function handling and iterative reconstruction.

The detector response to a single emitter is the optical LSF convolved with
the pixel aperture. It is reconstructed from many single-emitter profiles
by low-pass filtering at the optical cutoff (the optics transmit nothing
beyond the Abbe frequency), Fourier zero-padding to a sub-pixel grid,
estimating each emitter's unrounded position against the current guess,
phase-ramp shifting every profile onto a common center, and averaging.
Iterating replaces the initial Gaussian guess with the converged response.

All grids are in CCD-pixel units; ``s`` sub-pixels per pixel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize

from . import constants
from .imaging import Profile1D

__all__ = [
    "ResponseLsf",
    "LsfAtlas",
    "LsfReconstruction",
    "fourier_lowpass",
    "upsample",
    "reconstruct_lsf",
    "build_atlas",
    "load_lsf",
]

DEFAULT_CUTOFF_PX = 1.2 / constants.ABBE_RADIUS_PX  # cycles per pixel


def _fourier_upsample(values: np.ndarray, s: int) -> np.ndarray:
    """Zero-pad the DFT by an integer factor ``s`` (trig interpolation)."""
    if s == 1:
        return np.array(values, dtype=float)
    n = len(values)
    spec = np.fft.fft(values)
    out = np.zeros(n * s, dtype=complex)
    half = n // 2
    if n % 2 == 0:
        out[:half] = spec[:half]
        out[half] = 0.5 * spec[half]
        out[n * s - half] = 0.5 * spec[half]
        out[n * s - half + 1:] = spec[half + 1:]
    else:
        out[:half + 1] = spec[:half + 1]
        out[n * s - half:] = spec[half + 1:]
    return np.fft.ifft(out).real * s


def _fourier_shift(values: np.ndarray, shift: float, step: float) -> np.ndarray:
    """Shift samples (spacing ``step``) by ``shift`` via a Fourier phase ramp."""
    spec = np.fft.rfft(values)
    freqs = np.fft.rfftfreq(len(values), d=step)
    return np.fft.irfft(spec * np.exp(-2j * np.pi * freqs * shift), n=len(values))


@dataclass(frozen=True, eq=False)
class ResponseLsf:
    """Detector response to a single emitter, on a sub-pixel grid.

    ``samples`` is a density per pixel (unit area: ``sum(samples)/s == 1``)
    at positions ``x0 + k/s`` pixels. ``delta_s`` records the physical
    pixel pitch for unit conversion; ``patch_id`` optionally tags the
    detector region the response belongs to.
    """

    samples: np.ndarray
    s: int = 8
    delta_s: float = constants.DELTA_S_UM
    x0: float | None = None
    patch_id: str | None = None

    def __post_init__(self):
        samples = np.array(self.samples, dtype=float)
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        if self.s < 1 or int(self.s) != self.s:
            raise ValueError("upsampling factor s must be a positive integer")
        object.__setattr__(self, "s", int(self.s))
        if not np.all(np.isfinite(samples)):
            raise ValueError("samples must be finite")
        area = samples.sum() / self.s
        if abs(area - 1.0) > 1e-9:
            raise ValueError(f"samples must have unit area, got {area}")
        if self.x0 is None:
            object.__setattr__(self, "x0", -(samples.size - 1) / (2.0 * self.s))

    @classmethod
    def from_samples(cls, samples, s, **kwargs) -> "ResponseLsf":
        """Build a response from raw samples, normalizing to unit area."""
        samples = np.asarray(samples, dtype=float)
        area = samples.sum() / s
        if area <= 0:
            raise ValueError("samples must have positive net area")
        return cls(samples=samples / area, s=s, **kwargs)

    @classmethod
    def gaussian(cls, rms_px: float = constants.RMS_PSF_PX, s: int = 8,
                 half_width_px: float | None = None, **kwargs) -> "ResponseLsf":
        """Unit-area Gaussian response of the given rms width (pixels)."""
        if half_width_px is None:
            half_width_px = max(8.0 * rms_px, 16.0)
        n = int(round(half_width_px * s))
        x = np.arange(-n, n + 1) / s
        samples = np.exp(-0.5 * (x / rms_px) ** 2)
        return cls.from_samples(samples, s, x0=-n / s, **kwargs)

    @property
    def grid(self) -> np.ndarray:
        """Sample positions in pixels."""
        return self.x0 + np.arange(self.samples.size) / self.s

    def _dense(self):
        cache = getattr(self, "_dense_cache", None)
        if cache is None:
            q = max(1, int(np.ceil(64 / self.s)))
            pad = max(self.samples.size // 8, 4)
            padded = np.concatenate([np.zeros(pad), self.samples, np.zeros(pad)])
            dense = _fourier_upsample(padded, q)
            x = (self.x0 - pad / self.s) + np.arange(dense.size) / (self.s * q)
            cache = (x, dense)
            object.__setattr__(self, "_dense_cache", cache)
        return cache

    def evaluate(self, x):
        """Band-limited evaluation at arbitrary pixel coordinates.

        Uses a cached densely trig-interpolated grid with linear lookup;
        zero outside the finite support.
        """
        xg, dense = self._dense()
        x = np.asarray(x, dtype=float)
        return np.interp(x, xg, dense, left=0.0, right=0.0)

    def otf(self, freqs):
        """Optical transfer function at the given frequencies (cycles/px).

        Discrete-time Fourier transform of the sampled density; ``otf(0)``
        equals 1 by the unit-area normalization.
        """
        freqs = np.atleast_1d(np.asarray(freqs, dtype=float))
        phase = np.exp(-2j * np.pi * np.outer(freqs, self.grid))
        return phase @ self.samples / self.s

    def with_pixel_aperture(self, delta_p_px: float = 1.0) -> "ResponseLsf":
        """Convolve with the rectangular pixel aperture (width in px)."""
        if not 0 < delta_p_px <= 1.0 + 1e-12:
            raise ValueError("aperture width must be in (0, 1] pixels")
        pad = 2 * self.s
        padded = np.concatenate([np.zeros(pad), self.samples, np.zeros(pad)])
        spec = np.fft.rfft(padded)
        freqs = np.fft.rfftfreq(padded.size, d=1.0 / self.s)
        out = np.fft.irfft(spec * np.sinc(freqs * delta_p_px), n=padded.size)
        return ResponseLsf.from_samples(
            out, self.s, delta_s=self.delta_s,
            x0=self.x0 - pad / self.s, patch_id=self.patch_id)

    def recentered(self) -> "ResponseLsf":
        """Shift so the centroid of the density sits at x = 0."""
        com = float(self.grid @ self.samples / self.samples.sum())
        return ResponseLsf(samples=self.samples, s=self.s, delta_s=self.delta_s,
                           x0=self.x0 - com, patch_id=self.patch_id)

    # -- serialization ------------------------------------------------------

    def save(self, path, extra: dict | None = None) -> tuple[Path, Path]:
        """Write ``<path>.csv`` (x_px, value) plus a JSON sidecar."""
        base = Path(path)
        if base.suffix == ".csv":
            base = base.with_suffix("")
        csv_path = base.with_suffix(".csv")
        json_path = base.with_suffix(".json")
        np.savetxt(csv_path, np.column_stack([self.grid, self.samples]),
                   fmt="%.17g", delimiter=",")
        meta = {"s": self.s, "delta_s": self.delta_s, "x0": self.x0,
                "patch_id": self.patch_id}
        if extra:
            meta.update(extra)
        json_path.write_text(json.dumps(meta, sort_keys=True, indent=1))
        return csv_path, json_path


def load_lsf(path) -> ResponseLsf:
    base = Path(path)
    if base.suffix == ".csv":
        base = base.with_suffix("")
    data = np.loadtxt(base.with_suffix(".csv"), delimiter=",", ndmin=2)
    meta = json.loads(base.with_suffix(".json").read_text())
    return ResponseLsf(samples=data[:, 1], s=meta["s"], delta_s=meta["delta_s"],
                       x0=meta["x0"], patch_id=meta.get("patch_id"))


# ---------------------------------------------------------------------------
# filtering and upsampling
# ---------------------------------------------------------------------------

def fourier_lowpass(profile: Profile1D, cutoff: float | None = None) -> Profile1D:
    """Zero all DFT components above ``cutoff`` (cycles/px) and transform back.

    The default cutoff is 1.2x the Abbe frequency; components beyond the
    optical cutoff carry no physical information.
    """
    if cutoff is None:
        cutoff = DEFAULT_CUTOFF_PX
    if cutoff <= 0:
        raise ValueError("cutoff must be positive")
    n = len(profile)
    spec = np.fft.rfft(profile.values)
    freqs = np.fft.rfftfreq(n, d=1.0)
    spec[freqs > cutoff] = 0.0
    return Profile1D(values=np.fft.irfft(spec, n=n), origin_px=profile.origin_px,
                     background_subtracted=profile.background_subtracted,
                     n_perp=profile.n_perp)


def upsample(profile: Profile1D, s: int) -> np.ndarray:
    """Fourier zero-padding interpolation to a sub-pixel grid.

    Returns ``len(profile) * s`` values; sample ``k`` sits at pixel position
    ``profile.origin_px + k/s``. Original samples are reproduced at stride
    ``s``; for band-limited input this equals Whittaker-Shannon (sinc)
    interpolation of the periodic extension.
    """
    if s < 1 or int(s) != s:
        raise ValueError("upsampling factor must be a positive integer")
    return _fourier_upsample(profile.values, int(s))


# ---------------------------------------------------------------------------
# iterative reconstruction
# ---------------------------------------------------------------------------

@dataclass
class LsfReconstruction:
    """Converged response plus per-iteration diagnostics."""

    lsf: ResponseLsf
    converged: bool
    n_iterations: int
    change_trace: list = field(default_factory=list)
    n_profiles_used: int = 0
    rejected: list = field(default_factory=list)
    positions: np.ndarray | None = None


def _fit_position(data: np.ndarray, evaluate, a0: float, xi0: float,
                  lo: float, hi: float) -> tuple[float, float]:
    """Least-squares fit of ``A * L(x - xi)`` to window pixel samples."""
    x = np.arange(data.size, dtype=float)

    def resid(p):
        return p[0] * evaluate(x - p[1]) - data

    res = optimize.least_squares(resid, x0=[a0, xi0],
                                 bounds=([0.0, lo], [np.inf, hi]),
                                 method="trf", xtol=1e-12, ftol=1e-12)
    return float(res.x[0]), float(res.x[1])


def reconstruct_lsf(single_atom_profiles, initial: ResponseLsf | None = None,
                    s: int = 8, cutoff: float | None = None,
                    max_iters: int = 30, *, tol: float = 1e-4,
                    r_abbe_px: float = constants.ABBE_RADIUS_PX,
                    isolation_radii: float = 10.0,
                    rms0_px: float = constants.RMS_PSF_PX,
                    delta_s: float = constants.DELTA_S_UM,
                    patch_id: str | None = None) -> LsfReconstruction:
    """Reconstruct the detector response from isolated single-emitter profiles.

    Each profile is low-pass filtered, windowed to +-``isolation_radii``
    Abbe radii around its peak (zero-extended), and upsampled. Iteration:
    fit the current guess (a Gaussian of width ``rms0_px`` on the first
    pass when no ``initial`` is given) to every filtered profile for the
    unrounded emitter position, shift each upsampled profile onto the
    window center by a Fourier phase ramp, average, renormalize; stop when
    the maximum change between successive guesses drops below ``tol`` of
    the peak.

    Profiles violating the isolation precondition (secondary peak, or the
    core truncated by the profile edge) are rejected and reported.
    """
    if cutoff is None:
        cutoff = 1.2 / r_abbe_px
    w = int(round(isolation_radii * r_abbe_px))
    n_win = 2 * w + 1

    windows_pix = []
    windows_up = []
    starts = []
    rejected = []
    for i, prof in enumerate(single_atom_profiles):
        filt = fourier_lowpass(prof, cutoff).values
        peak = int(np.argmax(filt))
        lo = peak - w
        win = np.zeros(n_win)
        src_lo, src_hi = max(lo, 0), min(lo + n_win, filt.size)
        win[src_lo - lo:src_hi - lo] = filt[src_lo:src_hi]

        peak_val = win[w]
        if peak_val <= 0:
            rejected.append((i, "no positive peak"))
            continue
        core = int(np.ceil(3 * r_abbe_px))
        if peak - core < 0 or peak + core >= filt.size:
            rejected.append((i, "core truncated at profile edge"))
            continue
        outside = win.copy()
        guard = int(np.ceil(2 * r_abbe_px))
        outside[max(w - guard, 0):w + guard + 1] = 0.0
        interior = (outside[1:-1] > outside[:-2]) & (outside[1:-1] > outside[2:])
        if np.any(outside[1:-1][interior] > 0.25 * peak_val):
            rejected.append((i, "secondary peak: isolation violated"))
            continue

        windows_pix.append(win)
        windows_up.append(_fourier_upsample(win, s))
        starts.append(lo)

    if not windows_pix:
        raise ValueError("no usable single-atom profiles after isolation checks")

    n_used = len(windows_pix)
    c = float(w)  # common alignment center, window coordinates (px)

    if initial is not None:
        guess_eval = initial.evaluate
        guess_center = 0.0
    else:
        g0 = ResponseLsf.gaussian(rms0_px, s=s, half_width_px=w)
        guess_eval = g0.evaluate
        guess_center = 0.0

    amps = np.array([win.sum() for win in windows_pix], dtype=float)
    xis = np.array([np.argmax(u) / s for u in windows_up], dtype=float)

    prev = None
    trace: list = []
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        for j in range(n_used):
            a_fit, xi_fit = _fit_position(
                windows_pix[j],
                lambda x, ge=guess_eval, gc=guess_center: ge(x - gc),
                max(amps[j], 1e-9), xis[j], xis[j] - 3 * r_abbe_px,
                xis[j] + 3 * r_abbe_px)
            amps[j], xis[j] = a_fit, xi_fit

        aligned = np.empty((n_used, n_win * s))
        for j in range(n_used):
            aligned[j] = _fourier_shift(windows_up[j], c - xis[j], 1.0 / s)
        avg = aligned.mean(axis=0)
        avg /= avg.sum() / s

        if prev is not None:
            change = float(np.max(np.abs(avg - prev)) / np.max(avg))
            trace.append(change)
            if change < tol:
                prev = avg
                converged = True
                break
        prev = avg

        grid = np.arange(n_win * s) / s
        lsf_iter = ResponseLsf.from_samples(avg, s, delta_s=delta_s, x0=-c)
        guess_eval = lsf_iter.evaluate
        guess_center = 0.0

    lsf = ResponseLsf.from_samples(prev, s, delta_s=delta_s, x0=-c,
                                   patch_id=patch_id).recentered()
    return LsfReconstruction(
        lsf=lsf, converged=converged, n_iterations=n_iter,
        change_trace=trace, n_profiles_used=n_used, rejected=rejected,
        positions=np.array(starts, dtype=float) + xis)


# ---------------------------------------------------------------------------
# per-region atlas
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LsfAtlas:
    """Ordered map from pixel-column intervals to reconstructed responses."""

    edges: np.ndarray
    lsfs: tuple

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=float)
        edges.setflags(write=False)
        object.__setattr__(self, "edges", edges)
        if np.any(np.diff(edges) <= 0):
            raise ValueError("patch edges must be strictly increasing")
        if len(self.lsfs) != edges.size - 1:
            raise ValueError("need one response per patch interval")

    def lookup(self, column: float) -> ResponseLsf:
        """Response for the patch covering the given pixel column."""
        if not self.edges[0] <= column < self.edges[-1]:
            raise ValueError(
                f"column {column} outside atlas range "
                f"[{self.edges[0]}, {self.edges[-1]})")
        idx = int(np.searchsorted(self.edges, column, side="right") - 1)
        return self.lsfs[idx]


def build_atlas(profiles, columns, patch_edges, **reconstruct_kwargs) -> LsfAtlas:
    """Reconstruct one response per detector patch.

    ``columns[i]`` is the emitter column (px) of ``profiles[i]``;
    ``patch_edges`` are the interval boundaries. Raises if a patch has no
    profiles.
    """
    columns = np.asarray(columns, dtype=float)
    edges = np.asarray(patch_edges, dtype=float)
    lsfs = []
    for k in range(edges.size - 1):
        sel = (columns >= edges[k]) & (columns < edges[k + 1])
        if not sel.any():
            raise ValueError(f"patch [{edges[k]}, {edges[k+1]}) has no profiles")
        subset = [p for p, keep in zip(profiles, sel) if keep]
        rec = reconstruct_lsf(subset,
                              patch_id=f"cols[{edges[k]:g},{edges[k+1]:g})",
                              **reconstruct_kwargs)
        lsfs.append(rec.lsf)
    return LsfAtlas(edges=edges, lsfs=tuple(lsfs))
