"""Emitter localization by parametric deconvolution.

Pipeline stages: segment the background-subtracted 1D profile into regions
of interest, count emitters per region from the integrated photoelectron
number (acceptance regions on the photon histogram), Wiener-deconvolve the
region to expose the position-encoding oscillatory spectrum, seed positions
with the MUSIC subspace estimator, refine by noise-weighted nonlinear least
squares, and finally constrain the positions to integer lattice sites by
re-fitting every distance combination within one site of the rounded
estimate and keeping the maximum-likelihood one.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize, signal
from scipy.stats import chi2 as chi2_dist, norm as norm_dist

from . import constants
from .imaging import LatticeModel, Profile1D, subtract_background
from .lsf import ResponseLsf
from .noise import NoiseParams, profile_sigma

__all__ = [
    "Roi",
    "PhotonHistogramModel",
    "AtomEstimate",
    "WienerSpectrum",
    "LatticeCalibration",
    "segment_rois",
    "signal_free_regions",
    "fit_photon_histogram",
    "acceptance_regions",
    "count_atoms",
    "wiener_deconvolve",
    "music_estimate",
    "music_pseudospectrum",
    "nlls_fit",
    "lattice_refine",
    "calibrate_lattice",
    "precision_bound",
    "analyze_profile",
]


@dataclass(frozen=True)
class Roi:
    """Contiguous profile region holding a small cluster of emitters."""

    start: int
    stop: int
    integrated_e: float
    atom_count: int = 0
    count_confidence: float = 0.0
    accepted: bool = False

    def __post_init__(self):
        if self.stop <= self.start:
            raise ValueError("empty pixel range")
        if self.atom_count < 0:
            raise ValueError("atom count must be >= 0")
        if not 0.0 <= self.count_confidence <= 1.0:
            raise ValueError("confidence must be in [0, 1]")

    @property
    def n_par(self) -> int:
        return self.stop - self.start


@dataclass(frozen=True)
class AtomEstimate:
    """Per-region emitter estimate: positions, sites, amplitudes, fit quality."""

    xi: np.ndarray
    A: np.ndarray
    chi2: float
    dof: int
    confidence: float
    p: np.ndarray | None = None
    delta_l: float | None = None
    converged: bool = True
    at_bounds: np.ndarray | None = None
    accepted: bool = True
    crossing: bool = False

    def __post_init__(self):
        xi = np.asarray(self.xi, dtype=float)
        if xi.size > 1 and np.any(np.diff(xi) <= 0):
            raise ValueError("positions must be strictly increasing")
        if self.p is not None:
            p = np.asarray(self.p)
            if np.unique(p).size != p.size:
                raise ValueError("lattice sites must be pairwise distinct")

    @property
    def n_atoms(self) -> int:
        return np.asarray(self.xi).size

    @property
    def reduced_chi2(self) -> float:
        return self.chi2 / max(self.dof, 1)


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------

def segment_rois(profile: Profile1D, noise: NoiseParams, *,
                 r_abbe_px: float = constants.ABBE_RADIUS_PX,
                 threshold_sigma: float = 3.0) -> list[Roi]:
    """Threshold-and-dilate segmentation of a background-subtracted profile.

    Pixels above ``threshold_sigma * sigma_b * sqrt(n_perp)`` seed regions,
    each dilated by one Abbe radius per side; overlapping regions merge.
    """
    if not profile.background_subtracted:
        raise ValueError("profile must be background-subtracted")
    thr = threshold_sigma * noise.sigma_b * math.sqrt(profile.n_perp)
    above = profile.values > thr
    if not above.any():
        return []
    dil = int(np.ceil(r_abbe_px))
    n = len(profile)
    edges = np.flatnonzero(np.diff(np.concatenate([[0], above.view(np.int8), [0]])))
    runs = [(max(lo - dil, 0), min(hi + dil, n))
            for lo, hi in zip(edges[::2], edges[1::2])]
    merged = [list(runs[0])]
    for lo, hi in runs[1:]:
        if lo <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])
    return [Roi(start=lo, stop=hi,
                integrated_e=float(profile.values[lo:hi].sum()))
            for lo, hi in merged]


def signal_free_regions(rois, n: int) -> list[tuple[int, int]]:
    """Complement of the ROIs on a profile of length ``n``."""
    spans = sorted((r.start, r.stop) for r in rois)
    out = []
    prev = 0
    for lo, hi in spans:
        if lo > prev:
            out.append((prev, lo))
        prev = max(prev, hi)
    if prev < n:
        out.append((prev, n))
    return out


# ---------------------------------------------------------------------------
# photon-number histogram and atom counting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PhotonHistogramModel:
    """Gaussian-mixture model of integrated ROI photoelectron totals.

    Peak ``m`` sits at ``m * peak_spacing`` with width ``width_1 * sqrt(m)``;
    a uniform component over ``support`` models emitters lost during the
    exposure.
    """

    peak_spacing: float
    width_1: float
    abundances: np.ndarray
    background_fraction: float
    support: tuple[float, float]
    log_likelihood: float = float("nan")
    converged: bool = True

    def __post_init__(self):
        ab = np.array(self.abundances, dtype=float)
        ab.setflags(write=False)
        object.__setattr__(self, "abundances", ab)
        if self.peak_spacing <= 0 or self.width_1 <= 0:
            raise ValueError("spacing and width must be positive")

    @property
    def n_peaks(self) -> int:
        return self.abundances.size

    @property
    def peak_widths(self) -> np.ndarray:
        return self.width_1 * np.sqrt(np.arange(1, self.n_peaks + 1))

    def component_densities(self, x) -> np.ndarray:
        """Abundance-weighted densities, rows: background, peaks 1..K."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        lo, hi = self.support
        out = np.zeros((self.n_peaks + 1, x.size))
        inside = (x >= lo) & (x <= hi)
        out[0] = self.background_fraction * inside / (hi - lo)
        for m in range(1, self.n_peaks + 1):
            out[m] = self.abundances[m - 1] * norm_dist.pdf(
                x, loc=m * self.peak_spacing, scale=self.width_1 * math.sqrt(m))
        return out


def fit_photon_histogram(roi_totals, n_peaks: int | None = None) -> PhotonHistogramModel:
    """Maximum-likelihood mixture fit of ROI photoelectron totals.

    Fits the peak spacing, the one-atom width (widths scale as sqrt(m)),
    the abundances and a uniform loss background.
    """
    totals = np.asarray(roi_totals, dtype=float).ravel()
    if totals.size < 100:
        raise ValueError("need at least ~100 ROI totals (500 recommended)")

    # seed the spacing with the leftmost prominent histogram peak
    hist, edges = np.histogram(totals, bins=80)
    centers = 0.5 * (edges[1:] + edges[:-1])
    smooth = np.convolve(hist, np.ones(3) / 3.0, mode="same")
    peaks, _ = signal.find_peaks(smooth, prominence=max(1.0, 0.05 * smooth.max()))
    peaks = peaks[centers[peaks] > 0]
    spacing0 = float(centers[peaks[0]]) if peaks.size else float(np.median(totals))
    if n_peaks is None:
        n_peaks = max(1, int(round(totals.max() / spacing0)))
    width0 = max(math.sqrt(2.0 * spacing0), spacing0 / 20.0)

    lo = min(0.0, totals.min()) - 1.0
    hi = totals.max() + 3.0 * width0 * math.sqrt(n_peaks)

    assign = np.clip(np.round(totals / spacing0), 0, n_peaks).astype(int)
    counts0 = np.bincount(assign, minlength=n_peaks + 1).astype(float)
    counts0 += 0.5
    frac0 = counts0 / counts0.sum()
    frac0[0] = max(frac0[0], 0.005)

    k = n_peaks

    def unpack(u):
        spacing = math.exp(u[0])
        width = math.exp(u[1])
        logits = np.concatenate([[0.0], u[2:]])
        w = np.exp(logits - logits.max())
        w /= w.sum()
        return spacing, width, w[1:], w[0]

    def nll(u):
        spacing, width, ab, bg = unpack(u)
        model = PhotonHistogramModel(
            peak_spacing=spacing, width_1=width, abundances=ab,
            background_fraction=bg, support=(lo, hi))
        dens = model.component_densities(totals).sum(axis=0)
        return -float(np.sum(np.log(np.clip(dens, 1e-300, None))))

    u0 = np.concatenate([[math.log(spacing0), math.log(width0)],
                         np.log(frac0[1:] / frac0[0])])
    res = optimize.minimize(nll, u0, method="Nelder-Mead",
                            options={"xatol": 1e-7, "fatol": 1e-7,
                                     "maxiter": 4000, "maxfev": 8000})
    spacing, width, ab, bg = unpack(res.x)
    return PhotonHistogramModel(
        peak_spacing=spacing, width_1=width, abundances=ab,
        background_fraction=bg, support=(lo, hi),
        log_likelihood=float(-res.fun), converged=bool(res.success))


@dataclass(frozen=True)
class AcceptanceRegion:
    m: int
    lo: float
    hi: float
    confidence: float
    power: float


def acceptance_regions(model: PhotonHistogramModel, min_confidence: float = 0.99,
                       grid_n: int = 4001) -> list[AcceptanceRegion]:
    """Widest photoelectron intervals with posterior confidence above target.

    Grid points are first assigned to the hypothesis with the largest
    posterior (making the regions disjoint by construction), then each
    region keeps its highest-posterior points while the aggregate
    confidence ``P(H_m | R_m)`` stays above ``min_confidence``, maximizing
    the test power ``P(R_m | H_m)``.
    """
    lo, hi = model.support
    x = np.linspace(lo, hi, grid_n)
    dens = model.component_densities(x)
    total = dens.sum(axis=0)
    owner = np.argmax(dens, axis=0)

    regions = []
    for m in range(1, model.n_peaks + 1):
        cand = np.flatnonzero((owner == m) & (total > 0))
        if cand.size == 0:
            continue
        post = dens[m, cand] / total[cand]
        order = cand[np.argsort(post)[::-1]]
        num = np.cumsum(dens[m, order])
        den = np.cumsum(total[order])
        conf = num / den
        ok = np.flatnonzero(conf >= min_confidence)
        if ok.size == 0:
            continue
        k = ok[-1]
        chosen = order[:k + 1]
        dx = x[1] - x[0]
        power = float(num[k] * dx / max(model.abundances[m - 1], 1e-300))
        regions.append(AcceptanceRegion(
            m=m, lo=float(x[chosen.min()]), hi=float(x[chosen.max()]),
            confidence=float(conf[k]), power=min(power, 1.0)))
    return regions


def count_atoms(roi: Roi, model: PhotonHistogramModel,
                min_confidence: float = 0.99) -> tuple[int, float, bool]:
    """Atom-number hypothesis for one region, or rejection.

    Returns ``(m, confidence, accepted)``; totals falling in no acceptance
    region (including the loss background) are rejected with ``m = 0``.
    """
    for region in acceptance_regions(model, min_confidence):
        if region.lo <= roi.integrated_e <= region.hi:
            return region.m, region.confidence, True
    return 0, 0.0, False


# ---------------------------------------------------------------------------
# Wiener deconvolution
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WienerSpectrum:
    """Deconvolved spectrum of one region: ``f[k] = sum_l A_l e^{-2pi i k xi_l}``."""

    freqs: np.ndarray
    values: np.ndarray
    band_mask: np.ndarray
    sigma2: float
    origin_px: int
    n_par: int

    @property
    def band_freqs(self) -> np.ndarray:
        return self.freqs[self.band_mask]

    @property
    def band_values(self) -> np.ndarray:
        return self.values[self.band_mask]


def wiener_deconvolve(profile: Profile1D, lsf: ResponseLsf, noise: NoiseParams,
                      iters: int = 10, *, n_fft: int | None = None,
                      band_cutoff: float | None = None,
                      r_abbe_px: float = constants.ABBE_RADIUS_PX) -> WienerSpectrum:
    """Iterative Wiener deconvolution of a background-subtracted region.

    ``f[k] = F(S)[k]/OTF[k] * MTF^2[k] / (MTF^2[k] + 1/SNR[k])`` with the
    signal-to-noise per bin estimated from the previous pass (the raw
    spectrum on the first) and the integrated noise power
    ``sigma^2 = n_perp * n_par * sigma_b^2 + F^2 * N``. The signal-power
    estimate is envelope-smoothed over the beat scale of the emitter comb;
    raw per-bin powers would lock every beat null at zero (the zero fixed
    point of the iteration is attractive for any bin measured below the
    noise floor). Transfer-function zeros are harmless: the filter sends
    those bins to zero instead of dividing by them.
    """
    vals = profile.values
    n_par = vals.size
    if n_fft is None:
        n_fft = 1 << max(int(np.ceil(np.log2(max(4 * n_par, 256)))), 1)
    if band_cutoff is None:
        band_cutoff = 1.2 / r_abbe_px

    n_tot = float(max(vals.sum(), 1.0))
    sigma2 = profile.n_perp * n_par * noise.sigma_b ** 2 + noise.c1 ** 2 * n_tot
    sigma2 = max(sigma2, 1e-300)

    padded = np.zeros(n_fft)
    padded[:n_par] = vals
    spec = np.fft.rfft(padded)
    freqs = np.fft.rfftfreq(n_fft, d=1.0)
    otf = lsf.otf(freqs)
    mtf2 = np.abs(otf) ** 2

    # beat nulls of an m-emitter comb are spaced >= 1/n_par cycles/px
    smooth = max(int(round(n_fft / n_par)) | 1, 3)
    kernel = np.ones(smooth) / smooth

    f = spec.copy()
    for _ in range(iters):
        power = np.convolve(np.abs(f) ** 2, kernel, mode="same")
        snr = np.maximum(power, np.abs(f) ** 2) / sigma2
        f = spec * np.conj(otf) * snr / (mtf2 * snr + 1.0)

    return WienerSpectrum(freqs=freqs, values=f,
                          band_mask=freqs <= band_cutoff, sigma2=sigma2,
                          origin_px=profile.origin_px, n_par=n_par)


# ---------------------------------------------------------------------------
# MUSIC subspace seeding
# ---------------------------------------------------------------------------

def _music_noise_subspace(f: np.ndarray, m: int, order: int | None):
    k = f.size
    p = 2 * m + 2 if order is None else order
    if p > k - 1:
        m_max = (k - 3) // 2
        raise ValueError(
            f"cannot resolve {m} emitters from {k} usable spectrum samples; "
            f"maximum resolvable count is {max(m_max, 0)}")
    windows = np.lib.stride_tricks.sliding_window_view(f, p)
    r = np.einsum("na,nb->ab", windows, windows.conj()) / windows.shape[0]
    rev = r[::-1, ::-1].conj()
    r = 0.5 * (r + rev)
    _, vecs = np.linalg.eigh(r)
    return vecs[:, : p - m]


def music_pseudospectrum(spectrum: WienerSpectrum, m: int,
                         order: int | None = None,
                         grid_step: float = 0.02) -> tuple[np.ndarray, np.ndarray]:
    """MUSIC pseudospectrum over the region (positions in absolute px)."""
    f = spectrum.band_values
    df = float(spectrum.freqs[1] - spectrum.freqs[0])
    noise_vecs = _music_noise_subspace(f, m, order)
    p = noise_vecs.shape[0]
    grid = np.arange(0.0, spectrum.n_par, grid_step)
    steering = np.exp(-2j * np.pi * df * np.outer(np.arange(p), grid)) / math.sqrt(p)
    proj = noise_vecs.conj().T @ steering
    pseudo = 1.0 / np.sum(np.abs(proj) ** 2, axis=0)
    return grid + spectrum.origin_px, pseudo


def music_estimate(spectrum: WienerSpectrum, m: int, order: int | None = None,
                   grid_step: float = 0.02,
                   min_separation: float = 0.7) -> np.ndarray:
    """The ``m`` largest pseudospectrum peaks as initial position estimates.

    Peaks are local maxima of the reciprocal noise-subspace projection; if
    fewer than ``m`` resolve, the remaining seeds are placed on the highest
    off-peak pseudospectrum values at least ``min_separation`` pixels from
    the ones already chosen.
    """
    if m < 1:
        raise ValueError("need at least one emitter")
    grid, pseudo = music_pseudospectrum(spectrum, m, order, grid_step)
    idx, _ = signal.find_peaks(pseudo)
    idx = idx[np.argsort(pseudo[idx])[::-1]]
    chosen: list[float] = []
    for i in idx:
        if len(chosen) == m:
            break
        if all(abs(grid[i] - c) >= min_separation for c in chosen):
            chosen.append(float(grid[i]))
    if len(chosen) < m:
        for i in np.argsort(pseudo)[::-1]:
            if len(chosen) == m:
                break
            if all(abs(grid[i] - c) >= min_separation for c in chosen):
                chosen.append(float(grid[i]))
    return np.sort(np.array(chosen))


# ---------------------------------------------------------------------------
# noise-weighted nonlinear least squares
# ---------------------------------------------------------------------------

def _model_profile(x, xi, amps, lsf):
    return np.tensordot(amps, lsf.evaluate(x[None, :] - np.asarray(xi)[:, None]),
                        axes=1)


def nlls_fit(profile: Profile1D, lsf: ResponseLsf, m: int, seeds,
             noise: NoiseParams, amplitude_bounds=(0.0, np.inf), *,
             ftol: float = 1e-8) -> AtomEstimate:
    """Trust-region weighted least squares for ``m`` emitters in a region.

    Minimizes ``sum_i (S[x_i] - I_M[x_i])^2 / sigma^2(I_M[x_i])`` over the
    continuous positions and bounded amplitudes, with the noise evaluated
    on the model. Returns sorted positions (a seed-order crossing during
    optimization is flagged), the chi-square, its degrees of freedom
    ``n_par - 2m`` and the upper-tail probability as fit confidence.
    """
    x = profile.pixels.astype(float)
    vals = profile.values
    seeds = np.sort(np.asarray(seeds, dtype=float))
    if seeds.size != m:
        raise ValueError("number of seeds must equal the atom count")
    lo_a, hi_a = amplitude_bounds
    a0 = float(np.clip(max(vals.sum(), 1.0) / m,
                       lo_a if np.isfinite(lo_a) else 0.0,
                       hi_a if np.isfinite(hi_a) else np.inf))
    seeds = np.clip(seeds, x[0], x[-1])

    def resid(theta):
        xi, amps = theta[:m], theta[m:]
        model = _model_profile(x, xi, amps, lsf)
        return (vals - model) / profile_sigma(model, noise, profile.n_perp)

    theta0 = np.concatenate([seeds, np.full(m, a0)])
    lb = np.concatenate([np.full(m, x[0] - 2.0), np.full(m, lo_a)])
    ub = np.concatenate([np.full(m, x[-1] + 2.0), np.full(m, hi_a)])
    res = optimize.least_squares(resid, theta0, bounds=(lb, ub), method="trf",
                                 ftol=ftol, xtol=1e-12)

    xi, amps = res.x[:m], res.x[m:]
    order = np.argsort(xi)
    crossing = bool(np.any(order != np.arange(m)))
    xi, amps = xi[order], amps[order]
    # break exact position ties (degenerate optima) to keep ordering strict
    for i in range(1, m):
        if xi[i] <= xi[i - 1]:
            xi[i] = xi[i - 1] + 1e-9

    chi2 = float(np.sum(resid(np.concatenate([xi, amps])) ** 2))
    dof = x.size - 2 * m
    scale = max(hi_a - lo_a, 1.0) if np.isfinite(hi_a) else max(a0, 1.0)
    at_bounds = (np.abs(amps - lo_a) < 1e-8 * scale)
    if np.isfinite(hi_a):
        at_bounds |= np.abs(amps - hi_a) < 1e-8 * scale
    return AtomEstimate(
        xi=xi, A=amps, chi2=chi2, dof=dof,
        confidence=float(chi2_dist.sf(chi2, max(dof, 1))),
        converged=bool(res.status > 0), at_bounds=at_bounds,
        crossing=crossing)


# ---------------------------------------------------------------------------
# discrete lattice refinement
# ---------------------------------------------------------------------------

def lattice_refine(profile: Profile1D, est: AtomEstimate, lattice: LatticeModel,
                   lsf: ResponseLsf, noise: NoiseParams, *,
                   reject_below: float = 1e-3,
                   amplitude_bounds=(0.0, np.inf),
                   delta_l: float | None = None) -> AtomEstimate:
    """Constrain an estimate to integer lattice sites by exhaustive refits.

    Every combination of neighbor distances within +-1 site of the rounded
    continuous estimate (coincident sites excluded) is re-fit over the
    amplitudes and the lattice offset only; the minimum-chi-square
    combination wins, with ties broken by proximity to the continuous
    positions. A chi-square upper-tail test below ``reject_below`` flags
    the estimate as unreliable. Passing ``delta_l`` pins the lattice
    offset (shared-offset refinement across regions of one frame).
    """
    a = lattice.a_px
    m = est.n_atoms
    x = profile.pixels.astype(float)
    vals = profile.values
    lo_a, hi_a = amplitude_bounds

    d0 = np.maximum(np.round(np.diff(est.xi) / a).astype(int), 1)
    options = [tuple(sorted({max(d + step, 1) for step in (-1, 0, 1)}))
               for d in d0]

    best = None
    for combo in itertools.product(*options):
        offsets = a * np.concatenate([[0.0], np.cumsum(combo)])

        if delta_l is None:
            def resid(theta, offs=offsets):
                base, amps = theta[0], theta[1:]
                model = _model_profile(x, base + offs, amps, lsf)
                return (vals - model) / profile_sigma(model, noise, profile.n_perp)

            base0 = float(np.clip(est.xi[0], x[0] - a, x[-1] + a))
            theta0 = np.concatenate([[base0], np.clip(est.A, lo_a, hi_a)])
            lb = np.concatenate([[x[0] - a], np.full(m, lo_a)])
            ub = np.concatenate([[x[-1] + a], np.full(m, hi_a)])
            n_fit = m + 1
        else:
            p1 = np.round((est.xi[0] - delta_l) / a)
            base_fixed = a * p1 + delta_l

            def resid(theta, offs=offsets, b=base_fixed):
                model = _model_profile(x, b + offs, theta, lsf)
                return (vals - model) / profile_sigma(model, noise, profile.n_perp)

            theta0 = np.clip(est.A, lo_a, hi_a)
            lb = np.full(m, lo_a)
            ub = np.full(m, hi_a)
            n_fit = m

        res = optimize.least_squares(resid, theta0, bounds=(lb, ub),
                                     method="trf", ftol=1e-8, xtol=1e-12)
        chi2 = float(2.0 * res.cost)
        if delta_l is None:
            base, amps = float(res.x[0]), res.x[1:]
        else:
            base, amps = base_fixed, res.x
        xi = base + offsets
        closeness = float(np.sum(np.abs(est.xi - xi)))
        key = (chi2, closeness)
        if best is None or key < best[0]:
            best = (key, combo, xi, amps, bool(res.status > 0))

    (chi2, _), combo, xi, amps, conv = best
    base = xi[0]
    dl = float(np.mod(base, a)) if delta_l is None else float(delta_l)
    p1 = int(round((base - dl) / a))
    sites = p1 + np.concatenate([[0], np.cumsum(combo)]).astype(int)

    dof = x.size - (m + 1 if delta_l is None else m)
    confidence = float(chi2_dist.sf(chi2, max(dof, 1)))
    return AtomEstimate(
        xi=xi, A=amps, chi2=chi2, dof=dof, confidence=confidence,
        p=sites, delta_l=dl, converged=conv,
        accepted=bool(confidence >= reject_below))


# ---------------------------------------------------------------------------
# lattice-constant calibration and the analytic precision bound
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LatticeCalibration:
    lattice: LatticeModel
    residual_rms: float
    coherence: float
    n_used: int


def calibrate_lattice(distances, a_range: tuple[float, float] = (1.0, 2.0),
                      a_nm: float = constants.LATTICE_NM) -> LatticeCalibration:
    """Recover the lattice constant (px/site) from two-atom distances.

    Maximizes the lattice coherence ``sum cos(2 pi d / a)`` over the search
    range, then refines by least squares on the rounded site multiples.
    A plain squared-deviation objective would drift to small ``a``; the
    coherence statistic has its alias periods outside the search range.
    """
    d = np.asarray(distances, dtype=float).ravel()
    if d.size < 10:
        raise ValueError("need at least 10 two-atom distances (100 recommended)")
    a_grid = np.arange(a_range[0], a_range[1], 5e-4)
    coherence = np.cos(2.0 * np.pi * np.outer(1.0 / a_grid, d)).sum(axis=1)
    i0 = int(np.argmax(coherence))
    bracket = (a_grid[max(i0 - 2, 0)], a_grid[min(i0 + 2, a_grid.size - 1)])
    ref = optimize.minimize_scalar(
        lambda a: -np.cos(2.0 * np.pi * d / a).sum(),
        bounds=bracket, method="bounded")
    a_hat = float(ref.x)
    best_coh = -float(ref.fun)
    if best_coh < 0.2 * d.size:
        raise ValueError(
            f"no consistent lattice period in [{a_range[0]}, {a_range[1]}] px "
            f"(coherence {best_coh / d.size:.2f})")

    for _ in range(2):
        k = np.round(d / a_hat)
        keep = k >= 1
        a_hat = float(np.sum(k[keep] * d[keep]) / np.sum(k[keep] ** 2))
    k = np.round(d / a_hat)
    keep = k >= 1
    residual = float(np.std(d[keep] - a_hat * k[keep]))
    return LatticeCalibration(
        lattice=LatticeModel(a_px=a_hat, a_nm=a_nm),
        residual_rms=residual, coherence=best_coh / d.size,
        n_used=int(keep.sum()))


def precision_bound(rms_psf_um: float, delta_p_um: float, n_photons: float,
                    sigma_b: float, n_perp: int, emccd: bool = True) -> float:
    """Analytic single-emitter localization precision (um).

    Gaussian-response bound combining photon statistics, pixelation and
    transversely integrated background noise; EMCCD mode doubles the
    photon-statistics term (excess-noise halved quantum efficiency).
    """
    if min(rms_psf_um, delta_p_um, n_photons, n_perp) <= 0 or sigma_b < 0:
        raise ValueError("all inputs must be positive")
    kappa = 2.0 if emccd else 1.0
    var = ((kappa * rms_psf_um ** 2 + delta_p_um ** 2 / 12.0) / n_photons
           + 4.0 * math.sqrt(math.pi) * rms_psf_um ** 3 * sigma_b ** 2 * n_perp
           / (delta_p_um * n_photons ** 2))
    return math.sqrt(var)


# ---------------------------------------------------------------------------
# per-profile orchestration
# ---------------------------------------------------------------------------

@dataclass
class RoiAnalysis:
    roi: Roi
    seeds: np.ndarray | None = None
    continuous: AtomEstimate | None = None
    refined: AtomEstimate | None = None

    @property
    def final(self) -> AtomEstimate | None:
        return self.refined if self.refined is not None else self.continuous


@dataclass
class FrameAnalysis:
    profile: Profile1D
    baseline: float
    rois: list
    results: list

    def to_record(self) -> dict:
        """JSON-ready per-frame result record."""
        out = {"baseline": self.baseline, "rois": []}
        for ra in self.results:
            entry = {
                "start": ra.roi.start, "stop": ra.roi.stop,
                "integrated_e": ra.roi.integrated_e,
                "m": ra.roi.atom_count,
                "count_confidence": ra.roi.count_confidence,
                "count_accepted": ra.roi.accepted,
            }
            for tag, est in (("continuous", ra.continuous),
                             ("refined", ra.refined)):
                if est is None:
                    continue
                entry[tag] = {
                    "xi": [float(v) for v in est.xi],
                    "A": [float(v) for v in est.A],
                    "p": None if est.p is None else [int(v) for v in est.p],
                    "chi2": est.chi2, "dof": est.dof,
                    "confidence": est.confidence,
                    "delta_l": est.delta_l,
                    "accepted": est.accepted,
                }
            out["rois"].append(entry)
        return out


def analyze_profile(profile: Profile1D, lsf_ccd: ResponseLsf, noise: NoiseParams,
                    lattice: LatticeModel | None = None, *,
                    histogram: PhotonHistogramModel | None = None,
                    m_known: int | None = None,
                    min_confidence: float = 0.99,
                    amplitude_bounds=None,
                    refine: bool = True,
                    reject_below: float = 1e-3,
                    r_abbe_px: float = constants.ABBE_RADIUS_PX,
                    threshold_sigma: float = 3.0,
                    wiener_iters: int = 10,
                    music_kwargs: dict | None = None) -> FrameAnalysis:
    """Run the full per-profile pipeline.

    Estimates the baseline (median first, then the mean of the signal-free
    complement), segments, counts atoms per region (or uses ``m_known``),
    seeds positions by Wiener+MUSIC, fits, and optionally refines on the
    lattice. Regions whose photon total is rejected by the acceptance test
    are recorded but not fitted.
    """
    if histogram is None and m_known is None:
        raise ValueError("need either a photon-histogram model or m_known")
    if amplitude_bounds is None:
        if histogram is not None:
            lo = histogram.peak_spacing - 5.0 * histogram.width_1
            hi = histogram.peak_spacing + 5.0 * histogram.width_1
            amplitude_bounds = (max(lo, 0.0), hi)
        else:
            amplitude_bounds = (0.0, np.inf)

    if profile.background_subtracted:
        working = profile
        baseline = 0.0
    else:
        med = float(np.median(profile.values))
        coarse = Profile1D(values=profile.values - med,
                           origin_px=profile.origin_px,
                           background_subtracted=True, n_perp=profile.n_perp)
        rois0 = segment_rois(coarse, noise, r_abbe_px=r_abbe_px,
                             threshold_sigma=threshold_sigma)
        free = signal_free_regions(rois0, len(profile))
        if free:
            working = subtract_background(profile, free, rois=rois0)
            baseline = float(np.mean(profile.values) - np.mean(working.values))
        else:
            working = coarse
            baseline = med

    rois = segment_rois(working, noise, r_abbe_px=r_abbe_px,
                        threshold_sigma=threshold_sigma)
    results = []
    for roi in rois:
        if m_known is not None:
            m, conf, ok = m_known, 1.0, True
        else:
            m, conf, ok = count_atoms(roi, histogram, min_confidence)
        roi = replace(roi, atom_count=m, count_confidence=conf, accepted=ok)
        ra = RoiAnalysis(roi=roi)
        results.append(ra)
        if not ok or m < 1:
            continue
        window = Profile1D(values=working.values[roi.start:roi.stop],
                           origin_px=working.origin_px + roi.start,
                           background_subtracted=True, n_perp=working.n_perp)
        spec = wiener_deconvolve(window, lsf_ccd, noise, iters=wiener_iters,
                                 r_abbe_px=r_abbe_px)
        seeds = music_estimate(spec, m, **(music_kwargs or {}))
        ra.seeds = seeds
        ra.continuous = nlls_fit(window, lsf_ccd, m, seeds, noise,
                                 amplitude_bounds)
        if refine and lattice is not None:
            ra.refined = lattice_refine(window, ra.continuous, lattice,
                                        lsf_ccd, noise,
                                        reject_below=reject_below,
                                        amplitude_bounds=amplitude_bounds)
    return FrameAnalysis(profile=working, baseline=baseline, rois=rois,
                         results=results)
