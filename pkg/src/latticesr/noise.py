"""EMCCD noise model: parametric noise law, background-histogram calibration,
and empirical signal-to-noise estimation.

The per-pixel variance of a gain-divided EMCCD signal is modeled as

    sigma^2(S) = sigma_b^2 + c1^2 * S + c2^2 * S^2

with S the expected fluorescence signal in photoelectrons. ``c1`` equals the
EM excess-noise factor sqrt(2) when the camera is calibrated, and ``c2`` is
compatible with zero. ``sigma_b`` collects all signal-independent channels
(stray light, dark current, clock-induced charges, read-out).

Background calibration fits a compound model to the histogram of dark pixels:
Poisson-distributed spurious electrons, stochastically amplified by the EM
register (Gamma gain density), plus Gaussian read-out noise. The fit operates
on register-output electron counts (i.e. values *before* division by the
gain); after division the gain and read-out width are no longer separately
identifiable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict, replace

import numpy as np
from scipy import optimize, signal

from .constants import EXCESS_NOISE_FACTOR

__all__ = [
    "NoiseParams",
    "SnrCurve",
    "BackgroundFit",
    "sigma_model",
    "profile_sigma",
    "total_variance",
    "fit_background_histogram",
    "estimate_snr_curve",
]


@dataclass(frozen=True)
class NoiseParams:
    """All stochastic-channel parameters of the detection chain.

    Rates are Poisson means per pixel and per exposure, in photoelectrons.
    ``sigma_ro`` is the read-out RMS in register-output electrons (before
    gain division). ``sigma_b`` defaults to the value implied by the
    spurious channels, ``sqrt(F^2*(stray+dark+cic) + (sigma_ro/g)^2)``.
    ``int_coeff`` / ``prnu_coeff`` are the fractional laser-intensity and
    photo-response non-uniformity coefficients (RMS per unit signal); both
    default to zero, matching the calibrated system.
    """

    c1: float = EXCESS_NOISE_FACTOR
    c2: float = 0.0
    g: float = 1000.0
    sigma_ro: float = 30.0
    cic_rate: float = 0.05
    dark_rate: float = 0.004
    stray_rate: float = 0.125
    int_coeff: float = 0.0
    prnu_coeff: float = 0.0
    sigma_b: float = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.sigma_b is None:
            object.__setattr__(self, "sigma_b", self.implied_background_rms())
        for name in ("sigma_b", "c1", "c2", "sigma_ro", "cic_rate",
                     "dark_rate", "stray_rate", "int_coeff", "prnu_coeff"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if self.g < 1:
            raise ValueError(f"g must be >= 1, got {self.g}")
        if self.sigma_b ** 2 < (self.sigma_ro / self.g) ** 2 - 1e-12:
            raise ValueError("sigma_b^2 must be >= (sigma_ro/g)^2")

    def implied_background_rms(self) -> float:
        """Background RMS implied by the spurious channels and read-out."""
        spurious = self.stray_rate + self.dark_rate + self.cic_rate
        return math.sqrt(EXCESS_NOISE_FACTOR ** 2 * spurious
                         + (self.sigma_ro / self.g) ** 2)

    def spurious_rate(self) -> float:
        """Total Poisson rate of signal-independent electrons per pixel."""
        return self.stray_rate + self.dark_rate + self.cic_rate

    def replace(self, **kwargs) -> "NoiseParams":
        if "sigma_b" not in kwargs:
            kwargs["sigma_b"] = self.sigma_b
        return replace(self, **kwargs)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseParams":
        return cls(**d)


def sigma_model(s_fluo, p: NoiseParams):
    """RMS noise of a single gain-divided pixel carrying signal ``s_fluo``.

    Negative model values (numerical dips of a fitted model) are clamped to
    zero before entering the square root.
    """
    s = np.maximum(np.asarray(s_fluo, dtype=float), 0.0)
    return np.sqrt(p.sigma_b ** 2 + p.c1 ** 2 * s + p.c2 ** 2 * s ** 2)


def profile_sigma(s_fluo, p: NoiseParams, n_perp: int):
    """RMS noise of a transversely integrated 1D-profile pixel.

    Summing ``n_perp`` rows multiplies the background variance by ``n_perp``
    while the signal-dependent terms follow the integrated signal itself.
    """
    s = np.maximum(np.asarray(s_fluo, dtype=float), 0.0)
    return np.sqrt(n_perp * p.sigma_b ** 2 + p.c1 ** 2 * s + p.c2 ** 2 * s ** 2)


def total_variance(s_fluo, p: NoiseParams):
    """Per-pixel variance as the quadrature sum of all noise channels.

    Shot, stray, dark and clock-induced terms are Poisson variances scaled
    by the squared excess factor; intensity noise and PRNU scale with the
    total incident signal; read-out enters divided by the gain.
    """
    s = np.asarray(s_fluo, dtype=float)
    incident = s + p.stray_rate
    var = (s + p.stray_rate + p.dark_rate + p.cic_rate
           + (p.int_coeff * incident) ** 2
           + (p.prnu_coeff * incident) ** 2)
    return EXCESS_NOISE_FACTOR ** 2 * var + (p.sigma_ro / p.g) ** 2


# ---------------------------------------------------------------------------
# background-histogram calibration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BackgroundFit:
    """Result of the compound background-histogram fit.

    ``sigma_b`` is the model RMS in photoelectron units (after gain
    division); ``g``, ``cic_rate`` and ``sigma_ro`` are the fitted gain,
    spurious-electron rate and read-out RMS (output electrons).
    """

    sigma_b: float
    g: float
    cic_rate: float
    sigma_ro: float
    converged: bool
    log_likelihood: float
    n_iterations: int
    uncertainties: dict
    parameter_trace: list
    message: str = ""

    def to_json(self) -> str:
        d = asdict(self)
        d["parameter_trace"] = [list(map(float, row)) for row in d["parameter_trace"]]
        return json.dumps(d, sort_keys=True)


def _compound_bin_probabilities(edges, lam, g, sigma, max_spurious=4):
    """Probability mass per histogram bin of the compound background model.

    Model: n ~ Poisson(lam) spurious electrons, amplified to Gamma(n, g),
    plus Gaussian read noise of width ``sigma``; all in output electrons.
    The Poisson is truncated at ``max_spurious`` electrons.
    """
    from scipy.stats import norm, gamma as gamma_dist

    pois = np.array([math.exp(-lam) * lam ** n / math.factorial(n)
                     for n in range(max_spurious + 1)])
    # zero-electron term: pure Gaussian, analytic
    probs = pois[0] * np.diff(norm.cdf(edges, loc=0.0, scale=sigma))

    # amplified terms: Gamma pdf convolved with the Gaussian on a fine grid
    lo = min(edges[0], -6.0 * sigma)
    hi = max(edges[-1], 6.0 * sigma) + 6.0 * sigma
    dv = min(sigma / 6.0, g / 50.0)
    n_grid = int(np.ceil((hi - lo) / dv)) + 1
    grid = lo + dv * np.arange(n_grid)

    tail = np.zeros_like(grid)
    pos = grid > 0
    for n in range(1, max_spurious + 1):
        tail[pos] += pois[n] * gamma_dist.pdf(grid[pos], a=n, scale=g)

    half = int(np.ceil(6.0 * sigma / dv))
    kern_x = dv * np.arange(-half, half + 1)
    kern = np.exp(-0.5 * (kern_x / sigma) ** 2)
    kern /= kern.sum()
    smeared = signal.fftconvolve(tail, kern, mode="same")

    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (smeared[1:] + smeared[:-1]) * dv)])
    probs = probs + np.diff(np.interp(edges, grid, cdf))
    return np.clip(probs, 1e-300, None)


def fit_background_histogram(samples, max_spurious: int = 4,
                             bin_width: float | None = None) -> BackgroundFit:
    """Calibrate (sigma_b, g, cic_rate, sigma_ro) from dark-pixel samples.

    ``samples`` are register-output electron values (pixel counts before
    gain division; multiply gain-divided frames by the applied gain). The
    fit maximizes the Poisson likelihood of the binned histogram under the
    compound Poisson x Gamma x Gaussian model. The returned ``cic_rate`` is
    the total spurious rate; with stray light and dark counts present it
    absorbs them as well.
    """
    samples = np.asarray(samples, dtype=float).ravel()
    if samples.size < 10_000:
        raise ValueError("need at least ~1e4 samples (1e5 recommended)")

    # robust initial guesses: Gaussian core width, tail fraction, tail mean
    med = np.median(samples)
    mad = np.median(np.abs(samples - med))
    sigma0 = max(1.4826 * mad, 1e-3 * max(np.std(samples), 1.0))
    tail = samples[samples > med + 5.0 * sigma0]
    frac = tail.size / samples.size
    lam0 = float(np.clip(-np.log1p(-min(frac, 0.9)), 1e-4, 2.0))
    g0 = float(np.mean(tail) - med) if tail.size >= 10 else 10.0 * sigma0
    g0 = max(g0, 2.0 * sigma0)

    if bin_width is None:
        bin_width = min(0.1 * g0, sigma0 / 4.0)
    lo = samples.min() - bin_width
    hi = samples.max() + bin_width
    n_bins = int(np.ceil((hi - lo) / bin_width))
    if n_bins > 6000:
        bin_width = (hi - lo) / 6000
        n_bins = 6000
    edges = lo + bin_width * np.arange(n_bins + 1)
    counts, _ = np.histogram(samples, bins=edges)
    n_tot = samples.size

    trace: list = []

    def nll(u):
        lam, g, sigma = np.exp(u)
        probs = _compound_bin_probabilities(edges, lam, g, sigma, max_spurious)
        mu = n_tot * probs
        return float(np.sum(mu) - np.sum(counts * np.log(mu)))

    u0 = np.log([lam0, g0, sigma0])
    res = optimize.minimize(
        nll, u0, method="Nelder-Mead",
        callback=lambda u: trace.append(np.exp(u)),
        options={"xatol": 1e-6, "fatol": 1e-4, "maxiter": 600},
    )
    lam, g_fit, sigma_ro = np.exp(res.x)

    # 1-sigma uncertainties from a finite-difference Hessian in log space
    unc = {}
    try:
        h = 1e-4
        n_par = 3
        hess = np.zeros((n_par, n_par))
        f0 = res.fun
        for i in range(n_par):
            for j in range(i, n_par):
                ei = np.eye(n_par)[i] * h
                ej = np.eye(n_par)[j] * h
                fpp = nll(res.x + ei + ej)
                fpm = nll(res.x + ei - ej)
                fmp = nll(res.x - ei + ej)
                fmm = nll(res.x - ei - ej)
                hess[i, j] = hess[j, i] = (fpp - fpm - fmp + fmm) / (4 * h * h)
        cov = np.linalg.inv(hess)
        sig_log = np.sqrt(np.clip(np.diag(cov), 0, None))
        for name, val, sl in zip(("cic_rate", "g", "sigma_ro"),
                                 (lam, g_fit, sigma_ro), sig_log):
            unc[name] = float(val * sl)
    except np.linalg.LinAlgError:
        unc = {k: float("inf") for k in ("cic_rate", "g", "sigma_ro")}

    sigma_b = math.sqrt(2.0 * lam + (sigma_ro / g_fit) ** 2)
    return BackgroundFit(
        sigma_b=float(sigma_b),
        g=float(g_fit),
        cic_rate=float(lam),
        sigma_ro=float(sigma_ro),
        converged=bool(res.success),
        log_likelihood=float(-res.fun),
        n_iterations=int(res.nit),
        uncertainties=unc,
        parameter_trace=trace,
        message=str(res.message),
    )


# ---------------------------------------------------------------------------
# empirical signal-to-noise curve
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SnrCurve:
    """Binned empirical signal-to-noise relationship.

    ``signal`` holds the mean recorded signal per bin, ``rms`` the pooled
    RMS noise, ``count`` the number of pooled (pixel, stack) estimates and
    ``rms_stderr`` the empirical standard error of each RMS value.
    """

    signal: np.ndarray
    rms: np.ndarray
    count: np.ndarray
    rms_stderr: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.signal) < 0):
            raise ValueError("bins must be sorted by signal")
        if np.any(self.count <= 0):
            raise ValueError("bin counts must be positive")


def estimate_snr_curve(frame_sets, n_bins: int = 30) -> SnrCurve:
    """Estimate the per-pixel noise-vs-signal relation from frame stacks.

    Each element of ``frame_sets`` is a stack of co-registered frames of a
    constant scene: a 3D array (n_frames, rows, cols) or a sequence of 2D
    arrays. Per-pixel means and variances are pooled over all stacks and
    binned by mean signal (log-spaced above one photoelectron, a single bin
    below).
    """
    means = []
    variances = []
    for stack in frame_sets:
        arr = np.asarray(stack, dtype=float)
        if arr.ndim != 3:
            raise ValueError("each stack must be a 3D array of frames")
        if arr.shape[0] < 2:
            raise ValueError("stacks need at least 2 frames")
        means.append(arr.mean(axis=0).ravel())
        variances.append(arr.var(axis=0, ddof=1).ravel())
    mean = np.concatenate(means)
    var = np.concatenate(variances)

    hi = mean.max()
    if hi <= 1.0:
        edges = np.array([mean.min() - 1.0, hi + 1.0])
    else:
        edges = np.concatenate([[mean.min() - 1.0],
                                np.geomspace(1.0, hi * (1 + 1e-12), n_bins)])
    idx = np.digitize(mean, edges) - 1

    sig, rms, cnt, err = [], [], [], []
    for b in range(len(edges) - 1):
        sel = idx == b
        n = int(sel.sum())
        if n == 0:
            continue
        v = var[sel]
        mv = v.mean()
        sig.append(mean[sel].mean())
        rms.append(math.sqrt(max(mv, 0.0)))
        cnt.append(n)
        if n > 1 and mv > 0:
            err.append(v.std(ddof=1) / math.sqrt(n) / (2.0 * math.sqrt(mv)))
        else:
            err.append(0.0)
    return SnrCurve(signal=np.array(sig), rms=np.array(rms),
                    count=np.array(cnt), rms_stderr=np.array(err))
