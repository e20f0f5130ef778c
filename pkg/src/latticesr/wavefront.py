"""Zernike wavefront model of the imaging optics.

The pupil field is ``P(rho) * exp(2*pi*i*W(rho, theta))`` with the wavefront
``W`` expanded in RMS-normalized Zernike polynomials (a coefficient equals
its RMS contribution in wavelength units). The point spread function is the
squared modulus of the Fourier transform of the pupil field (Fraunhofer
diffraction); the line spread function is its transverse integral, computed
directly through the projection-slice theorem: the 1D optical transfer
function is the pupil autocorrelation along one axis.

Fitting the model to a measured response recovers the aberration
coefficients and the effective numerical aperture. A 1D measurement cannot
pin down the azimuthal orientation of astigmatism/coma/trefoil, so angles
are fixed to a canonical orientation by default and only optionally fitted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import optimize

from . import constants
from .lsf import ResponseLsf

__all__ = [
    "ZernikeWavefront",
    "TransferFunctions",
    "MtfCurve",
    "WavefrontFit",
    "TABLE_MODES",
    "lsf_from_wavefront",
    "fit_wavefront",
    "mtf_of",
    "strehl_and_rms",
    "transfer_functions",
]

# canonical low-order modes: defocus, astigmatism, coma, trefoil, spherical
TABLE_MODES = ((2, 0), (2, 2), (3, 1), (3, 3), (4, 0))

# A 1D response taken along x cannot separate defocus from astigmatism in
# the cos(2*theta) orientation: both shift the pupil phase by a multiple of
# (2*x*step + step^2), exactly. The 45-degree orientation (2xy) couples to
# the transverse coordinate and is identifiable, so it is the canonical
# astigmatism orientation for synthesis and fitting.
CANONICAL_ANGLES = {(2, 2): math.pi / 4.0}


def _radial_poly(n: int, m: int, rho: np.ndarray) -> np.ndarray:
    out = np.zeros_like(rho)
    for k in range((n - m) // 2 + 1):
        coef = ((-1) ** k * math.factorial(n - k)
                / (math.factorial(k)
                   * math.factorial((n + m) // 2 - k)
                   * math.factorial((n - m) // 2 - k)))
        out += coef * rho ** (n - 2 * k)
    return out


@lru_cache(maxsize=16)
def _pupil_mask(pupil_grid: int) -> np.ndarray:
    coords = (2.0 * np.arange(pupil_grid) + 1.0) / pupil_grid - 1.0
    xx, yy = np.meshgrid(coords, coords)
    mask = np.hypot(xx, yy) <= 1.0
    mask.setflags(write=False)
    return mask


@lru_cache(maxsize=64)
def _zernike_basis(pupil_grid: int, n: int, m: int):
    """RMS-normalized Zernike mode(s) on the cell-centered pupil grid.

    Returns (cos-part, sin-part); the sin part is None for m == 0.
    """
    coords = (2.0 * np.arange(pupil_grid) + 1.0) / pupil_grid - 1.0
    xx, yy = np.meshgrid(coords, coords)
    rho = np.hypot(xx, yy)
    theta = np.arctan2(yy, xx)
    inside = rho <= 1.0
    radial = _radial_poly(n, abs(m), np.where(inside, rho, 1.0))
    if m == 0:
        norm = math.sqrt(n + 1.0)
        zc = norm * radial
        zs = None
    else:
        norm = math.sqrt(2.0 * (n + 1.0))
        zc = norm * radial * np.cos(m * theta)
        zs = norm * radial * np.sin(m * theta)
        zs.setflags(write=False)
    zc.setflags(write=False)
    return zc, zs


def _phase_map(coeffs: dict, angles: dict, pupil_grid: int) -> np.ndarray:
    w = np.zeros((pupil_grid, pupil_grid))
    for (n, m), c in coeffs.items():
        zc, zs = _zernike_basis(pupil_grid, n, m)
        phi = angles.get((n, m), 0.0)
        if m == 0 or phi == 0.0:
            w = w + c * zc
        else:
            w = w + c * (np.cos(m * phi) * zc + np.sin(m * phi) * zs)
    return w


def _field_at(coeffs: dict, angles: dict, pupil_grid: int) -> np.ndarray:
    return _pupil_mask(pupil_grid) * np.exp(
        2j * np.pi * _phase_map(coeffs, angles, pupil_grid))


@dataclass(frozen=True)
class ZernikeWavefront:
    """Low-order aberrations, RMS coefficients in wavelength units.

    ``coeffs`` maps (radial order n, azimuthal order m) to the signed RMS
    coefficient of the cos(m*theta) mode; ``angles`` optionally rotates a
    mode by phi (the mode becomes cos(m*(theta - phi))).
    """

    coeffs: dict = field(default_factory=dict)
    na: float = constants.NA_DEFAULT
    lambda_um: float = constants.LAMBDA_F_UM
    pupil_grid: int = 512
    angles: dict = field(default_factory=dict)

    def __post_init__(self):
        for (n, m), c in self.coeffs.items():
            if m < 0 or m > n or (n - m) % 2 != 0:
                raise ValueError(f"invalid Zernike orders (n={n}, m={m}); "
                                 "use m >= 0 with an angle for sin modes")
            if n > 4:
                raise ValueError("orders above (4, 0) are not supported")
            if not np.isfinite(c):
                raise ValueError("coefficients must be finite")
        if not 0.0 < self.na < 1.0:
            raise ValueError("numerical aperture must be in (0, 1)")
        if self.pupil_grid < 256:
            raise ValueError("pupil grid must be at least 256 samples across")

    @property
    def rms_error(self) -> float:
        """Quadrature sum of all distorting coefficients (piston/tilt excluded)."""
        return math.sqrt(sum(c ** 2 for (n, m), c in self.coeffs.items()
                             if n >= 2))

    def phase_map(self) -> np.ndarray:
        """Wavefront W on the pupil grid (wavelength units)."""
        return _phase_map(self.coeffs, self.angles, self.pupil_grid)

    def pupil_field(self) -> np.ndarray:
        return _field_at(self.coeffs, self.angles, self.pupil_grid)


# ---------------------------------------------------------------------------
# forward model: pupil -> OTF slice -> LSF
# ---------------------------------------------------------------------------

def _otf_slice(fieldarr: np.ndarray) -> np.ndarray:
    """Pupil autocorrelation along x summed over y (1D OTF at f_y = 0).

    Returns correlation values for integer-sample shifts -D..D-1
    (fftshift order applied, D = pupil grid size), normalized to 1 at zero
    shift.
    """
    d = fieldarr.shape[1]
    spec = np.fft.fft(fieldarr, n=2 * d, axis=1)
    corr = np.fft.ifft(np.sum(np.abs(spec) ** 2, axis=0))
    corr = np.fft.fftshift(corr)
    return corr / corr[d]


def _lsf_values(w: ZernikeWavefront, x_um: np.ndarray,
                delta_p_um: float | None = None) -> np.ndarray:
    """Optical LSF (density per um) at the given positions."""
    d = w.pupil_grid
    corr = _otf_slice(w.pupil_field())
    dfreq = 2.0 * (w.na / w.lambda_um) / d          # cycles/um per shift
    freqs = (np.arange(2 * d) - d) * dfreq
    if delta_p_um is not None:
        corr = corr * np.sinc(freqs * delta_p_um)
    phases = np.exp(2j * np.pi * np.outer(x_um, freqs))
    return (phases @ corr).real * dfreq


def _grid_residual(w: ZernikeWavefront) -> float:
    """Convergence error of the transfer function under pupil-grid halving.

    RMS difference between the normalized transfer functions computed on
    the full and the half pupil grid, evaluated at the shared frequencies.
    Rim-quantization noise stays well below 1e-4 in this norm; a larger
    residual means the wavefront phase is undersampled.
    """
    d = w.pupil_grid
    fine = _otf_slice(w.pupil_field())
    coarse = _otf_slice(_field_at(w.coeffs, w.angles, d // 2))
    j = np.arange(-d // 2, d // 2)
    diff = fine[d + 2 * j] - coarse[d // 2 + j]
    return float(np.sqrt(np.mean(np.abs(diff) ** 2)))


def lsf_from_wavefront(w: ZernikeWavefront, *, s: int = 8,
                       half_width_px: float = 96.0,
                       delta_s: float = constants.DELTA_S_UM,
                       include_pixel_aperture: bool = False,
                       residual_limit: float = 1e-4) -> ResponseLsf:
    """Line spread function of the aberrated pupil, as a detector response.

    The LSF is sampled at ``1/s`` pixel over ``+-half_width_px``. With
    ``include_pixel_aperture`` the rectangular aperture of one pixel width
    is folded in (giving the response seen in pixel data). Raises when the
    energy-conservation residual (transfer-function change under pupil-grid
    halving, plus any negative intensity) exceeds ``residual_limit``,
    which indicates an undersampled wavefront. The slowly decaying
    diffraction tails outside the window (about 1% of the energy) are
    redistributed by the unit-area normalization.
    """
    n_half = int(round(half_width_px * s))
    x_px = np.arange(-n_half, n_half + 1) / s
    x_um = x_px * delta_s
    vals = _lsf_values(w, x_um,
                       delta_p_um=delta_s if include_pixel_aperture else None)
    residual = _grid_residual(w) + max(0.0, -vals.min()) / vals.max()
    if residual > residual_limit:
        raise ValueError(
            f"energy-conservation residual {residual:.2e} exceeds "
            f"{residual_limit:.0e}; the pupil grid undersamples the wavefront")
    return ResponseLsf.from_samples(vals, s, delta_s=delta_s,
                                    x0=-n_half / s)


@dataclass(frozen=True)
class MtfCurve:
    """Sampled modulation transfer function, frequencies in cycles/px."""

    freqs: np.ndarray
    values: np.ndarray
    cutoff: float


def mtf_of(lsf: ResponseLsf, freqs: np.ndarray | None = None,
           n_freq: int = 512) -> MtfCurve:
    """Modulus of the 1D transfer function, normalized to 1 at DC.

    The default axis samples ``n_freq``-per-cycle resolution (spacing
    ``1/n_freq`` cycles/px) up to the pixel Nyquist frequency. The cutoff
    estimate is the largest sampled frequency with MTF above 1e-3.
    """
    if freqs is None:
        freqs = np.arange(n_freq // 2 + 1) / n_freq
    values = np.abs(lsf.otf(freqs))
    values = values / values[0]
    above = np.nonzero(values > 1e-3)[0]
    cutoff = float(freqs[above[-1]]) if above.size else 0.0
    return MtfCurve(freqs=np.asarray(freqs, dtype=float), values=values,
                    cutoff=cutoff)


# ---------------------------------------------------------------------------
# Strehl ratio via a zoomed 2D PSF peak
# ---------------------------------------------------------------------------

def _psf_peak(fieldarr: np.ndarray, na: float, lambda_um: float) -> float:
    """Peak of |FT(pupil field)|^2, by two-stage zoomed DFT around origin."""
    d = fieldarr.shape[0]
    f_c = na / lambda_um
    fcoord = ((2.0 * np.arange(d) + 1.0) / d - 1.0) * f_c   # cycles/um
    r_abbe = lambda_um / (2.0 * na)

    def grid_peak(center_x, center_y, half, n):
        xs = center_x + np.linspace(-half, half, n)
        ys = center_y + np.linspace(-half, half, n)
        ax = np.exp(2j * np.pi * np.outer(fcoord, xs))
        ay = np.exp(2j * np.pi * np.outer(fcoord, ys))
        e = ay.T @ fieldarr @ ax
        p = np.abs(e) ** 2
        iy, ix = np.unravel_index(np.argmax(p), p.shape)
        return p[iy, ix], xs[ix], ys[iy]

    peak, px, py = grid_peak(0.0, 0.0, r_abbe, 65)
    step = 2 * r_abbe / 64
    peak, _, _ = grid_peak(px, py, 2 * step, 33)
    return float(peak)


def strehl_and_rms(w: ZernikeWavefront) -> tuple[float, float]:
    """Strehl ratio (aberrated/ideal 2D PSF peak) and RMS wavefront error."""
    ideal = ZernikeWavefront(coeffs={}, na=w.na, lambda_um=w.lambda_um,
                             pupil_grid=w.pupil_grid)
    peak_ab = _psf_peak(w.pupil_field(), w.na, w.lambda_um)
    peak_id = _psf_peak(ideal.pupil_field(), w.na, w.lambda_um)
    return peak_ab / peak_id, w.rms_error


@dataclass(frozen=True)
class TransferFunctions:
    """Derived optical quality summary for one wavefront."""

    mtf: MtfCurve
    lsf: ResponseLsf
    strehl: float
    rms_error: float

    def __post_init__(self):
        if not 0.0 < self.strehl <= 1.0 + 1e-9:
            raise ValueError("Strehl ratio must be in (0, 1]")


def transfer_functions(w: ZernikeWavefront, **lsf_kwargs) -> TransferFunctions:
    lsf = lsf_from_wavefront(w, **lsf_kwargs)
    strehl, rms = strehl_and_rms(w)
    return TransferFunctions(mtf=mtf_of(lsf), lsf=lsf, strehl=strehl,
                             rms_error=rms)


# ---------------------------------------------------------------------------
# fitting a measured response
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WavefrontFit:
    """Fitted wavefront with per-parameter 1-sigma uncertainties."""

    wavefront: ZernikeWavefront
    uncertainties: dict
    residual_rms: float
    converged: bool
    n_evaluations: int
    message: str = ""
    degenerate: bool = False


def fit_wavefront(measured: ResponseLsf, modes=TABLE_MODES,
                  fit_angles: bool = False, pupil_grid: int = 512,
                  lambda_um: float = constants.LAMBDA_F_UM,
                  na0: float | None = None) -> WavefrontFit:
    """Least-squares fit of the pupil model to a measured response.

    Fits the signed RMS coefficients of ``modes``, the numerical aperture,
    a lateral shift and an amplitude factor, with the mode orientations
    held at the canonical angles. With ``fit_angles`` the azimuthal
    orientations of the non-rotationally-symmetric modes become free
    parameters as well; their uncertainties are reported separately (a 1D
    response constrains them only weakly, so large spreads flag the
    expected degeneracy).
    """
    x_um = measured.grid * measured.delta_s
    span = x_um.max() - x_um.min()
    r_abbe = lambda_um / (2.0 * (na0 or constants.NA_DEFAULT))
    if span < 10.0 * r_abbe:
        raise ValueError("measured response must cover at least +-5 Abbe radii")
    data = measured.samples / measured.delta_s  # density per um

    if na0 is None:
        cut = mtf_of(measured).cutoff / measured.delta_s  # cycles/um
        na0 = float(np.clip(cut * lambda_um / 2.0, 0.05, 0.9))
    shift0 = float(x_um @ data / data.sum())

    modes = tuple(modes)
    rot_modes = [nm for nm in modes if nm[1] != 0] if fit_angles else []
    n_c = len(modes)
    n_a = len(rot_modes)

    def unpack(p):
        coeffs = dict(zip(modes, p[:n_c]))
        angles = {nm: phi for nm, phi in CANONICAL_ANGLES.items()
                  if nm in modes}
        angles.update(dict(zip(rot_modes, p[n_c:n_c + n_a])))
        na, shift, amp = p[n_c + n_a:]
        return coeffs, angles, na, shift, amp

    def residuals(p):
        coeffs, angles, na, shift, amp = unpack(p)
        w = ZernikeWavefront(coeffs=coeffs, na=na, lambda_um=lambda_um,
                             pupil_grid=pupil_grid, angles=angles)
        model = _lsf_values(w, x_um - shift)
        return amp * model - data

    ang0 = [CANONICAL_ANGLES.get(nm, 0.0) for nm in rot_modes]
    p0 = np.concatenate([np.zeros(n_c), ang0, [na0, shift0, 1.0]])
    lb = np.concatenate([-0.5 * np.ones(n_c), -np.pi * np.ones(n_a),
                         [0.02, x_um.min(), 0.2]])
    ub = np.concatenate([0.5 * np.ones(n_c), np.pi * np.ones(n_a),
                         [0.95, x_um.max(), 5.0]])
    res = optimize.least_squares(residuals, p0, bounds=(lb, ub), method="trf",
                                 ftol=1e-12, xtol=1e-12, gtol=1e-12)

    coeffs, angles, na, shift, amp = unpack(res.x)
    dof = max(data.size - res.x.size, 1)
    scale = 2.0 * res.cost / dof
    try:
        cov = np.linalg.inv(res.jac.T @ res.jac) * scale
        sig = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    except np.linalg.LinAlgError:
        sig = np.full(res.x.size, np.inf)

    unc = {f"c{n}{m}": float(s) for (n, m), s in zip(modes, sig[:n_c])}
    for (n, m), s in zip(rot_modes, sig[n_c:n_c + n_a]):
        unc[f"angle{n}{m}"] = float(s)
    unc["na"] = float(sig[n_c + n_a])
    unc["shift_um"] = float(sig[n_c + n_a + 1])
    unc["amplitude"] = float(sig[n_c + n_a + 2])
    degenerate = any(not np.isfinite(v) or v > 1.0 for v in unc.values())

    w_fit = ZernikeWavefront(coeffs=coeffs, na=float(na), lambda_um=lambda_um,
                             pupil_grid=pupil_grid, angles=angles)
    return WavefrontFit(
        wavefront=w_fit, uncertainties=unc,
        residual_rms=float(np.sqrt(2.0 * res.cost / data.size) / data.max()),
        converged=bool(res.success), n_evaluations=int(res.nfev),
        message=str(res.status), degenerate=degenerate)
