"""Super-resolution localization of point emitters on a 1D optical lattice.

Simulates fluorescence frames of lattice-trapped emitters under a measured
EMCCD noise model and recovers each emitter's lattice site beyond the
diffraction limit by parametric deconvolution: Wiener filtering, MUSIC
position seeding, noise-weighted nonlinear least squares and discrete
lattice refinement.
"""

__version__ = "0.1.0"

from .constants import (ABBE_RADIUS_PX, ABBE_RADIUS_UM, DELTA_P_UM,
                        DELTA_S_UM, EXCESS_NOISE_FACTOR, LAMBDA_F_UM,
                        LATTICE_NM, LATTICE_PX, NA_DEFAULT, RMS_PSF_PX,
                        RMS_PSF_UM)
from .imaging import (AtomConfig, LatticeModel, PixelImage, Profile1D,
                      continuous_image, em_amplify, integrate_transverse,
                      load_frame, sample_to_ccd, save_frame,
                      simulate_exposure, subtract_background)
from .noise import (BackgroundFit, NoiseParams, SnrCurve, estimate_snr_curve,
                    fit_background_histogram, profile_sigma, sigma_model,
                    total_variance)
from .lsf import (LsfAtlas, LsfReconstruction, ResponseLsf, build_atlas,
                  fourier_lowpass, load_lsf, reconstruct_lsf, upsample)
from .wavefront import (MtfCurve, TransferFunctions, WavefrontFit,
                        ZernikeWavefront, fit_wavefront, lsf_from_wavefront,
                        mtf_of, strehl_and_rms, transfer_functions)
from .localize import (AtomEstimate, LatticeCalibration, PhotonHistogramModel,
                       Roi, WienerSpectrum, acceptance_regions,
                       analyze_profile, calibrate_lattice, count_atoms,
                       fit_photon_histogram, lattice_refine, music_estimate,
                       music_pseudospectrum, nlls_fit, precision_bound,
                       segment_rois, signal_free_regions, wiener_deconvolve)
from .bench import (RunConfig, amplitude_bounds_for, default_ccd_lsf,
                    default_optical_lsf, default_wavefront, emit_reports,
                    gaussian_ccd_lsf, run_benchmark_fig7, run_precision_sweep)
