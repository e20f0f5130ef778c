"""Default physical parameters of the reference imaging system.

All pipeline coordinates are in CCD-pixel units in the object plane; the
conversions below anchor them to physical lengths. The lattice constant and
its pixel equivalent are taken as exact, which fixes the object-plane pixel
pitch.
"""

import numpy as np

LAMBDA_F_UM = 0.852          # fluorescence wavelength (um)
NA_DEFAULT = 0.228           # effective numerical aperture of the microscope

LATTICE_NM = 433.0           # lattice constant (nm)
LATTICE_PX = 1.47            # lattice constant in CCD pixels (object plane)

# object-plane pixel pitch; aperture assumed equal (unity fill factor)
DELTA_S_UM = LATTICE_NM / 1000.0 / LATTICE_PX      # ~0.2946 um/px
DELTA_P_UM = DELTA_S_UM

ABBE_RADIUS_UM = LAMBDA_F_UM / (2.0 * NA_DEFAULT)  # ~1.87 um ("~1.9 um")
ABBE_RADIUS_PX = ABBE_RADIUS_UM / DELTA_S_UM       # ~6.3 px

RMS_PSF_UM = 1.5             # rms width of the (near-Gaussian) core response
RMS_PSF_PX = RMS_PSF_UM / DELTA_S_UM

PHOTOELECTRONS_PER_ATOM_S = 1300.0   # recorded signal per atom per second

SENSOR_COLS = 512
SENSOR_ROWS_INTEGRATED = 40  # transverse rows integrated into the 1D profile

EXCESS_NOISE_FACTOR = float(np.sqrt(2.0))  # EM-register excess factor, g >> 1
