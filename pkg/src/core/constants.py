"""
Constants for the multimode photon-pair experiment
"""

import math

SPEED_OF_LIGHT = 299_792_458.0  # m/s
LN2 = math.log(2.0)
TWO_PI = 2.0 * math.pi

# Fitted values for the two pump levels (13 uW and 6.5 uW)
REFERENCE_FITS = {
    "13uW": {
        "tau_f_ns": 2.07,
        "resolving_time_ps": 285.0,
        "omega_c_mhz": 11.0,
        "c1": 1446.0,
        "c2": 0.067,
        "tau0_ns": 39.0,
    },
    "6.5uW": {
        "tau_f_ns": 2.07,
        "resolving_time_ps": 274.0,
        "omega_c_mhz": 11.0,
        "c1": 626.0,
        "c2": 0.025,
        "tau0_ns": 39.0,
    },
}

# Bow-tie cavity geometry
CAVITY_ROUND_TRIP_MM = 560.0
CRYSTAL_LENGTH_MM = 10.0
CRYSTAL_INDEX = 2.2
OUTPUT_COUPLER_TRANSMITTANCE = 0.10

# Histogramming defaults
DEFAULT_BIN_WIDTH_PS = 50.0
DEFAULT_WINDOW_NS = (0.0, 50.0)

# Numerical tolerances
COMB_TAIL_TOLERANCE = 1e-9
FEJER_SERIES_THRESHOLD = 1e-6
MIN_INVERSE_CDF_POINTS = 4096

# Process exit codes (stable, documented in the CLI epilog)
EXIT_OK = 0
EXIT_ERROR = 1
EXIT_PARSE = 3
EXIT_VALIDATION = 4
EXIT_FIT = 5
EXIT_INCONSISTENT = 6
EXIT_NUMERIC = 7
