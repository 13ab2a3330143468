import numpy as np

SUPPORTED_DIMENSIONS: tuple[int, ...] = (1, 2)

# Grids
BAND_LIMIT_FRACTION: float = 0.5
BAND_LIMIT_TOLERANCE: float = 1e-10

# Phase space
DEFAULT_THICKENING_C: float = 4.0
DEFAULT_DELTA: float = 0.1
DEFAULT_DELTA0: float = 0.1
PARTITION_PLATEAU: float = 0.5
COHERENT_TAIL_TOLERANCE: float = 1e-12
LATTICE_TOLERANCE: float = 1e-9

# Symbols
FD_STEP_FACTOR: float = float(np.finfo(float).eps) ** (1 / 5)
FD_RELATIVE_TOLERANCE: float = 1e-6
HOMOGENEITY_TOLERANCE: float = 1e-12
ANNULUS_INNER: float = 0.5
ANNULUS_OUTER: float = 2.0
BALL_RADIUS: float = 1.0
METRIC_SAMPLES_PER_AXIS: int = 17
SYMMETRY_TOLERANCE: float = 1e-12

# Flow
MIN_FLOW_STEPS: int = 16
DEFAULT_FLOW_STEPS: int = 256
SYMPLECTIC_TOLERANCE: float = 1e-6
SINGULAR_CONDITION: float = 1e12

# FBI transform
MIN_GRID_POINTS: int = 64
NYQUIST_MARGIN: float = 4.0
SAMPLES_PER_WIDTH: float = 4.0
ISOMETRY_TOLERANCE: float = 1e-6
WINDOW_WIDTHS: float = 8.0
# >= 4 pi, so the FFT frequency spacing pi / L stays below 1 / (4 sqrt(R))
HALF_WIDTH_FACTOR: float = 16.0
MIN_HALF_WIDTH_FACTOR: float = 4.0
TRANSFORM_CHUNK: int = 64
LOCALIZE_TRANSITION_WIDTH: float = 2.0

# Propagation
STABILITY_BOUND: float = 0.25
POWER_ITERATIONS: int = 60
PACKET_THRESHOLD: float = 1e-8
UNITARITY_TOLERANCE: float = 1e-6
DEFAULT_LOCALIZATION_FACTOR: float = 6.0
AUTO_STEP_FRACTION: float = 0.5
WEYL_SUM_CHUNK: int = 256
WEYL_CACHE_SIZE: int = 16
WEYL_PROBE_MAGNITUDES: tuple[float, ...] = (0.6, 0.9, 1.3)
WEYL_MODE_TOLERANCE: float = 1e-12
SPARSE_WEYL_FRACTION: int = 16
DENSE_WEYL_LIMIT: int = 2048
PACKET_FLOW_STEPS: int = 64

# Estimates
MIN_FIT_POINTS: int = 4
MIN_SWEEP_POINTS: int = 3
MIN_CUBE_RESOLUTION: int = 8
DISPERSIVE_TOLERANCE: float = 0.1
FREE_DISPERSIVE_TOLERANCE: float = 0.05
BILINEAR_NU_TOLERANCE: float = 0.15
BILINEAR_R_SLOPE_MAX: float = 0.1
CONSERVATION_RATIO_MIN: float = 1e3
TIME_FREQUENCY_STEP: float = 0.5

# Tubes
TUBE_SAMPLES_PER_CELL: int = 4
DYADIC_EXPONENT_PER_DIM: int = 100

# Experiments
DEFAULT_SCALE: float = 256.0
DEFAULT_EPS: float = 0.01
DEFAULT_TIME_SAMPLES: int = 9
ISOMETRY_SCALES: tuple[float, ...] = (16.0, 64.0, 256.0)
ISOMETRY_SAMPLES: int = 20
CLOSED_FORM_TOLERANCE: float = 1e-10
RICHARDSON_RANGE: tuple[float, float] = (12.0, 20.0)
RICHARDSON_STEPS: int = 64
RICHARDSON_HORIZON: float = 8.0
BILIPSCHITZ_PAIRS: int = 100
BILIPSCHITZ_CHUNK: int = 25
LOCALIZATION_SCALES: tuple[float, ...] = (64.0, 256.0)
LOCALIZATION_TOLERANCE: float = 1e-4
LOCALIZATION_TIME_SAMPLES: int = 5
PACKET_FREQUENCY: float = 0.5
REMAINDER_TOLERANCE: float = 1e-3
FRAME_TOLERANCE: float = 1e-6
DISPERSIVE_DATA_SCALE: float = 3.0
DISPERSIVE_SPACING: float = 0.6
DISPERSIVE_BOX_FACTOR: float = 8.0
BILINEAR_SCALES: tuple[float, ...] = (64.0, 256.0, 1024.0)
NU_SWEEP: tuple[float, ...] = (1.0, 0.5, 0.25)
CONSERVATION_QUADRUPLES: int = 50
CONSERVATION_FREQUENCY: float = 0.4
CONSERVATION_MISMATCH: tuple[float, float] = (0.6, 0.9)
TUBES_DELTA: float = 0.25
TUBES_FAMILY_SIZE: int = 24
EXTENT_FACTOR: float = 2.0
BUDGET_S_VALUES: tuple[str, ...] = ("0", "1/2", "1")

# Runner
OUTPUT_ENV_VAR: str = "WPLAB_OUT"
DEFAULT_OUTPUT_ROOT: str = "outputs"

EXIT_PASS: int = 0
EXIT_TOLERANCE_FAILURE: int = 1
EXIT_CONFIG_ERROR: int = 2
EXIT_NUMERICAL_ERROR: int = 3

LOG_FORMAT: str = "%(asctime)s %(levelname)s %(name)s: %(message)s"
DEFAULT_THREADS: int = 4
