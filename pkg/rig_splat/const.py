NAME = __name__.replace('_', '-').split('.')[0]

# --- Camera ---
DEFAULT_FOV_DEG = 14.3
DEFAULT_RESOLUTION = 512
DEFAULT_NEAR = 0.01
DEFAULT_FAR = 100.0

# --- Splat renderer ---
TILE_SIZE = 16
ALPHA_CUTOFF = 1.0 / 255.0
TRANSMITTANCE_EPS = 1e-4
DEPTH_ALPHA_EPS = 1e-4
PARALLEL_EPS = 1e-9

# --- Geometry ---
DEGENERATE_AREA = 1e-12
MAX_SPLATS_PER_FACE = 6
MIN_SPLATS_PER_FACE = 1
OPACITY_CLAMP = 1e-4

# --- Shading ---
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, 0.31539156525252005, 0.5462742152960396)
SH_COEFFS = 9

# --- Optimizer ---
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
DEFAULT_LR = 1e-3
DEFAULT_ITERATIONS = 2000
DEFAULT_T_DENSIFY = 200
DEFAULT_T_HISTORY = 100
DEFAULT_NOISE_SCALE = 0.05
DEFAULT_N_PRUNE = 16

# --- Files ---
PROTOTYPE_MAGIC = b"RSPR"
PROTOTYPE_VERSION = 1
CHECKPOINT_VERSION = 1
RAW_MAGIC = "RSRAW1"
MODEL_MAGIC = "rig-splat-model"
MODEL_VERSION = 1
BUILTIN_MODEL = "builtin"

# --- Exit codes ---
EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_NUMERICAL = 3
