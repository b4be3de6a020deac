import math
import os
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

ARTIFACT_VERSION = "0.3.1"
SCHEMA_VERSION = 1

LOG_LEVEL = os.getenv("DRL_LOG_LEVEL", "INFO").upper()
if LOG_LEVEL not in ("DEBUG", "INFO", "WARNING", "ERROR"):
    raise ValueError("Unsupported DRL_LOG_LEVEL. Choose DEBUG, INFO, WARNING or ERROR.")

OUTPUT_DIR = Path("outputs")
OUTPUT_DIR_ENV = "DRL_OUTPUT_DIR"

DEFAULT_MASTER_SEED = 20190611

# Angle dynamics
MU0 = 0.5
MIXING_ESCAPE_THRESHOLD = 0.01
EXACT_NOISE_FLOOR = 1e-13
EXACT_CHAIN_MAX_N = 4096
PHI_CHECK_MAX_N = 1024
PHI_TOLERANCE = 1e-10
DOMINANCE_MAX_N = 14
CHAIN_BLOCK_SIZE = 10_000

# Networks
BN_EPSILON = 1e-8
PAIR_REFERENCE_BATCH = 256
COLLINEAR_TOLERANCE = 1e-12

# Correlation lab
GAMMA_SGN = math.sqrt(2.0 / math.pi)
KWAY_MAX_K = 12
KWAY_SAMPLES_PER_CELL = 30
KWAY_DET_CONSTANT = 2.0
SQ_MIN_NETWORKS = 50
SQ_MIN_INPUTS = 1000

# Teacher-student
TEACHER_CHUNK_SIZE = 4096
TRAIN_FRACTION = 0.9
STUDENT_LEARNING_RATE = 1e-3
STUDENT_BATCH_SIZE = 256
ADAM_BETAS = (0.9, 0.999)
ADAM_EPSILON = 1e-8
MOMENTUM_BETA = 0.9
STUDENT_BN_MOMENTUM = 0.9
DATASET_MAGIC = b"DRLD1"

DESK_INPUT_DIM = 64
DESK_TEACHER_WIDTH = 32
DESK_EXAMPLES = 100_000
DESK_DEPTHS = (2, 4, 6, 8, 12, 16)
DESK_REPEATS = 3

# Output files
CSV_FLOAT_FORMAT = "%.17g"
SUMMARY_FILENAME = "summary.json"
MANIFEST_FILENAME = "manifest.json"

EXIT_OK = 0
EXIT_IO = 1
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
