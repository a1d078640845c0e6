import os
import logging
import pytz
from typing import Optional

# Only load .env for local runs (CI sets VARIRATE_NO_DOTENV)
_dotenv_missing = False
if os.getenv("VARIRATE_NO_DOTENV") is None:
    try:
        from dotenv import load_dotenv
        load_dotenv()
    except ImportError:
        _dotenv_missing = True

# Set up logging
LOG_LEVEL = os.getenv("VARIRATE_LOG_LEVEL", "INFO").upper()
logging.basicConfig(level=getattr(logging, LOG_LEVEL, logging.INFO),
                    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s")
logger = logging.getLogger("varirate")
if _dotenv_missing:
    logger.debug("python-dotenv is not installed. Skipping .env loading.")

TOOLKIT_VERSION = "1.0.0"


def _env_int(name: str) -> Optional[int]:
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return None
    try:
        return int(raw)
    except ValueError:
        logger.warning(f"Ignoring non-integer {name}={raw!r}")
        return None


# Seed override for CI runs; read lazily so tests can monkeypatch the environment
SEED_ENV_VAR = "VARIRATE_SEED"


def seed_override() -> Optional[int]:
    """Return the seed forced through VARIRATE_SEED, if any."""
    return _env_int(SEED_ENV_VAR)


def resolve_seed(seed: int) -> int:
    override = seed_override()
    if override is not None and override != seed:
        logger.info(f"🔁 Seed {seed} overridden by {SEED_ENV_VAR}={override}")
        return override
    return seed


# Paths
DATA_DIR = os.getenv("VARIRATE_DATA_DIR", "data")
RESULTS_DIR = os.getenv("VARIRATE_RESULTS_DIR", "results")
TEMPLATES_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "templates")

# Full-scale training is opt-in
FULL_SCALE = os.getenv("VARIRATE_FULL_SCALE", "False").lower() == "true"

# Timezone used to stamp experiment results
TIMEZONE = pytz.timezone(os.getenv("VARIRATE_TIMEZONE", "UTC"))

# Channel dimensions (N_t antennas, N_s subcarriers, first N_s_kept delay rows)
FULL_DIMS = {"n_t": 32, "n_s": 1024, "n_s_kept": 32}
TOY_DIMS = {"n_t": 16, "n_s": 64, "n_s_kept": 16}

# Synthetic generator presets: path count and delay spread as a fraction of the kept rows
SCENARIO_PRESETS = {
    "indoor": {"num_paths": 20, "delay_spread_fraction": 0.375, "angle_spread_deg": 60.0},
    "outdoor": {"num_paths": 12, "delay_spread_fraction": 0.5, "angle_spread_deg": 20.0},
}
MIN_DELAY_BINS = 2.0        # first arrival, keeps DFT leakage out of the wrapped tail
UPLINK_GAIN_PERTURBATION = 0.1

# Network hyperparameters (CsiNet-lineage defaults)
KERNEL_SIZE = 7
LEAKY_RELU_SLOPE = 0.3
BATCH_NORM_MOMENTUM = 0.99
BATCH_NORM_EPSILON = 1e-3
BATCH_NORM_ACCOUNTED_PARAMS = 64   # fixed per batch-norm layer in parameter accounting

# Feature maps per conv stage
CSINETPRO_MAPS = {"full": (16, 8, 4, 2), "toy": (8, 4, 2, 2)}
DUALNETSPH_MAPS = {"full": (16, 8, 4, 1), "toy": (8, 4, 2, 1)}
TOY_M = {"csinetpro": 64, "dualnetsph": 32}
FULL_M = {"csinetpro": 512, "dualnetsph": 256}

# Typical fixed-rate length sets used for storage comparisons
FIXED_RATE_LENGTHS = {
    "csinetpro": (32, 64, 128, 256, 512),
    "dualnetsph": (16, 32, 64, 128, 256),
}

# Adam defaults
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8

# Training presets
TOY_TRAINING = {"epochs": 200, "batch_size": 64, "learning_rate": 1e-3}
FULL_TRAINING = {"epochs": 2000, "batch_size": 200, "learning_rate": 1e-3}
RETRAIN_EPOCHS = {"toy": 50, "full": 500}

# Quantizer defaults
DEFAULT_MU = 255.0
DEFAULT_SOFT_A = 8.0
DEFAULT_D_REL = 0.5
SIGMOID_CLIP_EPS = 1e-7
FLOAT_BITS = 32

# Reporting
NMSE_FLOOR_DB = -100.0

# File formats
DATASET_MAGIC = b"VRCD"
DATASET_FORMAT_VERSION = 1
CHECKPOINT_MAGIC = b"VRCK"
CHECKPOINT_FORMAT_VERSION = 1
EXPERIMENT_SCHEMA_VERSION = 1

logger.debug(f"Config loaded: full_scale={FULL_SCALE}, data_dir={DATA_DIR}, "
             f"results_dir={RESULTS_DIR}, timezone={TIMEZONE}")
