"""
Centralized process settings for Interleave-MT.
All settings are read from environment variables with sensible defaults.
Experiment-level settings live in key = value files (see experiment.py).
"""
import os
from dotenv import load_dotenv

# Load .env from repo root
_env_path = os.path.join(os.path.dirname(__file__), ".env")
load_dotenv(_env_path, override=False)

def _env(key: str, default: str = "") -> str:
    return os.getenv(key, default)

# ─── Directories ─────────────────────────────────────────────────────────────────────
BASE_DIR = os.path.dirname(os.path.abspath(__file__))
RUNS_DIR = _env("RUNS_DIR", os.path.join(BASE_DIR, "runs"))
LOG_DIR  = _env("LOG_DIR",  os.path.join(BASE_DIR, "logs"))

# ─── Logging ─────────────────────────────────────────────────────────────────────────
LOG_LEVEL = _env("LOG_LEVEL", "INFO").upper()
# Set to "false" to keep logs on stderr only
LOG_TO_FILE = _env("LOG_TO_FILE", "true").lower() == "true"

# ─── Compute ─────────────────────────────────────────────────────────────────────────
# sentence-level decoding threads
THREADS = int(_env("THREADS", "1"))

# ─── Defaults for experiments ────────────────────────────────────────────────────────
DEFAULT_SEED = int(_env("DEFAULT_SEED", "1"))
DEFAULT_BEAM = int(_env("DEFAULT_BEAM", "5"))
