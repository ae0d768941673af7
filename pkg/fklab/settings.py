"""
Environment configuration.
Values come from the process environment, optionally seeded from a .env
file in the working directory.
"""
import os
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

PROJECT_ROOT = Path(__file__).resolve().parent.parent

DEFAULT_WORKERS = int(os.getenv("FKLAB_WORKERS", os.cpu_count() or 1))
OUTPUT_DIR = Path(os.getenv("FKLAB_OUTPUT_DIR", "output"))
LOG_LEVEL = os.getenv("FKLAB_LOG_LEVEL", "INFO").upper()
# committed reference draws; never regenerated implicitly
RNG_FIXTURE = Path(os.getenv("FKLAB_RNG_FIXTURE", str(PROJECT_ROOT / "fixtures" / "rng_reference.json")))
PORT = int(os.getenv("PORT", 8000))

ARTIFACT_VERSION = "0.3.0"
