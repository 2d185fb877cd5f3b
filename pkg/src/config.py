import json
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, Optional

from dotenv import load_dotenv

from .errors import InvalidConfig

# Load environment variables
load_dotenv()

# Logging
LOG_DIR = os.getenv('LONGMIX_LOG_DIR')  # unset means console only
LOG_LEVEL = os.getenv('LONGMIX_LOG_LEVEL', 'INFO')

# Optimizer defaults
TOL_REL = float(os.getenv('LONGMIX_TOL_REL', '1e-8'))
MAX_ITER = int(os.getenv('LONGMIX_MAX_ITER', '2000'))

# Study replicates run in a thread pool of this size
WORKERS = int(os.getenv('LONGMIX_WORKERS', '1'))

# Application settings
TOOL_VERSION = '1.0.0'
FIT_SCHEMA = 'longmix-fit/1'
DEFAULT_OUTPUT_DIR = 'reports'


def load_config() -> Dict[str, Any]:
    """Load and return all environment-driven settings as a dictionary"""
    return {
        'LOG_DIR': LOG_DIR,
        'LOG_LEVEL': LOG_LEVEL,
        'TOL_REL': TOL_REL,
        'MAX_ITER': MAX_ITER,
        'WORKERS': WORKERS,
        'TOOL_VERSION': TOOL_VERSION,
    }


def load_run_config(path: Optional[str]) -> Dict[str, Any]:
    """
    Read a run configuration file.
    Args:
        path: JSON (.json) or TOML (.toml) file; None gives an empty config
    Returns:
        Dictionary with keys normalized to python identifiers (``-`` -> ``_``)
    """
    if not path:
        return {}

    file_path = Path(path)
    if not file_path.exists():
        raise InvalidConfig(f"Config file not found: {path}")

    try:
        if file_path.suffix.lower() == '.toml':
            with open(file_path, 'rb') as f:
                raw = tomllib.load(f)
        else:
            with open(file_path, 'r', encoding='utf-8') as f:
                raw = json.load(f)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        raise InvalidConfig(f"Could not parse config file {path}: {e}")

    if not isinstance(raw, dict):
        raise InvalidConfig(f"Config file {path} must contain a table/object at the top level")

    return {str(key).replace('-', '_'): value for key, value in raw.items()}
