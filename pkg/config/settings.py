"""
Environment-driven settings for kiln.

Values come from the process environment, optionally seeded from a `.env`
file in the working directory (python-dotenv). Everything else here is a
plain constant shared by the file formats and the training defaults.
"""

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

from dotenv import load_dotenv


TOOL_NAME = "kiln"
__version__ = "0.1.0"

# =============================================================================
# FORMAT CONSTANTS
# =============================================================================

CONTAINER_MAGIC = b"BFDC0001"
CONTAINER_FORMAT_VERSION = 1

SNAPSHOT_MAGIC = b"BFCK0001"
SNAPSHOT_FORMAT_VERSION = 1

PROTOCOL_MAGIC = b"BFSRV001"
PROTOCOL_VERSION = 1

BLOB_ALIGNMENT = 64

# =============================================================================
# STEP RULE DEFAULTS
# =============================================================================
# Literature defaults. Step rules never hard-code these; they read them here.

STEP_RULE_DEFAULTS: Dict[str, Dict[str, float]] = {
    "scale": {"learning_rate": 1.0},
    "momentum": {"momentum": 0.9},
    "adagrad": {"learning_rate": 0.002, "epsilon": 1e-6},
    "rmsprop": {"learning_rate": 0.001, "decay_rate": 0.9, "epsilon": 1e-8},
    "adadelta": {"decay_rate": 0.95, "epsilon": 1e-6},
    "adam": {
        "learning_rate": 0.001,
        "beta1": 0.9,
        "beta2": 0.999,
        "epsilon": 1e-8,
    },
}


@dataclass
class Settings:
    """
    Runtime settings.

    Attributes:
        data_dir: Default directory for downloaded raw files (BF_DATA_DIR)
        log_dir: Directory for JSON log files (KILN_LOG_DIR)
        log_level: Console log level name (KILN_LOG_LEVEL)
        registry_path: Optional JSON file with extra dataset entries (KILN_REGISTRY)
    """
    data_dir: Path = field(default_factory=lambda: Path("kiln-data"))
    log_dir: Path = field(default_factory=lambda: Path("logs"))
    log_level: str = "INFO"
    registry_path: Optional[Path] = None

    def as_dict(self) -> Dict[str, Any]:
        return {
            "data_dir": str(self.data_dir),
            "log_dir": str(self.log_dir),
            "log_level": self.log_level,
            "registry_path": str(self.registry_path) if self.registry_path else None,
        }


def get_settings(env_file: Optional[str] = None) -> Settings:
    """
    Build settings from the environment.

    Args:
        env_file: Optional explicit .env path (defaults to ./.env if present)

    Returns:
        Settings instance
    """
    load_dotenv(dotenv_path=env_file, override=False)

    registry = os.getenv("KILN_REGISTRY")
    return Settings(
        data_dir=Path(os.getenv("BF_DATA_DIR", "kiln-data")),
        log_dir=Path(os.getenv("KILN_LOG_DIR", "logs")),
        log_level=os.getenv("KILN_LOG_LEVEL", "INFO").upper(),
        registry_path=Path(registry) if registry else None,
    )
