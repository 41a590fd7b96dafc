"""
Environment-level settings and the startup checks that make sure the output
directory and the results database exist.
"""

import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

from fused_sfda.database.results_repo import create_tables

DEFAULT_OUTPUT_DIR = "runs"
DEFAULT_LOG_FILE = "debug.log"
DEFAULT_LOG_LEVEL = "INFO"


@dataclass(frozen=True)
class EnvSettings:
    output_dir: Path
    results_db: Path
    log_file: Path
    log_level: str


def read_env(env_path: Optional[Path] = None) -> EnvSettings:
    """
    Loads ``.env`` (from ``env_path`` or the working directory) and reads the
    FUSED_* variables, falling back to defaults for any that are unset.
    """
    if env_path is not None:
        load_dotenv(env_path, override=True)
    else:
        load_dotenv()

    output_dir = Path(os.getenv("FUSED_OUTPUT_DIR") or DEFAULT_OUTPUT_DIR).expanduser()
    raw_db = os.getenv("FUSED_RESULTS_DB")
    results_db = Path(raw_db).expanduser() if raw_db else output_dir / "results.db"
    return EnvSettings(
        output_dir=output_dir,
        results_db=results_db,
        log_file=Path(os.getenv("FUSED_LOG_FILE") or DEFAULT_LOG_FILE),
        log_level=(os.getenv("FUSED_LOG_LEVEL") or DEFAULT_LOG_LEVEL).upper(),
    )


def ensure_db_exists(db_path: Path | str) -> Path:
    """
    Creates the results database file and its tables if they are missing.

    Args:
        db_path (Path | str): Where the SQLite file lives.

    Returns:
        Path: The database path.
    """
    db_path = Path(db_path)
    db_path.parent.mkdir(parents=True, exist_ok=True)
    create_tables(db_path)
    return db_path


def ensure_outputs(settings: EnvSettings) -> EnvSettings:
    """Creates the output directory and the results database if missing."""
    settings.output_dir.mkdir(parents=True, exist_ok=True)
    ensure_db_exists(settings.results_db)
    logging.debug(
        f"Outputs under {settings.output_dir}, results ledger at {settings.results_db}"
    )
    return settings


def ensure_env_and_outputs(env_path: Optional[Path] = None) -> EnvSettings:
    return ensure_outputs(read_env(env_path))
