import logging
import os
from pathlib import Path


class Config:
    # Reproducibility
    DEFAULT_SEED: int = 42

    # Parallel sweep / gradient workers
    MAX_WORKERS: int = 4

    # Output Configuration
    OUTPUT_DIR: Path = Path("runs")
    DEFAULT_FORMATS: tuple = ("csv", "md")

    # Cache Configuration
    CACHE_DB_FILE: str = "simulated_rows.db"

    # Logging
    LOG_ENV_VAR: str = "PARSIM_LOG"
    DEFAULT_LOG_LEVEL: str = "WARNING"

    # Trainer defaults
    LOSS_EVERY: int = 100
    EVAL_K: int = 10
    EVAL_NEGATIVES: int = 99
    ASYNC_DELAY_PERIOD: int = 4  # worker p pulls (p mod 4) updates late

    # Calibration
    CALIBRATION_TOLERANCE: float = 0.15
    CALIBRATION_SWEEPS: int = 20


def configure_logging(level: str | None = None) -> int:
    """
    Install the root log handler

    Args:
        level: Level name; read from PARSIM_LOG when omitted

    Returns:
        The numeric level that was applied
    """
    if level is None:
        level = os.environ.get(Config.LOG_ENV_VAR, Config.DEFAULT_LOG_LEVEL)
    numeric = logging.getLevelName(level.strip().upper())
    if not isinstance(numeric, int):
        numeric = logging.getLevelName(Config.DEFAULT_LOG_LEVEL)
    logging.basicConfig(
        level=numeric,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )
    return numeric
