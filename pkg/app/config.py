"""Configuration management for the application."""
import os
from dotenv import load_dotenv

load_dotenv()

FUSION_RULES = ("sum", "product")
LOG_LEVELS = ("CRITICAL", "ERROR", "WARNING", "INFO", "DEBUG", "NOTSET")


class Config:
    """Application configuration."""

    # Logging
    LOG_LEVEL = os.getenv("CONFNET_LOG_LEVEL", "WARNING").upper()

    # Experiment defaults
    SEED = int(os.getenv("CONFNET_SEED", "42"))
    THRESHOLD = float(os.getenv("CONFNET_THRESHOLD", "0.05"))
    LAMBDA = float(os.getenv("CONFNET_LAMBDA", "1.0"))
    DIAGONAL_FLOOR = float(os.getenv("CONFNET_DIAGONAL_FLOOR", "1.0"))
    FUSION_RULE = os.getenv("CONFNET_FUSION_RULE", "product").lower()
    OUTPUT_DIR = os.getenv("CONFNET_OUTPUT_DIR", "runs")

    # Numerics
    LOG_EPSILON = 1e-12
    FUSION_FLOOR = 1e-12
    FLOAT_FORMAT = "%.17g"  # 17 significant digits survive a decimal round trip

    # Artifacts served by the API
    MODEL_PATH = os.getenv("CONFNET_MODEL_PATH", "")
    PARTITION_PATH = os.getenv("CONFNET_PARTITION_PATH", "")

    # API settings
    API_HOST = os.getenv("API_HOST", "0.0.0.0")
    API_PORT = int(os.getenv("PORT", "8000"))

    @classmethod
    def validate(cls):
        """Validate that configured defaults are within their ranges."""
        if not 0.0 < cls.THRESHOLD < 1.0:
            raise ValueError("CONFNET_THRESHOLD must lie in (0, 1)")
        if cls.LAMBDA < 0.0:
            raise ValueError("CONFNET_LAMBDA must be non-negative")
        if not 0.0 < cls.DIAGONAL_FLOOR <= 1.0:
            raise ValueError("CONFNET_DIAGONAL_FLOOR must lie in (0, 1]")
        if cls.FUSION_RULE not in FUSION_RULES:
            raise ValueError(f"CONFNET_FUSION_RULE must be one of {FUSION_RULES}")
        if cls.LOG_LEVEL not in LOG_LEVELS:
            raise ValueError(f"CONFNET_LOG_LEVEL must be one of {LOG_LEVELS}")
        return True
