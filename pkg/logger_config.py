"""
Logging configuration for the glucose forecasting system.
"""

import logging
import os
import sys

LOG_FILE = os.environ.get("GLUCOSE_FORECAST_LOG", "glucose_forecast.log")

# Configure logging with ASCII-safe formatting
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(levelname)s - %(message)s',
    handlers=[
        logging.StreamHandler(sys.stderr),  # stdout carries CSV output
        logging.FileHandler(LOG_FILE, encoding='utf-8', delay=True)
    ]
)

logger = logging.getLogger(__name__)


def get_logger(name: str = __name__) -> logging.Logger:
    """Get a configured logger instance"""
    return logging.getLogger(name)


def set_verbose(verbose: bool) -> None:
    """Switch the root logger between INFO and DEBUG."""
    logging.getLogger().setLevel(logging.DEBUG if verbose else logging.INFO)
