"""
Utility functions for the LucidDream engine
"""

import json
import logging
import os
from datetime import datetime
from typing import Any, Dict, Optional

from dotenv import load_dotenv

from errors import FormatError, MissingInputError

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def setup_logging(log_level: Optional[str] = None, log_dir: Optional[str] = None) -> None:
    """Set up logging configuration from arguments or LUCID_LOG_LEVEL / LUCID_LOG_DIR"""
    load_dotenv()
    log_level = (log_level or os.getenv("LUCID_LOG_LEVEL") or "INFO").upper()
    if log_dir is None:
        log_dir = os.getenv("LUCID_LOG_DIR", "logs")

    handlers = [logging.StreamHandler()]
    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        handlers.append(
            logging.FileHandler(os.path.join(log_dir, f"lucid_dream_{datetime.now().strftime('%Y%m%d')}.log"))
        )

    logging.basicConfig(
        level=getattr(logging, log_level, logging.INFO),
        format=LOG_FORMAT,
        handlers=handlers,
    )


def load_json_file(filepath: str, what: str = "JSON file") -> Dict[str, Any]:
    """Load JSON data from file, raising MissingInputError / FormatError"""
    try:
        with open(filepath, "r") as f:
            return json.load(f)
    except FileNotFoundError:
        logging.warning(f"File not found: {filepath}")
        raise MissingInputError(f"{what} not found: {filepath}", [str(filepath)])
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        logging.error(f"Error decoding {what} {filepath}: {e}")
        raise FormatError(f"Error decoding {what} {filepath}: {e}") from e


def save_json_file(data: Dict[str, Any], filepath: str) -> bool:
    """Save data to JSON file with sorted keys so reruns produce identical bytes"""
    try:
        directory = os.path.dirname(filepath)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(filepath, "w") as f:
            json.dump(data, f, indent=2, sort_keys=True)
            f.write("\n")
        return True
    except (OSError, TypeError) as e:
        logging.error(f"Error saving JSON to {filepath}: {e}")
        return False


def format_seconds(seconds: float) -> str:
    """Format a duration for log lines"""
    if seconds < 60:
        return f"{seconds:.1f}s"
    minutes, rest = divmod(seconds, 60)
    return f"{int(minutes)}m {rest:.0f}s"
