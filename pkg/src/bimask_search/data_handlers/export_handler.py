import json
import logging
import os

logger = logging.getLogger(__name__)

ARCHITECTURE_FILE = "architecture.json"
METRICS_FILE = "metrics.json"
COST_FILE = "cost_report.json"


def save_json(payload, path):
    """
    Write a JSON document with sorted keys

    Args:
        payload: JSON-serializable object
        path: Output file

    Returns:
        bool: True if the file was written
    """
    try:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
        logger.info(f"Wrote {path}")
        return True
    except Exception as e:
        logger.error(f"Error writing {path}: {e}", exc_info=True)
        return False


def load_json(path, default=None):
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        logger.warning(f"{path} not found")
        return default
    except Exception as e:
        logger.error(f"Error reading {path}: {e}")
        return default


def export_run(out_dir, architecture=None, metrics=None, cost=None):
    """
    Write the architecture, metrics and cost documents of a run

    Returns:
        bool: True if every given document was written
    """
    os.makedirs(out_dir, exist_ok=True)
    ok = True
    for payload, name in ((architecture, ARCHITECTURE_FILE), (metrics, METRICS_FILE), (cost, COST_FILE)):
        if payload is not None:
            ok = save_json(payload, os.path.join(out_dir, name)) and ok
    return ok
