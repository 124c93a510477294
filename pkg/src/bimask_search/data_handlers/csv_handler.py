import logging
import os

import numpy as np
import pandas as pd

from bimask_search.training.search_log import SearchLog

logger = logging.getLogger(__name__)

TRAJECTORY_COLUMNS = ["epoch", "site", "unit_rank", "S", "V", "m"]
KEPT_COLUMNS = ["site", "kind", "layer", "kept_units", "full_units", "kept_channels", "full_channels"]
CURVE_COLUMNS = ["t", "epoch", "loss_task", "loss_rec", "L_m", "entropy", "psi", "budget", "l1", "g", "decided",
                 "lambda", "gamma"]

TRAJECTORY_FILE = "trajectories.csv"
KEPT_FILE = "kept_dims.csv"
CURVES_FILE = "curves.csv"


def trajectory_frame(log):
    """
    Rank-ordered S/V/m per site at every epoch end

    Every (epoch, site) block is padded to the largest unit count seen in
    the log, so the frame has epochs × sites × max-units rows.
    """
    epochs = log.of_type("epoch")
    if not epochs:
        return pd.DataFrame(columns=TRAJECTORY_COLUMNS)
    max_units = max(len(scores["S"]) for record in epochs for scores in record["submodules"].values())
    rows = []
    for record in epochs:
        for site, scores in record["submodules"].items():
            for rank in range(max_units):
                live = rank < len(scores["S"])
                rows.append({
                    "epoch": record["epoch"],
                    "site": site,
                    "unit_rank": rank + 1,
                    "S": scores["S"][rank] if live else np.nan,
                    "V": scores["V"][rank] if live else np.nan,
                    "m": scores["m"][rank] if live else np.nan,
                })
    return pd.DataFrame(rows, columns=TRAJECTORY_COLUMNS)


def kept_dims_frame(log):
    """Layerwise kept dimensions from the closing architecture record"""
    records = log.of_type("architecture")
    if not records:
        return pd.DataFrame(columns=KEPT_COLUMNS)
    rows = []
    for entry in records[-1]["submodules"]:
        units = len(entry["kept_units"])
        full_units = entry["full_width"] // entry["unit_size"]
        rows.append({
            "site": entry["site"],
            "kind": entry["kind"],
            "layer": entry["layer"],
            "kept_units": units,
            "full_units": full_units,
            "kept_channels": units * entry["unit_size"],
            "full_channels": entry["full_width"],
        })
    return pd.DataFrame(rows, columns=KEPT_COLUMNS)


def curves_frame(log):
    """Per-iteration losses, g, decided-submodule count, λ and γ"""
    rows = [{col: record.get(col, np.nan) for col in CURVE_COLUMNS} for record in log.of_type("iter")]
    return pd.DataFrame(rows, columns=CURVE_COLUMNS)


def save_frame(df, csv_path, columns=None):
    """
    Write one plot or report table

    The header row is written even when the log produced no rows, and the
    columns follow the given order so downstream plotting scripts can rely
    on it.

    Args:
        df: Frame built by one of the *_frame helpers
        csv_path: Output CSV path
        columns: Column order to enforce (defaults to the frame's own)

    Returns:
        bool: True if the table was written
    """
    table = df if columns is None else df.reindex(columns=columns)
    try:
        table.to_csv(csv_path, index=False)
    except OSError as e:
        logger.error(f"Could not write {csv_path}: {e}")
        return False
    sites = f" over {table['site'].nunique()} sites" if "site" in table.columns and len(table) else ""
    logger.info(f"{os.path.basename(csv_path)}: {len(table)} rows{sites}")
    return True


def load_frame(csv_path, columns):
    """Read a table written by save_frame; a missing file reads as an empty table with the given columns"""
    if not os.path.exists(csv_path):
        logger.info(f"{csv_path} does not exist yet; starting an empty table")
        return pd.DataFrame(columns=columns)
    return pd.read_csv(csv_path).reindex(columns=columns)


def write_plot_data(log_path, out_dir):
    """
    Emit the trajectory, kept-dimension and curve CSVs of a search log

    Returns:
        tuple: (success, truncated flag)
    """
    log, truncated = SearchLog.load(log_path)
    if truncated:
        logger.warning(f"{log_path} is truncated; plot data covers the readable records only")
    os.makedirs(out_dir, exist_ok=True)
    ok = save_frame(trajectory_frame(log), os.path.join(out_dir, TRAJECTORY_FILE), TRAJECTORY_COLUMNS)
    ok = save_frame(kept_dims_frame(log), os.path.join(out_dir, KEPT_FILE), KEPT_COLUMNS) and ok
    ok = save_frame(curves_frame(log), os.path.join(out_dir, CURVES_FILE), CURVE_COLUMNS) and ok
    return ok, truncated
