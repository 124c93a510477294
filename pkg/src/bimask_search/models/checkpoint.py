import json
import logging
import os

import numpy as np

logger = logging.getLogger(__name__)

DTYPE = "<f8"


def save_checkpoint(model, path_prefix, extra=None):
    """
    Save model weights as a flat binary plus a JSON manifest

    Writes <path_prefix>.bin (little-endian doubles, tensors in sorted
    name order) and <path_prefix>.json (names, shapes, byte offsets,
    per-block widths).

    Args:
        model: ToyViT to save
        path_prefix: Output path without extension
        extra: Optional JSON-serializable metadata stored in the manifest

    Returns:
        bool: True if both files were written
    """
    tensors = []
    offset = 0
    try:
        with open(f"{path_prefix}.bin", "wb") as f:
            for name in sorted(model.params):
                data = np.ascontiguousarray(model.params[name].data, dtype=DTYPE)
                f.write(data.tobytes())
                tensors.append({"name": name, "shape": list(data.shape), "offset": offset, "nbytes": data.nbytes})
                offset += data.nbytes
        manifest = {
            "dtype": DTYPE,
            "tensors": tensors,
            "layers": model.layers,
            "model": model.config.model_dump(),
            "extra": extra or {},
        }
        with open(f"{path_prefix}.json", "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
        logger.info(f"Saved checkpoint with {len(tensors)} tensors to {path_prefix}.bin")
        return True
    except Exception as e:
        logger.error(f"Error saving checkpoint to {path_prefix}: {e}")
        return False


def load_checkpoint(path_prefix):
    """
    Read a checkpoint written by save_checkpoint

    Returns:
        tuple: (dict name -> np.ndarray, manifest dict)
    """
    with open(f"{path_prefix}.json", "r", encoding="utf-8") as f:
        manifest = json.load(f)
    raw = np.fromfile(f"{path_prefix}.bin", dtype=manifest.get("dtype", DTYPE))
    params = {}
    for entry in manifest["tensors"]:
        start = entry["offset"] // 8
        count = entry["nbytes"] // 8
        if start + count > raw.size:
            raise ValueError(f"checkpoint {path_prefix}.bin is truncated at tensor {entry['name']}")
        params[entry["name"]] = raw[start:start + count].reshape(entry["shape"]).astype(np.float64)
    logger.info(f"Loaded checkpoint {path_prefix} ({len(params)} tensors)")
    return params, manifest


def load_model(path_prefix, config=None):
    """Rebuild a ToyViT (full or pruned) from a checkpoint"""
    from bimask_search.models.vit import ToyViT
    from bimask_search.utils.config import ToyViTConfig

    params, manifest = load_checkpoint(path_prefix)
    config = config or ToyViTConfig.model_validate(manifest["model"])
    return ToyViT(config, params=params, layers=manifest["layers"])


def checkpoint_exists(path_prefix):
    return os.path.exists(f"{path_prefix}.bin") and os.path.exists(f"{path_prefix}.json")
