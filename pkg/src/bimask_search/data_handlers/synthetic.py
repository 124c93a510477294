import json
import logging
import os
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

BLOB_AMPLITUDE = 3.0
BLOB_WIDTH = 0.15
STRIPE_AMPLITUDE = 1.5
STRIPE_PERIOD = 0.25


@dataclass
class SyntheticDataset:
    train_images: np.ndarray
    train_labels: np.ndarray
    eval_images: np.ndarray
    eval_labels: np.ndarray

    @property
    def n_train(self):
        return len(self.train_labels)

    @property
    def n_eval(self):
        return len(self.eval_labels)


def balanced_labels(n, classes, rng):
    """Labels with every class count within one of n/classes, shuffled"""
    labels = np.arange(n) % classes
    return rng.permutation(labels)


def _grid(size):
    coords = (np.arange(size) + 0.5) / size
    return np.meshgrid(coords, coords, indexing="ij")


def _blob_templates(classes, size):
    """One Gaussian bump per class, centers spread on a circle"""
    yy, xx = _grid(size)
    templates = []
    for k in range(classes):
        angle = 2.0 * np.pi * k / classes
        cy, cx = 0.5 + 0.28 * np.sin(angle), 0.5 + 0.28 * np.cos(angle)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * BLOB_WIDTH ** 2))
        templates.append(BLOB_AMPLITUDE * bump)
    return np.stack(templates)


def _stripe_templates(classes, size):
    """Sinusoidal stripes, one orientation per class"""
    yy, xx = _grid(size)
    templates = []
    for k in range(classes):
        angle = np.pi * k / classes
        phase = (np.cos(angle) * xx + np.sin(angle) * yy) / STRIPE_PERIOD
        templates.append(STRIPE_AMPLITUDE * np.sin(2.0 * np.pi * phase))
    return np.stack(templates)


def _render(labels, spec, templates, rng):
    n = len(labels)
    images = np.repeat(templates[labels][:, None, :, :], spec.in_chans, axis=1)
    noise = rng.normal(0.0, spec.noise_sigma, size=(n, spec.in_chans, spec.image_size, spec.image_size))
    return images + noise


def generate_dataset(spec):
    """
    Generate the train and eval splits of a synthetic classification task

    Args:
        spec: SyntheticDatasetSpec

    Returns:
        SyntheticDataset: Images [n, channels, H, W] and integer labels
    """
    rng = np.random.default_rng(spec.seed)
    if spec.generator == "gaussian-blobs":
        templates = _blob_templates(spec.classes, spec.image_size)
    else:
        templates = _stripe_templates(spec.classes, spec.image_size)

    train_labels = balanced_labels(spec.n_train, spec.classes, rng)
    train_images = _render(train_labels, spec, templates, rng)
    eval_labels = balanced_labels(spec.n_eval, spec.classes, rng)
    eval_images = _render(eval_labels, spec, templates, rng)
    logger.info(f"Generated {spec.generator} dataset: {spec.n_train} train / {spec.n_eval} eval, "
                f"{spec.classes} classes")
    return SyntheticDataset(train_images, train_labels, eval_images, eval_labels)


def save_dataset(dataset, spec, out_dir):
    """
    Write both splits as flat little-endian binaries plus a JSON manifest

    Returns:
        bool: True if every file was written
    """
    try:
        os.makedirs(out_dir, exist_ok=True)
        files = {}
        for split in ("train", "eval"):
            images = getattr(dataset, f"{split}_images")
            labels = getattr(dataset, f"{split}_labels")
            image_file = f"{split}_images.bin"
            label_file = f"{split}_labels.bin"
            images.astype("<f8").tofile(os.path.join(out_dir, image_file))
            labels.astype("<i8").tofile(os.path.join(out_dir, label_file))
            files[split] = {"images": image_file, "labels": label_file, "shape": list(images.shape)}
        manifest = {"spec": spec.model_dump(), "files": files, "image_dtype": "<f8", "label_dtype": "<i8"}
        with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
        logger.info(f"Saved dataset to {out_dir}")
        return True
    except Exception as e:
        logger.error(f"Error saving dataset to {out_dir}: {e}")
        return False


def load_dataset(path):
    """Read a dataset written by save_dataset"""
    with open(os.path.join(path, "manifest.json"), "r", encoding="utf-8") as f:
        manifest = json.load(f)
    arrays = {}
    for split, info in manifest["files"].items():
        images = np.fromfile(os.path.join(path, info["images"]), dtype=manifest["image_dtype"])
        labels = np.fromfile(os.path.join(path, info["labels"]), dtype=manifest["label_dtype"])
        arrays[f"{split}_images"] = images.reshape(info["shape"]).astype(np.float64)
        arrays[f"{split}_labels"] = labels.astype(np.int64)
    logger.info(f"Loaded dataset from {path}")
    return SyntheticDataset(**arrays)


def dataset_from_spec(spec):
    """Load spec.path when it is set, otherwise generate in memory"""
    if spec.path:
        return load_dataset(spec.path)
    return generate_dataset(spec)
