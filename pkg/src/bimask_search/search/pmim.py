import logging
import math
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

PROGRESSIVE = "progressive"
CONSTANT = "constant"
NONE = "none"


@dataclass
class MaskingSchedule:
    """
    Masking ratio γ over the search

    progressive grows linearly from gamma_start to gamma_end over
    total_steps, constant holds gamma_end and none disables masking.
    """
    gamma_start: float = 0.01
    gamma_end: float = 0.25
    total_steps: int = 1
    mode: str = PROGRESSIVE

    def __post_init__(self):
        if self.total_steps <= 0:
            raise ValueError(f"total_steps must be positive, got {self.total_steps}")
        if self.mode not in (PROGRESSIVE, CONSTANT, NONE):
            raise ValueError(f"unknown masking mode {self.mode!r}")

    @classmethod
    def from_config(cls, pmim_config, total_steps):
        return cls(pmim_config.gamma_start, pmim_config.gamma_end, total_steps, pmim_config.mode)


def gamma(schedule, t):
    """γ(t), clamped at gamma_end once t reaches total_steps"""
    if t < 0:
        raise ValueError(f"step must be non-negative, got {t}")
    if schedule.mode == NONE:
        return 0.0
    if schedule.mode == CONSTANT:
        return schedule.gamma_end
    frac = min(t / schedule.total_steps, 1.0)
    if frac >= 1.0:
        return schedule.gamma_end
    return schedule.gamma_start + (schedule.gamma_end - schedule.gamma_start) * frac


def masked_count(n_patches, ratio):
    """round-half-up of γ·n"""
    return int(math.floor(ratio * n_patches + 0.5))


def sample_mask(n_patches, ratio, rng):
    """
    Boolean patch map with exactly round(γ·n) positions set

    Args:
        n_patches: Number of patch positions
        ratio: Masking ratio γ in [0, 1]
        rng: numpy Generator owned by the caller

    Returns:
        np.ndarray: Boolean map of length n_patches
    """
    if n_patches < 1:
        raise ValueError(f"n_patches must be positive, got {n_patches}")
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"masking ratio {ratio} outside [0, 1]")
    mask = np.zeros(n_patches, dtype=bool)
    count = masked_count(n_patches, ratio)
    if count:
        mask[rng.choice(n_patches, size=count, replace=False)] = True
    return mask
