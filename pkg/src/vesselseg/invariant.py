"""Domain-invariant preprocessing: high-frequency extraction and enhancement.

Produces the single-channel input for the second encoder: subtract a local
average from the green channel, scale the residual by a variance-derived
enhancement factor, and min-max normalize.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .data import FundusSample, ValidationError, green_channel


@dataclass
class InvariantConfig:
    window_size: int = 15
    alpha_enh: float = 1.0
    epsilon: float = 1e-8
    normalize_output: bool = True

    def validate(self) -> "InvariantConfig":
        if self.window_size < 3 or self.window_size % 2 == 0:
            raise ValidationError(f"window_size must be odd and >= 3, got {self.window_size}")
        if self.epsilon <= 0:
            raise ValidationError("epsilon must be positive")
        if self.alpha_enh <= 0:
            raise ValidationError("alpha_enh must be positive")
        return self


def local_average(field: np.ndarray, cfg: InvariantConfig) -> np.ndarray:
    """Mean over a window_size x window_size neighborhood, reflect-padded."""
    cfg.validate()
    return uniform_filter(field.astype(np.float64), size=cfg.window_size, mode="reflect")


def high_frequency(field: np.ndarray, cfg: InvariantConfig) -> np.ndarray:
    """Residual of the field against its local average."""
    return field.astype(np.float64) - local_average(field, cfg)


def enhancement_factor(h: np.ndarray, cfg: InvariantConfig) -> float:
    """Global gain: alpha * mean(h^2) / (var(h) + epsilon)."""
    cfg.validate()
    h = h.astype(np.float64)
    var = float(np.mean((h - h.mean()) ** 2))
    mean_sq = float(np.mean(h * h))
    return cfg.alpha_enh * mean_sq / (var + cfg.epsilon)


def minmax_normalize(field: np.ndarray) -> np.ndarray:
    """Rescale to [0, 1]; a constant field maps to all zeros."""
    lo, hi = float(field.min()), float(field.max())
    if hi - lo == 0.0:
        return np.zeros_like(field)
    return (field - lo) / (hi - lo)


def make_invariant_input(sample: FundusSample, cfg: InvariantConfig) -> np.ndarray:
    """Green channel -> high-frequency residual -> gain -> optional [0,1] rescale."""
    cfg.validate()
    h = high_frequency(green_channel(sample), cfg)
    enhanced = enhancement_factor(h, cfg) * h
    if cfg.normalize_output:
        enhanced = minmax_normalize(enhanced)
    return enhanced.astype(np.float32)
