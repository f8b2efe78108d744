"""Momentum target for embedding-predictive pre-training."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DimensionMismatch

MOMENTUM_START = 0.996
MOMENTUM_END = 1.0


def momentum_schedule(step: int, total_steps: int, start: float = MOMENTUM_START, end: float = MOMENTUM_END) -> float:
    """Linear ramp from ``start`` at step 0 to ``end`` at ``total_steps``."""
    if total_steps <= 0:
        return end
    frac = min(max(step, 0), total_steps) / total_steps
    return float(start + (end - start) * frac)


@dataclass
class EmaState:
    target_weights: np.ndarray
    momentum: float = MOMENTUM_START

    def __post_init__(self):
        self.target_weights = np.array(self.target_weights, dtype=np.float64).reshape(-1)
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError(f"momentum {self.momentum} outside [0, 1]")


def ema_update(state: EmaState, encoder_weights, momentum: float) -> EmaState:
    """``target <- m * target + (1 - m) * encoder``, returned as a new state."""
    enc = np.asarray(encoder_weights, dtype=np.float64).reshape(-1)
    if enc.size != state.target_weights.size:
        raise DimensionMismatch(f"encoder has {enc.size} parameters, target has {state.target_weights.size}")
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum {momentum} outside [0, 1]")
    return EmaState(momentum * state.target_weights + (1.0 - momentum) * enc, momentum)
