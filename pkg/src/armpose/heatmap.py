"""Gaussian keypoint heatmaps, peak extraction and confidence filtering.

Pixel positions are ``(x, y)`` = ``(column, row)`` with integer coordinates
at pixel centers. Heatmap stacks are ``(H, W, k)`` arrays.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError

DEFAULT_EPSILON0 = 0.5
DEFAULT_STEP = 0.025
DEFAULT_MIN_COUNT = 4


@dataclass(frozen=True)
class Keypoint2D:
    position: tuple[float, float]
    confidence: float
    index: int


def gaussian_heatmap(centers: Sequence, height: int, width: int, sigma: float = 2.0) -> np.ndarray:
    """Unnormalized Gaussian per keypoint; ``None`` centers give empty channels."""
    if sigma <= 0:
        raise DataError("sigma must be positive")
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    out = np.zeros((height, width, len(centers)))
    for i, c in enumerate(centers):
        if c is None:
            continue
        cx, cy = float(c[0]), float(c[1])
        out[:, :, i] = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma**2))
    return out


def extract_peaks(heatmaps: np.ndarray) -> list[Keypoint2D]:
    """Argmax pixel and value per channel; ties go to the first pixel in row-major order."""
    heatmaps = np.asarray(heatmaps)
    if heatmaps.ndim != 3 or heatmaps.shape[0] * heatmaps.shape[1] == 0:
        raise DataError(f"expected a non-empty (H, W, k) stack, got shape {heatmaps.shape}")
    h, w, k = heatmaps.shape
    flat = heatmaps.reshape(h * w, k)
    idx = np.argmax(flat, axis=0)
    return [
        Keypoint2D((float(i % w), float(i // w)), float(flat[i, c]), c)
        for c, i in enumerate(idx)
    ]


def peak_arrays(heatmaps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched peaks: ``(B, H, W, k)`` -> positions ``(B, k, 2)``, confidences ``(B, k)``."""
    b, h, w, k = heatmaps.shape
    flat = heatmaps.reshape(b, h * w, k)
    idx = np.argmax(flat, axis=1)
    conf = np.take_along_axis(flat, idx[:, None, :], axis=1)[:, 0, :]
    pos = np.stack([idx % w, idx // w], axis=-1).astype(np.float64)
    return pos, conf.astype(np.float64)


def relaxed_threshold(
    confidences: Sequence[float],
    epsilon0: float = DEFAULT_EPSILON0,
    step: float = DEFAULT_STEP,
    min_count: int = DEFAULT_MIN_COUNT,
) -> float | None:
    """Final threshold after relaxation, or ``None`` if it underflows zero."""
    if not 0 < epsilon0 <= 1:
        raise DataError("epsilon0 must be in (0, 1]")
    if step <= 0 or min_count < 1:
        raise DataError("step must be positive and min_count at least 1")
    conf = np.asarray(confidences, dtype=np.float64)
    j = 0
    while True:
        # rounding keeps the thresholds on the exact decimal grid
        eps = round(epsilon0 - j * step, 12)
        if eps < 0:
            return None
        if np.count_nonzero(conf > eps) >= min_count:
            return eps
        j += 1


def filter_keypoints(
    keypoints: Sequence[Keypoint2D],
    epsilon0: float = DEFAULT_EPSILON0,
    step: float = DEFAULT_STEP,
    min_count: int = DEFAULT_MIN_COUNT,
) -> list[Keypoint2D]:
    """Keep keypoints above a confidence threshold relaxed until ``min_count`` survive.

    If the threshold drops below zero first, every keypoint is returned and the
    pose solver decides whether that is enough.
    """
    eps = relaxed_threshold([kp.confidence for kp in keypoints], epsilon0, step, min_count)
    if eps is None:
        return list(keypoints)
    return [kp for kp in keypoints if kp.confidence > eps]


def save_heatmaps(path, heatmaps: np.ndarray) -> None:
    """Little-endian binary: uint32 H, W, k then float32 values in (H, W, k) order."""
    heatmaps = np.asarray(heatmaps)
    if heatmaps.ndim != 3:
        raise DataError("heatmap stack must be (H, W, k)")
    h, w, k = heatmaps.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<III", h, w, k))
        fh.write(np.ascontiguousarray(heatmaps, dtype="<f4").tobytes())


def load_heatmaps(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise DataError(f"{path}: truncated heatmap header")
    h, w, k = struct.unpack("<III", raw[:12])
    expected = 12 + 4 * h * w * k
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes, found {len(raw)}")
    return np.frombuffer(raw[12:], dtype="<f4").reshape(h, w, k).astype(np.float32)
