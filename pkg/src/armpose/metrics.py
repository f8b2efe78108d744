"""ADD, AUC of ADD, mean ADD and PCK."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, EmptySampleSet, NoValidKeypoints
from .geometry import RigidPose

DEFAULT_AUC_MAX = 0.1
DEFAULT_AUC_RESOLUTION = 1e-4
DEFAULT_PCK_THRESHOLDS = (2.5, 5.0, 10.0)


@dataclass(frozen=True)
class AddSample:
    value: float
    image_id: str = ""

    def __post_init__(self):
        if not self.value >= 0:
            raise ValueError(f"ADD must be non-negative, got {self.value}")


def add(pred_pose: RigidPose, pred_points_robot, gt_points_camera, image_id: str = "") -> AddSample:
    """Mean distance between predicted points mapped into the camera frame and ground truth."""
    pred = np.asarray(pred_points_robot, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt_points_camera, dtype=np.float64).reshape(-1, 3)
    if pred.shape != gt.shape:
        raise DimensionMismatch(f"{pred.shape[0]} predicted vs {gt.shape[0]} ground-truth points")
    dist = np.linalg.norm(pred_pose.apply(pred) - gt, axis=1)
    return AddSample(float(dist.mean()), image_id)


def _values(samples) -> np.ndarray:
    vals = np.array([s.value if isinstance(s, AddSample) else s for s in samples], dtype=np.float64)
    if vals.size == 0:
        raise EmptySampleSet("no ADD samples")
    return vals


def accuracy_curve(samples, max_threshold: float = DEFAULT_AUC_MAX, resolution: float = DEFAULT_AUC_RESOLUTION):
    """Thresholds and fraction of samples with ADD at or below each one."""
    vals = np.sort(_values(samples))
    steps = int(round(max_threshold / resolution))
    thresholds = np.linspace(0.0, max_threshold, steps + 1)
    acc = np.searchsorted(vals, thresholds, side="right") / vals.size
    return thresholds, acc


def auc_of_add(samples, max_threshold: float = DEFAULT_AUC_MAX, resolution: float = DEFAULT_AUC_RESOLUTION) -> float:
    """Trapezoidal area under the accuracy curve on ``[0, max_threshold]``, scaled to [0, 100].

    Failed samples may be passed as ``inf``; they count as never accurate.
    """
    if max_threshold <= 0 or resolution <= 0:
        raise ValueError("threshold range and resolution must be positive")
    thresholds, acc = accuracy_curve(samples, max_threshold, resolution)
    area = np.sum((acc[1:] + acc[:-1]) * np.diff(thresholds)) / 2.0
    return float(100.0 * area / max_threshold)


def mean_add(samples) -> float:
    vals = _values(samples)
    finite = vals[np.isfinite(vals)]
    return float(finite.mean()) if finite.size else float("inf")


def pck(pred_kp, gt_kp, thresholds: Sequence[float] = DEFAULT_PCK_THRESHOLDS, image_size=None) -> dict[float, float]:
    """Fraction of keypoints within each pixel threshold.

    ``gt_kp`` entries may be ``None`` (not annotated); with ``image_size``
    given as ``(H, W)``, ground truth outside the image is skipped too.
    """
    errors = keypoint_errors(pred_kp, gt_kp, image_size)
    if errors.size == 0:
        raise NoValidKeypoints("no in-image ground-truth keypoints")
    return {float(t): float(np.mean(errors <= t)) for t in thresholds}


def keypoint_errors(pred_kp, gt_kp, image_size=None) -> np.ndarray:
    if len(pred_kp) != len(gt_kp):
        raise DimensionMismatch(f"{len(pred_kp)} predicted vs {len(gt_kp)} ground-truth keypoints")
    errs = []
    for p, g in zip(pred_kp, gt_kp):
        if g is None:
            continue
        if image_size is not None:
            h, w = image_size
            if not (-0.5 <= g[0] < w - 0.5 and -0.5 <= g[1] < h - 0.5):
                continue
        errs.append(np.hypot(p[0] - g[0], p[1] - g[1]))
    return np.array(errs, dtype=np.float64)


@dataclass
class EvalReport:
    auc: float
    mean_add: float
    pck: dict[float, float]
    sample_count: int
    failure_count: int = 0
    max_threshold: float = DEFAULT_AUC_MAX
    resolution: float = DEFAULT_AUC_RESOLUTION
    failures: dict[str, int] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.auc <= 100.0:
            raise ValueError(f"AUC {self.auc} outside [0, 100]")
        if any(not 0.0 <= v <= 1.0 for v in self.pck.values()):
            raise ValueError("PCK values must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            "mean_add_m": self.mean_add,
            "pck": {str(k): v for k, v in self.pck.items()},
            "sample_count": self.sample_count,
            "failure_count": self.failure_count,
            "failures": dict(sorted(self.failures.items())),
            "auc_max_threshold_m": self.max_threshold,
            "auc_resolution_m": self.resolution,
            **({"extra": self.extra} if self.extra else {}),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            d["auc"],
            d["mean_add_m"],
            {float(k): v for k, v in d["pck"].items()},
            d["sample_count"],
            d.get("failure_count", 0),
            d.get("auc_max_threshold_m", DEFAULT_AUC_MAX),
            d.get("auc_resolution_m", DEFAULT_AUC_RESOLUTION),
            d.get("failures", {}),
            d.get("extra", {}),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, allow_nan=True) + "\n")

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def write_sample_csv(path, rows: Sequence[dict], thresholds: Sequence[float]) -> None:
    """Per-sample CSV: image_id, add_m, then one 0/1 column per PCK threshold."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "add_m", *[f"pck@{t:g}" for t in thresholds]])
        for row in rows:
            flags = row.get("pck_flags", [""] * len(thresholds))
            writer.writerow([row["image_id"], repr(float(row["add_m"])), *flags])
