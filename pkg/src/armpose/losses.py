"""Training objectives with hand-derived gradients.

Each loss returns ``(value, gradient)``; batched variants average over the
leading batch axis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, EmptyMaskSet, ShapeMismatch
from .geometry import CameraIntrinsics, RigidPose, project, projection_jacobian, solve_pnp
from .kinematics import KinematicChain, forward_kinematics_jacobian

FOCAL_CLAMP = 1e-6


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 2.0
    beta: float = 4.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("focal exponents must be non-negative")


@dataclass(frozen=True)
class JointNormalizer:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        std = np.asarray(self.std, dtype=np.float64).reshape(-1)
        if mean.shape != std.shape:
            raise DimensionMismatch("normalizer mean and std differ in length")
        if np.any(std <= 1e-8):
            raise ValueError("normalizer std components must exceed 1e-8")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @classmethod
    def fit(cls, angles) -> "JointNormalizer":
        angles = np.asarray(angles, dtype=np.float64)
        std = angles.std(axis=0)
        return cls(angles.mean(axis=0), np.where(std > 1e-8, std, 1.0))

    def normalize(self, angles) -> np.ndarray:
        return (np.asarray(angles, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, values) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "units": "rad"}

    @classmethod
    def from_dict(cls, d: dict) -> "JointNormalizer":
        return cls(np.array(d["mean"]), np.array(d["std"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "JointNormalizer":
        return cls.from_dict(json.loads(Path(path).read_text()))


def pretrain_l1(predicted, target, masked) -> tuple[float, np.ndarray]:
    """Mean over masked patches of the L1 distance between embeddings."""
    predicted = np.asarray(predicted, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if predicted.shape != target.shape:
        raise ShapeMismatch(f"{predicted.shape} vs {target.shape}")
    masked = np.asarray(sorted(masked), dtype=int)
    if masked.size == 0:
        raise EmptyMaskSet("no masked patches to score")
    diff = predicted[masked] - target[masked]
    value = float(np.abs(diff).sum() / masked.size)
    grad = np.zeros_like(predicted)
    grad[masked] = np.sign(diff) / masked.size
    return value, grad


def pretrain_l1_batch(predicted: np.ndarray, target: np.ndarray, masked: np.ndarray) -> tuple[float, np.ndarray]:
    """Batched form: ``masked`` is a boolean ``(B, M)`` array."""
    if predicted.shape != target.shape:
        raise ShapeMismatch(f"{predicted.shape} vs {target.shape}")
    counts = masked.sum(axis=1)
    if np.any(counts == 0):
        raise EmptyMaskSet("every sample needs at least one masked patch")
    b = predicted.shape[0]
    diff = (predicted - target) * masked[..., None]
    per_sample = np.abs(diff).sum(axis=(1, 2)) / counts
    grad = np.sign(diff) / (counts[:, None, None] * b)
    return float(per_sample.mean()), grad.astype(predicted.dtype)


def _focal_terms(pred, gt, params: FocalParams):
    p = np.clip(pred, FOCAL_CLAMP, 1.0 - FOCAL_CLAMP)
    live = (pred > FOCAL_CLAMP) & (pred < 1.0 - FOCAL_CLAMP)
    pos = gt == 1.0
    a, b = params.alpha, params.beta
    log_p = np.log(p)
    log_q = np.log1p(-p)
    neg_w = (1.0 - gt) ** b
    term = np.where(pos, (1.0 - p) ** a * log_p, neg_w * p**a * log_q)
    d_pos = -a * (1.0 - p) ** np.maximum(a - 1.0, 0.0) * log_p + (1.0 - p) ** a / p
    if a == 0:
        d_pos = 1.0 / p
    d_neg = neg_w * (a * p ** np.maximum(a - 1.0, 0.0) * log_q - p**a / (1.0 - p))
    if a == 0:
        d_neg = neg_w * (-1.0 / (1.0 - p))
    dterm = np.where(pos, d_pos, d_neg) * live
    return term, dterm, pos


def focal_loss(pred, gt, params: FocalParams = FocalParams()) -> tuple[float, np.ndarray]:
    """Penalty-reduced pixel focal loss over one ``(H, W, k)`` stack.

    Normalized by the number of pixels with ground truth exactly 1, or by 1
    when there are none.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"{pred.shape} vs {gt.shape}")
    term, dterm, pos = _focal_terms(pred, gt, params)
    s = max(int(pos.sum()), 1)
    return float(-term.sum() / s), -dterm / s


def focal_loss_batch(pred: np.ndarray, gt: np.ndarray, params: FocalParams = FocalParams()) -> tuple[float, np.ndarray]:
    """Per-sample focal loss on ``(B, H, W, k)`` stacks, averaged over the batch."""
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"{pred.shape} vs {gt.shape}")
    term, dterm, pos = _focal_terms(pred, gt, params)
    s = np.maximum(pos.sum(axis=(1, 2, 3)), 1).astype(np.float64)
    b = pred.shape[0]
    per_sample = -term.sum(axis=(1, 2, 3)) / s
    grad = -dterm / (s[:, None, None, None] * b)
    return float(per_sample.mean()), grad


def joint_mse(pred, gt, normalizer: JointNormalizer) -> tuple[float, np.ndarray]:
    """MSE between normalized-space predictions and normalized ground truth."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != normalizer.mean.shape[0]:
        raise DimensionMismatch(f"pred {pred.shape}, gt {gt.shape}, normalizer {normalizer.mean.shape}")
    resid = pred - normalizer.normalize(gt)
    n = pred.shape[-1]
    if pred.ndim == 1:
        return float(resid @ resid / n), 2.0 * resid / n
    b = pred.shape[0]
    return float(np.sum(resid**2) / (n * b)), 2.0 * resid / (n * b)


CURRICULUM = ((0, 1e-4), (5, 1e-2), (10, 1e-1), (40, 1.0))


def curriculum_weight(epoch: int) -> float:
    """Keypoint-loss weight at a given epoch (step schedule)."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    weight = CURRICULUM[0][1]
    for start, value in CURRICULUM:
        if epoch >= start:
            weight = value
    return weight


def ssl_reprojection(
    pred_kp,
    joints,
    chain: KinematicChain,
    intrinsics: CameraIntrinsics,
    keypoint_ids=None,
    pose: RigidPose | None = None,
) -> tuple[float, np.ndarray, RigidPose]:
    """Self-supervised reprojection loss and its gradient w.r.t. joint angles.

    The pose is solved by PnP from the predicted keypoints and forward
    kinematics, then held constant for the backward pass. Pass ``pose`` to
    skip the solve.
    """
    pred_kp = np.asarray(pred_kp, dtype=np.float64).reshape(-1, 2)
    pts3d, jac_fk = forward_kinematics_jacobian(chain, joints)
    ids = np.arange(chain.k) if keypoint_ids is None else np.asarray(keypoint_ids, dtype=int)
    if pred_kp.shape[0] != len(ids):
        raise DimensionMismatch(f"{pred_kp.shape[0]} keypoints for {len(ids)} ids")
    pts3d, jac_fk = pts3d[ids], jac_fk[ids]
    if pose is None:
        pose = solve_pnp(pts3d, pred_kp, intrinsics)
    pc = pose.apply(pts3d)
    proj = project(pose, intrinsics, pts3d)
    resid = pred_kp - proj
    k = len(ids)
    value = float(np.sum(resid**2) / k)
    d_proj = -2.0 * resid / k
    jp = projection_jacobian(pc, intrinsics)  # k,2,3
    d_pc = np.einsum("ki,kic->kc", d_proj, jp)
    d_robot = d_pc @ pose.rotation
    grad = np.einsum("kc,kcn->n", d_robot, jac_fk)
    return value, grad, pose
