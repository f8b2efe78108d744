"""Serial-chain forward kinematics for revolute arms.

Frame convention: ``F_0`` is the robot base and

    F_i = F_{i-1} * Rot(axis_i, theta_i) * Fixed_i

so joint ``i`` rotates about ``axis_i`` expressed in ``F_{i-1}``, located at
the origin of ``F_{i-1}``. Keypoint ``j`` is the origin of frame
``keypoint_frames[j]`` (by default frames ``0..n``), which puts keypoint
``i - 1`` on joint ``i`` and the last keypoint on the end effector.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionMismatch
from .geometry import RigidPose, axis_angle_to_matrix, matrix_to_axis_angle, rotation_about


@dataclass(frozen=True)
class Link:
    fixed: RigidPose
    axis: np.ndarray
    joint_type: str = "revolute"

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(axis)
        if norm == 0:
            raise ConfigError("joint axis must be non-zero")
        axis = axis / norm
        axis.setflags(write=False)
        object.__setattr__(self, "axis", axis)
        if self.joint_type != "revolute":
            raise ConfigError(f"unsupported joint type {self.joint_type!r}")


@dataclass(frozen=True)
class KinematicChain:
    links: tuple[Link, ...]
    name: str = "chain"
    keypoint_frames: tuple[int, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "links", tuple(self.links))
        frames = tuple(self.keypoint_frames) or tuple(range(len(self.links) + 1))
        if len(frames) != len(self.links) + 1:
            raise ConfigError(f"expected {len(self.links) + 1} keypoint frames, got {len(frames)}")
        if any(f < 0 or f > len(self.links) for f in frames):
            raise ConfigError(f"keypoint frame index out of range: {frames}")
        object.__setattr__(self, "keypoint_frames", frames)

    @property
    def n(self) -> int:
        return len(self.links)

    @property
    def k(self) -> int:
        return len(self.keypoint_frames)

    @property
    def total_length(self) -> float:
        return float(sum(np.linalg.norm(link.fixed.translation) for link in self.links))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "keypoint_frames": list(self.keypoint_frames),
            "links": [
                {
                    "translation": link.fixed.translation.tolist(),
                    "rotation_axis_angle": matrix_to_axis_angle(link.fixed.rotation).tolist(),
                    "joint_axis": link.axis.tolist(),
                    "joint_type": link.joint_type,
                }
                for link in self.links
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KinematicChain":
        try:
            links = tuple(
                Link(
                    RigidPose.from_axis_angle(
                        entry.get("rotation_axis_angle", [0.0, 0.0, 0.0]), entry["translation"]
                    ),
                    entry["joint_axis"],
                    entry.get("joint_type", "revolute"),
                )
                for entry in d["links"]
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed chain description: {exc}") from exc
        return cls(links, d.get("name", "chain"), tuple(d.get("keypoint_frames", ())))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "KinematicChain":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read chain file {path}: {exc}") from exc
        return cls.from_dict(data)


def _check_joints(chain: KinematicChain, joints) -> np.ndarray:
    q = np.asarray(joints, dtype=np.float64).reshape(-1)
    if q.shape[0] != chain.n:
        raise DimensionMismatch(f"chain has {chain.n} joints, got {q.shape[0]} angles")
    if not np.all(np.isfinite(q)):
        raise DimensionMismatch("joint angles must be finite")
    return q


def frame_transforms(chain: KinematicChain, joints) -> list[np.ndarray]:
    """4x4 transforms of frames ``0..n`` in the robot base frame."""
    q = _check_joints(chain, joints)
    frames = [np.eye(4)]
    for link, theta in zip(chain.links, q):
        step = np.eye(4)
        step[:3, :3] = rotation_about(link.axis, theta)
        frames.append(frames[-1] @ step @ link.fixed.as_matrix())
    return frames


def forward_kinematics(chain: KinematicChain, joints) -> np.ndarray:
    """Keypoint positions in the robot frame, shape ``(k, 3)``."""
    frames = frame_transforms(chain, joints)
    return np.array([frames[f][:3, 3] for f in chain.keypoint_frames])


def forward_kinematics_jacobian(chain: KinematicChain, joints) -> tuple[np.ndarray, np.ndarray]:
    """Keypoints and their joint Jacobian, shapes ``(k, 3)`` and ``(k, 3, n)``."""
    frames = frame_transforms(chain, joints)
    points = np.array([frames[f][:3, 3] for f in chain.keypoint_frames])
    jac = np.zeros((chain.k, 3, chain.n))
    for j, link in enumerate(chain.links):
        parent = frames[j]
        axis = parent[:3, :3] @ link.axis
        origin = parent[:3, 3]
        for i, f in enumerate(chain.keypoint_frames):
            if f > j:
                jac[i, :, j] = np.cross(axis, points[i] - origin)
    return points, jac


def last_joint_invariance_check(chain: KinematicChain, joints, other_angle: float = 1.3, tol: float = 1e-9) -> bool:
    """True iff the keypoints do not move when only the last joint changes."""
    q = _check_joints(chain, joints).copy()
    base = forward_kinematics(chain, q)
    q[-1] = other_angle
    moved = forward_kinematics(chain, q)
    return bool(np.max(np.abs(moved - base)) <= tol)


def complete_joints(chain: KinematicChain, predicted, last_angle: float = 0.0) -> np.ndarray:
    """Append the unpredicted last joint (fixed angle) to ``n - 1`` predictions."""
    predicted = np.asarray(predicted, dtype=np.float64).reshape(-1)
    if predicted.shape[0] != chain.n - 1:
        raise DimensionMismatch(f"expected {chain.n - 1} predicted angles, got {predicted.shape[0]}")
    return np.append(predicted, last_angle)


# --------------------------------------------------------------------------
# Built-in chains
# --------------------------------------------------------------------------


def planar_arm(n_joints: int = 3, lengths=None, name: str | None = None) -> KinematicChain:
    """Arm whose keypoints all lie in the robot xy-plane.

    The first ``n - 1`` joints rotate about z. The final link carries a
    perpendicular tool offset and a roll joint about that offset, so the
    end effector sits on the last joint axis.
    """
    if n_joints < 2:
        raise ConfigError("planar arm needs at least two joints")
    if lengths is None:
        lengths = [0.3, 0.25, 0.2, 0.18, 0.15, 0.12][: n_joints - 1] + [0.1]
    lengths = list(lengths)
    if len(lengths) != n_joints:
        raise ConfigError(f"need {n_joints} link lengths, got {len(lengths)}")
    z = np.array([0.0, 0.0, 1.0])
    links = []
    for i in range(n_joints - 1):
        rotvec = [0.0, 0.0, np.pi / 2] if i == n_joints - 2 else [0.0, 0.0, 0.0]
        links.append(Link(RigidPose.from_axis_angle(rotvec, [lengths[i], 0.0, 0.0]), z))
    # after the quarter turn, frame x points across the last link
    links.append(Link(RigidPose.from_axis_angle([0, 0, 0], [lengths[-1], 0.0, 0.0]), [1.0, 0.0, 0.0]))
    return KinematicChain(tuple(links), name or f"planar{n_joints}")


def panda_like_chain() -> KinematicChain:
    """7-joint chain built from the Franka Panda's modified DH table."""
    # (a_{i+1}, d_i, alpha_{i+1}) folded into Fixed_i = TransZ(d_i) RotX(alpha) TransX(a)
    d = [0.333, 0.0, 0.316, 0.0, 0.384, 0.0, 0.107]
    a_next = [0.0, 0.0, 0.0825, -0.0825, 0.0, 0.088, 0.0]
    alpha_next = [-np.pi / 2, np.pi / 2, np.pi / 2, -np.pi / 2, np.pi / 2, np.pi / 2, 0.0]
    links = []
    for di, ai, al in zip(d, a_next, alpha_next):
        rot = axis_angle_to_matrix([al, 0.0, 0.0])
        links.append(Link(RigidPose(rot, [ai, 0.0, di]), [0.0, 0.0, 1.0]))
    return KinematicChain(tuple(links), "panda_like")


BUILTIN_CHAINS = {
    "planar3": lambda: planar_arm(3),
    "planar5": lambda: planar_arm(5),
    "panda_like": panda_like_chain,
}


def get_chain(spec: str) -> KinematicChain:
    """Resolve a built-in chain name or a chain file path."""
    if spec in BUILTIN_CHAINS:
        return BUILTIN_CHAINS[spec]()
    if Path(spec).exists():
        return KinematicChain.load(spec)
    raise ConfigError(f"unknown chain {spec!r}; built-ins are {sorted(BUILTIN_CHAINS)}")
