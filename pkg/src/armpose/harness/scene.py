"""Synthetic arm scenes: pose sampling, rendering and the on-disk dataset format.

A dataset directory holds ``annotations.jsonl`` (one SampleRecord per line),
``dataset.json`` (generator settings) and ``images/*.png`` (8-bit grayscale).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import DataError, InvalidCamera
from ..geometry import CameraIntrinsics, RigidPose, project, rotation_about
from ..kinematics import KinematicChain, forward_kinematics, get_chain
from .config import CameraDistribution

MAX_PLACEMENT_TRIES = 100
BBOX_MARGIN = 4.0
# plinth bar under the base, in robot coordinates; it makes the base x axis visible
PLINTH = np.array([[-0.08, -0.035, 0.0], [0.08, -0.035, 0.0]])
LINK_HALF_WIDTHS = (2.0, 1.5, 1.2, 1.0, 0.9, 0.8)
LINK_LEVEL = 0.55
PLINTH_LEVEL = 0.8
PLINTH_HALF_WIDTH = 2.5
BLOB_SIGMA = 1.3


@dataclass(frozen=True)
class SampleRecord:
    image_id: str
    image_path: str
    intrinsics: CameraIntrinsics
    gt_joints: tuple[float, ...]
    gt_pose: RigidPose | None
    gt_keypoints_2d: tuple[tuple[float, float] | None, ...]
    bbox: tuple[float, float, float, float]
    chain_id: str

    def __post_init__(self):
        x0, y0, x1, y1 = self.bbox
        w, h = self.intrinsics.width, self.intrinsics.height
        if not (-0.5 <= x0 < x1 <= w - 0.5 and -0.5 <= y0 < y1 <= h - 0.5):
            raise DataError(f"{self.image_id}: bbox {self.bbox} outside the {w}x{h} image")

    @property
    def k(self) -> int:
        return len(self.gt_keypoints_2d)

    def keypoint_array(self) -> np.ndarray:
        """``(k, 2)`` with NaN rows for keypoints that are not annotated."""
        return np.array([p if p is not None else (np.nan, np.nan) for p in self.gt_keypoints_2d], dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "image_path": self.image_path,
            "intrinsics": self.intrinsics.to_dict(),
            "gt_joints": list(self.gt_joints),
            "gt_pose": None if self.gt_pose is None else self.gt_pose.to_dict(),
            "gt_keypoints_2d": [None if p is None else list(p) for p in self.gt_keypoints_2d],
            "bbox": list(self.bbox),
            "chain_id": self.chain_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SampleRecord":
        try:
            return cls(
                d["image_id"],
                d["image_path"],
                CameraIntrinsics.from_dict(d["intrinsics"]),
                tuple(float(v) for v in d.get("gt_joints") or ()),
                None if d.get("gt_pose") is None else RigidPose.from_dict(d["gt_pose"]),
                tuple(None if p is None else (float(p[0]), float(p[1])) for p in d["gt_keypoints_2d"]),
                tuple(float(v) for v in d["bbox"]),
                d["chain_id"],
            )
        except (KeyError, TypeError, IndexError) as exc:
            raise DataError(f"malformed sample record: {exc!r}") from exc


def intrinsics_for(cam: CameraDistribution) -> CameraIntrinsics:
    return CameraIntrinsics(cam.focal, cam.focal, (cam.width - 1) / 2.0, (cam.height - 1) / 2.0, cam.width, cam.height)


def sample_joints(chain: KinematicChain, rng: np.random.Generator, min_bend: float = 0.3) -> np.ndarray:
    """Joint angles that keep the arm above its base and visibly bent at every elbow."""
    n = chain.n
    q = np.empty(n)
    q[0] = rng.uniform(0.35, np.pi - 0.35)
    for i in range(1, n - 1):
        q[i] = rng.choice([-1.0, 1.0]) * rng.uniform(min_bend, 2.0)
    q[n - 1] = rng.uniform(-np.pi, np.pi)
    return q


def _in_view(uv: np.ndarray, cam: CameraDistribution, margin: float) -> np.ndarray:
    return (
        (uv[:, 0] >= margin - 0.5)
        & (uv[:, 0] <= cam.width - 0.5 - margin)
        & (uv[:, 1] >= margin - 0.5)
        & (uv[:, 1] <= cam.height - 0.5 - margin)
    )


def sample_pose(
    chain: KinematicChain, joints, cam: CameraDistribution, rng: np.random.Generator
) -> tuple[RigidPose, np.ndarray]:
    """Robot-to-camera pose with the arm (and plinth) in view.

    With ``max_hidden_keypoints`` > 0 up to that many non-base keypoints may
    fall outside the frame. Returns the pose and a visibility flag per keypoint.
    """
    k_int = intrinsics_for(cam)
    pts = np.vstack([forward_kinematics(chain, joints), PLINTH])
    k = chain.k
    # robot z faces the camera, robot y points up in the image
    facing = rotation_about([1.0, 0.0, 0.0], np.pi)
    for _ in range(MAX_PLACEMENT_TRIES):
        tilt = np.deg2rad(cam.tilt_deg)
        r = (
            rotation_about([0.0, 0.0, 1.0], np.deg2rad(rng.uniform(-cam.roll_deg, cam.roll_deg)))
            @ rotation_about([1.0, 0.0, 0.0], rng.uniform(-tilt, tilt))
            @ rotation_about([0.0, 1.0, 0.0], rng.uniform(-tilt, tilt))
            @ facing
        )
        z = rng.uniform(*cam.depth)
        centroid = r @ pts[:k].mean(axis=0)
        spread = 0.25 * z * (1.0 + cam.max_hidden_keypoints)
        xy = -centroid[:2] + rng.uniform(-spread, spread, size=2) * np.array([cam.width, cam.height]) / (2 * cam.focal)
        pose = RigidPose(r, np.array([xy[0], xy[1], z - centroid[2]]))
        pc = pose.apply(pts)
        if np.any(pc[:, 2] < 0.1):
            continue
        uv = project(pose, k_int, pts)
        visible = _in_view(uv, cam, 1.0)
        hidden = int((~visible[:k]).sum())
        if cam.max_hidden_keypoints == 0:
            if visible.all() and _in_view(uv, cam, BBOX_MARGIN).all():
                return pose, visible[:k]
        elif visible[0] and visible[k:].all() and hidden <= cam.max_hidden_keypoints and k - hidden >= 4:
            return pose, visible[:k]
    raise InvalidCamera(f"arm not in view after {MAX_PLACEMENT_TRIES} placements")


def _segment_coverage(xx, yy, a, b, half_width):
    ab = b - a
    denom = float(ab @ ab)
    t = np.zeros_like(xx) if denom == 0 else np.clip(((xx - a[0]) * ab[0] + (yy - a[1]) * ab[1]) / denom, 0.0, 1.0)
    d = np.hypot(xx - (a[0] + t * ab[0]), yy - (a[1] + t * ab[1]))
    return np.clip(half_width + 0.5 - d, 0.0, 1.0)


def render(uv: np.ndarray, plinth_uv: np.ndarray, width: int, height: int, rng, background, noise_std) -> np.ndarray:
    """Grayscale float image in [0, 1]: links as anti-aliased bars, keypoints as blobs."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    img = np.full((height, width), rng.uniform(*background))
    img = np.maximum(img, PLINTH_LEVEL * _segment_coverage(xx, yy, plinth_uv[0], plinth_uv[1], PLINTH_HALF_WIDTH))
    for i in range(len(uv) - 1):
        hw = LINK_HALF_WIDTHS[min(i, len(LINK_HALF_WIDTHS) - 1)]
        img = np.maximum(img, LINK_LEVEL * _segment_coverage(xx, yy, uv[i], uv[i + 1], hw))
    for p in uv:
        img = np.maximum(img, np.exp(-((xx - p[0]) ** 2 + (yy - p[1]) ** 2) / (2 * BLOB_SIGMA**2)))
    img = img + rng.normal(0.0, noise_std, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def bbox_of(points: np.ndarray, width: int, height: int, margin: float = BBOX_MARGIN):
    x0, y0 = points.min(axis=0) - margin
    x1, y1 = points.max(axis=0) + margin
    return (
        float(max(x0, -0.5)),
        float(max(y0, -0.5)),
        float(min(x1, width - 0.5)),
        float(min(y1, height - 0.5)),
    )


def make_sample(chain: KinematicChain, cam: CameraDistribution, rng: np.random.Generator, image_id: str, min_bend=0.3):
    """Sample one scene; returns the record (with a relative image path) and the uint8 image."""
    joints = sample_joints(chain, rng, min_bend)
    pose, visible = sample_pose(chain, joints, cam, rng)
    k_int = intrinsics_for(cam)
    uv = project(pose, k_int, forward_kinematics(chain, joints))
    plinth_uv = project(pose, k_int, PLINTH)
    img = render(uv, plinth_uv, cam.width, cam.height, rng, cam.background, cam.noise_std)
    shown = np.vstack([uv[visible], plinth_uv])
    record = SampleRecord(
        image_id,
        f"images/{image_id}.png",
        k_int,
        tuple(float(v) for v in joints),
        pose,
        tuple((float(p[0]), float(p[1])) if v else None for p, v in zip(uv, visible)),
        bbox_of(shown, cam.width, cam.height),
        chain.name,
    )
    return record, to_uint8(img)


def generate_synthetic_dataset(
    out_dir, chain: KinematicChain, count: int, camera: CameraDistribution, rng_seed: int, prefix: str = "s", min_bend=0.3
) -> list[SampleRecord]:
    """Render ``count`` scenes into ``out_dir``; image ``i`` uses its own seed stream ``(rng_seed, i)``."""
    if count < 1:
        raise DataError("count must be at least 1")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(count):
        rng = np.random.default_rng([rng_seed, i])
        record, img = make_sample(chain, camera, rng, f"{prefix}{i:05d}", min_bend)
        Image.fromarray(img).save(out / record.image_path, optimize=False)
        records.append(record)
    write_records(out / "annotations.jsonl", records)
    meta = {"chain": chain.name, "count": count, "seed": rng_seed, "camera": _camera_dict(camera)}
    (out / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    if chain.name not in ("planar3", "planar5", "panda_like"):
        chain.save(out / "chain.json")
    return records


def _camera_dict(cam: CameraDistribution) -> dict:
    return {
        "width": cam.width,
        "height": cam.height,
        "focal": cam.focal,
        "depth": list(cam.depth),
        "tilt_deg": cam.tilt_deg,
        "roll_deg": cam.roll_deg,
        "background": list(cam.background),
        "noise_std": cam.noise_std,
        "max_hidden_keypoints": cam.max_hidden_keypoints,
    }


def write_records(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def read_records(path) -> list[SampleRecord]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read annotations {path}: {exc}") from exc
    records = []
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            records.append(SampleRecord.from_dict(json.loads(line)))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{n}: {exc}") from exc
    if not records:
        raise DataError(f"{path} holds no records")
    return records


@dataclass
class Dataset:
    root: Path
    records: list[SampleRecord]
    chain: KinematicChain

    def __len__(self) -> int:
        return len(self.records)

    def image(self, i: int) -> np.ndarray:
        """Grayscale image ``i`` as float64 in [0, 1]; RGB files are averaged."""
        path = self.root / self.records[i].image_path
        try:
            with Image.open(path) as im:
                arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
        except OSError as exc:
            raise DataError(f"cannot read image {path}: {exc}") from exc
        rec = self.records[i]
        if arr.shape != (rec.intrinsics.height, rec.intrinsics.width):
            raise DataError(f"{path}: image is {arr.shape[1]}x{arr.shape[0]}, record says {rec.intrinsics.width}x{rec.intrinsics.height}")
        return arr


def load_dataset(root) -> Dataset:
    root = Path(root)
    records = read_records(root / "annotations.jsonl")
    chain_file = root / "chain.json"
    chain = get_chain(str(chain_file)) if chain_file.exists() else get_chain(records[0].chain_id)
    for r in records:
        if r.k != chain.k:
            raise DataError(f"{r.image_id}: {r.k} keypoints, chain {chain.name} has {chain.k}")
        if r.gt_joints and len(r.gt_joints) != chain.n:
            raise DataError(f"{r.image_id}: {len(r.gt_joints)} joints, chain {chain.name} has {chain.n}")
    return Dataset(root, records, chain)
