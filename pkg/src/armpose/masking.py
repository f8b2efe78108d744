"""Patch-grid masks, occlusion benchmarks and the RoI jitter curriculum.

Continuous image coordinates put pixel centers on integers, so an image of
width ``W`` spans ``[-0.5, W - 0.5]``. Patch ids are row-major from 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, InfeasiblePlacement

JOINT_MASK_SCALE = (0.15, 0.20)
JOINT_MASK_ASPECT = (0.75, 1.5)
PATCH_OVERLAP_RULE = 0.5

# (first epoch, lambda in pixels)
JITTER_SCHEDULE = ((0, 0.0), (30, 30.0), (50, 50.0), (70, 80.0), (90, 100.0), (110, 120.0))


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class PatchGrid:
    image_size: tuple[int, int]
    patch_size: int

    def __post_init__(self):
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ConfigError(f"image {h}x{w} is not divisible into {self.patch_size}px patches")

    @property
    def rows(self) -> int:
        return self.image_size[0] // self.patch_size

    @property
    def cols(self) -> int:
        return self.image_size[1] // self.patch_size

    @property
    def M(self) -> int:
        return self.rows * self.cols

    def patch_of(self, x: float, y: float) -> int | None:
        col = int(np.floor((x + 0.5) / self.patch_size))
        row = int(np.floor((y + 0.5) / self.patch_size))
        if 0 <= row < self.rows and 0 <= col < self.cols:
            return row * self.cols + col
        return None

    def overlap_fractions(self, rect: "MaskRect") -> np.ndarray:
        """Fraction of each patch's area covered by ``rect``, shape ``(M,)``."""
        p = self.patch_size
        edges_x = np.arange(self.cols) * p - 0.5
        edges_y = np.arange(self.rows) * p - 0.5
        ox = np.clip(np.minimum(edges_x + p, rect.x + rect.w) - np.maximum(edges_x, rect.x), 0, None)
        oy = np.clip(np.minimum(edges_y + p, rect.y + rect.h) - np.maximum(edges_y, rect.y), 0, None)
        return (oy[:, None] * ox[None, :]).reshape(-1) / (p * p)


@dataclass(frozen=True)
class MaskRect:
    x: float
    y: float
    w: float
    h: float

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def aspect(self) -> float:
        return self.w / self.h

    def contains(self, px: float, py: float) -> bool:
        return self.x <= px <= self.x + self.w and self.y <= py <= self.y + self.h


@dataclass(frozen=True)
class PatchMask:
    M: int
    context: tuple[int, ...]
    masked: tuple[int, ...]
    rects: tuple[MaskRect, ...] = field(default=())

    @classmethod
    def from_masked(cls, m: int, masked_flags: np.ndarray, rects=()) -> "PatchMask":
        masked_flags = np.asarray(masked_flags, dtype=bool)
        return cls(
            m,
            tuple(int(i) for i in np.flatnonzero(~masked_flags)),
            tuple(int(i) for i in np.flatnonzero(masked_flags)),
            tuple(rects),
        )

    @classmethod
    def empty(cls, m: int) -> "PatchMask":
        return cls(m, tuple(range(m)), ())

    @property
    def context_flags(self) -> np.ndarray:
        flags = np.zeros(self.M, dtype=bool)
        flags[list(self.context)] = True
        return flags

    def is_partition(self) -> bool:
        c, b = set(self.context), set(self.masked)
        return not (c & b) and (c | b) == set(range(self.M))


def _sample_rect(grid: PatchGrid, rng, scale, aspect, anchor=None) -> MaskRect:
    h_img, w_img = grid.image_size
    area = rng.uniform(*scale) * h_img * w_img
    ratio = rng.uniform(*aspect)
    w = np.sqrt(area * ratio)
    h = np.sqrt(area / ratio)
    if w > w_img or h > h_img:
        raise ConfigError("mask rectangle does not fit in the image")
    if anchor is None:
        x = rng.uniform(-0.5, w_img - 0.5 - w)
        y = rng.uniform(-0.5, h_img - 0.5 - h)
    else:
        ax, ay = anchor
        x = rng.uniform(max(-0.5, ax - w), min(ax, w_img - 0.5 - w))
        y = rng.uniform(max(-0.5, ay - h), min(ay, h_img - 0.5 - h))
    return MaskRect(float(x), float(y), float(w), float(h))


def _in_image(grid: PatchGrid, p) -> bool:
    if p is None:
        return False
    h, w = grid.image_size
    return -0.5 <= p[0] < w - 0.5 and -0.5 <= p[1] < h - 0.5


def sample_joint_masks(
    grid: PatchGrid,
    joint_pixels: Sequence,
    count: int = 4,
    rng_seed=None,
    scale=JOINT_MASK_SCALE,
    aspect=JOINT_MASK_ASPECT,
) -> PatchMask:
    """Mask rectangles around randomly chosen joints.

    Joints that are absent or outside the image get a rectangle at a uniform
    random position instead. A patch is masked when a rectangle covers at
    least half of it, and the patch holding a masked joint is always masked.
    """
    if count < 1:
        raise ConfigError("joint mask count must be at least 1")
    rng = _rng(rng_seed)
    n_joints = len(joint_pixels)
    chosen = rng.choice(n_joints, size=min(count, n_joints), replace=False) if n_joints else []
    masked = np.zeros(grid.M, dtype=bool)
    coverage = np.zeros(grid.M)
    rects = []
    for j in chosen:
        p = joint_pixels[int(j)]
        anchor = (float(p[0]), float(p[1])) if _in_image(grid, p) else None
        rect = _sample_rect(grid, rng, scale, aspect, anchor)
        frac = grid.overlap_fractions(rect)
        coverage = np.maximum(coverage, frac)
        masked |= frac >= PATCH_OVERLAP_RULE
        if anchor is not None:
            masked[grid.patch_of(*anchor)] = True
        rects.append(rect)
    # a fully masked image would leave the encoder without context
    if masked.all():
        masked[int(np.argmin(coverage))] = False
    return PatchMask.from_masked(grid.M, masked, rects)


def sample_random_mask(grid: PatchGrid, max_fraction: float = 0.20, rng_seed=None) -> PatchMask:
    """One rectangular block of patches covering at most ``max_fraction`` of the grid."""
    if not 0 <= max_fraction <= 1:
        raise ConfigError("max_fraction must lie in [0, 1]")
    rng = _rng(rng_seed)
    budget = int(np.floor(max_fraction * grid.M + 1e-9))
    if budget == 0:
        return PatchMask.empty(grid.M)
    target = rng.uniform(0.0, budget)
    ratio = rng.uniform(*JOINT_MASK_ASPECT)
    pw = int(np.clip(round(np.sqrt(target * ratio)), 0, grid.cols))
    ph = int(np.clip(round(np.sqrt(target / ratio)), 0, grid.rows))
    while pw * ph > budget:
        if pw >= ph:
            pw -= 1
        else:
            ph -= 1
    masked = np.zeros((grid.rows, grid.cols), dtype=bool)
    if pw > 0 and ph > 0:
        r0 = int(rng.integers(0, grid.rows - ph + 1))
        c0 = int(rng.integers(0, grid.cols - pw + 1))
        masked[r0 : r0 + ph, c0 : c0 + pw] = True
    if masked.all():
        masked[0, 0] = False
    return PatchMask.from_masked(grid.M, masked.reshape(-1))


# --------------------------------------------------------------------------
# Occlusion benchmark
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Occluder:
    shape: str
    center: tuple[float, float]
    width: float = 0.0
    height: float = 0.0
    radius: float = 0.0
    ratio: float = 0.0
    anchor: tuple[float, float] = (0.0, 0.0)

    @property
    def area(self) -> float:
        if self.shape == "circle":
            return float(np.pi * self.radius**2)
        return float(self.width * self.height)

    def contains(self, xs, ys) -> np.ndarray:
        xs = np.asarray(xs, dtype=np.float64)
        ys = np.asarray(ys, dtype=np.float64)
        cx, cy = self.center
        if self.shape == "circle":
            return (xs - cx) ** 2 + (ys - cy) ** 2 <= self.radius**2
        return (np.abs(xs - cx) <= self.width / 2) & (np.abs(ys - cy) <= self.height / 2)

    def to_dict(self) -> dict:
        d = {"shape": self.shape, "center": list(self.center), "ratio": self.ratio, "anchor": list(self.anchor)}
        if self.shape == "circle":
            d["radius"] = self.radius
        else:
            d["width"], d["height"] = self.width, self.height
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Occluder":
        return cls(
            d["shape"],
            tuple(d["center"]),
            d.get("width", 0.0),
            d.get("height", 0.0),
            d.get("radius", 0.0),
            d.get("ratio", 0.0),
            tuple(d.get("anchor", (0.0, 0.0))),
        )


def generate_occlusion(
    keypoints_2d: Sequence,
    roi,
    ratio: float,
    shape: str = "rect",
    rng_seed=None,
    image_size: tuple[int, int] | None = None,
) -> Occluder:
    """Black occluder with area ``ratio * area(roi)`` that overlaps the robot.

    The robot region is the convex hull of its visible keypoints. A point is
    drawn inside that hull and the occluder is placed so it contains it.
    """
    if not 0 < ratio < 1:
        raise ConfigError("occlusion ratio must lie in (0, 1)")
    if shape not in ("rect", "circle"):
        raise ConfigError(f"unknown occluder shape {shape!r}")
    rng = _rng(rng_seed)
    pts = [p for p in keypoints_2d if p is not None]
    if image_size is not None:
        h, w = image_size
        pts = [p for p in pts if -0.5 <= p[0] < w - 0.5 and -0.5 <= p[1] < h - 0.5]
    if not pts:
        raise InfeasiblePlacement("no visible robot keypoints to occlude")
    pts = np.asarray(pts, dtype=np.float64)
    weights = rng.dirichlet(np.ones(len(pts)))
    anchor = weights @ pts

    x0, y0, x1, y1 = roi
    area = ratio * (x1 - x0) * (y1 - y0)
    if shape == "circle":
        radius = float(np.sqrt(area / np.pi))
        offset_r = radius * np.sqrt(rng.uniform(0, 1)) * 0.95
        phi = rng.uniform(0, 2 * np.pi)
        center = anchor + offset_r * np.array([np.cos(phi), np.sin(phi)])
        return Occluder("circle", (float(center[0]), float(center[1])), radius=radius, ratio=ratio,
                        anchor=(float(anchor[0]), float(anchor[1])))
    aspect = rng.uniform(0.5, 2.0)
    width = float(np.sqrt(area * aspect))
    height = float(np.sqrt(area / aspect))
    offset = rng.uniform(-0.475, 0.475, size=2) * np.array([width, height])
    center = anchor + offset
    return Occluder("rect", (float(center[0]), float(center[1])), width, height, ratio=ratio,
                    anchor=(float(anchor[0]), float(anchor[1])))


def apply_occluder(image: np.ndarray, occluder: Occluder) -> np.ndarray:
    """Copy of ``image`` with pixels whose centers fall inside the occluder set to 0."""
    out = np.array(image, copy=True)
    h, w = out.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w]
    out[occluder.contains(xs, ys)] = 0
    return out


# --------------------------------------------------------------------------
# RoI jitter curriculum
# --------------------------------------------------------------------------


def jitter_lambda(epoch: int) -> float:
    if epoch < 0:
        raise ConfigError("epoch must be non-negative")
    lam = 0.0
    for start, value in JITTER_SCHEDULE:
        if epoch >= start:
            lam = value
    return lam


def jitter_bbox(bbox, epoch: int, rng_seed=None, image_size: tuple[int, int] | None = None, scale: float = 1.0):
    """Expand each bbox edge outward by an independent U(0, lambda(epoch)) draw."""
    lam = jitter_lambda(epoch) * scale
    x0, y0, x1, y1 = (float(v) for v in bbox)
    if lam > 0:
        rng = _rng(rng_seed)
        d = rng.uniform(0.0, lam, size=4)
        x0, y0, x1, y1 = x0 - d[0], y0 - d[1], x1 + d[2], y1 + d[3]
    if image_size is not None:
        h, w = image_size
        x0, x1 = max(x0, -0.5), min(x1, w - 0.5)
        y0, y1 = max(y0, -0.5), min(y1, h - 0.5)
    return (x0, y0, x1, y1)
