"""Turning dataset samples into network inputs and targets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import CameraIntrinsics
from ..heatmap import gaussian_heatmap
from ..masking import PatchGrid, apply_occluder, jitter_bbox
from ..refnet.model import NetConfig, patchify
from .crop import CropTransform, crop_keypoints
from .scene import Dataset


@dataclass(frozen=True)
class Prepared:
    image: np.ndarray  # (S, S) float
    transform: CropTransform
    intrinsics: CameraIntrinsics  # of the original image
    keypoints: tuple  # crop-space (x, y) or None, length k


def prepare(dataset: Dataset, i: int, size: int, box=None, occluder=None) -> Prepared:
    rec = dataset.records[i]
    img = dataset.image(i)
    if occluder is not None:
        img = apply_occluder(img, occluder)
    t = CropTransform.from_box(rec.bbox if box is None else box, size)
    return Prepared(t.apply(img), t, rec.intrinsics, tuple(crop_keypoints(t, rec.keypoint_array())))


def target_heatmaps(keypoints, size: int, sigma: float) -> np.ndarray:
    """Training targets: Gaussians centred on the nearest pixel, so each present keypoint has one exact 1."""
    centers = [None if p is None else (float(np.clip(np.round(p[0]), 0, size - 1)), float(np.clip(np.round(p[1]), 0, size - 1))) for p in keypoints]
    return gaussian_heatmap(centers, size, size, sigma)


class SampleCache:
    """Crops at the annotated box, computed once per sample."""

    def __init__(self, dataset: Dataset, size: int):
        self.dataset = dataset
        self.size = size
        self._items: dict[int, Prepared] = {}

    def get(self, i: int) -> Prepared:
        if i not in self._items:
            self._items[i] = prepare(self.dataset, i, self.size)
        return self._items[i]

    def jittered(self, i: int, epoch: int, rng, scale: float) -> Prepared:
        rec = self.dataset.records[i]
        box = jitter_bbox(rec.bbox, epoch, rng, (rec.intrinsics.height, rec.intrinsics.width), scale)
        if box == tuple(rec.bbox):
            return self.get(i)
        return prepare(self.dataset, i, self.size, box)


def to_patches(images, cfg: NetConfig) -> np.ndarray:
    return patchify(np.asarray(images, dtype=cfg.np_dtype), cfg.patch_size)


def grid_for(cfg: NetConfig) -> PatchGrid:
    return PatchGrid((cfg.image_size, cfg.image_size), cfg.patch_size)


def batches(order: np.ndarray, batch_size: int):
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]
