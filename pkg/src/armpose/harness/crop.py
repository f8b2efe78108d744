"""RoI crop: scale the box's longer side to the network input, zero-pad the short side.

Pixel centers sit on integer coordinates and pixel edges on half-integers,
so a box edge at ``x0`` maps to output coordinate ``-0.5``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from ..errors import DataError
from ..geometry import CameraIntrinsics


@dataclass(frozen=True)
class CropTransform:
    """``u = scale * x + offset_x``, ``v = scale * y + offset_y``."""

    scale: float
    offset_x: float
    offset_y: float
    size: int
    box: tuple[float, float, float, float]

    @classmethod
    def from_box(cls, box, size: int) -> "CropTransform":
        x0, y0, x1, y1 = (float(v) for v in box)
        w, h = x1 - x0, y1 - y0
        if w <= 0 or h <= 0:
            raise DataError(f"degenerate crop box {box}")
        s = size / max(w, h)
        ox = -0.5 + (size - s * w) / 2.0 - s * x0
        oy = -0.5 + (size - s * h) / 2.0 - s * y0
        return cls(s, ox, oy, size, (x0, y0, x1, y1))

    def forward(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts * self.scale + np.array([self.offset_x, self.offset_y])

    def inverse(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return (pts - np.array([self.offset_x, self.offset_y])) / self.scale

    def camera_matrix(self, k: CameraIntrinsics) -> np.ndarray:
        """3x3 camera matrix of the crop: projecting with it equals cropping the projection.

        The principal point may land outside the crop, so this stays a plain
        matrix; pose solving maps peaks back to original pixels instead.
        """
        a = np.array([[self.scale, 0.0, self.offset_x], [0.0, self.scale, self.offset_y], [0.0, 0.0, 1.0]])
        return a @ k.matrix

    def apply(self, image: np.ndarray) -> np.ndarray:
        """Bilinear resample into a ``size x size`` image; outside the box is 0."""
        u = np.arange(self.size, dtype=np.float64)
        src = self.inverse(np.stack(np.meshgrid(u, u, indexing="xy"), axis=-1).reshape(-1, 2))
        x0, y0, x1, y1 = self.box
        inside = (src[:, 0] >= x0) & (src[:, 0] <= x1) & (src[:, 1] >= y0) & (src[:, 1] <= y1)
        vals = map_coordinates(image, [src[:, 1], src[:, 0]], order=1, mode="constant", cval=0.0)
        return np.where(inside, vals, 0.0).reshape(self.size, self.size)


def crop_keypoints(transform: CropTransform, keypoints: np.ndarray) -> list:
    """Crop-space keypoints, ``None`` where unannotated (NaN) or cut off by the box."""
    x0, y0, x1, y1 = transform.box
    out = []
    for src, p in zip(np.asarray(keypoints, dtype=np.float64), transform.forward(keypoints)):
        if np.isnan(src).any() or not (x0 <= src[0] <= x1 and y0 <= src[1] <= y1):
            out.append(None)
        else:
            out.append(p)
    return out
