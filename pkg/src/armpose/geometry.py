"""Rigid transforms, pinhole projection and the EPnP solver.

Everything here works in float64. Poses map robot-frame points into the
camera frame: ``p_cam = R @ p_robot + t``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    DataError,
    DegenerateConfiguration,
    DimensionMismatch,
    NonPositiveDepth,
    TooFewPoints,
)

MIN_DEPTH = 1e-9
PLANAR_CONDITION = 1e8
IMAGE_COLLINEAR = 1e-6  # ratio of the two singular values of the centred image points
# squared pixels per point below which a pose counts as an exact fit
EXACT_FIT = 1e-16


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def axis_angle_to_matrix(rotvec) -> np.ndarray:
    """Rodrigues' formula for a rotation vector (axis * angle)."""
    rotvec = np.asarray(rotvec, dtype=np.float64)
    theta = np.linalg.norm(rotvec)
    if theta < 1e-15:
        return np.eye(3) + skew(rotvec)
    k = skew(rotvec / theta)
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def rotation_about(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    return axis_angle_to_matrix(axis / np.linalg.norm(axis) * angle)


def matrix_to_axis_angle(rotation: np.ndarray) -> np.ndarray:
    w = np.array(
        [
            rotation[2, 1] - rotation[1, 2],
            rotation[0, 2] - rotation[2, 0],
            rotation[1, 0] - rotation[0, 1],
        ]
    )
    sin2 = np.linalg.norm(w)  # 2 sin(theta)
    # atan2 keeps small angles accurate where arccos of the trace does not
    theta = np.arctan2(sin2, np.trace(rotation) - 1.0)
    if theta < 1e-12:
        return w / 2.0
    if np.pi - theta < 1e-6:
        # near pi the antisymmetric part vanishes; read the axis off the
        # symmetric part, cos I + (1 - cos) a a^T
        c = np.cos(theta)
        m = ((rotation + rotation.T) / 2.0 - c * np.eye(3)) / (1.0 - c)
        axis = m[np.argmax(np.diag(m))]
        axis = axis / np.linalg.norm(axis)
        if axis @ w < 0:
            axis = -axis
        return axis * theta
    return w / sin2 * theta


def orthonormalize(rotation: np.ndarray) -> np.ndarray:
    """Closest rotation matrix in the Frobenius sense."""
    u, _, vt = np.linalg.svd(rotation)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


@dataclass(frozen=True)
class RigidPose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t)) and self.is_valid()):
            raise DataError("rotation must be orthonormal with determinant +1 and entries finite")

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "RigidPose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_axis_angle(cls, rotvec, translation) -> "RigidPose":
        return cls(axis_angle_to_matrix(rotvec), translation)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "RigidPose") -> "RigidPose":
        """``self * other``: apply ``other`` first, then ``self``."""
        return RigidPose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidPose":
        rt = self.rotation.T
        return RigidPose(rt, -rt @ self.translation)

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return bool(
            np.allclose(r.T @ r, np.eye(3), atol=tol, rtol=0)
            and abs(np.linalg.det(r) - 1.0) <= tol
        )

    def to_dict(self) -> dict:
        return {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RigidPose":
        return cls(np.array(d["rotation"], dtype=np.float64), np.array(d["translation"], dtype=np.float64))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DataError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DataError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
            int(d["width"]), int(d["height"]),
        )


@dataclass(frozen=True)
class Correspondence2D3D:
    point3d: tuple
    point2d: tuple
    confidence: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise DataError(f"confidence {self.confidence} outside [0, 1]")


def _project_camera_points(pc: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    z = pc[:, 2]
    if np.any(z <= MIN_DEPTH):
        raise NonPositiveDepth(f"point with camera depth {z.min():.3g} is not in front of the camera")
    u = intrinsics.fx * pc[:, 0] / z + intrinsics.cx
    v = intrinsics.fy * pc[:, 1] / z + intrinsics.cy
    return np.stack([u, v], axis=1)


def project(pose: RigidPose, intrinsics: CameraIntrinsics, points3d) -> np.ndarray:
    """Project robot-frame points to pixel coordinates, shape ``(N, 2)``."""
    pts = np.atleast_2d(np.asarray(points3d, dtype=np.float64))
    return _project_camera_points(pose.apply(pts), intrinsics)


def projection_jacobian(pc: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    """d(pixel)/d(camera point) for each point, shape ``(N, 2, 3)``."""
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    jac = np.zeros((len(pc), 2, 3))
    jac[:, 0, 0] = intrinsics.fx / z
    jac[:, 0, 2] = -intrinsics.fx * x / z**2
    jac[:, 1, 1] = intrinsics.fy / z
    jac[:, 1, 2] = -intrinsics.fy * y / z**2
    return jac


def unproject(pose: RigidPose, intrinsics: CameraIntrinsics, pixels, depth) -> np.ndarray:
    """Lift pixels at the given camera depth back into the robot frame."""
    px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    depth = np.broadcast_to(np.asarray(depth, dtype=np.float64), (len(px),))
    x = (px[:, 0] - intrinsics.cx) / intrinsics.fx * depth
    y = (px[:, 1] - intrinsics.cy) / intrinsics.fy * depth
    pc = np.stack([x, y, depth], axis=1)
    return pose.inverse().apply(pc)


def reprojection_rmse(pose: RigidPose, intrinsics: CameraIntrinsics, correspondences) -> float:
    pts3d, pts2d = _split(correspondences)
    if len(pts3d) == 0:
        raise DataError("reprojection error needs at least one correspondence")
    residual = project(pose, intrinsics, pts3d) - pts2d
    return float(np.sqrt(np.mean(np.sum(residual**2, axis=1))))


def _split(correspondences) -> tuple[np.ndarray, np.ndarray]:
    correspondences = list(correspondences)
    if not correspondences:
        return np.zeros((0, 3)), np.zeros((0, 2))
    pts3d = np.array([c.point3d for c in correspondences], dtype=np.float64)
    pts2d = np.array([c.point2d for c in correspondences], dtype=np.float64)
    return pts3d, pts2d


def correspondences_from_arrays(points3d, points2d, confidences=None) -> list[Correspondence2D3D]:
    points3d = np.asarray(points3d, dtype=np.float64)
    points2d = np.asarray(points2d, dtype=np.float64)
    if confidences is None:
        confidences = np.ones(len(points3d))
    return [
        Correspondence2D3D(tuple(p), tuple(q), float(c))
        for p, q, c in zip(points3d, points2d, confidences)
    ]


# --------------------------------------------------------------------------
# EPnP
# --------------------------------------------------------------------------


def _control_points(pw: np.ndarray) -> np.ndarray:
    """Centroid plus principal directions; three points for planar sets."""
    centroid = pw.mean(axis=0)
    centered = pw - centroid
    evals, evecs = np.linalg.eigh(centered.T @ centered / len(pw))
    evals = np.clip(evals, 0.0, None)
    if evals[2] <= 1e-24 or evals[1] <= 1e-12 * evals[2]:
        raise DegenerateConfiguration("3D points are collinear or coincident")
    planar = evals[2] > PLANAR_CONDITION * evals[0]
    dirs = [2, 1] if planar else [2, 1, 0]
    ctrl = [centroid] + [centroid + np.sqrt(evals[i]) * evecs[:, i] for i in dirs]
    return np.array(ctrl)


def _barycentric(pw: np.ndarray, ctrl: np.ndarray) -> np.ndarray:
    basis = (ctrl[1:] - ctrl[0]).T  # 3 x (nc-1)
    coeffs, *_ = np.linalg.lstsq(basis, (pw - ctrl[0]).T, rcond=None)
    coeffs = coeffs.T
    return np.column_stack([1.0 - coeffs.sum(axis=1), coeffs])


def _measurement_matrix(alphas: np.ndarray, uv: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    n, nc = alphas.shape
    m = np.zeros((2 * n, 3 * nc))
    m[0::2, 0::3] = alphas * k.fx
    m[0::2, 2::3] = alphas * (k.cx - uv[:, [0]])
    m[1::2, 1::3] = alphas * k.fy
    m[1::2, 2::3] = alphas * (k.cy - uv[:, [1]])
    return m


def _absolute_orientation(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares R, t with dst ~ R src + t (no scale)."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    h = (dst - mu_d).T @ (src - mu_s)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(u @ vt))
    r = u @ np.diag([1.0, 1.0, d if d != 0 else 1.0]) @ vt
    return r, mu_d - r @ mu_s


def _betas(kernel: np.ndarray, ctrl_w: np.ndarray, prev: np.ndarray | None) -> np.ndarray:
    nc = ctrl_w.shape[0]
    n_vec = kernel.shape[1]
    pairs = [(a, b) for a in range(nc) for b in range(a + 1, nc)]
    vecs = kernel.T.reshape(n_vec, nc, 3)
    dv = np.array([[vecs[j, a] - vecs[j, b] for j in range(n_vec)] for a, b in pairs])  # P x N x 3
    rho = np.array([np.sum((ctrl_w[a] - ctrl_w[b]) ** 2) for a, b in pairs])

    products = [(i, j) for i in range(n_vec) for j in range(i, n_vec)]
    if len(products) <= len(pairs):
        lmat = np.array(
            [[(1.0 if i == j else 2.0) * dv[p, i] @ dv[p, j] for i, j in products] for p in range(len(pairs))]
        )
        sol, *_ = np.linalg.lstsq(lmat, rho, rcond=None)
        b11 = sol[0]
        beta = np.zeros(n_vec)
        beta[0] = np.sqrt(abs(b11))
        if beta[0] > 0:
            for j in range(1, n_vec):
                beta[j] = sol[products.index((0, j))] / beta[0]
    else:
        beta = np.zeros(n_vec)
        if prev is not None:
            beta[: len(prev)] = prev

    # Gauss-Newton on the control-point distance constraints
    for _ in range(10):
        diff = np.einsum("j,pjc->pc", beta, dv)
        resid = np.sum(diff**2, axis=1) - rho
        jac = 2.0 * np.einsum("pc,pjc->pj", diff, dv)
        step, *_ = np.linalg.lstsq(jac, -resid, rcond=None)
        beta = beta + step
        if np.linalg.norm(step) < 1e-14:
            break
    return beta


def _reproj_sq(r, t, pw, uv, k: CameraIntrinsics) -> float:
    pc = pw @ r.T + t
    if np.any(pc[:, 2] <= MIN_DEPTH):
        return np.inf
    return float(np.sum((_project_camera_points(pc, k) - uv) ** 2))


def _refine_pose(r, t, pw, uv, k: CameraIntrinsics, iters: int = 50):
    """Levenberg-Marquardt on the squared reprojection error.

    Rotation updates are left twists re-linearized at every iterate, so the
    Jacobian is exact at the current pose. A plain Gauss-Newton step can stall
    at an EPnP start that lies far from the optimum; the damping fixes that.
    """
    err = _reproj_sq(r, t, pw, uv, k)
    lam = 1e-3
    for _ in range(iters):
        if not np.isfinite(err) or err < 1e-24:
            break
        pc = pw @ r.T + t
        resid = (_project_camera_points(pc, k) - uv).reshape(-1)
        jp = projection_jacobian(pc, k)
        # row-wise jp @ -[v]x equals v x jp for v = pc - t
        d_rot = np.cross((pc - t)[:, None, :], jp)
        jac = np.concatenate([d_rot, jp], axis=2).reshape(-1, 6)
        a = jac.T @ jac
        g = jac.T @ resid
        diag = np.diag(np.maximum(np.diag(a), 1e-12))
        while lam < 1e12:
            try:
                step = np.linalg.solve(a + lam * diag, -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            r_new = orthonormalize(axis_angle_to_matrix(step[:3]) @ r)
            t_new = t + step[3:]
            new_err = _reproj_sq(r_new, t_new, pw, uv, k)
            if new_err < err:
                break
            lam *= 10.0
        else:
            break
        converged = err - new_err <= 1e-12 * err or np.linalg.norm(step) < 1e-13
        r, t, err = r_new, t_new, new_err
        lam = max(lam / 10.0, 1e-9)
        if converged:
            break
    return r, t


def solve_pnp(points3d, points2d, intrinsics: CameraIntrinsics, refine: bool = True) -> RigidPose:
    """EPnP followed by Levenberg-Marquardt refinement of the reprojection error."""
    pw = np.asarray(points3d, dtype=np.float64).reshape(-1, 3)
    uv = np.asarray(points2d, dtype=np.float64).reshape(-1, 2)
    if len(pw) != len(uv):
        raise DimensionMismatch(f"{len(pw)} 3D points vs {len(uv)} 2D points")
    if len(pw) < 4:
        raise TooFewPoints(f"PnP needs at least 4 correspondences, got {len(pw)}")
    if not (np.all(np.isfinite(pw)) and np.all(np.isfinite(uv))):
        raise DegenerateConfiguration("non-finite correspondences")
    sv = np.linalg.svd(uv - uv.mean(axis=0), compute_uv=False)
    if sv[1] <= IMAGE_COLLINEAR * sv[0]:
        # a line of image points leaves the depth along it unobservable
        raise DegenerateConfiguration("image points are collinear or coincident")

    ctrl_w = _control_points(pw)
    alphas = _barycentric(pw, ctrl_w)
    m = _measurement_matrix(alphas, uv, intrinsics)
    _, evecs = np.linalg.eigh(m.T @ m)

    candidates = []
    prev = None
    for n_vec in range(1, 5):
        kernel = evecs[:, :n_vec]
        beta = _betas(kernel, ctrl_w, prev)
        prev = beta
        ctrl_c = (kernel @ beta).reshape(-1, 3)
        pc = alphas @ ctrl_c
        if np.mean(pc[:, 2]) < 0:
            pc = -pc
        r, t = _absolute_orientation(pw, pc)
        if np.isfinite(_reproj_sq(r, t, pw, uv, intrinsics)):
            candidates.append((r, t))

    if not candidates:
        raise DegenerateConfiguration("no EPnP solution places the points in front of the camera")
    candidates.sort(key=lambda c: _reproj_sq(c[0], c[1], pw, uv, intrinsics))
    r, t = candidates[0]
    if refine:
        # the kernel-dimension candidates can sit in different basins, so refine
        # each one unless the best already reprojects exactly
        best_err = np.inf
        for cr, ct in candidates:
            cr, ct = _refine_pose(cr, ct, pw, uv, intrinsics)
            err = _reproj_sq(cr, ct, pw, uv, intrinsics)
            if err < best_err:
                r, t, best_err = cr, ct, err
            if best_err < EXACT_FIT * len(pw):
                break
    return RigidPose(orthonormalize(r), t)


def solve_epnp(correspondences: Sequence[Correspondence2D3D], intrinsics: CameraIntrinsics) -> RigidPose:
    pts3d, pts2d = _split(correspondences)
    return solve_pnp(pts3d, pts2d, intrinsics)
