import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from armpose.errors import DataError, DegenerateConfiguration, NonPositiveDepth, TooFewPoints
from armpose.geometry import (
    CameraIntrinsics,
    Correspondence2D3D,
    RigidPose,
    axis_angle_to_matrix,
    correspondences_from_arrays,
    matrix_to_axis_angle,
    project,
    reprojection_rmse,
    solve_epnp,
    solve_pnp,
    unproject,
)
from conftest import random_rotation

K224 = CameraIntrinsics(100.0, 100.0, 112.0, 112.0, 224, 224)


def homogeneous_oracle(pose, k, pts):
    """Project by composing full 4x4 and 3x4 matrices, then dividing."""
    t = np.eye(4)
    t[:3, :3] = pose.rotation
    t[:3, 3] = pose.translation
    p = np.hstack([np.eye(3), np.zeros((3, 1))])
    kmat = np.array([[k.fx, 0, k.cx], [0, k.fy, k.cy], [0, 0, 1]])
    hom = np.hstack([pts, np.ones((len(pts), 1))])
    uvw = (kmat @ p @ t @ hom.T).T
    return uvw[:, :2] / uvw[:, 2:]


def random_instance(rng, n=8, max_angle=2 * np.pi / 3, planar=False):
    pose = RigidPose(random_rotation(rng, max_angle), np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(0.5, 3.0)]))
    pc = rng.uniform(-0.3, 0.3, size=(n, 3))
    if planar:
        pc[:, 2] = 0.0
    pc[:, 2] += 0.0
    # place points around the camera-frame target, then express them in the object frame
    cam_pts = pc + pose.translation
    cam_pts[:, 2] = np.maximum(cam_pts[:, 2], 0.2)
    obj = (cam_pts - pose.translation) @ pose.rotation
    if planar:
        obj = rng.uniform(-0.3, 0.3, size=(n, 3))
        obj[:, 2] = 0.0
        # keep the plane in front of the camera
        pose = RigidPose(random_rotation(rng, np.pi / 3), np.array([0.0, 0.0, rng.uniform(0.8, 3.0)]))
    return pose, obj


class TestRigidPose:
    def test_identity_is_valid(self):
        assert RigidPose.identity().is_valid()

    def test_rejects_non_rotation(self):
        with pytest.raises(DataError):
            RigidPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))

    def test_compose_matches_matrix_product(self, rng):
        a = RigidPose(random_rotation(rng), rng.normal(size=3))
        b = RigidPose(random_rotation(rng), rng.normal(size=3))
        np.testing.assert_allclose(a.compose(b).as_matrix(), a.as_matrix() @ b.as_matrix(), atol=1e-12)

    def test_inverse_round_trip(self, rng):
        a = RigidPose(random_rotation(rng), rng.normal(size=3))
        np.testing.assert_allclose(a.compose(a.inverse()).as_matrix(), np.eye(4), atol=1e-12)

    def test_dict_round_trip(self, rng):
        a = RigidPose(random_rotation(rng), rng.normal(size=3))
        b = RigidPose.from_dict(a.to_dict())
        np.testing.assert_allclose(a.as_matrix(), b.as_matrix(), atol=1e-12)

    @given(st.lists(st.floats(-3, 3), min_size=3, max_size=3))
    def test_axis_angle_round_trip(self, v):
        v = np.array(v)
        r = axis_angle_to_matrix(v)
        assert np.allclose(r.T @ r, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(axis_angle_to_matrix(matrix_to_axis_angle(r)), r, atol=1e-9)

    @given(st.floats(0.0, 1e-6), st.lists(st.floats(-1, 1), min_size=3, max_size=3))
    def test_axis_angle_near_half_turn(self, gap, axis):
        axis = np.array(axis)
        if np.linalg.norm(axis) < 1e-3:
            return
        r = axis_angle_to_matrix(axis / np.linalg.norm(axis) * (np.pi - gap))
        np.testing.assert_allclose(axis_angle_to_matrix(matrix_to_axis_angle(r)), r, atol=1e-9)


class TestIntrinsics:
    def test_rejects_bad_focal(self):
        with pytest.raises(DataError):
            CameraIntrinsics(0.0, 1.0, 1.0, 1.0, 4, 4)

    def test_rejects_principal_point_outside(self):
        with pytest.raises(DataError):
            CameraIntrinsics(1.0, 1.0, 4.0, 1.0, 4, 4)


class TestProject:
    def test_optical_axis_maps_to_principal_point(self):
        np.testing.assert_allclose(project(RigidPose.identity(), K224, [[0, 0, 1]]), [[112, 112]])

    def test_offset_point(self):
        np.testing.assert_allclose(project(RigidPose.identity(), K224, [[1, 0, 2]]), [[162, 112]])

    def test_matches_homogeneous_oracle(self, rng):
        for _ in range(200):
            pose = RigidPose(random_rotation(rng), np.array([0, 0, 5.0]) + rng.normal(size=3) * 0.3)
            pts = rng.uniform(-1, 1, size=(10, 3))
            np.testing.assert_allclose(project(pose, K224, pts), homogeneous_oracle(pose, K224, pts), atol=1e-9)

    def test_non_positive_depth(self):
        with pytest.raises(NonPositiveDepth):
            project(RigidPose.identity(), K224, [[0, 0, 0.0]])
        with pytest.raises(NonPositiveDepth):
            project(RigidPose.identity(), K224, [[0, 0, -1.0]])

    @given(
        st.floats(-150, 150), st.floats(-150, 150), st.floats(0.1, 20.0),
        st.lists(st.floats(-2, 2), min_size=3, max_size=3),
    )
    def test_unproject_then_project(self, u, v, depth, rotvec):
        pose = RigidPose.from_axis_angle(rotvec, [0.1, -0.2, 0.3])
        pix = np.array([[112 + u, 112 + v]])
        pts = unproject(pose, K224, pix, depth)
        np.testing.assert_allclose(project(pose, K224, pts), pix, atol=1e-9)


class TestReprojectionRmse:
    def test_exact_is_zero(self, rng):
        pose, obj = random_instance(rng)
        corr = correspondences_from_arrays(obj, project(pose, K224, obj))
        assert reprojection_rmse(pose, K224, corr) < 1e-9

    def test_hand_example(self):
        pose = RigidPose.identity()
        pts = np.array([[0, 0, 1.0], [0.2, 0.1, 2.0]])
        uv = project(pose, K224, pts)
        uv[1] += [3.0, 4.0]
        assert reprojection_rmse(pose, K224, correspondences_from_arrays(pts, uv)) == pytest.approx(np.sqrt(12.5), abs=1e-12)

    def test_empty_list(self):
        with pytest.raises(DataError):
            reprojection_rmse(RigidPose.identity(), K224, [])

    def test_confidence_range(self):
        with pytest.raises(DataError):
            Correspondence2D3D(np.zeros(3), np.zeros(2), 1.5)


class TestEpnp:
    def test_identity_recovery(self, rng):
        obj = rng.uniform(-0.5, 0.5, size=(6, 3)) + [0, 0, 2.0]
        corr = correspondences_from_arrays(obj, project(RigidPose.identity(), K224, obj))
        pose = solve_epnp(corr, K224)
        np.testing.assert_allclose(pose.rotation, np.eye(3), atol=1e-6)
        assert np.linalg.norm(pose.translation) < 1e-6

    def test_random_eight_points(self, rng):
        for _ in range(100):
            pose, obj = random_instance(rng, 8)
            uv = project(pose, K224, obj)
            est = solve_pnp(obj, uv, K224)
            assert est.is_valid()
            rmse = np.sqrt(np.mean(np.sum((project(est, K224, obj) - uv) ** 2, axis=1)))
            assert rmse < 1e-6

    def test_planar_points(self, rng):
        for _ in range(100):
            pose, obj = random_instance(rng, 6, planar=True)
            uv = project(pose, K224, obj)
            est = solve_pnp(obj, uv, K224)
            np.testing.assert_allclose(est.as_matrix(), pose.as_matrix(), atol=1e-6)

    def test_four_coplanar_points(self, rng):
        obj = np.array([[0, 0, 0], [0.3, 0, 0], [0.3, 0.25, 0], [0.1, 0.35, 0.0]])
        pose = RigidPose(random_rotation(rng, 0.5), np.array([0.05, -0.02, 1.5]))
        est = solve_pnp(obj, project(pose, K224, obj), K224)
        np.testing.assert_allclose(est.as_matrix(), pose.as_matrix(), atol=1e-6)

    def test_three_points(self):
        obj = np.eye(3) + [0, 0, 2]
        with pytest.raises(TooFewPoints):
            solve_pnp(obj, project(RigidPose.identity(), K224, obj), K224)

    def test_collinear_points(self):
        obj = np.outer(np.linspace(-0.5, 0.5, 6), [1.0, 0.5, 0.2]) + [0, 0, 2]
        with pytest.raises(DegenerateConfiguration):
            solve_pnp(obj, project(RigidPose.identity(), K224, obj), K224)

    def test_coincident_image_points(self, rng):
        # three detections on one pixel leave two distinct image points
        pose, obj = random_instance(rng, 4)
        uv = project(pose, K224, obj)
        uv[1:] = uv[1]
        with pytest.raises(DegenerateConfiguration):
            solve_pnp(obj, uv, K224)

    def test_noise_degrades_gracefully(self, rng):
        pose, obj = random_instance(rng, 10)
        uv = project(pose, K224, obj) + rng.normal(scale=0.5, size=(10, 2))
        est = solve_pnp(obj, uv, K224)
        assert est.is_valid()
        assert reprojection_rmse(est, K224, correspondences_from_arrays(obj, uv)) < 1.0

    def test_refinement_never_worse(self, rng):
        for _ in range(20):
            pose, obj = random_instance(rng, 8)
            uv = project(pose, K224, obj) + rng.normal(scale=1.0, size=(8, 2))
            corr = correspondences_from_arrays(obj, uv)
            raw = solve_pnp(obj, uv, K224, refine=False)
            ref = solve_pnp(obj, uv, K224, refine=True)
            assert reprojection_rmse(ref, K224, corr) <= reprojection_rmse(raw, K224, corr) + 1e-12

    @given(st.integers(0, 2**31 - 1), st.integers(6, 20))
    def test_round_trip_property(self, seed, n):
        rng = np.random.default_rng(seed)
        pose, obj = random_instance(rng, n)
        uv = project(pose, K224, obj)
        est = solve_pnp(obj, uv, K224)
        r = est.rotation
        assert np.allclose(r.T @ r, np.eye(3), atol=1e-9) and abs(np.linalg.det(r) - 1) < 1e-9
        assert np.sqrt(np.mean(np.sum((project(est, K224, obj) - uv) ** 2, axis=1))) < 1e-6

    def test_speed(self, rng):
        inst = [random_instance(rng, 8) for _ in range(200)]
        t0 = time.perf_counter()
        for pose, obj in inst:
            solve_pnp(obj, project(pose, K224, obj), K224)
        assert time.perf_counter() - t0 < 1.0
