import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from armpose.errors import ConfigError, DimensionMismatch
from armpose.geometry import RigidPose, axis_angle_to_matrix
from armpose.kinematics import (
    KinematicChain,
    Link,
    complete_joints,
    forward_kinematics,
    forward_kinematics_jacobian,
    get_chain,
    last_joint_invariance_check,
    panda_like_chain,
    planar_arm,
)


def random_chain(rng, n=3):
    links = []
    for _ in range(n):
        fixed = RigidPose.from_axis_angle(rng.normal(size=3), rng.uniform(-0.3, 0.3, size=3))
        links.append(Link(fixed, rng.normal(size=3)))
    return KinematicChain(tuple(links), "random")


def homogeneous_fk_oracle(chain, q):
    """Chain explicit 4x4 matrices: joint rotation then the link's fixed transform."""
    out = [np.zeros(3)]
    t = np.eye(4)
    for link, theta in zip(chain.links, q):
        a = link.axis
        kx = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
        rot = np.eye(4)
        rot[:3, :3] = np.eye(3) + np.sin(theta) * kx + (1 - np.cos(theta)) * kx @ kx
        fixed = np.eye(4)
        fixed[:3, :3] = link.fixed.rotation
        fixed[:3, 3] = link.fixed.translation
        t = t @ rot @ fixed
        out.append(t[:3, 3].copy())
    return np.array(out)


def test_base_at_origin(rng):
    for chain in (planar_arm(3), planar_arm(5), panda_like_chain(), random_chain(rng)):
        q = rng.uniform(-np.pi, np.pi, chain.n)
        np.testing.assert_array_equal(forward_kinematics(chain, q)[0], np.zeros(3))


def test_quarter_turn_unit_link():
    chain = KinematicChain((Link(RigidPose(np.eye(3), [1.0, 0, 0]), [0, 0, 1]),))
    np.testing.assert_allclose(forward_kinematics(chain, [np.pi / 2])[1], [0, 1, 0], atol=1e-12)


def test_matches_matrix_oracle(rng):
    for _ in range(100):
        chain = random_chain(rng, 3)
        q = rng.uniform(-np.pi, np.pi, 3)
        np.testing.assert_allclose(forward_kinematics(chain, q), homogeneous_fk_oracle(chain, q), atol=1e-12)


def test_k_equals_n_plus_one():
    for chain in (planar_arm(3), planar_arm(5), panda_like_chain()):
        assert chain.k == chain.n + 1


def test_axes_unit_norm(rng):
    chain = random_chain(rng, 4)
    for link in chain.links:
        assert abs(np.linalg.norm(link.axis) - 1) < 1e-12


def test_wrong_joint_count():
    with pytest.raises(DimensionMismatch):
        forward_kinematics(planar_arm(3), [0.0, 0.0])


def test_zero_axis_rejected():
    with pytest.raises(ConfigError):
        Link(RigidPose.identity(), [0, 0, 0])


def test_last_joint_invariance_toy():
    assert last_joint_invariance_check(planar_arm(3), [0.4, 0.7, 0.0])
    assert last_joint_invariance_check(planar_arm(5), [0.4, 0.7, -0.3, 1.0, 0.0])


def test_last_joint_off_axis_counterexample():
    chain = KinematicChain(
        (
            Link(RigidPose(np.eye(3), [0.3, 0, 0]), [0, 0, 1]),
            Link(RigidPose(np.eye(3), [0.2, 0.0, 0]), [0, 0, 1]),
        )
    )
    assert not last_joint_invariance_check(chain, [0.1, 0.0])


def test_last_joint_invariance_panda(rng):
    chain = panda_like_chain()
    q = rng.uniform(-1, 1, 7)
    base = forward_kinematics(chain, q)
    for angle in rng.uniform(-np.pi, np.pi, 10):
        q2 = q.copy()
        q2[-1] = angle
        np.testing.assert_allclose(forward_kinematics(chain, q2), base, atol=1e-9)
    assert last_joint_invariance_check(chain, q)


def test_panda_home_pose():
    # all joints zero: the arm stacks up the z axis with the DH offsets
    pts = forward_kinematics(panda_like_chain(), np.zeros(7))
    np.testing.assert_allclose(pts[-1], [0.088, 0.0, 0.333 + 0.316 + 0.384 - 0.107], atol=1e-12)


@given(st.integers(0, 6), st.lists(st.floats(-4, 4), min_size=7, max_size=7))
def test_periodicity(i, q):
    chain = panda_like_chain()
    q = np.array(q)
    q2 = q.copy()
    q2[i] += 2 * np.pi
    np.testing.assert_allclose(forward_kinematics(chain, q), forward_kinematics(chain, q2), atol=1e-9)


@given(st.integers(0, 2**31 - 1))
def test_lipschitz_bound(seed):
    rng = np.random.default_rng(seed)
    chain = random_chain(rng, 4)
    q = rng.uniform(-np.pi, np.pi, 4)
    d = rng.normal(scale=1e-3, size=4)
    moved = np.linalg.norm(forward_kinematics(chain, q + d) - forward_kinematics(chain, q), axis=1).max()
    assert moved <= chain.total_length * np.linalg.norm(d) + 1e-12


def test_jacobian_finite_differences(rng):
    for chain in (planar_arm(3), panda_like_chain(), random_chain(rng, 5)):
        q = rng.uniform(-1, 1, chain.n)
        _, jac = forward_kinematics_jacobian(chain, q)
        h = 1e-6
        for j in range(chain.n):
            e = np.zeros(chain.n)
            e[j] = h
            fd = (forward_kinematics(chain, q + e) - forward_kinematics(chain, q - e)) / (2 * h)
            np.testing.assert_allclose(jac[:, :, j], fd, atol=1e-8)


def test_chain_file_round_trip(tmp_path, rng):
    chain = random_chain(rng, 4)
    chain.save(tmp_path / "c.json")
    loaded = get_chain(str(tmp_path / "c.json"))
    q = rng.uniform(-1, 1, 4)
    np.testing.assert_allclose(forward_kinematics(loaded, q), forward_kinematics(chain, q), atol=1e-12)


def test_chain_file_field_names(tmp_path):
    planar_arm(3).save(tmp_path / "c.json")
    import json

    entry = json.loads((tmp_path / "c.json").read_text())["links"][0]
    assert {"translation", "rotation_axis_angle", "joint_axis"} <= set(entry)


def test_malformed_chain(tmp_path):
    (tmp_path / "bad.json").write_text('{"links": [{"translation": [1, 0, 0]}]}')
    with pytest.raises(ConfigError):
        get_chain(str(tmp_path / "bad.json"))
    with pytest.raises(ConfigError):
        get_chain("no-such-chain")


def test_complete_joints():
    np.testing.assert_array_equal(complete_joints(planar_arm(3), [0.1, 0.2]), [0.1, 0.2, 0.0])
    with pytest.raises(DimensionMismatch):
        complete_joints(planar_arm(3), [0.1, 0.2, 0.3])


def test_planar_keypoints_coplanar(rng):
    pts = forward_kinematics(planar_arm(5), rng.uniform(-2, 2, 5))
    np.testing.assert_allclose(pts[:, 2], 0.0, atol=1e-15)
