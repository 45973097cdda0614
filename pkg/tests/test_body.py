import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fd import rel_error
from vlfa import tensor as tn
from vlfa.body import (
    IDENTITY_6D, N_JOINTS, POSE_DIM, SHAPE_DIM, BodyTemplate, PoseParams, axis_angle_to_matrix, axis_rotation,
    degenerate_6d_mask, fk_arrays, fk_tensor, forward_kinematics, joints_from_vertices, matrix_to_rot6d,
    rot6d_to_matrix, skin_vertices,
)
from vlfa.errors import DegeneracyError, DimensionError
from vlfa.tensor import Tensor, precision


def random_rotations(rng, n):
    return axis_angle_to_matrix(rng.normal(size=(n, 3)) * rng.uniform(0, np.pi, size=(n, 1)))


def random_params(rng, n):
    theta = matrix_to_rot6d(random_rotations(rng, n * N_JOINTS)).reshape(n, POSE_DIM)
    return theta, rng.normal(0, 0.5, size=(n, SHAPE_DIM)), rng.normal(0, 1, size=(n, 3))


def test_rot6d_canonical_and_scale_invariance():
    assert np.allclose(rot6d_to_matrix(IDENTITY_6D), np.eye(3))
    assert np.allclose(rot6d_to_matrix([2, 0, 0, 0, 3, 0]), np.eye(3))


def test_rot6d_round_trip(rng):
    R = random_rotations(rng, 1000)
    assert np.max(np.abs(rot6d_to_matrix(matrix_to_rot6d(R)) - R)) < 1e-5


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=6, max_size=6))
def test_rot6d_output_is_proper_rotation(r):
    r = np.array(r)
    if degenerate_6d_mask(r).any():
        return
    R = rot6d_to_matrix(r)
    assert np.max(np.abs(R.T @ R - np.eye(3))) < 1e-5
    assert abs(np.linalg.det(R) - 1) < 1e-4
    assert np.allclose(R[:, 2], np.cross(R[:, 0], R[:, 1]))


def test_rot6d_degenerate_inputs():
    with pytest.raises(DegeneracyError):
        rot6d_to_matrix(np.zeros(6))
    with pytest.raises(DegeneracyError):
        rot6d_to_matrix([1, 0, 0, 2, 0, 0])
    with pytest.raises(DimensionError):
        rot6d_to_matrix(np.ones(5))


def test_template_invariants(template):
    template.validate()
    assert np.allclose(template.joint_regressor @ template.vertices_rest, template.rest_joints, atol=0)
    height = template.rest_joints[:, 1].max() - template.rest_joints[:, 1].min()
    assert 1.4 < height < 1.9


def test_fk_rest_pose_and_translation(template):
    rest = fk_arrays(np.tile(IDENTITY_6D, N_JOINTS), np.zeros(SHAPE_DIM), np.zeros(3), template).joints
    assert np.allclose(rest, template.rest_joints)
    shifted = fk_arrays(np.tile(IDENTITY_6D, N_JOINTS), np.zeros(SHAPE_DIM), np.array([0, 0, 1.0]), template).joints
    assert np.allclose(shifted, rest + [0, 0, 1])


def test_fk_root_rotation_rotates_rest_pose(template):
    Rz = axis_rotation("z", np.pi / 2)
    theta = np.tile(IDENTITY_6D, N_JOINTS)
    theta[:6] = matrix_to_rot6d(Rz)
    joints = fk_arrays(theta, np.zeros(SHAPE_DIM), np.zeros(3), template).joints
    root = template.rest_joints[0]
    assert np.allclose(joints, (template.rest_joints - root) @ Rz.T + root)


def test_translation_equivariance_and_beta_affinity(template, rng):
    theta, beta, trans = random_params(rng, 20)
    a = fk_arrays(theta, beta, trans, template).joints
    b = fk_arrays(theta, beta, np.zeros_like(trans), template).joints
    assert np.allclose(a, b + trans[:, None, :], atol=1e-12)
    j0 = fk_arrays(theta, beta * 0, trans, template).joints
    j1 = fk_arrays(theta, beta, trans, template).joints
    j2 = fk_arrays(theta, beta * 2, trans, template).joints
    assert np.allclose(j2 - j1, j1 - j0, atol=1e-12)


def test_skinning_rest_and_j_equals_wm(template, rng):
    rest = skin_vertices(PoseParams.rest((0.1, 0.2, 3.0)), template)
    assert np.allclose(rest, template.vertices_rest + [0.1, 0.2, 3.0])
    theta, beta, trans = random_params(rng, 500)
    for i in range(500):
        p = PoseParams(theta[i], beta[i], trans[i])
        M = skin_vertices(p, template)
        J = forward_kinematics(p, template).joints
        assert np.max(np.abs(joints_from_vertices(M, template.joint_regressor) - J)) < 1e-5
        pair = np.linalg.norm(M[0::2] - M[1::2], axis=-1)
        assert np.allclose(pair, 2 * template.delta)


def test_joints_from_vertices(template, rng):
    assert np.allclose(joints_from_vertices(template.vertices_rest, template.joint_regressor), template.rest_joints)
    M = rng.normal(size=(48, 3))
    W = np.zeros((24, 48))
    W[np.arange(24), np.arange(24) * 2] = 1
    assert np.array_equal(joints_from_vertices(M, W), M[0::2])
    avg = joints_from_vertices(M, template.joint_regressor)
    assert np.allclose(avg, [(M[2 * j] + M[2 * j + 1]) / 2 for j in range(24)])
    with pytest.raises(DimensionError):
        joints_from_vertices(M[:40], template.joint_regressor)


def test_tensor_fk_matches_array_fk_and_gradient(template, rng):
    theta, beta, trans = random_params(rng, 3)
    with precision(np.float64):
        th = Tensor(theta, requires_grad=True)
        j = fk_tensor(th, Tensor(beta), Tensor(trans), template)
        assert np.allclose(j.data, fk_arrays(theta, beta, trans, template).joints, atol=1e-10)
        w = rng.normal(size=j.shape)
        tn.backward(tn.tsum(j * Tensor(w)))
        v = rng.normal(size=theta.shape)
        h = 1e-6
        num = (np.sum(fk_arrays(theta + h * v, beta, trans, template).joints * w)
               - np.sum(fk_arrays(theta - h * v, beta, trans, template).joints * w)) / (2 * h)
        assert rel_error(np.sum(th.grad * v), num) < 1e-6


def test_template_state_round_trip(template):
    again = BodyTemplate.from_state_dict(template.state_dict())
    assert np.array_equal(again.parent, template.parent)
    assert np.array_equal(again.shape_dirs, template.shape_dirs)
