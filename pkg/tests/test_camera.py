import numpy as np
import pytest

from fd import numeric_grad, rel_error
from vlfa.camera import Camera, keypoint_gradient, project, projection_jacobian, reprojection_loss
from vlfa.errors import BehindCameraError, ContractError


def random_scene(rng, n=24):
    joints = np.column_stack([rng.uniform(-1, 1, n), rng.uniform(-1, 1, n), rng.uniform(2, 5, n)])
    uv = rng.uniform(0, 512, size=(n, 2))
    conf = rng.uniform(0, 1, size=n)
    return joints, uv, conf


def test_projection_examples(camera):
    assert np.allclose(project(camera, [0, 0, 2]), [256, 256])
    assert np.allclose(project(camera, [1, 1, 2]), [506, 506])
    p = np.array([0.3, -0.2, 3.0])
    assert np.allclose(project(camera, p), project(camera, 2 * p))


def test_behind_camera_and_invalid_camera(camera):
    with pytest.raises(BehindCameraError):
        project(camera, [0, 0, 0.005])
    with pytest.raises(BehindCameraError):
        keypoint_gradient(camera, np.array([[0, 0, -1.0]]), np.zeros((1, 2)), np.ones(1))
    with pytest.raises(ContractError):
        Camera(focal=-1)
    with pytest.raises(ContractError):
        Camera(principal=(600.0, 10.0))


def test_gradient_zero_at_minimum_and_when_masked(camera, rng):
    joints, uv, conf = random_scene(rng)
    assert np.allclose(keypoint_gradient(camera, joints, project(camera, joints), conf), 0)
    assert np.allclose(keypoint_gradient(camera, joints, uv, np.zeros(24)), 0)
    conf[:5] = 0
    assert np.allclose(keypoint_gradient(camera, joints, uv, conf)[:5], 0)


def test_gradient_matches_finite_differences(camera, rng):
    for _ in range(100):
        joints, uv, conf = random_scene(rng)
        g = keypoint_gradient(camera, joints, uv, conf)
        num = numeric_grad(lambda j: float(reprojection_loss(camera, j, uv, conf)), joints, 1e-6)
        assert rel_error(g, num) < 1e-3


def test_small_step_against_gradient_never_increases_loss(camera, rng):
    for _ in range(200):
        joints, uv, conf = random_scene(rng)
        g = keypoint_gradient(camera, joints, uv, conf)
        step = joints - 1e-6 * g / max(np.max(np.abs(g)), 1.0)
        assert reprojection_loss(camera, step, uv, conf) <= reprojection_loss(camera, joints, uv, conf)


def test_projection_jacobian_is_block_diagonal(camera, rng):
    joints, _, _ = random_scene(rng, 5)
    jac = projection_jacobian(camera, joints)
    for a in range(5):
        for b in range(5):
            if a != b:
                assert np.all(jac[2 * a:2 * a + 2, 3 * b:3 * b + 3] == 0)
    num = numeric_grad(lambda j: float(np.sum(project(camera, j.reshape(-1, 3))[:, 0])), joints.reshape(-1), 1e-6)
    assert rel_error(jac[0::2].sum(axis=0), num) < 1e-6
