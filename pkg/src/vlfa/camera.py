"""Pinhole projection and the analytic gradient of the keypoint reprojection loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError, ContractError

MIN_DEPTH = 0.01


@dataclass(frozen=True)
class Camera:
    focal: float = 500.0
    principal: tuple[float, float] = (256.0, 256.0)
    image_size: tuple[int, int] = (512, 512)

    def __post_init__(self):
        if self.focal <= 0:
            raise ContractError("focal length must be positive")
        w, h = self.image_size
        cx, cy = self.principal
        if not (0 <= cx <= w and 0 <= cy <= h):
            raise ContractError("principal point must lie inside the image")

    def to_json(self) -> dict:
        return {"focal": self.focal, "principal": list(self.principal), "image_size": list(self.image_size)}

    @classmethod
    def from_json(cls, d: dict) -> "Camera":
        return cls(float(d["focal"]), tuple(map(float, d["principal"])), tuple(map(int, d["image_size"])))


@dataclass(frozen=True)
class Keypoints2D:
    uv: np.ndarray  # (24, 2) pixels
    confidence: np.ndarray  # (24,)

    def __post_init__(self):
        conf = np.asarray(self.confidence, dtype=np.float64)
        if np.any(conf < 0) or np.any(conf > 1):
            raise ContractError("confidences must lie in [0, 1]")
        object.__setattr__(self, "uv", np.asarray(self.uv, dtype=np.float64))
        object.__setattr__(self, "confidence", conf)


def _check_depth(z: np.ndarray) -> None:
    if np.any(z <= MIN_DEPTH):
        raise BehindCameraError(f"point depth {float(np.min(z)):.4f} m is not in front of the camera")


def project(camera: Camera, joints) -> np.ndarray:
    """Perspective projection of (..., 3) points to (..., 2) pixels."""
    joints = np.asarray(joints, dtype=np.float64)
    z = joints[..., 2]
    _check_depth(z)
    cx, cy = camera.principal
    u = camera.focal * joints[..., 0] / z + cx
    v = camera.focal * joints[..., 1] / z + cy
    return np.stack([u, v], axis=-1)


def reprojection_loss(camera: Camera, joints, uv, confidence) -> np.ndarray:
    """Sum over joints of ||c_j (proj_j - uv_j)||^2; batched over leading dims."""
    resid = (project(camera, joints) - uv) * np.asarray(confidence)[..., None]
    return np.sum(resid**2, axis=(-1, -2))


def keypoint_gradient(camera: Camera, joints, uv, confidence) -> np.ndarray:
    """Gradient of `reprojection_loss` with respect to the 3D joints, same shape as `joints`.

    Each joint only influences its own residual, so the Jacobian is block
    diagonal and the gradient is computed per joint in closed form.
    """
    joints = np.asarray(joints, dtype=np.float64)
    w = np.asarray(confidence, dtype=np.float64) ** 2
    x, y, z = joints[..., 0], joints[..., 1], joints[..., 2]
    r = project(camera, joints) - uv
    f = camera.focal
    ru, rv = 2 * w * r[..., 0], 2 * w * r[..., 1]
    gx = ru * f / z
    gy = rv * f / z
    gz = -(ru * f * x + rv * f * y) / (z * z)
    return np.stack([gx, gy, gz], axis=-1)


def projection_jacobian(camera: Camera, joints) -> np.ndarray:
    """Full (2N x 3N) Jacobian of the stacked projections of N joints."""
    joints = np.asarray(joints, dtype=np.float64).reshape(-1, 3)
    _check_depth(joints[:, 2])
    n = len(joints)
    jac = np.zeros((2 * n, 3 * n))
    f = camera.focal
    for j, (x, y, z) in enumerate(joints):
        jac[2 * j, 3 * j:3 * j + 3] = [f / z, 0.0, -f * x / z**2]
        jac[2 * j + 1, 3 * j:3 * j + 3] = [0.0, f / z, -f * y / z**2]
    return jac
