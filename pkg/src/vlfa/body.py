"""A 24-joint SMPL-like body: 6D rotations, kinematic tree, rigid skinning.

Coordinates follow the camera convention used throughout the package:
x to the right, y down, z away from the camera.  In the rest pose the body
is upright (head toward -y), faces the camera (front toward -z) and has the
person's left side on +x.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import tensor as tn
from .errors import DegeneracyError, DimensionError
from .tensor import Tensor

N_JOINTS = 24
POSE_DIM = N_JOINTS * 6
SHAPE_DIM = 10
VERTEX_OFFSET = 0.02  # metres, half distance between a joint's two vertices

JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow", "left_wrist", "right_wrist", "left_hand", "right_hand",
)
JOINT = {name: i for i, name in enumerate(JOINT_NAMES)}

PARENTS = np.array([-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21])

# Bone vectors from the parent joint in the rest pose (metres).  Left/right
# pairs are mirror images across x = 0.  Foot-to-head-joint height is 1.61 m,
# roughly 1.7 m to the crown.
REST_OFFSETS = np.array([
    [0.00, 0.00, 0.00],    # pelvis
    [0.09, 0.08, 0.00],    # left_hip
    [-0.09, 0.08, 0.00],   # right_hip
    [0.00, -0.11, 0.00],   # spine1
    [0.00, 0.42, 0.00],    # left_knee
    [0.00, 0.42, 0.00],    # right_knee
    [0.00, -0.13, 0.00],   # spine2
    [0.00, 0.42, 0.00],    # left_ankle
    [0.00, 0.42, 0.00],    # right_ankle
    [0.00, -0.06, 0.00],   # spine3
    [0.00, 0.05, -0.12],   # left_foot
    [0.00, 0.05, -0.12],   # right_foot
    [0.00, -0.22, 0.00],   # neck
    [0.07, -0.13, 0.00],   # left_collar
    [-0.07, -0.13, 0.00],  # right_collar
    [0.00, -0.12, 0.00],   # head
    [0.11, 0.01, 0.00],    # left_shoulder
    [-0.11, 0.01, 0.00],   # right_shoulder
    [0.02, 0.27, 0.00],    # left_elbow
    [-0.02, 0.27, 0.00],   # right_elbow
    [0.00, 0.25, 0.00],    # left_wrist
    [0.00, 0.25, 0.00],    # right_wrist
    [0.00, 0.08, 0.00],    # left_hand
    [0.00, 0.08, 0.00],    # right_hand
])

LEG_JOINTS = (4, 5, 7, 8, 10, 11)
ARM_JOINTS = (16, 17, 18, 19, 20, 21, 22, 23)


def _depths(parents: np.ndarray) -> np.ndarray:
    depth = np.zeros(len(parents), dtype=int)
    for j, p in enumerate(parents):
        if p >= 0:
            depth[j] = depth[p] + 1
    return depth


@dataclass(frozen=True)
class PoseParams:
    theta: np.ndarray  # (144,) 24 x 6D
    beta: np.ndarray  # (10,)
    trans: np.ndarray  # (3,) metres

    def __post_init__(self):
        for name, size in (("theta", POSE_DIM), ("beta", SHAPE_DIM), ("trans", 3)):
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            if arr.size != size:
                raise DimensionError(f"{name} must have {size} entries, got {arr.size}")
            object.__setattr__(self, name, arr)

    @classmethod
    def rest(cls, trans=(0.0, 0.0, 0.0)) -> "PoseParams":
        return cls(np.tile(IDENTITY_6D, N_JOINTS), np.zeros(SHAPE_DIM), np.asarray(trans, dtype=np.float64))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.theta, self.beta, self.trans])

    @classmethod
    def from_vector(cls, v) -> "PoseParams":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:POSE_DIM], v[POSE_DIM:POSE_DIM + SHAPE_DIM], v[POSE_DIM + SHAPE_DIM:])

    def to_json(self) -> dict:
        return {"theta": self.theta.tolist(), "beta": self.beta.tolist(), "trans": self.trans.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "PoseParams":
        return cls(np.array(d["theta"]), np.array(d["beta"]), np.array(d["trans"]))


@dataclass(frozen=True, eq=False)
class BodyTemplate:
    parent: np.ndarray
    rest_offsets: np.ndarray
    shape_dirs: np.ndarray  # (24, 3, 10)
    vertices_rest: np.ndarray  # (48, 3)
    skin_weights: np.ndarray  # (48, 24)
    joint_regressor: np.ndarray  # (24, 48)
    delta: float = field(default=VERTEX_OFFSET)

    @classmethod
    def default(cls, seed: int = 0) -> "BodyTemplate":
        rest_joints = _accumulate(PARENTS, REST_OFFSETS)
        shape_dirs = np.zeros((N_JOINTS, 3, SHAPE_DIM))
        shape_dirs[:, :, 0] = 0.1 * REST_OFFSETS
        for j in LEG_JOINTS:
            shape_dirs[j, :, 1] = 0.1 * REST_OFFSETS[j]
        for j in ARM_JOINTS:
            shape_dirs[j, :, 2] = 0.1 * REST_OFFSETS[j]
        rng = np.random.default_rng(seed)
        shape_dirs[1:, :, 3:] = rng.normal(0.0, 0.004, size=(N_JOINTS - 1, 3, SHAPE_DIM - 3))

        vertex_joint = np.repeat(np.arange(N_JOINTS), 2)
        signs = np.tile([1.0, -1.0], N_JOINTS)
        vertices = rest_joints[vertex_joint] + VERTEX_OFFSET * signs[:, None] * np.array([1.0, 0.0, 0.0])
        skin = np.zeros((2 * N_JOINTS, N_JOINTS))
        skin[np.arange(2 * N_JOINTS), vertex_joint] = 1.0
        regressor = 0.5 * skin.T.copy()
        return cls(PARENTS.copy(), REST_OFFSETS.copy(), shape_dirs, vertices, skin, regressor)

    @cached_property
    def rest_joints(self) -> np.ndarray:
        return _accumulate(self.parent, self.rest_offsets)

    @cached_property
    def vertex_joint(self) -> np.ndarray:
        return np.argmax(self.skin_weights, axis=1)

    @cached_property
    def levels(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Joints grouped by tree depth, each with parent positions inside the previous level."""
        depth = _depths(self.parent)
        groups = [np.flatnonzero(depth == d) for d in range(depth.max() + 1)]
        out = [(groups[0], np.array([], dtype=int))]
        for prev, cur in zip(groups[:-1], groups[1:]):
            where = {j: k for k, j in enumerate(prev)}
            out.append((cur, np.array([where[self.parent[j]] for j in cur])))
        return out

    def validate(self) -> None:
        roots = np.flatnonzero(self.parent < 0)
        if len(roots) != 1:
            raise ValueError("kinematic tree must have exactly one root")
        for j, p in enumerate(self.parent):
            if p >= j and p >= 0:
                raise ValueError("parents must precede children")
        if not np.allclose(self.joint_regressor.sum(axis=1), 1.0):
            raise ValueError("joint regressor rows must sum to 1")
        if not np.allclose(self.skin_weights.sum(axis=1), 1.0):
            raise ValueError("skin weight rows must sum to 1")

    def shaped_offsets(self, beta: np.ndarray) -> np.ndarray:
        """Rest bone vectors after applying shape coefficients, (..., 24, 3)."""
        return self.rest_offsets + np.einsum("jkc,...c->...jk", self.shape_dirs, beta)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {
            "template.parent": self.parent.astype(np.float32),
            "template.rest_offsets": self.rest_offsets,
            "template.shape_dirs": self.shape_dirs,
            "template.vertices_rest": self.vertices_rest,
            "template.skin_weights": self.skin_weights,
            "template.joint_regressor": self.joint_regressor,
        }

    @classmethod
    def from_state_dict(cls, state: dict[str, np.ndarray]) -> "BodyTemplate":
        return cls(
            np.asarray(state["template.parent"]).astype(int),
            np.asarray(state["template.rest_offsets"], dtype=np.float64),
            np.asarray(state["template.shape_dirs"], dtype=np.float64),
            np.asarray(state["template.vertices_rest"], dtype=np.float64),
            np.asarray(state["template.skin_weights"], dtype=np.float64),
            np.asarray(state["template.joint_regressor"], dtype=np.float64),
        )


def _accumulate(parents: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    out = np.zeros_like(offsets, dtype=np.float64)
    for j, p in enumerate(parents):
        out[j] = offsets[j] if p < 0 else out[p] + offsets[j]
    return out


# -- rotations ------------------------------------------------------------
IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


def rot6d_to_matrix(r) -> np.ndarray:
    """Gram-Schmidt map from (..., 6) to rotation matrices (..., 3, 3).

    The two 3-vectors become the first two columns after orthonormalisation;
    the third column is their cross product.
    """
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-1] != 6:
        raise DimensionError(f"6D rotation must have last dimension 6, got {r.shape}")
    a1, a2 = r[..., 0:3], r[..., 3:6]
    n1 = np.linalg.norm(a1, axis=-1, keepdims=True)
    if np.any(n1 <= 1e-8):
        raise DegeneracyError("first 6D column has (near) zero norm")
    b1 = a1 / n1
    u2 = a2 - np.sum(b1 * a2, axis=-1, keepdims=True) * b1
    n2 = np.linalg.norm(u2, axis=-1, keepdims=True)
    if np.any(n2 <= 1e-8):
        raise DegeneracyError("6D columns are (near) parallel")
    b2 = u2 / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=-1)


def matrix_to_rot6d(R) -> np.ndarray:
    R = np.asarray(R)
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def degenerate_6d_mask(theta, min_norm: float = 1e-8, max_cos: float = 0.999) -> np.ndarray:
    """True for each 6D block that is near-zero or has near-parallel columns."""
    blocks = np.asarray(theta, dtype=np.float64).reshape(*np.shape(theta)[:-1], -1, 6)
    a1, a2 = blocks[..., :3], blocks[..., 3:]
    n1 = np.linalg.norm(a1, axis=-1)
    n2 = np.linalg.norm(a2, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.abs(np.sum(a1 * a2, axis=-1)) / (n1 * n2)
    return (n1 <= min_norm) | (n2 <= min_norm) | ~(cos < max_cos)


def axis_rotation(axis: str, angle) -> np.ndarray:
    """Rotation matrices about a coordinate axis; `angle` may be an array."""
    angle = np.asarray(angle, dtype=np.float64)
    c, s = np.cos(angle), np.sin(angle)
    o, z = np.ones_like(angle), np.zeros_like(angle)
    if axis == "x":
        rows = [[o, z, z], [z, c, -s], [z, s, c]]
    elif axis == "y":
        rows = [[c, z, s], [z, o, z], [-s, z, c]]
    elif axis == "z":
        rows = [[c, -s, z], [s, c, z], [z, z, o]]
    else:
        raise ValueError(axis)
    return np.stack([np.stack(row, axis=-1) for row in rows], axis=-2)


def axis_angle_to_matrix(v) -> np.ndarray:
    """Rodrigues formula for rotation vectors (..., 3)."""
    v = np.asarray(v, dtype=np.float64)
    angle = np.linalg.norm(v, axis=-1, keepdims=True)
    axis = np.where(angle > 1e-12, v / np.where(angle > 1e-12, angle, 1.0), 0.0)
    x, y, z = axis[..., 0], axis[..., 1], axis[..., 2]
    zero = np.zeros_like(x)
    K = np.stack([
        np.stack([zero, -z, y], -1),
        np.stack([z, zero, -x], -1),
        np.stack([-y, x, zero], -1),
    ], -2)
    a = angle[..., None]
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + np.sin(a) * K + (1 - np.cos(a)) * (K @ K)


# -- kinematics -----------------------------------------------------------
@dataclass(frozen=True)
class FKResult:
    joints: np.ndarray  # (..., 24, 3)
    rotations: np.ndarray  # world rotations (..., 24, 3, 3)


def fk_arrays(theta, beta, trans, template: BodyTemplate) -> FKResult:
    """Batched forward kinematics on plain arrays (leading batch dims allowed)."""
    theta = np.asarray(theta, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    trans = np.asarray(trans, dtype=np.float64)
    batch = theta.shape[:-1]
    local = rot6d_to_matrix(theta.reshape(*batch, N_JOINTS, 6))
    offsets = template.shaped_offsets(beta)
    world = np.empty_like(local)
    joints = np.empty((*batch, N_JOINTS, 3))
    for j, p in enumerate(template.parent):
        if p < 0:
            world[..., j, :, :] = local[..., j, :, :]
            joints[..., j, :] = trans + offsets[..., j, :]
        else:
            world[..., j, :, :] = world[..., p, :, :] @ local[..., j, :, :]
            joints[..., j, :] = joints[..., p, :] + np.einsum("...ik,...k->...i", world[..., p, :, :], offsets[..., j, :])
    return FKResult(joints, world)


def forward_kinematics(params: PoseParams, template: BodyTemplate) -> FKResult:
    return fk_arrays(params.theta, params.beta, params.trans, template)


def skin_arrays(theta, beta, trans, template: BodyTemplate, fk: FKResult | None = None) -> np.ndarray:
    """Linear blend skinning of the template vertices, (..., 48, 3)."""
    fk = fk if fk is not None else fk_arrays(theta, beta, trans, template)
    beta = np.asarray(beta, dtype=np.float64)
    rest_shaped = _accumulate_batched(template.parent, template.shaped_offsets(beta))
    # shaped rest vertices follow their bound joints
    verts_rest = template.vertices_rest + template.skin_weights @ (rest_shaped - template.rest_joints)
    # per-joint transform taking shaped rest space to posed space, ignoring trans (already in joints)
    R = fk.rotations
    t = fk.joints - np.einsum("...jik,...jk->...ji", R, rest_shaped)
    per_joint = np.einsum("...jik,...vk->...jvi", R, verts_rest) + t[..., :, None, :]
    return np.einsum("vj,...jvi->...vi", template.skin_weights, per_joint)


def _accumulate_batched(parents: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    out = np.empty_like(offsets)
    for j, p in enumerate(parents):
        out[..., j, :] = offsets[..., j, :] if p < 0 else out[..., p, :] + offsets[..., j, :]
    return out


def skin_vertices(params: PoseParams, template: BodyTemplate) -> np.ndarray:
    return skin_arrays(params.theta, params.beta, params.trans, template)


def joints_from_vertices(M, W) -> np.ndarray:
    """Joints as a linear map of vertices, J = W M."""
    M = np.asarray(M)
    W = np.asarray(W)
    if W.shape[-1] != M.shape[-2]:
        raise DimensionError(f"regressor {W.shape} does not match vertices {M.shape}")
    return W @ M


# -- differentiable kinematics --------------------------------------------
def _cross(a: Tensor, b: Tensor) -> Tensor:
    i1, i2 = [1, 2, 0], [2, 0, 1]
    return tn.take(a, i1, -1) * tn.take(b, i2, -1) - tn.take(a, i2, -1) * tn.take(b, i1, -1)


def rot6d_to_matrix_t(r: Tensor) -> Tensor:
    """Differentiable counterpart of `rot6d_to_matrix` for tensors (..., 6)."""
    if np.any(degenerate_6d_mask(r.data, max_cos=1.0 - 1e-12)):
        raise DegeneracyError("degenerate 6D block in differentiable FK")
    a1, a2 = r[..., 0:3], r[..., 3:6]
    b1 = a1 / tn.l2norm(a1, -1, keepdims=True).broadcast_to(a1.shape)
    proj = tn.tsum(b1 * a2, -1, keepdims=True).broadcast_to(a1.shape)
    u2 = a2 - b1 * proj
    b2 = u2 / tn.l2norm(u2, -1, keepdims=True).broadcast_to(u2.shape)
    b3 = _cross(b1, b2)
    return tn.stack([b1, b2, b3], axis=-1)


def fk_tensor(theta: Tensor, beta: Tensor, trans: Tensor, template: BodyTemplate) -> Tensor:
    """Differentiable batched FK; theta (B,144), beta (B,10), trans (B,3) -> joints (B,24,3)."""
    B = theta.shape[0]
    local = rot6d_to_matrix_t(theta.reshape(B, N_JOINTS, 6))
    dirs = Tensor(template.shape_dirs.transpose(2, 0, 1).reshape(SHAPE_DIM, N_JOINTS * 3))
    offsets = (beta @ dirs).reshape(B, N_JOINTS, 3) + Tensor(np.broadcast_to(template.rest_offsets, (B, N_JOINTS, 3)))
    levels = template.levels
    root = levels[0][0]
    world = tn.take(local, root, 1)
    pos = trans.reshape(B, 1, 3) + tn.take(offsets, root, 1)
    positions, order = [pos], [root]
    for idx, parent_local in levels[1:]:
        n = len(idx)
        parent_rot = tn.take(world, parent_local, 1)
        bone = tn.take(offsets, idx, 1).reshape(B, n, 3, 1)
        pos = tn.take(pos, parent_local, 1) + (parent_rot @ bone).reshape(B, n, 3)
        world = parent_rot @ tn.take(local, idx, 1)
        positions.append(pos)
        order.append(idx)
    stacked = tn.concat(positions, axis=1)
    inverse = np.argsort(np.concatenate(order))
    return tn.take(stacked, inverse, 1)
