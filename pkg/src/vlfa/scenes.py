"""Synthetic scenes: poses, cameras, noisy detections, stand-in image features, part descriptions."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .body import (
    IDENTITY_6D,
    JOINT,
    N_JOINTS,
    SHAPE_DIM,
    BodyTemplate,
    PoseParams,
    axis_rotation,
    fk_arrays,
    matrix_to_rot6d,
)
from .camera import Camera, Keypoints2D, project
from .errors import BehindCameraError, VocabularyError
from .seeding import substream

FEATURE_DIM = 64
MAX_TOKENS = 12

# -- pose sampling --------------------------------------------------------
DEG = np.pi / 180.0

# Per-joint limits in degrees: (flexion about x, abduction about z, twist about y).
LIMB_LIMITS = (120.0, 45.0, 45.0)
SPINE_LIMITS = (30.0, 30.0, 30.0)

# Arm modes: shoulder flexion (negative = forward), outward abduction, elbow bend.
ARM_MODES = (
    (0.0, 0.0, 0.0),       # hanging
    (-85.0, 5.0, 10.0),    # reaching forward
    (-118.0, 10.0, 15.0),  # raised overhead
    (0.0, 44.0, 20.0),     # out to the side
    (-45.0, 10.0, 110.0),  # forearm across the front
    (-60.0, -40.0, 60.0),  # across the body
    (-110.0, 35.0, 105.0), # hand up, elbow bent
)
# Leg modes, (hip flexion, outward abduction, knee bend) for (left, right).
LEG_MODES = (
    ((0.0, 0.0, 0.0), (0.0, 0.0, 0.0)),          # standing
    ((-25.0, 0.0, 15.0), (15.0, 0.0, 35.0)),     # walking
    ((0.0, 25.0, 5.0), (0.0, 25.0, 5.0)),        # wide stance
    ((-90.0, 10.0, 95.0), (-90.0, 10.0, 95.0)),  # seated
    ((-10.0, -25.0, 10.0), (0.0, 5.0, 5.0)),     # one leg crossed in front
    ((-70.0, 5.0, 100.0), (20.0, 0.0, 10.0)),    # lunge
    ((-110.0, 15.0, 118.0), (-110.0, 15.0, 118.0)),  # squat
)
TORSO_MODES = (0.0, 12.0, -8.0, 0.0)  # per-spine-joint flexion; mode 3 twists instead
HEAD_MODES = ((0.0, 0.0), (35.0, 0.0), (-35.0, 0.0), (0.0, 25.0))  # (yaw, roll)

# Whole-body activities: (left arm mode, right arm mode, leg mode).  Limb modes
# are correlated through the activity, as in real motion data.
ACTIVITIES = (
    (0, 0, 0),  # idle standing
    (0, 0, 1),  # walking
    (0, 6, 0),  # waving
    (1, 1, 0),  # reaching forward
    (2, 2, 0),  # both arms raised
    (3, 3, 2),  # arms out, wide stance
    (4, 4, 3),  # seated
    (5, 5, 0),  # arms folded across the body
    (1, 1, 6),  # squat with arms forward
    (3, 3, 5),  # lunge
    (4, 0, 4),  # standing with legs crossed
    (1, 0, 1),  # pointing while walking
)
ASYMMETRIC = frozenset(i for i, (a, b, _) in enumerate(ACTIVITIES) if a != b)
# chance that one arm / the legs leave the activity template for a random mode
ARM_DEVIATION = 0.25
LEG_DEVIATION = 0.1

JITTER = 8.0
MINOR_JITTER = 4.0

# +1 means outward abduction is a positive rotation about z for that side
SIDE_SIGN = {"left": -1.0, "right": 1.0}


def _local_rotation(flex, abd, twist) -> np.ndarray:
    return axis_rotation("z", abd * DEG) @ axis_rotation("x", flex * DEG) @ axis_rotation("y", twist * DEG)


def _clip(v, lim):
    return float(np.clip(v, -lim, lim))


def sample_pose(rng, yaw_range_deg: float = 180.0) -> PoseParams:
    """Draw a plausible pose: an activity template plus per-joint jitter, clipped to joint limits.

    `rng` needs `uniform`, `normal` and `integers`; a stub that returns the
    in-range value closest to zero for every draw yields the rest pose at
    trans (0, 0, 3).
    """
    angles = np.zeros((N_JOINTS, 3))  # flex, abd, twist in degrees

    def jit(scale=JITTER):
        return float(rng.normal(0.0, scale))

    activity = int(rng.integers(0, len(ACTIVITIES)))
    left_arm, right_arm, leg_mode = ACTIVITIES[activity]
    arm_modes = [left_arm, right_arm]
    if activity in ASYMMETRIC and rng.uniform(0.0, 1.0) >= 0.5:
        arm_modes = arm_modes[::-1]
    if rng.uniform(0.0, 1.0) >= 1.0 - ARM_DEVIATION:
        arm_modes[int(rng.integers(0, 2))] = int(rng.integers(0, len(ARM_MODES)))
    if rng.uniform(0.0, 1.0) >= 1.0 - LEG_DEVIATION:
        leg_mode = int(rng.integers(0, len(LEG_MODES)))
    for side, mode in zip(("left", "right"), arm_modes):
        sh_flex, sh_abd, elbow = ARM_MODES[mode]
        s = SIDE_SIGN[side]
        fl, ab, tw = LIMB_LIMITS
        angles[JOINT[f"{side}_collar"]] = [_clip(jit(MINOR_JITTER), 15), s * _clip(jit(MINOR_JITTER), 15), 0.0]
        angles[JOINT[f"{side}_shoulder"]] = [
            _clip(sh_flex + jit(), fl), s * _clip(sh_abd + jit(), ab), _clip(jit(MINOR_JITTER), tw)
        ]
        angles[JOINT[f"{side}_elbow"]] = [-float(np.clip(elbow + jit(), 0.0, fl)), 0.0, _clip(jit(MINOR_JITTER), tw)]
        angles[JOINT[f"{side}_wrist"]] = [_clip(jit(MINOR_JITTER), 30), _clip(jit(MINOR_JITTER), 30), 0.0]
        angles[JOINT[f"{side}_hand"]] = [_clip(jit(MINOR_JITTER), 30), 0.0, 0.0]

    mirror = leg_mode in (1, 4, 5) and rng.uniform(0.0, 1.0) >= 0.5
    legs = LEG_MODES[leg_mode]
    if mirror:
        legs = legs[::-1]
    for side, (hip_flex, hip_abd, knee) in zip(("left", "right"), legs):
        s = SIDE_SIGN[side]
        fl, ab, tw = LIMB_LIMITS
        angles[JOINT[f"{side}_hip"]] = [_clip(hip_flex + jit(), fl), s * _clip(hip_abd + jit(), ab), _clip(jit(MINOR_JITTER), tw)]
        angles[JOINT[f"{side}_knee"]] = [float(np.clip(knee + jit(), 0.0, fl)), 0.0, 0.0]
        angles[JOINT[f"{side}_ankle"]] = [_clip(jit(MINOR_JITTER), 30), _clip(jit(MINOR_JITTER), 20), 0.0]
        angles[JOINT[f"{side}_foot"]] = [_clip(jit(MINOR_JITTER), 20), 0.0, 0.0]

    torso_mode = int(rng.integers(0, len(TORSO_MODES)))
    twist = 12.0 * (1.0 if rng.uniform(0.0, 1.0) >= 0.5 else -1.0) if torso_mode == 3 else 0.0
    for name in ("spine1", "spine2", "spine3"):
        fl, ab, tw = SPINE_LIMITS
        angles[JOINT[name]] = [
            _clip(TORSO_MODES[torso_mode] + jit(MINOR_JITTER), fl),
            _clip(jit(MINOR_JITTER), ab),
            _clip(twist + jit(MINOR_JITTER), tw),
        ]

    head_mode = int(rng.integers(0, len(HEAD_MODES)))
    yaw, roll = HEAD_MODES[head_mode]
    angles[JOINT["neck"]] = [_clip(jit(MINOR_JITTER), 30), _clip(roll / 2 + jit(MINOR_JITTER), 30), _clip(yaw / 2 + jit(MINOR_JITTER), 45)]
    angles[JOINT["head"]] = [_clip(jit(MINOR_JITTER), 30), _clip(roll / 2 + jit(MINOR_JITTER), 30), _clip(yaw / 2 + jit(MINOR_JITTER), 45)]

    R = _local_rotation(angles[:, 0], angles[:, 1], angles[:, 2])
    R[0] = axis_rotation("y", float(rng.uniform(-yaw_range_deg, yaw_range_deg)) * DEG)
    theta = matrix_to_rot6d(R).reshape(-1)

    beta = np.clip(np.array([rng.normal(0.0, 0.5) for _ in range(SHAPE_DIM)]), -2.0, 2.0)
    trans = np.array([rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), 3.0 + rng.uniform(-1.0, 2.0)])
    return PoseParams(theta, beta, trans)


# -- observation ----------------------------------------------------------
@dataclass(frozen=True)
class NoiseConfig:
    sigma_px: float = 3.0
    p_occ: float = 0.15


CONFIDENCE_POOLS = (
    (0, 3, 6, 9),           # torso
    (12, 13, 14, 15),       # neck and head
    (16, 18), (20, 22),     # left upper / lower arm
    (17, 19), (21, 23),     # right upper / lower arm
    (1, 4, 7, 10),          # left leg
    (2, 5, 8, 11),          # right leg
)


def feature_vector(uv: np.ndarray, confidence: np.ndarray, bbox: np.ndarray, camera: Camera) -> np.ndarray:
    """64-d stand-in image feature computed from detections and the box."""
    x, y, w, h = bbox
    cx, cy = x + w / 2, y + h / 2
    s = max(w, h)
    norm = (uv - [cx, cy]) / s
    norm[confidence <= 0] = 0.0
    pools = [float(np.mean(confidence[list(g)])) for g in CONFIDENCE_POOLS]
    W, H = camera.image_size
    box = [cx / W, cy / H, w / W, h / H]
    return np.concatenate([norm.reshape(-1), pools, box, np.zeros(4)])


def bounding_box(points: np.ndarray, pad: float = 0.1) -> np.ndarray:
    lo, hi = points.min(axis=0), points.max(axis=0)
    size = np.maximum(hi - lo, 1.0)
    lo = lo - pad * size
    size = size * (1 + 2 * pad)
    return np.array([lo[0], lo[1], size[0], size[1]])


def observe(gt: PoseParams, camera: Camera, noise: NoiseConfig, rng, template: BodyTemplate):
    """Noisy 2D detections, a person box and the feature vector for one ground-truth pose."""
    joints = fk_arrays(gt.theta, gt.beta, gt.trans, template).joints
    exact = project(camera, joints)
    uv = exact + rng.normal(0.0, noise.sigma_px, size=exact.shape) if noise.sigma_px > 0 else exact.copy()
    occluded = rng.uniform(0.0, 1.0, size=N_JOINTS) < noise.p_occ
    confidence = np.where(occluded, 0.0, rng.uniform(0.7, 1.0, size=N_JOINTS))
    bbox = bounding_box(np.concatenate([exact, uv[~occluded]], axis=0))
    center = bbox[:2] + bbox[2:] / 2
    uv[occluded] = center
    kp = Keypoints2D(uv, confidence)
    return kp, bbox, feature_vector(uv, confidence, bbox, camera)


# -- descriptions ---------------------------------------------------------
PART_STATES = {
    "global": ("standing", "sitting-like", "lying-like"),
    "facing": ("away", "turned-left", "turned-right"),
    "torso": ("upright", "leaning-forward", "leaning-back", "twisted"),
    "head": ("neutral", "turned-left", "turned-right", "tilted"),
    "left_arm": ("raised", "lowered", "bent", "extended", "crossed-midline"),
    "right_arm": ("raised", "lowered", "bent", "extended", "crossed-midline"),
    "left_leg": ("straight", "bent", "crossed", "wide-stance"),
    "right_leg": ("straight", "bent", "crossed", "wide-stance"),
}
VOCAB: tuple[tuple[str, str], ...] = tuple((p, s) for p, states in PART_STATES.items() for s in states)
TOKEN_ID = {tok: i for i, tok in enumerate(VOCAB)}

BENT_DEG = 90.0
LEAN_FORWARD_DEG = 20.0
LEAN_BACK_DEG = 15.0
TWIST_DEG = 20.0
HEAD_DEG = 20.0
EXTENDED_DEG = 45.0  # upper arm away from hanging straight down
FACING_DEG = 45.0
WIDE_STANCE_M = 0.30
LYING_DEG = 60.0
SITTING_PELVIS_M = 0.65
SITTING_KNEE_DEG = 60.0


def token_id(part: str, state: str) -> int:
    try:
        return TOKEN_ID[(part, state)]
    except KeyError:
        raise VocabularyError(f"unknown token {part}:{state}") from None


def token_names(ids: Iterable[int]) -> list[str]:
    out = []
    for i in ids:
        if not 0 <= int(i) < len(VOCAB):
            raise VocabularyError(f"unknown token id {i}")
        out.append(":".join(VOCAB[int(i)]))
    return out


def _angle(u, v) -> float:
    c = np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v))
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


_CANONICAL = BodyTemplate.default()


def describe(gt: PoseParams) -> list[int]:
    """Rule-based part labels from the pose alone (shape and translation are ignored)."""
    fk = fk_arrays(gt.theta, np.zeros(SHAPE_DIM), np.zeros(3), _CANONICAL)
    root = fk.rotations[0]
    P = fk.joints @ root  # rows are root.T @ p: positions in the pelvis frame
    Rl = np.einsum("ki,jkl->jil", root, fk.rotations)
    J = JOINT
    primary, flags = [], []

    spine = P[J["neck"]] - P[J["pelvis"]]
    tilt_from_vertical = _angle(fk.joints[J["neck"]] - fk.joints[J["pelvis"]], np.array([0.0, -1.0, 0.0]))
    knee_flex = {s: _angle(P[J[f"{s}_knee"]] - P[J[f"{s}_hip"]], P[J[f"{s}_ankle"]] - P[J[f"{s}_knee"]]) for s in ("left", "right")}
    pelvis_height = max(P[J["left_ankle"], 1], P[J["right_ankle"], 1]) - P[J["pelvis"], 1]
    if tilt_from_vertical > LYING_DEG:
        primary.append(("global", "lying-like"))
    elif pelvis_height < SITTING_PELVIS_M and np.mean(list(knee_flex.values())) > SITTING_KNEE_DEG:
        primary.append(("global", "sitting-like"))
    else:
        primary.append(("global", "standing"))

    # body forward is -z; no token while roughly facing the camera
    fwd = root @ np.array([0.0, 0.0, -1.0])
    facing = float(np.degrees(np.arctan2(fwd[0], -fwd[2])))
    if abs(facing) > 180.0 - FACING_DEG:
        primary.append(("facing", "away"))
    elif facing > FACING_DEG:
        primary.append(("facing", "turned-left"))
    elif facing < -FACING_DEG:
        primary.append(("facing", "turned-right"))

    lean = float(np.degrees(np.arctan2(-spine[2], -spine[1])))
    if lean > LEAN_FORWARD_DEG:
        primary.append(("torso", "leaning-forward"))
    elif lean < -LEAN_BACK_DEG:
        primary.append(("torso", "leaning-back"))
    else:
        primary.append(("torso", "upright"))
    shoulders = P[J["left_shoulder"]] - P[J["right_shoulder"]]
    hips = P[J["left_hip"]] - P[J["right_hip"]]
    twist = abs(np.degrees(np.arctan2(shoulders[2], shoulders[0]) - np.arctan2(hips[2], hips[0])))
    twist = min(twist, 360.0 - twist)

    rel = Rl[J["spine3"]].T @ Rl[J["head"]]
    fwd = rel @ np.array([0.0, 0.0, -1.0])
    head_yaw = float(np.degrees(np.arctan2(fwd[0], -fwd[2])))
    head_tilt = _angle(rel @ np.array([0.0, -1.0, 0.0]), np.array([0.0, -1.0, 0.0]))
    if head_yaw > HEAD_DEG:
        primary.append(("head", "turned-left"))
    elif head_yaw < -HEAD_DEG:
        primary.append(("head", "turned-right"))
    elif head_tilt > HEAD_DEG:
        primary.append(("head", "tilted"))
    else:
        primary.append(("head", "neutral"))

    elevation, flexion, crossed = [], [], []
    for s, sign in (("left", 1.0), ("right", -1.0)):
        part = f"{s}_arm"
        sh, el, wr = P[J[f"{s}_shoulder"]], P[J[f"{s}_elbow"]], P[J[f"{s}_wrist"]]
        elevation.append((part, "raised" if wr[1] < sh[1] else "lowered"))
        if _angle(el - sh, wr - el) > BENT_DEG:
            flexion.append((part, "bent"))
        elif _angle(el - sh, np.array([0.0, 1.0, 0.0])) > EXTENDED_DEG:
            flexion.append((part, "extended"))
        if sign * wr[0] < 0:
            crossed.append((part, "crossed-midline"))

    legs, leg_flags, wide = [], [], []
    for s, sign in (("left", 1.0), ("right", -1.0)):
        part = f"{s}_leg"
        legs.append((part, "bent" if knee_flex[s] > BENT_DEG else "straight"))
        ankle_x = sign * P[J[f"{s}_ankle"], 0]
        if ankle_x < 0:
            leg_flags.append((part, "crossed"))
        elif ankle_x > WIDE_STANCE_M:
            wide.append((part, "wide-stance"))

    ordered = primary + elevation + flexion + legs + crossed + leg_flags + wide
    if twist > TWIST_DEG:
        ordered.append(("torso", "twisted"))
    return [token_id(p, s) for p, s in ordered[:MAX_TOKENS]]


# -- records --------------------------------------------------------------
@dataclass
class SceneRecord:
    id: int
    gt_params: PoseParams
    camera: Camera
    obs_keypoints: Keypoints2D
    bbox: np.ndarray
    feature_vec: np.ndarray
    tokens: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "id": int(self.id),
            "gt_params": self.gt_params.to_json(),
            "camera": self.camera.to_json(),
            "obs_keypoints": {"uv": self.obs_keypoints.uv.tolist(), "confidence": self.obs_keypoints.confidence.tolist()},
            "bbox": np.asarray(self.bbox).tolist(),
            "feature_vec": np.asarray(self.feature_vec).tolist(),
            "tokens": [int(t) for t in self.tokens],
        }

    @classmethod
    def from_json(cls, d: dict) -> "SceneRecord":
        kp = d["obs_keypoints"]
        return cls(
            id=int(d["id"]),
            gt_params=PoseParams.from_json(d["gt_params"]),
            camera=Camera.from_json(d["camera"]),
            obs_keypoints=Keypoints2D(np.array(kp["uv"]), np.array(kp["confidence"])),
            bbox=np.array(d["bbox"], dtype=np.float64),
            feature_vec=np.array(d["feature_vec"], dtype=np.float64),
            tokens=[int(t) for t in d["tokens"]],
        )


def make_scene(scene_id: int, seed: int, camera: Camera, noise: NoiseConfig, template: BodyTemplate,
               yaw_range_deg: float = 180.0) -> SceneRecord:
    rng = substream(seed, "scene", scene_id)
    while True:
        gt = sample_pose(rng, yaw_range_deg)
        try:
            kp, bbox, feat = observe(gt, camera, noise, rng, template)
        except BehindCameraError:
            continue
        return SceneRecord(scene_id, gt, camera, kp, bbox, feat, describe(gt))


def generate_corpus(seed: int, count: int, camera: Camera | None = None, noise: NoiseConfig | None = None,
                    template: BodyTemplate | None = None, start_id: int = 0, yaw_range_deg: float = 180.0) -> list[SceneRecord]:
    camera = camera or Camera()
    noise = noise or NoiseConfig()
    template = template or BodyTemplate.default()
    return [make_scene(i, seed, camera, noise, template, yaw_range_deg) for i in range(start_id, start_id + count)]


def write_corpus(records: Iterable[SceneRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json()) + "\n")


def iter_corpus(path) -> Iterator[SceneRecord]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield SceneRecord.from_json(json.loads(line))


def read_corpus(path) -> list[SceneRecord]:
    return list(iter_corpus(Path(path)))


@dataclass
class SceneBatch:
    """Column-stacked view of a list of records (all sharing one camera)."""

    ids: np.ndarray
    theta: np.ndarray
    beta: np.ndarray
    trans: np.ndarray
    uv: np.ndarray
    confidence: np.ndarray
    bbox: np.ndarray
    features: np.ndarray
    tokens: list[list[int]]
    camera: Camera

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_records(cls, records: list[SceneRecord]) -> "SceneBatch":
        if not records:
            raise ValueError("empty corpus")
        camera = records[0].camera
        if any(r.camera != camera for r in records):
            raise ValueError("batched records must share one camera")
        return cls(
            ids=np.array([r.id for r in records]),
            theta=np.stack([r.gt_params.theta for r in records]),
            beta=np.stack([r.gt_params.beta for r in records]),
            trans=np.stack([r.gt_params.trans for r in records]),
            uv=np.stack([r.obs_keypoints.uv for r in records]),
            confidence=np.stack([r.obs_keypoints.confidence for r in records]),
            bbox=np.stack([r.bbox for r in records]),
            features=np.stack([r.feature_vec for r in records]),
            tokens=[list(r.tokens) for r in records],
            camera=camera,
        )

    def subset(self, idx) -> "SceneBatch":
        idx = np.asarray(idx)
        return SceneBatch(self.ids[idx], self.theta[idx], self.beta[idx], self.trans[idx], self.uv[idx],
                          self.confidence[idx], self.bbox[idx], self.features[idx],
                          [self.tokens[i] for i in idx], self.camera)
