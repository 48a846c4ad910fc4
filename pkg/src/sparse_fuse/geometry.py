# Copyright 2026 sparse-fuse contributors

"""Anchor state, ego motion and pinhole projection.

Frames: the ego frame has x forward, y left, z up; a camera frame has x right, y down,
z forward. An anchor is the 11-vector (x, y, z, w, l, h, sin_yaw, cos_yaw, vx, vy, vz)
expressed in the ego frame of its timestamp; w, l, h extend along the box's local x, y,
z axes. Batches of anchors are `(M, 11)` float64 arrays indexed by the column
constants below.
"""

import logging
from dataclasses import dataclass, fields

import numpy as np

from sparse_fuse.errors import GeometryError, ShapeError

logger = logging.getLogger(__name__)

X, Y, Z, W, L, H, SIN_YAW, COS_YAW, VX, VY, VZ = range(11)
ANCHOR_DIM = 11
POSITION = slice(X, Z + 1)
SIZE = slice(W, H + 1)
VELOCITY = slice(VX, VZ + 1)

MIN_DEPTH = 1e-6
ORTHONORMAL_TOL = 1e-9
SENTINEL_PIXEL = -1.0

# Box centre followed by the six face centres, in box-normalised coordinates.
FIXED_KEYPOINTS = np.array(
    [
        [0.0, 0.0, 0.0],
        [0.5, 0.0, 0.0],
        [-0.5, 0.0, 0.0],
        [0.0, 0.5, 0.0],
        [0.0, -0.5, 0.0],
        [0.0, 0.0, 0.5],
        [0.0, 0.0, -0.5],
    ]
)


def _check_rotation(rotation: np.ndarray, what: str):
    if rotation.shape != (3, 3):
        raise ShapeError(f"{what} must be 3x3, got {rotation.shape}")
    if np.max(np.abs(rotation.T @ rotation - np.eye(3))) > ORTHONORMAL_TOL:
        raise GeometryError(f"{what} is not orthonormal")
    if abs(np.linalg.det(rotation) - 1.0) > ORTHONORMAL_TOL:
        raise GeometryError(f"{what} is not a proper rotation")


def rotation_z(angle: float) -> np.ndarray:
    """Rotation by `angle` radians about the z axis."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Anchor3D:
    """One 3D box anchor; see the module docstring for units and frames."""

    x: float
    y: float
    z: float
    w: float
    l: float  # noqa: E741
    h: float
    sin_yaw: float = 0.0
    cos_yaw: float = 1.0
    vx: float = 0.0
    vy: float = 0.0
    vz: float = 0.0

    def __post_init__(self):
        if min(self.w, self.l, self.h) <= 0:
            raise GeometryError(f"anchor extent must be positive, got {(self.w, self.l, self.h)}")
        norm = self.sin_yaw**2 + self.cos_yaw**2
        if abs(norm - 1.0) > 1e-6:
            raise GeometryError(f"sin_yaw^2 + cos_yaw^2 = {norm}, expected 1")

    @classmethod
    def from_yaw(cls, x, y, z, w, l, h, yaw=0.0, vx=0.0, vy=0.0, vz=0.0):  # noqa: E741
        """Anchor with its heading given as an angle."""
        return cls(x, y, z, w, l, h, float(np.sin(yaw)), float(np.cos(yaw)), vx, vy, vz)

    @classmethod
    def from_array(cls, values) -> "Anchor3D":
        """Anchor from an 11-vector."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (ANCHOR_DIM,):
            raise ShapeError(f"anchor vector must have {ANCHOR_DIM} entries, got {values.shape}")
        return cls(*(float(v) for v in values))

    def to_array(self) -> np.ndarray:
        """The 11-vector form."""
        return np.array([getattr(self, f.name) for f in fields(self)])

    @property
    def yaw(self) -> float:
        """Heading angle in radians."""
        return float(np.arctan2(self.sin_yaw, self.cos_yaw))


def as_anchor_array(anchors) -> np.ndarray:
    """Accept an Anchor3D, a list of them, or an (M, 11) array; return (M, 11)."""
    if isinstance(anchors, Anchor3D):
        return anchors.to_array()[None]
    if isinstance(anchors, (list, tuple)) and anchors and isinstance(anchors[0], Anchor3D):
        return np.stack([a.to_array() for a in anchors])
    arr = np.asarray(anchors, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != ANCHOR_DIM:
        raise ShapeError(f"anchor array must be (M, {ANCHOR_DIM}), got {arr.shape}")
    return arr


@dataclass(frozen=True)
class EgoMotion:
    """Rigid motion taking ego-frame coordinates at t-1 to the ego frame at t."""

    rotation: np.ndarray
    translation: np.ndarray
    dt: float = 0.0

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        _check_rotation(rotation, "ego rotation")
        if translation.shape != (3,):
            raise ShapeError(f"ego translation must be a 3-vector, got {translation.shape}")
        if self.dt < 0:
            raise GeometryError(f"time delta must be non-negative, got {self.dt}")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)
        object.__setattr__(self, "dt", float(self.dt))

    @classmethod
    def identity(cls, dt: float = 0.0) -> "EgoMotion":
        """No motion over `dt` seconds."""
        return cls(np.eye(3), np.zeros(3), dt)

    @classmethod
    def between(cls, pose_prev: np.ndarray, pose_cur: np.ndarray, dt: float) -> "EgoMotion":
        """Motion between two world-from-ego poses (4x4)."""
        rel = invert_rigid(pose_cur) @ pose_prev
        return cls(rel[:3, :3], rel[:3, 3], dt)

    def matrix(self) -> np.ndarray:
        """Homogeneous 4x4 form."""
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def inverse(self) -> "EgoMotion":
        """The inverse rigid motion, with a zero time delta."""
        rt = self.rotation.T
        return EgoMotion(rt, -rt @ self.translation, 0.0)

    def compose(self, later: "EgoMotion") -> "EgoMotion":
        """Apply `self` first, then `later`."""
        return EgoMotion(
            later.rotation @ self.rotation,
            later.rotation @ self.translation + later.translation,
            self.dt + later.dt,
        )


def invert_rigid(transform: np.ndarray) -> np.ndarray:
    """Inverse of a 4x4 rigid transform."""
    out = np.eye(4)
    rt = transform[:3, :3].T
    out[:3, :3] = rt
    out[:3, 3] = -rt @ transform[:3, 3]
    return out


def renormalize_yaw(anchors: np.ndarray) -> np.ndarray:
    """Return a copy whose (sin_yaw, cos_yaw) columns have unit norm."""
    out = np.array(anchors, dtype=np.float64)
    norm = np.maximum(np.hypot(out[..., SIN_YAW], out[..., COS_YAW]), 1e-12)
    out[..., SIN_YAW] /= norm
    out[..., COS_YAW] /= norm
    return out


def renormalize_yaw_backward(raw: np.ndarray, dout: np.ndarray) -> np.ndarray:
    """Gradient of `renormalize_yaw` w.r.t. its input `raw`."""
    s, c = raw[..., SIN_YAW], raw[..., COS_YAW]
    r3 = np.maximum(np.hypot(s, c), 1e-12) ** 3
    ds, dc = dout[..., SIN_YAW], dout[..., COS_YAW]
    din = np.array(dout, dtype=np.float64)
    din[..., SIN_YAW] = (ds * c * c - dc * s * c) / r3
    din[..., COS_YAW] = (dc * s * s - ds * s * c) / r3
    return din


def project_anchors(anchors: np.ndarray, motion: EgoMotion) -> np.ndarray:
    """Carry (M, 11) anchors from frame t-1 into frame t.

    Position is dead-reckoned by `dt * velocity` and then moved rigidly; the heading
    vector [cos, sin, 0] and the velocity are rotated; the extent is unchanged.
    """
    anchors = as_anchor_array(anchors)
    rot = motion.rotation
    out = np.array(anchors)
    moved = anchors[:, POSITION] + motion.dt * anchors[:, VELOCITY]
    out[:, POSITION] = moved @ rot.T + motion.translation
    heading = np.stack(
        [anchors[:, COS_YAW], anchors[:, SIN_YAW], np.zeros(len(anchors))], axis=-1
    ) @ rot.T
    out[:, COS_YAW] = heading[:, 0]
    out[:, SIN_YAW] = heading[:, 1]
    out[:, VELOCITY] = anchors[:, VELOCITY] @ rot.T
    return renormalize_yaw(out)


def project_anchor(anchor: Anchor3D, motion: EgoMotion) -> Anchor3D:
    """Single-anchor form of `project_anchors`; the input is left untouched."""
    return Anchor3D.from_array(project_anchors(anchor.to_array()[None], motion)[0])


def backproject_anchors(anchors: np.ndarray, motion: EgoMotion) -> np.ndarray:
    """Place anchors of frame t into the ego frame of an earlier frame.

    `motion` takes the earlier frame to frame t and its `dt` is the elapsed time.
    Position is dead-reckoned backwards before the inverse rigid motion is applied.
    """
    rewound = np.array(as_anchor_array(anchors))
    rewound[:, POSITION] -= motion.dt * rewound[:, VELOCITY]
    return project_anchors(rewound, motion.inverse())


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera; `extrinsic` maps ego coordinates to camera coordinates."""

    extrinsic: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        extrinsic = np.asarray(self.extrinsic, dtype=np.float64)
        if extrinsic.shape != (4, 4):
            raise ShapeError(f"extrinsic must be 4x4, got {extrinsic.shape}")
        _check_rotation(extrinsic[:3, :3], "camera rotation")
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError(f"focal lengths must be positive, got {(self.fx, self.fy)}")
        if self.width < 1 or self.height < 1:
            raise GeometryError(f"image size must be positive, got {(self.width, self.height)}")
        object.__setattr__(self, "extrinsic", extrinsic)

    @classmethod
    def facing(
        cls,
        yaw: float,
        position,
        width: int,
        height: int,
        fov_deg: float = 90.0,
    ) -> "CameraModel":
        """Level camera at `position` (ego frame) looking along heading `yaw`."""
        s, c = np.sin(yaw), np.cos(yaw)
        rot = np.array([[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]])
        extrinsic = np.eye(4)
        extrinsic[:3, :3] = rot
        extrinsic[:3, 3] = -rot @ np.asarray(position, dtype=np.float64)
        focal = 0.5 * width / np.tan(np.radians(fov_deg) / 2.0)
        return cls(extrinsic, focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    def intrinsic(self) -> np.ndarray:
        """3x3 pinhole matrix."""
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def projection(self) -> np.ndarray:
        """3x4 matrix from ego coordinates to homogeneous pixels."""
        return self.intrinsic() @ self.extrinsic[:3, :]


def outward_rig(
    num_cameras: int = 6,
    spacing_deg: float = 60.0,
    width: int = 64,
    height: int = 32,
    fov_deg: float = 90.0,
    mount_height: float = 1.5,
    mount_radius: float = 0.5,
) -> list[CameraModel]:
    """Ring of level cameras looking outwards from the ego origin."""
    rig = []
    for i in range(num_cameras):
        yaw = np.radians(i * spacing_deg)
        position = (mount_radius * np.cos(yaw), mount_radius * np.sin(yaw), mount_height)
        rig.append(CameraModel.facing(yaw, position, width, height, fov_deg))
    return rig


@dataclass(frozen=True)
class KeypointSet:
    """K x 3 keypoints in anchor (ego) space."""

    points3d: np.ndarray

    def __post_init__(self):
        points = np.asarray(self.points3d, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3 or len(points) < 1:
            raise ShapeError(f"keypoints must be K x 3 with K >= 1, got {points.shape}")
        object.__setattr__(self, "points3d", points)

    def __len__(self) -> int:
        return len(self.points3d)


def keypoints_for_anchors(anchors: np.ndarray, learnable_offsets: np.ndarray) -> np.ndarray:
    """(M, K, 3) keypoints: fixed box points followed by the learnable offsets.

    Offsets are box-normalised: they are scaled by (w, l, h), rotated by yaw and moved
    to the box centre.
    """
    anchors = as_anchor_array(anchors)
    offsets = np.concatenate([FIXED_KEYPOINTS, np.asarray(learnable_offsets).reshape(-1, 3)])
    scaled = offsets[None, :, :] * anchors[:, None, SIZE]
    s = anchors[:, None, SIN_YAW]
    c = anchors[:, None, COS_YAW]
    sx, sy, sz = scaled[..., 0], scaled[..., 1], scaled[..., 2]
    rotated = np.stack([c * sx - s * sy, s * sx + c * sy, sz], axis=-1)
    return rotated + anchors[:, None, POSITION]


def keypoint_offset_jacobian(anchors: np.ndarray) -> np.ndarray:
    """(M, 3, 3) derivative of a learnable keypoint w.r.t. its normalised offset."""
    anchors = as_anchor_array(anchors)
    s, c = anchors[:, SIN_YAW], anchors[:, COS_YAW]
    rot = np.zeros((len(anchors), 3, 3))
    rot[:, 0, 0], rot[:, 0, 1] = c, -s
    rot[:, 1, 0], rot[:, 1, 1] = s, c
    rot[:, 2, 2] = 1.0
    return rot * anchors[:, None, SIZE]


def keypoint_anchor_backward(
    anchors: np.ndarray, learnable_offsets: np.ndarray, dkeypoints: np.ndarray
) -> np.ndarray:
    """Gradient of `keypoints_for_anchors` w.r.t. the (M, 11) anchors."""
    anchors = as_anchor_array(anchors)
    offsets = np.concatenate([FIXED_KEYPOINTS, np.asarray(learnable_offsets).reshape(-1, 3)])
    scaled = offsets[None, :, :] * anchors[:, None, SIZE]
    s = anchors[:, None, SIN_YAW]
    c = anchors[:, None, COS_YAW]
    dx, dy, dz = dkeypoints[..., 0], dkeypoints[..., 1], dkeypoints[..., 2]
    out = np.zeros_like(anchors)
    out[:, POSITION] = dkeypoints.sum(axis=1)
    # Back through the yaw rotation into the box-local frame.
    local_x = c * dx + s * dy
    local_y = -s * dx + c * dy
    out[:, W] = (local_x * offsets[None, :, 0]).sum(axis=1)
    out[:, L] = (local_y * offsets[None, :, 1]).sum(axis=1)
    out[:, H] = (dz * offsets[None, :, 2]).sum(axis=1)
    sx, sy = scaled[..., 0], scaled[..., 1]
    out[:, COS_YAW] = (dx * sx + dy * sy).sum(axis=1)
    out[:, SIN_YAW] = (-dx * sy + dy * sx).sum(axis=1)
    return out


def generate_keypoints(anchor: Anchor3D, learnable_offsets: np.ndarray) -> KeypointSet:
    """Keypoints of one anchor: centre, six face centres, then learnable offsets."""
    return KeypointSet(keypoints_for_anchors(anchor.to_array()[None], learnable_offsets)[0])


def _stack_cameras(cams: list[CameraModel]):
    if not cams:
        raise ShapeError("at least one camera is required")
    rot = np.stack([c.extrinsic[:3, :3] for c in cams])
    trans = np.stack([c.extrinsic[:3, 3] for c in cams])
    intr = np.array([[c.fx, c.fy, c.cx, c.cy, c.width, c.height] for c in cams])
    return rot, trans, intr


def _to_camera(points: np.ndarray, cams: list[CameraModel]):
    rot, trans, intr = _stack_cameras(cams)
    pc = np.einsum("nij,...j->...ni", rot, points) + trans
    return pc, rot, intr


def project_points(points: np.ndarray, cams: list[CameraModel]):
    """Project (..., 3) ego points into every camera.

    Returns `(pixels (..., N, 2), visible (..., N), depth (..., N))`. A projection is
    visible when its depth exceeds 1e-6 and the pixel lies in [0, W-1] x [0, H-1];
    non-visible pixels hold the sentinel (-1, -1).
    """
    pc, _, intr = _to_camera(np.asarray(points, dtype=np.float64), cams)
    depth = pc[..., 2]
    in_front = depth > MIN_DEPTH
    z = np.where(in_front, depth, 1.0)
    u = intr[:, 0] * pc[..., 0] / z + intr[:, 2]
    v = intr[:, 1] * pc[..., 1] / z + intr[:, 3]
    visible = in_front & (u >= 0) & (u <= intr[:, 4] - 1) & (v >= 0) & (v <= intr[:, 5] - 1)
    pixels = np.stack([u, v], axis=-1)
    pixels = np.where(visible[..., None], pixels, SENTINEL_PIXEL)
    return pixels, visible, depth


def project_points_jacobian(points: np.ndarray, cams: list[CameraModel]) -> np.ndarray:
    """(..., N, 2, 3) derivative of each visible pixel w.r.t. the ego-frame point."""
    pc, rot, intr = _to_camera(np.asarray(points, dtype=np.float64), cams)
    depth = pc[..., 2]
    in_front = depth > MIN_DEPTH
    z = np.where(in_front, depth, 1.0)
    jac_cam = np.zeros(pc.shape[:-1] + (2, 3))
    jac_cam[..., 0, 0] = intr[:, 0] / z
    jac_cam[..., 0, 2] = -intr[:, 0] * pc[..., 0] / z**2
    jac_cam[..., 1, 1] = intr[:, 1] / z
    jac_cam[..., 1, 2] = -intr[:, 1] * pc[..., 1] / z**2
    jac = np.einsum("...nij,njk->...nik", jac_cam, rot)
    _, visible, _ = project_points(points, cams)
    return np.where(visible[..., None, None], jac, 0.0)


def project_keypoints(anchor: Anchor3D, keypoints: KeypointSet, cams: list[CameraModel]):
    """Pixels (K, N, 2) and visibility (K, N) of an anchor's keypoints.

    `keypoints` come from `generate_keypoints(anchor, ...)`, which already scaled,
    rotated and translated them by the anchor; only the camera step remains.
    """
    pixels, visible, _ = project_points(keypoints.points3d, cams)
    return pixels, visible
