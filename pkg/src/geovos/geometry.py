"""Pinhole camera geometry: back-projection, rigid transforms, frustums.

Coordinate conventions
----------------------
* Camera frame: x right, y down, z forward (optical axis).
* Pose: world-from-camera, ``p_world = R @ p_cam + t``.
* Pixels: (u, v) = (column, row); integer coordinates at pixel centers;
  a continuous projection is inside the image iff 0 <= u < width and
  0 <= v < height (half-open bounds).
* Frustum: positive-depth half-space (z > z_near) intersected with the
  image rectangle; no far plane.

All operations are pure functions of their inputs.
"""

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import kernels

DEFAULT_Z_NEAR = 1e-4
DEFAULT_EPS_REL = 0.05

ROTATION_TOL = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be >= 1, got {self.width}x{self.height}")
        if not (np.isfinite(self.cx) and np.isfinite(self.cy)):
            raise ValueError("principal point must be finite")


@dataclass(frozen=True)
class CameraPose:
    """World-from-camera rigid transform: ``p_world = rotation @ p_cam + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        tra = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if rot.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {rot.shape}")
        if not np.all(np.isfinite(rot)) or not np.all(np.isfinite(tra)):
            raise ValueError("pose contains non-finite values")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > ROTATION_TOL:
            raise ValueError("rotation is not orthonormal within 1e-6")
        if abs(np.linalg.det(rot) - 1.0) > ROTATION_TOL:
            raise ValueError("rotation determinant is not +1 within 1e-6")
        rot.setflags(write=False)
        tra.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tra)

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def to_world(self, points: np.ndarray) -> np.ndarray:
        return apply_rigid(points, self.rotation, self.translation)

    def to_camera(self, points_world: np.ndarray) -> np.ndarray:
        rot = self.rotation.T
        return apply_rigid(points_world, rot, -rot @ self.translation)


@dataclass
class PointCloud:
    """3D points with the frame they live in ("world" or a camera id)."""

    points: np.ndarray
    frame_of_reference: str = "world"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        self.points = pts

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class CameraFrame:
    """One observation: intrinsics, pose, depth raster, per-object masks."""

    frame_id: int
    intrinsics: CameraIntrinsics
    pose: CameraPose
    depth: np.ndarray | None = None
    masks: dict = field(default_factory=dict)

    def __post_init__(self):
        shape = (self.intrinsics.height, self.intrinsics.width)
        if self.depth is not None and self.depth.shape != shape:
            raise ValueError(
                f"frame {self.frame_id}: depth shape {self.depth.shape} != intrinsics {shape}"
            )
        for obj, mask in self.masks.items():
            if mask.shape != shape:
                raise ValueError(
                    f"frame {self.frame_id}: mask '{obj}' shape {mask.shape} != intrinsics {shape}"
                )


class OverlapRatio(NamedTuple):
    """frustum_overlap_ratio result; ``defined`` is False when no valid masked point exists."""

    ratio: float
    n_inside: int
    n_points: int

    @property
    def defined(self) -> bool:
        return self.n_points > 0


def apply_rigid(points: np.ndarray, rot: np.ndarray, trans: np.ndarray) -> np.ndarray:
    """Apply ``p' = rot @ p + trans`` to (N, 3) points.

    Written elementwise (not matmul) so both kernel lanes and the python
    oracles used in tests evaluate the identical IEEE expression.
    """
    points = np.asarray(points, dtype=np.float64)
    squeeze = points.ndim == 1
    pts = points.reshape(-1, 3)
    out = np.empty_like(pts)
    px, py, pz = pts[:, 0], pts[:, 1], pts[:, 2]
    out[:, 0] = rot[0, 0] * px + rot[0, 1] * py + rot[0, 2] * pz + trans[0]
    out[:, 1] = rot[1, 0] * px + rot[1, 1] * py + rot[1, 2] * pz + trans[1]
    out[:, 2] = rot[2, 0] * px + rot[2, 1] * py + rot[2, 2] * pz + trans[2]
    return out[0] if squeeze else out


def valid_depth_mask(depth: np.ndarray) -> np.ndarray:
    """True where a depth raster holds a valid (finite, positive) value."""
    return np.isfinite(depth) & (depth > 0)


def back_project(mask: np.ndarray, depth: np.ndarray, intr: CameraIntrinsics,
                 frame_of_reference: str = "camera"):
    """Back-project masked valid-depth pixels into the camera frame.

    Each masked pixel (u, v) with valid depth z yields
    ``((u - cx) * z / fx, (v - cy) * z / fy, z)``. Masked pixels with
    invalid depth are skipped and counted.

    Returns:
        (PointCloud, skipped) where skipped is the invalid-depth count.

    Raises:
        ValueError: if mask/depth dimensions disagree with the intrinsics.
    """
    expected = (intr.height, intr.width)
    if mask.shape != expected:
        raise ValueError(f"mask shape {mask.shape} != intrinsics {expected}")
    if depth.shape != expected:
        raise ValueError(f"depth shape {depth.shape} != intrinsics {expected}")
    pts, skipped = kernels.backproject_mask(mask, depth, intr.fx, intr.fy, intr.cx, intr.cy)
    return PointCloud(pts, frame_of_reference), skipped


def project(points: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Project camera-frame points to continuous pixel coordinates (N, 2)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * pts[:, 0] / pts[:, 2] + intr.cx
        v = intr.fy * pts[:, 1] / pts[:, 2] + intr.cy
    return np.stack([u, v], axis=1)


def transform_points(pc: PointCloud, src: CameraPose, dst: CameraPose) -> PointCloud:
    """Re-express a camera-frame cloud in another camera's frame.

    ``p' = R_dst^T @ (R_src @ p + t_src - t_dst)``; count and order are
    preserved.
    """
    rot = dst.rotation.T @ src.rotation
    trans = dst.rotation.T @ (src.translation - dst.translation)
    return PointCloud(apply_rigid(pc.points, rot, trans), pc.frame_of_reference)


def in_frustum(points: np.ndarray, intr: CameraIntrinsics, z_near: float = DEFAULT_Z_NEAR):
    """Frustum membership for camera-frame point(s).

    True iff z > z_near and the projection lands inside the half-open
    image rectangle. Non-finite points are False. Accepts one (3,) point
    or an (N, 3) array.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    uv = project(pts, intr)
    with np.errstate(invalid="ignore"):
        ok = (
            np.all(np.isfinite(pts), axis=1)
            & (pts[:, 2] > z_near)
            & (uv[:, 0] >= 0.0)
            & (uv[:, 0] < intr.width)
            & (uv[:, 1] >= 0.0)
            & (uv[:, 1] < intr.height)
        )
    return bool(ok[0]) if single else ok


def frustum_overlap_ratio(candidate: CameraFrame, obj_mask: np.ndarray,
                          reference: CameraFrame,
                          z_near: float = DEFAULT_Z_NEAR) -> OverlapRatio:
    """Fraction of the candidate's masked 3D points visible to the reference.

    The candidate's masked valid-depth pixels are back-projected, moved
    into the reference camera frame and tested against its frustum. The
    denominator counts only valid-depth masked pixels; with an empty
    denominator the ratio is 0.0 and ``defined`` is False.
    """
    if candidate.depth is None:
        raise ValueError(f"frame {candidate.frame_id} has no depth raster")
    pc, _ = back_project(obj_mask, candidate.depth, candidate.intrinsics)
    n = len(pc)
    if n == 0:
        return OverlapRatio(0.0, 0, 0)
    same_camera = (
        candidate.intrinsics == reference.intrinsics
        and np.array_equal(candidate.pose.rotation, reference.pose.rotation)
        and np.array_equal(candidate.pose.translation, reference.pose.translation)
    )
    if same_camera:
        # a pixel's back-projection lies in its own frustum by construction;
        # skipping the float round trip keeps the self-overlap exactly 1
        return OverlapRatio(1.0, n, n)
    rot = reference.pose.rotation.T @ candidate.pose.rotation
    trans = reference.pose.rotation.T @ (candidate.pose.translation - reference.pose.translation)
    ri = reference.intrinsics
    inside = kernels.count_in_frustum(
        pc.points, rot, trans, ri.fx, ri.fy, ri.cx, ri.cy, ri.width, ri.height, z_near
    )
    return OverlapRatio(inside / n, inside, n)


def depth_agreement_score(pc: PointCloud, ref_depth: np.ndarray, intr: CameraIntrinsics,
                          eps_rel: float = DEFAULT_EPS_REL) -> float:
    """Fraction of reference-frame points agreeing with a depth raster.

    A point agrees iff its nearest pixel is inside the raster with valid
    depth d and ``|z - d| <= eps_rel * d``. Points behind the camera never
    agree.

    Raises:
        ValueError: on an empty cloud.
    """
    if len(pc) == 0:
        raise ValueError("depth_agreement_score needs a nonempty point cloud")
    if ref_depth.shape != (intr.height, intr.width):
        raise ValueError(f"depth shape {ref_depth.shape} != intrinsics "
                         f"{(intr.height, intr.width)}")
    inliers = kernels.depth_agreement_count(
        pc.points, ref_depth, intr.fx, intr.fy, intr.cx, intr.cy, eps_rel
    )
    return inliers / len(pc)
