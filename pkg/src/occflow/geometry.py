"""Pinhole cameras, rigid transforms, ray generation and reprojection.

Camera frame: +z forward, +x right, +y down. Extrinsics map camera to ego;
ego poses map ego to world. Pixel centers sit at integer coordinates, so the
principal point of a W x H image is usually ((W - 1) / 2, (H - 1) / 2).
Flow vectors are horizontal (2 channels) and are lifted to 3-D with a zero
vertical component.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


class NonPositiveDepth(ValueError):
    """A point projects onto or behind the camera plane."""


class DegenerateRay(ValueError):
    """A ray with zero length direction."""


@dataclass(frozen=True)
class Intrinsics:
    K: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64)
        if K.shape != (3, 3) or not np.allclose(K[2], (0.0, 0.0, 1.0)):
            raise ValueError("intrinsics must be 3x3 with last row (0, 0, 1)")
        if abs(np.linalg.det(K)) < 1e-12:
            raise ValueError("intrinsics must be invertible")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @classmethod
    def from_focal(cls, fx, fy, cx, cy, width, height):
        return cls(np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]]), width, height)

    @property
    def K_inv(self):
        return np.linalg.inv(self.K)


class RigidTransform:
    """4x4 homogeneous rigid motion."""

    def __init__(self, matrix, check=True):
        matrix = np.array(matrix, dtype=np.float64)
        if matrix.shape != (4, 4):
            raise ValueError("rigid transform must be 4x4")
        if check:
            R = matrix[:3, :3]
            if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or np.linalg.det(R) < 0:
                raise ValueError("rotation block must be orthonormal with det +1")
            if not np.array_equal(matrix[3], (0.0, 0.0, 0.0, 1.0)):
                raise ValueError("last row of a rigid transform must be (0, 0, 0, 1)")
        self.matrix = matrix

    @classmethod
    def identity(cls):
        return cls(np.eye(4), check=False)

    @classmethod
    def from_rt(cls, R, t):
        m = np.eye(4)
        m[:3, :3] = R
        m[:3, 3] = t
        return cls(m)

    @classmethod
    def from_yaw(cls, yaw, t=(0.0, 0.0, 0.0)):
        """Rotation about +z (ego up) by ``yaw`` radians, then translation."""
        c, s = np.cos(yaw), np.sin(yaw)
        R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls.from_rt(R, t)

    @property
    def rotation(self):
        return self.matrix[:3, :3]

    @property
    def translation(self):
        return self.matrix[:3, 3]

    def inverse(self):
        R = self.rotation
        m = np.eye(4)
        m[:3, :3] = R.T
        m[:3, 3] = -R.T @ self.translation
        return RigidTransform(m, check=False)

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def rotate(self, vectors):
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def __matmul__(self, other):
        return RigidTransform(self.matrix @ other.matrix, check=False)

    def __repr__(self):
        return f"RigidTransform({self.matrix.tolist()})"


def camera_to_ego_basis():
    """Rotation taking camera axes (x right, y down, z fwd) to ego (x fwd, y left, z up)."""
    return np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


def camera_extrinsic(position, yaw=0.0, pitch=0.0):
    """Camera-to-ego transform for a camera at ``position`` looking along ego +x.

    ``yaw`` turns left (toward ego +y), ``pitch`` tilts down, both radians.
    """
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    R_yaw = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    # pitch down = rotation about ego -y
    R_pitch = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    R = R_yaw @ R_pitch @ camera_to_ego_basis()
    return RigidTransform.from_rt(R, position)


@dataclass
class Rays:
    """A batch of rays in the ego frame."""

    origins: np.ndarray
    directions: np.ndarray
    source: str = "camera"
    gt_range: Optional[np.ndarray] = None
    pixels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.origins = np.atleast_2d(np.asarray(self.origins, dtype=np.float64))
        self.directions = np.atleast_2d(np.asarray(self.directions, dtype=np.float64))
        self.origins = np.broadcast_to(self.origins, self.directions.shape).copy()
        norms = np.linalg.norm(self.directions, axis=-1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("ray directions must be unit vectors")

    def __len__(self):
        return self.directions.shape[0]

    def __getitem__(self, sel):
        return Rays(
            self.origins[sel],
            self.directions[sel],
            self.source,
            None if self.gt_range is None else self.gt_range[sel],
            None if self.pixels is None else self.pixels[sel],
        )

    def at(self, t):
        """Points at ray parameters ``t`` of shape (R,) or (R, N)."""
        t = np.asarray(t, dtype=np.float64)
        if t.ndim == 1:
            return self.origins + t[:, None] * self.directions
        return self.origins[:, None, :] + t[..., None] * self.directions[:, None, :]


def _matrix(T):
    return T.matrix if isinstance(T, RigidTransform) else np.asarray(T, dtype=np.float64)


def _K(K):
    return K.K if isinstance(K, Intrinsics) else np.asarray(K, dtype=np.float64)


def backproject(K, T_cam2ego, x, d):
    """Pixel ``x`` at camera-z depth ``d`` -> ego point, vectorized."""
    K, T = _K(K), _matrix(T_cam2ego)
    x = np.asarray(x, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    homog = np.concatenate([x, np.ones(x.shape[:-1] + (1,))], axis=-1)
    cam = (homog @ np.linalg.inv(K).T) * d[..., None]
    return cam @ T[:3, :3].T + T[:3, 3]


def project_points(K, T_cam2ego, points):
    """Ego points -> (pixels, camera depth) without validity checks.

    Pixels of points at non-positive depth are returned as NaN.
    """
    K, T = _K(K), _matrix(T_cam2ego)
    points = np.asarray(points, dtype=np.float64)
    R, t = T[:3, :3], T[:3, 3]
    cam = (points - t) @ R
    z = cam[..., 2]
    proj = cam @ K.T
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = proj[..., :2] / proj[..., 2:3]
    uv = np.where((z > 0)[..., None], uv, np.nan)
    return uv, z


def project(K, T_cam2ego, point):
    """Ego point(s) -> (pixel, camera depth); raises on depth <= 0."""
    uv, z = project_points(K, T_cam2ego, point)
    if np.any(z <= 0):
        raise NonPositiveDepth("point lies on or behind the camera plane")
    return uv, z


def lift_flow(f):
    f = np.asarray(f, dtype=np.float64)
    return np.concatenate([f, np.zeros(f.shape[:-1] + (1,))], axis=-1)


def reproject_points(K, T_cam2ego, points, f, T_rel):
    """Ego points displaced by horizontal flow, carried into the next ego frame
    and projected. Returns (pixels, camera depth) without raising."""
    A, b = reprojection_affine(K, T_cam2ego, T_rel)
    return affine_project(A, b, np.asarray(points, dtype=np.float64) + lift_flow(f))


def affine_project(A, b, points):
    """Perspective divide of ``A @ p + b``; NaN pixels where depth <= 0."""
    P = points @ A.T + b
    z = P[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = P[..., :2] / P[..., 2:3]
    return np.where((z > 0)[..., None], uv, np.nan), z


def reproject_with_flow(x, d, f, T_rel, K, T_cam2ego):
    """Pixel in frame t+1 of pixel ``x`` at camera depth ``d`` moved by flow ``f``."""
    if np.any(np.asarray(d) <= 0):
        raise NonPositiveDepth("back-projection depth must be positive")
    points = backproject(K, T_cam2ego, x, d)
    uv, z = reproject_points(K, T_cam2ego, points, f, T_rel)
    if np.any(z <= 0):
        raise NonPositiveDepth("reprojected point lies behind the camera")
    return uv


def pixel_rays(K, T_cam2ego, pixels):
    """Rays through pixel coordinates ``pixels`` (..., 2), flattened to (R,)."""
    K, T = _K(K), _matrix(T_cam2ego)
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    homog = np.concatenate([pixels, np.ones((len(pixels), 1))], axis=-1)
    dirs_cam = homog @ np.linalg.inv(K).T
    dirs = dirs_cam @ T[:3, :3].T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(T[:3, 3], dirs.shape)
    return Rays(origins, dirs, "camera", pixels=pixels)


def ray_depth_scale(K, pixels):
    """Camera-z depth per unit ray length for rays through ``pixels``."""
    pixels = np.asarray(pixels, dtype=np.float64)
    homog = np.concatenate([pixels, np.ones(pixels.shape[:-1] + (1,))], axis=-1)
    dirs_cam = homog @ np.linalg.inv(_K(K)).T
    return 1.0 / np.linalg.norm(dirs_cam, axis=-1)


def lidar_rays(points, sensor_origin):
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    origin = np.asarray(sensor_origin, dtype=np.float64)
    delta = points - origin
    ranges = np.linalg.norm(delta, axis=-1)
    if np.any(ranges <= 0):
        raise DegenerateRay("LiDAR point coincides with the sensor origin")
    return Rays(np.broadcast_to(origin, points.shape), delta / ranges[:, None], "lidar", gt_range=ranges)


def aabb_clip_batch(origins, directions, lower, upper):
    """Slab intersection for many rays. Returns (t_near, t_far, hit)."""
    origins = np.atleast_2d(origins)
    directions = np.atleast_2d(directions)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t0 = (lower - origins) * inv
        t1 = (upper - origins) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    # parallel axes: inside the slab -> unbounded, outside -> empty
    parallel = directions == 0
    inside = (origins >= lower) & (origins <= upper)
    tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), tmax)
    t_near = tmin.max(axis=-1)
    t_far = tmax.min(axis=-1)
    hit = t_far > np.maximum(t_near, 0.0)
    return t_near, t_far, hit


def aabb_clip(ray, spec):
    """(t_near, t_far) of a single ray against the grid box, or None."""
    origin = np.asarray(ray.origins if isinstance(ray, Rays) else ray[0], dtype=np.float64).reshape(3)
    direction = np.asarray(ray.directions if isinstance(ray, Rays) else ray[1], dtype=np.float64).reshape(3)
    t_near, t_far, hit = aabb_clip_batch(origin, direction, spec.lower, spec.upper)
    if not hit[0]:
        return None
    return float(t_near[0]), float(t_far[0])


def reprojection_affine(K, T_cam2ego, T_rel):
    """(A, b) with homogeneous pixel ``A @ p + b`` for ego point ``p`` at t
    seen by the same camera at t+1 (``T_rel`` maps ego t -> ego t+1)."""
    K, Tc, Tr = _K(K), _matrix(T_cam2ego), _matrix(T_rel)
    Rc_t = Tc[:3, :3].T
    A = K @ Rc_t @ Tr[:3, :3]
    b = K @ Rc_t @ (Tr[:3, 3] - Tc[:3, 3])
    return A, b


@dataclass
class Camera:
    name: str
    intrinsics: Intrinsics
    extrinsic: RigidTransform  # camera -> ego


@dataclass
class FrameSet:
    """Posed multi-camera sequence with optional cues and LiDAR.

    Array layouts: ``images`` (T, C, H, W, 3) in [0, 1]; ``flow_cues``
    (T, C, H, W, 2) holding O_{t->t+1} in pixels (the last frame is unused);
    ``movable_masks`` (T, C, H, W) bool; ``backward_cues`` maps ``(t, t_aux)``
    with ``t_aux < t`` to (C, H, W, 2) flow from t to t_aux; ``lidar`` is a
    list of (points (P, 3) ego frame, sensor origin) per frame.
    """

    cameras: list
    poses: list
    images: np.ndarray
    frame_interval: float = 0.5
    flow_cues: Optional[np.ndarray] = None
    movable_masks: Optional[np.ndarray] = None
    backward_cues: Optional[dict] = None
    lidar: Optional[list] = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        T, C, H, W, _ = self.images.shape
        if len(self.poses) != T:
            raise ValueError(f"{len(self.poses)} poses for {T} frames")
        if len(self.cameras) != C:
            raise ValueError(f"{len(self.cameras)} cameras for {C} image columns")
        for cam in self.cameras:
            if (cam.intrinsics.width, cam.intrinsics.height) != (W, H):
                raise ValueError(f"camera {cam.name} size does not match its images")
        if self.flow_cues is not None and self.flow_cues.shape != (T, C, H, W, 2):
            raise ValueError("flow cue maps must match the image layout")
        if self.movable_masks is not None and self.movable_masks.shape != (T, C, H, W):
            raise ValueError("movable masks must match the image layout")
        if self.backward_cues:
            for key, value in self.backward_cues.items():
                if np.shape(value) != (C, H, W, 2):
                    raise ValueError(f"backward cue {key} has the wrong shape")
        if self.lidar is not None and len(self.lidar) != T:
            raise ValueError("LiDAR list must have one entry per frame")
        if self.frame_interval <= 0:
            raise ValueError("frame interval must be positive")

    @property
    def num_frames(self):
        return self.images.shape[0]

    @property
    def image_size(self):
        return self.images.shape[3], self.images.shape[2]

    def relative_pose(self, t_from, t_to):
        """Transform taking ego coordinates at ``t_from`` to ego coordinates at ``t_to``."""
        return self.poses[t_to].inverse() @ self.poses[t_from]
