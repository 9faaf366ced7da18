"""Analytic SDF scenes with rigidly moving objects, used as ground truth.

Primitives live in the world frame, which coincides with the ego frame of
the reference frame (``key_frame``). Object ``k`` sits at
``center + t * velocity`` at frame ``t``; velocities are horizontal, in
meters per frame.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import (
    Camera,
    FrameSet,
    Intrinsics,
    RigidTransform,
    camera_extrinsic,
    pixel_rays,
    project_points,
    ray_depth_scale,
)
from .grid import GridSpec, ScalarField, VectorField

TRACE_TOL = 1e-6
TRACE_STEPS = 512
TRACE_FAR = 200.0
SKY = np.array([0.62, 0.70, 0.80])

GROUND = -1  # primitive id of the ground plane; -2 marks a miss


@dataclass
class Primitive:
    shape: str  # "sphere" or "box"
    center: np.ndarray
    size: np.ndarray  # radius (1,) or half extents (3,)
    texture_seed: int = 0
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(2))
    movable: bool = False

    def __post_init__(self):
        if self.shape not in ("sphere", "box"):
            raise ValueError(f"unknown primitive shape {self.shape!r}")
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.atleast_1d(np.asarray(self.size, dtype=np.float64))
        if np.any(self.size <= 0):
            raise ValueError("primitive size must be positive")
        if self.shape == "sphere" and self.size.size != 1:
            raise ValueError("a sphere takes one radius")
        if self.shape == "box":
            self.size = np.broadcast_to(self.size, (3,)).copy()
        self.velocity = np.asarray(self.velocity, dtype=np.float64).reshape(2)

    def velocity3(self):
        return np.array([self.velocity[0], self.velocity[1], 0.0])

    def center_at(self, t):
        return self.center + t * self.velocity3()

    def sdf(self, t, p):
        q = np.asarray(p, dtype=np.float64) - self.center_at(t)
        if self.shape == "sphere":
            return np.linalg.norm(q, axis=-1) - self.size[0]
        d = np.abs(q) - self.size
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
        return outside + np.minimum(d.max(axis=-1), 0.0)


@dataclass
class SyntheticScene:
    primitives: list
    cameras: list
    poses: list  # ego -> world per frame
    ground_height: float = 0.0
    ground_seed: int = 7
    frame_interval: float = 0.5
    lidar_origin: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.8]))
    key_frame: int = 0

    @property
    def num_frames(self):
        return len(self.poses)


# -------------------------------------------------------------------- fields

def _sdf_stack(scene, t, p):
    p = np.asarray(p, dtype=np.float64)
    parts = [p[..., 2] - scene.ground_height]
    parts += [prim.sdf(t, p) for prim in scene.primitives]
    return np.stack(parts, axis=-1)


def analytic_sdf(scene, t, p):
    """Signed distance of world points ``p`` at frame ``t``."""
    return _sdf_stack(scene, t, p).min(axis=-1)


def hit_primitive(scene, t, p):
    """Index of the closest surface per point (``GROUND`` for the ground)."""
    return np.argmin(_sdf_stack(scene, t, p), axis=-1) - 1


def analytic_flow(scene, t, p):
    """Horizontal world velocity (m/frame) of the primitive containing ``p``."""
    p = np.asarray(p, dtype=np.float64)
    out = np.zeros(p.shape[:-1] + (2,))
    for prim in scene.primitives:
        inside = prim.sdf(t, p) < 0
        out[inside] = prim.velocity
    return out


def voxelize(scene, spec, t=None):
    """SDF and ego-frame flow sampled at voxel centers of the frame-``t`` ego grid."""
    t = scene.key_frame if t is None else t
    pose = scene.poses[t]
    world = pose.apply(spec.centers().reshape(-1, 3))
    sdf = analytic_sdf(scene, t, world).reshape(spec.dims)
    v = analytic_flow(scene, t, world)
    v3 = np.concatenate([v, np.zeros(v.shape[:-1] + (1,))], axis=-1)
    flow = (v3 @ pose.rotation)[:, :2].reshape(spec.dims + (2,))
    return ScalarField(spec, sdf), VectorField(spec, flow)


# -------------------------------------------------------------------- tracing

def sphere_trace(scene, t, origins, directions, max_steps=TRACE_STEPS, tol=TRACE_TOL, far=TRACE_FAR):
    """Ray parameters of the first surface hit, NaN on a miss.

    ``origins`` and ``directions`` are world-frame arrays of shape (R, 3).
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    origins = np.broadcast_to(origins, directions.shape)
    R = len(directions)
    depth = np.zeros(R)
    done = np.zeros(R, dtype=bool)
    active = np.ones(R, dtype=bool)
    for _ in range(max_steps):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        d = analytic_sdf(scene, t, origins[idx] + depth[idx, None] * directions[idx])
        hit = np.abs(d) < tol
        done[idx[hit]] = True
        depth[idx[~hit]] += d[~hit]
        escaped = depth[idx] > far
        active[idx[hit | escaped]] = False
    return np.where(done, depth, np.nan)


# -------------------------------------------------------------------- appearance

def texture(seed, local):
    """Smooth procedural RGB albedo in [0, 1] at object-local coordinates."""
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(3, 4, 3))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    freq = rng.uniform(2.0, 6.0, size=(3, 4))
    phase = rng.uniform(0.0, 2 * np.pi, size=(3, 4))
    base = rng.uniform(0.35, 0.65, size=3)
    out = np.empty(local.shape[:-1] + (3,))
    for c in range(3):
        arg = np.einsum("...k,jk->...j", local, dirs[c] * freq[c][:, None]) + phase[c]
        out[..., c] = base[c] + 0.09 * np.sin(arg).sum(axis=-1)
    return np.clip(out, 0.0, 1.0)


def shade(scene, t, points, ids):
    colors = np.empty(points.shape[:-1] + (3,))
    colors[...] = SKY
    ground = ids == GROUND
    if np.any(ground):
        colors[ground] = texture(scene.ground_seed, points[ground])
    for k, prim in enumerate(scene.primitives):
        m = ids == k
        if np.any(m):
            colors[m] = texture(prim.texture_seed, points[m] - prim.center_at(t))
    return colors


# -------------------------------------------------------------------- rendering

@dataclass
class GroundTruth:
    depth: np.ndarray  # (T, C, H, W) camera-z, 0 on a miss
    hit: np.ndarray  # (T, C, H, W) bool
    flow: np.ndarray  # (T, C, H, W, 2) pixels to frame t+1, 0 on the last frame
    primitive: np.ndarray  # (T, C, H, W) int, GROUND or object index, -2 on a miss
    points: np.ndarray  # (T, C, H, W, 3) world hit points


def _displacement(scene, ids, dt):
    disp = np.zeros(ids.shape + (3,))
    for k, prim in enumerate(scene.primitives):
        disp[ids == k] = dt * prim.velocity3()
    return disp


def _project_world(scene, camera, t, points):
    ego = scene.poses[t].inverse().apply(points)
    uv, z = project_points(camera.intrinsics.K, camera.extrinsic, ego)
    return uv, z


def trace_camera(scene, camera, t):
    """Per-pixel world hit points, hit mask, primitive ids and camera-z depth."""
    K = camera.intrinsics
    vv, uu = np.mgrid[0 : K.height, 0 : K.width]
    pixels = np.stack([uu, vv], axis=-1).reshape(-1, 2).astype(np.float64)
    rays = pixel_rays(K.K, camera.extrinsic, pixels)
    pose = scene.poses[t]
    origins = pose.apply(rays.origins)
    dirs = pose.rotate(rays.directions)
    s = sphere_trace(scene, t, origins, dirs)
    hit = np.isfinite(s)
    s0 = np.where(hit, s, 0.0)
    points = origins + s0[:, None] * dirs
    ids = np.where(hit, hit_primitive(scene, t, points), -2)
    depth = np.where(hit, s0 * ray_depth_scale(K.K, pixels), 0.0)
    shape = (K.height, K.width)
    return points.reshape(shape + (3,)), hit.reshape(shape), ids.reshape(shape), depth.reshape(shape)


def pixel_flow(scene, camera, t, t_to, points, ids, hit):
    """Image flow from frame ``t`` to ``t_to`` of hit points (H, W, 2)."""
    H, W = hit.shape
    moved = points.reshape(-1, 3) + _displacement(scene, ids.reshape(-1), t_to - t)
    uv, z = _project_world(scene, camera, t_to, moved)
    vv, uu = np.mgrid[0:H, 0:W]
    pix = np.stack([uu, vv], axis=-1).reshape(-1, 2).astype(np.float64)
    flow = np.where((hit.reshape(-1) & (z > 0))[:, None], uv - pix, 0.0)
    return flow.reshape(H, W, 2)


def lidar_scan(scene, t, rng, n_rays=3000, azimuth=(-80.0, 80.0), elevation=(-30.0, 8.0)):
    """Random-direction LiDAR returns at frame ``t``, ego-frame points."""
    az = np.deg2rad(rng.uniform(*azimuth, size=n_rays))
    el = np.deg2rad(rng.uniform(*elevation, size=n_rays))
    dirs = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)
    pose = scene.poses[t]
    origin_w = pose.apply(scene.lidar_origin[None])[0]
    s = sphere_trace(scene, t, origin_w, pose.rotate(dirs))
    ok = np.isfinite(s)
    pts = scene.lidar_origin + s[ok, None] * dirs[ok]
    return pts, scene.lidar_origin.copy()


def render_gt_views(scene, sigma_cue=0.5, seed=0, lidar_rays_per_frame=3000, backward=True):
    """Render every frame and camera; returns (FrameSet, GroundTruth).

    Cue maps are ground-truth flow plus Gaussian noise of ``sigma_cue``
    pixels. Backward cues cover every pair ``(t, t_aux)`` with ``t_aux < t``.
    """
    rng = np.random.default_rng(seed)
    T, C = scene.num_frames, len(scene.cameras)
    W, H = scene.cameras[0].intrinsics.width, scene.cameras[0].intrinsics.height
    images = np.zeros((T, C, H, W, 3))
    depth = np.zeros((T, C, H, W))
    hit = np.zeros((T, C, H, W), dtype=bool)
    ids = np.full((T, C, H, W), -2)
    points = np.zeros((T, C, H, W, 3))
    flow = np.zeros((T, C, H, W, 2))
    movable = np.zeros((T, C, H, W), dtype=bool)
    movable_ids = np.array([k for k, p in enumerate(scene.primitives) if p.movable], dtype=int)
    for t in range(T):
        for c, cam in enumerate(scene.cameras):
            pts, h, pid, dz = trace_camera(scene, cam, t)
            points[t, c], hit[t, c], ids[t, c], depth[t, c] = pts, h, pid, dz
            images[t, c] = shade(scene, t, pts, np.where(h, pid, -2))
            movable[t, c] = np.isin(pid, movable_ids) & h
            if t + 1 < T:
                flow[t, c] = pixel_flow(scene, cam, t, t + 1, pts, pid, h)
    cues = flow + sigma_cue * rng.standard_normal(flow.shape) if sigma_cue > 0 else flow.copy()
    cues[~hit] = 0.0
    back = {}
    if backward:
        for t in range(1, T):
            for ta in range(t):
                maps = np.stack([
                    pixel_flow(scene, cam, t, ta, points[t, c], ids[t, c], hit[t, c])
                    for c, cam in enumerate(scene.cameras)
                ])
                if sigma_cue > 0:
                    maps = maps + sigma_cue * rng.standard_normal(maps.shape)
                maps[~hit[t]] = 0.0
                back[(t, ta)] = maps
    lidar = [lidar_scan(scene, t, rng, lidar_rays_per_frame) for t in range(T)] if lidar_rays_per_frame else None
    frames = FrameSet(
        cameras=scene.cameras,
        poses=scene.poses,
        images=images,
        frame_interval=scene.frame_interval,
        flow_cues=cues,
        movable_masks=movable,
        backward_cues=back or None,
        lidar=lidar,
    )
    return frames, GroundTruth(depth, hit, flow, ids, points)


# -------------------------------------------------------------------- standard scene

STANDARD_ORIGIN = np.array([-0.4, -6.4, -1.0])
STANDARD_EXTENT = np.array([12.8, 12.8, 6.4])
STANDARD_VOXEL = 0.2


def standard_grid(voxel=STANDARD_VOXEL):
    return GridSpec.from_extent(STANDARD_ORIGIN, STANDARD_EXTENT, voxel)


def standard_scene(width=160, height=120, focal=120.0, n_frames=5, ego_speed=0.5, key_frame=None):
    """Ground plane, three walls, two moving spheres and three forward cameras.

    The world frame is the ego frame of ``key_frame`` (default: the
    second-to-last frame).
    """
    key = n_frames - 2 if key_frame is None else key_frame
    walls = [
        Primitive("box", [12.0, 0.0, 2.0], [0.3, 6.4, 2.5], texture_seed=11),
        Primitive("box", [6.0, 6.1, 2.0], [6.4, 0.3, 2.5], texture_seed=12),
        Primitive("box", [6.0, -6.1, 2.0], [6.4, 0.3, 2.5], texture_seed=13),
    ]
    v_a = np.array([0.4, 0.0])
    v_b = np.array([-0.2, 0.3])
    spheres = [
        Primitive("sphere", np.array([5.0, -3.0, 0.85]) - key * np.append(v_a, 0), 0.8,
                  texture_seed=21, velocity=v_a, movable=True),
        Primitive("sphere", np.array([7.0, 2.0, 0.75]) - key * np.append(v_b, 0), 0.7,
                  texture_seed=22, velocity=v_b, movable=True),
    ]
    K = Intrinsics.from_focal(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, width, height)
    cams = [
        Camera(name, K, camera_extrinsic(np.array([0.0, 0.0, 1.5]), yaw=np.deg2rad(yaw), pitch=np.deg2rad(15.0)))
        for name, yaw in (("front", 0.0), ("front_left", 30.0), ("front_right", -30.0))
    ]
    poses = [RigidTransform.from_rt(np.eye(3), [ego_speed * (t - key), 0.0, 0.0]) for t in range(n_frames)]
    return SyntheticScene(walls + spheres, cams, poses, key_frame=key)
