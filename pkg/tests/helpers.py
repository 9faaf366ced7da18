"""Small random problems shared by gradient and objective tests."""
import numpy as np

from occflow.geometry import (
    Intrinsics, RigidTransform, Rays, camera_extrinsic, lidar_rays, pixel_rays,
    ray_depth_scale, reprojection_affine,
)
from occflow.grid import GridSpec
from occflow.objective import CameraBatch, LidarBatch
from occflow.render import RenderParams, sample_points


def smooth_image(rng, h, w):
    v, u = np.mgrid[0:h, 0:w].astype(float)
    img = np.zeros((h, w, 3))
    for c in range(3):
        a, b, p = rng.uniform(0.3, 1.2, 3)
        img[..., c] = 0.5 + 0.4 * np.sin(a * u + p) * np.cos(b * v - p)
    return img


def tiny_problem(seed=0, n_samples=24, tile=4, dims=(8, 8, 8)):
    rng = np.random.default_rng(seed)
    spec = GridSpec(np.array([-2.0, -2.0, -2.0]), np.full(3, 0.5), dims)
    centers = spec.centers()
    sdf = np.linalg.norm(centers - np.array([0.9, 0.1, -0.1]), axis=-1) - 0.8
    sdf = sdf + 0.05 * rng.standard_normal(spec.dims)
    flow = 0.2 * rng.standard_normal(spec.dims + (2,))

    W = H = 12
    K = Intrinsics.from_focal(8.0, 8.0, 5.5, 5.5, W, H)
    ext = camera_extrinsic(np.array([-1.6, 0.0, 0.1]), yaw=0.05, pitch=0.02)
    T_rel = RigidTransform.from_yaw(0.03, (-0.15, 0.02, 0.0))
    A, b = reprojection_affine(K.K, ext, T_rel)
    T_aux = RigidTransform.from_yaw(-0.02, (0.12, -0.01, 0.0))
    Aa, ba = reprojection_affine(K.K, ext, T_aux)

    u0, v0 = 4, 4
    vv, uu = np.mgrid[v0:v0 + tile, u0:u0 + tile]
    pixels = np.stack([uu, vv], -1).reshape(-1, 2).astype(float)
    rays = pixel_rays(K.K, ext, pixels)
    R = len(pixels)
    params = RenderParams(n_samples, xi=4.0, jitter=True)
    depths = sample_points(rays, spec, params, rng)

    images = np.stack([smooth_image(rng, H, W), smooth_image(rng, H, W)])
    ui, vi = pixels[:, 0].astype(int), pixels[:, 1].astype(int)
    off = np.arange(-1, 2)
    src_patch = images[0][vi[:, None, None] + off[None, :, None], ui[:, None, None] + off[None, None, :]]
    cue = rng.normal(0, 1.5, (R, 2))
    movable = rng.random(R) < 0.5
    cam = CameraBatch(
        rays=rays, depths=depths, pixels=pixels, z_scale=ray_depth_scale(K.K, pixels),
        src_patch=src_patch, images=images, tgt_image=np.ones(R, dtype=int),
        A=np.broadcast_to(A, (R, 3, 3)).copy(), b=np.broadcast_to(b, (R, 3)).copy(),
        cue=cue, movable=movable, tile_shape=(1, tile, tile),
        image_tiles=images[0][vi, ui].reshape(1, tile, tile, 3),
        aux_A=np.broadcast_to(Aa, (R, 3, 3)).copy(), aux_b=np.broadcast_to(ba, (R, 3)).copy(),
        aux_cue=rng.normal(0, 1.0, (R, 2)),
    )
    dirs = rng.normal(size=(R, 3))
    dirs[:, 0] = np.abs(dirs[:, 0]) + 2.0
    origin = np.array([-1.6, 0.0, 0.0])
    pts = origin + dirs / np.linalg.norm(dirs, axis=-1, keepdims=True) * rng.uniform(1.0, 2.2, (R, 1))
    lrays = lidar_rays(pts, origin)
    lidar = LidarBatch(lrays, sample_points(lrays, spec, params, rng))
    return spec, sdf, flow, cam, lidar, params
