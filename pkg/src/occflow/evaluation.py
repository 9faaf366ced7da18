"""Render fitted fields into camera views and score them against references."""
from __future__ import annotations

import numpy as np

from .geometry import lidar_rays, pixel_rays, ray_depth_scale, reprojection_affine
from .grid import OccupancyGrid, sdf_to_occupancy
from .metrics import RayIouConfig, depth_metrics, mave, ray_iou
from .render import WEIGHT_SUM_VALID, render_tile

OCCUPANCY_SHARPNESS = 25.0


def render_views(sdf, flow, frames, t, params):
    """Camera-z depth, ego flow and weight sum per camera at frame ``t``.

    Fields are expressed in the ego frame of ``t``.
    """
    W, H = frames.image_size
    out = []
    for cam in frames.cameras:
        depth, fl, wsum = render_tile(sdf, flow, cam, (0, 0, W, H), params)
        out.append({"depth": depth, "flow": fl, "weight_sum": wsum})
    return out


def _pixels(W, H):
    vv, uu = np.mgrid[0:H, 0:W]
    return np.stack([uu, vv], axis=-1).reshape(-1, 2).astype(np.float64)


def induced_pixel_flow(depth, flow, camera, T_rel, with_flow=True):
    """Image flow implied by camera-z ``depth`` (H, W) and ego ``flow`` (H, W, 2).

    Returns (H, W, 2) flow and a validity mask (positive depth before and
    after the move).
    """
    H, W = depth.shape
    K = camera.intrinsics.K
    pix = _pixels(W, H)
    rays = pixel_rays(K, camera.extrinsic, pix)
    dist = depth.reshape(-1) / ray_depth_scale(K, pix)
    p = rays.at(dist)
    if with_flow:
        p = p + np.concatenate([flow.reshape(-1, 2), np.zeros((len(p), 1))], axis=-1)
    A, b = reprojection_affine(K, camera.extrinsic, T_rel)
    P = p @ A.T + b
    ok = (P[:, 2] > 1e-9) & (depth.reshape(-1) > 0)
    z = np.where(ok, P[:, 2], 1.0)
    fl = np.where(ok[:, None], P[:, :2] / z[:, None] - pix, 0.0)
    return fl.reshape(H, W, 2), ok.reshape(H, W)


def dynamic_footprint(depth, weight_sum, cue, movable, camera, T_rel, threshold):
    """Dynamic flags from rendered depth and a flow cue map (all (H, W) maps)."""
    static, ok = induced_pixel_flow(depth, None, camera, T_rel, with_flow=False)
    ok &= weight_sum > WEIGHT_SUM_VALID
    residual = np.linalg.norm(cue - static, axis=-1)
    return ok & movable & (residual > threshold)


def mask_iou(a, b):
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.sum(a | b)
    return float(np.sum(a & b) / union) if union else 1.0


def evaluate_recovery(sdf, flow, frames, truth, oracle_sdf, oracle_flow, params, key, dynamic_threshold=2.0,
                      iou_threshold=None, sharpness=OCCUPANCY_SHARPNESS):
    """Scores of a fit at frame ``key`` against the synthetic ground truth.

    ``truth`` holds per-pixel reference depth, flow and hit/primitive maps
    (see ``synth.GroundTruth``). Returns a flat dict.
    """
    T_rel = frames.relative_pose(key, key + 1)
    views = render_views(sdf, flow, frames, key, params)
    depth_pred, depth_gt, epe, m_pred, m_gt = [], [], [], [], []
    for c, cam in enumerate(frames.cameras):
        v = views[c]
        hit = truth.hit[key, c]
        depth_pred.append(v["depth"][hit])
        depth_gt.append(truth.depth[key, c][hit])
        induced, ok = induced_pixel_flow(v["depth"], v["flow"], cam, T_rel)
        movable = frames.movable_masks[key, c]
        gt_dyn = movable & hit
        err = np.linalg.norm(induced - truth.flow[key, c], axis=-1)
        epe.append(np.where(ok, err, np.nan)[gt_dyn])
        pred_dyn = dynamic_footprint(v["depth"], v["weight_sum"], frames.flow_cues[key, c], movable, cam, T_rel,
                                     dynamic_threshold)
        m_pred.append(pred_dyn.reshape(-1))
        m_gt.append(gt_dyn.reshape(-1))
    dm = depth_metrics(np.concatenate(depth_pred), np.concatenate(depth_gt))
    epe = np.concatenate(epe)
    vs = float(np.min(sdf.spec.voxel_size))
    th = vs if iou_threshold is None else iou_threshold
    pred_occ = sdf_to_occupancy(sdf, sharpness)
    gt_occ = sdf_to_occupancy(oracle_sdf, sharpness)
    origins, dirs = lidar_query_rays(frames, key)
    ri = ray_iou(pred_occ, gt_occ, origins, dirs, RayIouConfig((th,)))
    mv = mave(flow.values, oracle_flow.values, pred_occ, gt_occ, frames.frame_interval,
              movable=np.linalg.norm(oracle_flow.values, axis=-1) > 0)
    return {
        **dm,
        # pixels whose rendered point ends up behind the camera have no flow
        "epe_dynamic": float(np.nanmean(epe)) if np.isfinite(epe).any() else float("nan"),
        "epe_dynamic_coverage": float(np.isfinite(epe).mean()) if len(epe) else float("nan"),
        "dynamic_mask_iou": mask_iou(np.concatenate(m_pred), np.concatenate(m_gt)),
        "ray_iou_1voxel": ri["ray_iou"],
        "mave": float("nan") if mv is None else mv,
    }


def lidar_query_rays(frames, t):
    pts, origin = frames.lidar[t]
    rays = lidar_rays(pts, origin)
    return rays.origins, rays.directions


def occupancy_from_sdf(sdf, sharpness=OCCUPANCY_SHARPNESS) -> OccupancyGrid:
    return sdf_to_occupancy(sdf, sharpness)
