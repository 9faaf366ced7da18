"""Depth, ray-based occupancy, scene-flow and velocity metrics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .geometry import aabb_clip_batch


class EmptyEvalSet(ValueError):
    """No pixel or ray survived the validity masks."""


# -------------------------------------------------------------------- depth

@dataclass
class DepthEvalConfig:
    min_depth: float = 0.1
    max_depth: float = 80.0

    def __post_init__(self):
        if not 0 < self.min_depth < self.max_depth:
            raise ValueError("need 0 < min_depth < max_depth")


def depth_metrics(pred, gt, config=None, mask=None):
    """AbsRel, SqRel, RMSE and RMSElog over pixels with gt in range.

    Predictions are clipped into the evaluation range.
    """
    cfg = config or DepthEvalConfig()
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    valid = (gt >= cfg.min_depth) & (gt <= cfg.max_depth)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    if not np.any(valid):
        raise EmptyEvalSet("no ground-truth depth inside the evaluation range")
    p = np.clip(pred[valid], cfg.min_depth, cfg.max_depth)
    g = gt[valid]
    err = p - g
    return {
        "abs_rel": float(np.mean(np.abs(err) / g)),
        "sq_rel": float(np.mean(err**2 / g)),
        "rmse": float(np.sqrt(np.mean(err**2))),
        "rmse_log": float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
    }


# -------------------------------------------------------------------- RayIoU

@dataclass
class RayIouConfig:
    thresholds: tuple = (1.0, 2.0, 4.0)

    def __post_init__(self):
        th = tuple(float(t) for t in self.thresholds)
        if not th or any(t <= 0 for t in th) or any(b <= a for a, b in zip(th, th[1:])):
            raise ValueError("thresholds must be positive and strictly ascending")
        self.thresholds = th


def first_hit_distance(occupied, spec, origins, directions):
    """Entry distance of the first occupied voxel along each ray (NaN on a miss).

    Voxel traversal follows Amanatides and Woo; a ray starting inside an
    occupied voxel reports its clipped start distance.
    """
    occupied = np.asarray(occupied, dtype=bool)
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    origins = np.broadcast_to(origins, dirs.shape)
    R = len(dirs)
    out = np.full(R, np.nan)
    t_near, t_far, hit = aabb_clip_batch(origins, dirs, spec.lower, spec.upper)
    t0 = np.maximum(t_near, 0.0)
    dims = np.asarray(spec.dims)
    vs = spec.voxel_size
    start = origins + t0[:, None] * dirs
    cell = np.floor((start - spec.origin) / vs).astype(np.int64)
    cell = np.clip(cell, 0, dims - 1)
    step = np.where(dirs > 0, 1, np.where(dirs < 0, -1, 0))
    with np.errstate(divide="ignore", invalid="ignore"):
        bound = spec.origin + (cell + (step > 0)) * vs
        t_max = np.where(step != 0, (bound - origins) / dirs, np.inf)
        t_delta = np.where(step != 0, vs / np.abs(dirs), np.inf)
    t_entry = t0.copy()
    active = hit.copy()
    for _ in range(int(dims.sum()) + 3):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        c = cell[idx]
        occ = occupied[c[:, 0], c[:, 1], c[:, 2]]
        out[idx[occ]] = t_entry[idx[occ]]
        active[idx[occ]] = False
        idx = idx[~occ]
        axis = np.argmin(t_max[idx], axis=-1)
        t_entry[idx] = t_max[idx, axis]
        cell[idx, axis] += step[idx, axis]
        t_max[idx, axis] += t_delta[idx, axis]
        inside = (cell[idx, axis] >= 0) & (cell[idx, axis] < dims[axis]) & (t_entry[idx] <= t_far[idx])
        active[idx[~inside]] = False
    return out


def ray_iou(pred, gt, origins, directions, config=None):
    """Per-threshold ray IoU and their mean.

    A ray hitting both grids within the threshold is a true positive. A ray
    hitting both but too far apart counts once as false positive and once as
    false negative. Rays missing both grids are ignored.
    """
    cfg = config or RayIouConfig()
    if pred.spec != gt.spec:
        raise ValueError("grids must share a spec")
    d_pred = first_hit_distance(pred.binary, pred.spec, origins, directions)
    d_gt = first_hit_distance(gt.binary, gt.spec, origins, directions)
    hp = np.isfinite(d_pred)
    hg = np.isfinite(d_gt)
    both = hp & hg
    err = np.abs(np.where(both, d_pred - d_gt, np.inf))
    ious = []
    for th in cfg.thresholds:
        tp = int(np.sum(both & (err < th)))
        denom = int(hp.sum()) + int(hg.sum()) - tp
        ious.append(tp / denom if denom else 1.0)
    return {"iou": ious, "thresholds": list(cfg.thresholds), "ray_iou": float(np.mean(ious))}


def mean_over_thresholds(ious):
    """Aggregate per-threshold IoUs into the reported RayIoU."""
    return float(np.mean(np.asarray(ious, dtype=np.float64)))


# -------------------------------------------------------------------- scene flow

def scene_flow_metrics(pred_depth, pred_flow, gt_depth, gt_flow, fg_mask, focal, baseline, valid=None):
    """DE, EPE, their foreground variants and D1/F1/SF1 outlier rates.

    Disparity is ``focal * baseline / depth``. A disparity outlier has error
    at least 4 px and at least 5 % of the gt disparity; a flow outlier at
    least 8 px and at least 10 % of the gt flow magnitude.
    """
    pred_depth = np.asarray(pred_depth, dtype=np.float64)
    gt_depth = np.asarray(gt_depth, dtype=np.float64)
    pred_flow = np.asarray(pred_flow, dtype=np.float64)
    gt_flow = np.asarray(gt_flow, dtype=np.float64)
    fg = np.asarray(fg_mask, dtype=bool)
    ok = (gt_depth > 0) & (pred_depth > 0)
    if valid is not None:
        ok &= np.asarray(valid, dtype=bool)
    if not np.any(ok):
        raise EmptyEvalSet("no valid pixels for scene-flow evaluation")
    disp_p = focal * baseline / np.where(ok, pred_depth, 1.0)
    disp_g = focal * baseline / np.where(ok, gt_depth, 1.0)
    de = np.abs(disp_p - disp_g)
    epe = np.linalg.norm(pred_flow - gt_flow, axis=-1)
    mag = np.linalg.norm(gt_flow, axis=-1)
    d1 = (de >= 4.0) & (de >= 0.05 * disp_g)
    f1 = (epe >= 8.0) & (epe >= 0.10 * mag)
    sf = d1 | f1
    okf = ok & fg
    nan = float("nan")
    return {
        "DE": float(de[ok].mean()),
        "EPE": float(epe[ok].mean()),
        "DE_FG": float(de[okf].mean()) if np.any(okf) else nan,
        "EPE_FG": float(epe[okf].mean()) if np.any(okf) else nan,
        "D1_5%": float(d1[ok].mean()),
        "F1_10%": float(f1[ok].mean()),
        "SF1_10%": float(sf[ok].mean()),
    }


# -------------------------------------------------------------------- velocity

def mave(pred_flow, gt_flow, pred_occ, gt_occ, frame_interval, movable=None, radius=2.0) -> Optional[float]:
    """Mean velocity error (m/s) of gt-occupied movable voxels matched to the
    nearest pred-occupied voxel within ``radius`` meters; None if nothing matches."""
    if frame_interval <= 0:
        raise ValueError("frame interval must be positive")
    spec = gt_occ.spec
    if pred_occ.spec != spec:
        raise ValueError("grids must share a spec")
    gt_mask = gt_occ.binary if movable is None else (gt_occ.binary & np.asarray(movable, dtype=bool))
    if not np.any(gt_mask) or not np.any(pred_occ.binary):
        return None
    centers = spec.centers()
    tree = cKDTree(centers[pred_occ.binary])
    dist, nearest = tree.query(centers[gt_mask], distance_upper_bound=radius)
    matched = np.isfinite(dist)
    if not np.any(matched):
        return None
    pv = np.asarray(pred_flow)[pred_occ.binary][nearest[matched]] / frame_interval
    gv = np.asarray(gt_flow)[gt_mask][matched] / frame_interval
    return float(np.mean(np.linalg.norm(pv - gv, axis=-1)))
