"""Batch loss evaluation with analytic reverse-mode gradients.

A batch holds camera rays (grouped in square pixel tiles so that patch and
smoothness terms are defined) and LiDAR rays. :func:`evaluate_batch` renders
both, evaluates every enabled loss term and, on request, pulls the loss
gradient back through the compositing weights, reprojection, image sampling
and trilinear stencils onto the SDF and flow grids.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import Rays, aabb_clip_batch, pixel_rays, ray_depth_scale, reprojection_affine
from .grid import gather, scatter, sdf_gradient_adjoint, sdf_second_differences_adjoint
from .grid import ScalarField, _diff, sdf_second_differences
from ._kernels import photometric_samples
from .losses import (
    LossBreakdown,
    loss_dreg_grad,
    loss_eikonal_grad,
    loss_hessian_grad,
    loss_range_grad,
    loss_smooth_grad,
    rebalance_gamma,
    sample_auxiliary_frame,
)
from .render import WEIGHT_SUM_VALID, RenderParams, render_samples, sample_points, weights_backward

ALL_TERMS = frozenset({"reproj", "flow", "range", "eik", "hessian", "smooth", "dreg"})


class NonFiniteGradient(FloatingPointError):
    """The reverse pass produced NaN or Inf."""


@dataclass
class CameraBatch:
    rays: Rays
    depths: np.ndarray
    pixels: np.ndarray
    z_scale: np.ndarray
    src_patch: np.ndarray
    images: np.ndarray
    tgt_image: np.ndarray
    A: np.ndarray
    b: np.ndarray
    cue: Optional[np.ndarray] = None
    movable: Optional[np.ndarray] = None
    tile_shape: tuple = (1, 8, 8)
    image_tiles: Optional[np.ndarray] = None
    aux_A: Optional[np.ndarray] = None
    aux_b: Optional[np.ndarray] = None
    aux_cue: Optional[np.ndarray] = None
    # detached masks; recomputed from the render when None
    dynamic: Optional[np.ndarray] = None
    depth_ok: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.rays)


@dataclass
class LidarBatch:
    rays: Rays
    depths: np.ndarray

    def __len__(self):
        return len(self.rays)


@dataclass
class ObjectiveOptions:
    stage: int = 2
    dynamic_disentangle: bool = True
    forward_static_flow: bool = True
    backward_static_flow: bool = True
    # charge residual transmittance to the last sample (the grid boundary)
    boundary_background: bool = True
    terms: frozenset = ALL_TERMS


@dataclass
class BatchResult:
    losses: LossBreakdown
    grad_sdf: Optional[np.ndarray]
    grad_flow: Optional[np.ndarray]
    dynamic: Optional[np.ndarray] = None
    depth_ok: Optional[np.ndarray] = None
    info: dict = field(default_factory=dict)


def _project_affine(A, b, points):
    P = np.einsum("rij,rnj->rni", A, points) + b[:, None, :]
    z = P[..., 2]
    front = z > 1e-9
    zs = np.where(front, z, 1.0)
    uv = P[..., :2] / zs[..., None]
    uv = np.where(front[..., None], uv, np.nan)
    return uv, zs, front


def _flow_jacobian(A, uv, z):
    """d(pixel)/d(horizontal flow), shape (R, N, 2, 2)."""
    A2 = A[:, None, :, :2]  # (R, 1, 3, 2)
    u = np.nan_to_num(uv[..., 0])[..., None]
    v = np.nan_to_num(uv[..., 1])[..., None]
    row_u = (A2[..., 0, :] - u * A2[..., 2, :]) / z[..., None]
    row_v = (A2[..., 1, :] - v * A2[..., 2, :]) / z[..., None]
    return np.stack([row_u, row_v], axis=-2)


def compute_dynamic_mask(cam, sample, threshold):
    """Detached dynamic flags from the rendered depth of each camera ray."""
    ok = sample.weight_sum > WEIGHT_SUM_VALID
    point = cam.rays.at(sample.depth)
    P = np.einsum("rij,rj->ri", cam.A, point) + cam.b
    ok &= P[:, 2] > 1e-9
    zs = np.where(ok, P[:, 2], 1.0)
    f_s = P[:, :2] / zs[:, None] - cam.pixels
    f_d = cam.cue - f_s
    dyn = ok & cam.movable & (np.linalg.norm(f_d, axis=-1) > threshold)
    return dyn, ok


def _flow_l1(cue, uv, pixels, valid):
    induced = uv - pixels[:, None, :]
    diff = cue[:, None, :] - induced
    err = np.where(valid, np.abs(np.nan_to_num(diff)).sum(axis=-1), 0.0)
    sign = np.where(valid[..., None], np.sign(np.nan_to_num(diff)), 0.0)
    return err, sign


def evaluate_batch(sdf_values, flow_values, spec, cam, lidar, weights, xi, options=None, need_grad=True):
    """Loss breakdown and gradients for one ray batch.

    ``flow_values`` is ignored (treated as zero) in stage 1. Pass
    ``cam.dynamic`` / ``cam.depth_ok`` to freeze the dynamic mask.
    """
    opt = options or ObjectiveOptions()
    terms = opt.terms
    stage2 = opt.stage == 2
    flow_on = stage2 and flow_values is not None
    V = spec.num_voxels
    comps = dict(reproj=0.0, flow_static=0.0, flow_dynamic=0.0, range=0.0, eik=0.0, hessian=0.0, smooth=0.0, dreg=0.0)
    result = BatchResult(LossBreakdown(), None, None)

    # term coefficients in the total
    lam_flow = weights.flow if (stage2 and "flow" in terms) else 0.0
    lam_dreg = weights.dreg if (stage2 and "dreg" in terms and opt.dynamic_disentangle) else 0.0

    g_sdf = np.zeros(V)
    g_flow = np.zeros((V, 2))
    gamma = 1.0

    cs = None
    if cam is not None and len(cam):
        cs = render_samples(sdf_values, flow_values if flow_on else None, spec, cam.rays, cam.depths, xi)
        R, N = cs.depths.shape
        gw = np.zeros((R, N))
        gf = np.zeros((R, N, 2))
        moved = cs.points.copy()
        if flow_on:
            moved[..., :2] += cs.flow
        uv, z, front = _project_affine(cam.A, cam.b, moved)
        J = _flow_jacobian(cam.A, uv, z) if flow_on else None
        # weights seen by the image-space terms, and the map from their
        # per-sample costs to d/dw
        w_img = cs.weights.copy()
        if opt.boundary_background:
            w_img[:, -1] += 1.0 - cs.weight_sum
            dcost = lambda c: c - c[:, -1:]
        else:
            dcost = lambda c: c

        # ------------------------------------------------ photometric
        if "reproj" in terms:
            photo, g_uv, valid = photometric_samples(
                cam.images, cam.tgt_image, cam.src_patch, np.where(front[..., None], uv, np.nan),
                weights.photometric_mix,
            )
            comps["reproj"] = float(np.sum(w_img * photo) / R)
            if need_grad:
                gw += dcost(photo) / R
                if flow_on:
                    g_uv *= (w_img / R)[..., None]
                    gf += np.einsum("rnk,rnkj->rnj", g_uv, J)

        # ------------------------------------------------ dynamic disentanglement
        if stage2 and cam.cue is not None and ("flow" in terms or "dreg" in terms):
            if cam.dynamic is None:
                dyn, ok = compute_dynamic_mask(cam, cs, weights.dynamic_threshold)
            else:
                dyn, ok = cam.dynamic, cam.depth_ok
            result.dynamic, result.depth_ok = dyn, ok
            if opt.dynamic_disentangle:
                static = ok & ~dyn
                m_dyn = int(dyn.sum())
                gamma = rebalance_gamma(R, m_dyn, weights.thre)
            else:
                static = np.ones(R, dtype=bool)
                dyn = np.zeros(R, dtype=bool)
                gamma = 1.0
            result.info.update(m_all=R, m_dyn=int(dyn.sum()), m_static=int(static.sum()))

            if "flow" in terms:
                c_s = lam_flow
                c_d = lam_flow * gamma
                sample_ok = front & np.all(np.isfinite(uv), axis=-1)
                pinned = opt.dynamic_disentangle and opt.forward_static_flow
                # rays supervised with the field flow f_i
                free_rays = dyn | (static & (not pinned))
                if np.any(free_rays):
                    err, sign = _flow_l1(cam.cue, uv, cam.pixels, sample_ok & free_rays[:, None])
                    ray_loss = np.sum(w_img * err, axis=-1) / R
                    comps["flow_static"] += float(ray_loss[static & free_rays].sum())
                    comps["flow_dynamic"] += float(ray_loss[dyn].sum())
                    if need_grad:
                        coef = np.where(dyn, c_d, c_s)[:, None]
                        gw += coef * dcost(err) / R
                        if flow_on:
                            g_uv = -sign * (coef * w_img / R)[..., None]
                            gf += np.einsum("rnk,rnkj->rnj", g_uv, J)
                # geometry-only supervision on static rays: flow pinned to zero
                if pinned and np.any(static):
                    uv0, _, front0 = _project_affine(cam.A, cam.b, cs.points)
                    err0, _ = _flow_l1(cam.cue, uv0, cam.pixels, front0 & static[:, None])
                    comps["flow_static"] += float(np.sum(w_img * err0) / R)
                    if need_grad:
                        gw += c_s * dcost(err0) / R
                if (opt.dynamic_disentangle and opt.backward_static_flow and cam.aux_A is not None
                        and np.any(static)):
                    uva, _, fronta = _project_affine(cam.aux_A, cam.aux_b, cs.points)
                    erra, _ = _flow_l1(cam.aux_cue, uva, cam.pixels, fronta & static[:, None])
                    comps["flow_static"] += float(np.sum(w_img * erra) / R)
                    if need_grad:
                        gw += c_s * dcost(erra) / R

            if "dreg" in terms and opt.dynamic_disentangle and flow_on and np.any(static):
                val, gF = loss_dreg_grad(cs.rendered_flow[static])
                comps["dreg"] = val
                if need_grad:
                    gFull = np.zeros((R, 2))
                    gFull[static] = lam_dreg * gF
                    gw += np.einsum("rc,rnc->rn", gFull, cs.flow)
                    gf += cs.weights[..., None] * gFull[:, None, :]

        # ------------------------------------------------ edge-aware smoothness
        if "smooth" in terms and cam.image_tiles is not None:
            T, th, tw = cam.tile_shape
            dz = (cs.depth * cam.z_scale).reshape(T, th, tw)
            fl = cs.rendered_flow.reshape(T, th, tw, 2) if flow_on else None
            val, g_dz, g_fl = loss_smooth_grad(dz, fl, cam.image_tiles)
            comps["smooth"] = val
            if need_grad:
                c = weights.smooth
                g_depth = c * g_dz.reshape(R) * cam.z_scale
                gw += g_depth[:, None] * cs.depths
                if fl is not None:
                    gF = c * g_fl.reshape(R, 2)
                    gw += np.einsum("rc,rnc->rn", gF, cs.flow)
                    gf += cs.weights[..., None] * gF[:, None, :]

        if need_grad:
            gs = weights_backward(cs, gw)
            idx, wts = cs.stencil
            g_sdf += scatter(gs[..., None], idx, wts, V)[:, 0]
            if flow_on:
                g_flow += scatter(gf, idx, wts, V)
        result.info["camera_depth"] = cs.depth
        result.info["camera_weight_sum"] = cs.weight_sum

    # ---------------------------------------------------- LiDAR range
    ls = None
    if lidar is not None and len(lidar):
        ls = render_samples(sdf_values, None, spec, lidar.rays, lidar.depths, xi)
        if "range" in terms:
            ok = (ls.weight_sum > WEIGHT_SUM_VALID) & (ls.depth > 0)
            if ok.sum() >= 2:
                val, gD = loss_range_grad(ls.depth[ok], lidar.rays.gt_range[ok], weights.silog)
                comps["range"] = val
                if need_grad:
                    gDfull = np.zeros(len(lidar))
                    gDfull[ok] = weights.range * gD
                    gs = weights_backward(ls, gDfull[:, None] * ls.depths)
                    idx, wts = ls.stencil
                    g_sdf += scatter(gs[..., None], idx, wts, V)[:, 0]

    # ---------------------------------------------------- eikonal at all sample points
    if "eik" in terms and (cs is not None or ls is not None):
        h = spec.voxel_size
        gfield = np.stack([_diff(sdf_values, a, h[a]) for a in range(3)], axis=-1).reshape(V, 3)
        stencils = [s.stencil for s in (cs, ls) if s is not None]
        samples = [gather(gfield, idx, wts).reshape(-1, 3) for idx, wts in stencils]
        allg = np.concatenate(samples, axis=0)
        val, gg = loss_eikonal_grad(allg)
        comps["eik"] = val
        if need_grad:
            acc = np.zeros((V, 3))
            start = 0
            for (idx, wts), smp in zip(stencils, samples):
                n = len(smp)
                part = weights.eik * gg[start : start + n].reshape(idx.shape[:-1] + (3,))
                acc += scatter(part, idx, wts, V)
                start += n
            g_sdf += sdf_gradient_adjoint(acc.reshape(spec.dims + (3,)), spec).reshape(V)

    # ---------------------------------------------------- Hessian
    if "hessian" in terms:
        second = sdf_second_differences(ScalarField(spec, sdf_values.reshape(spec.dims)))
        val, gsec = loss_hessian_grad(second)
        comps["hessian"] = val
        if need_grad:
            g_sdf += weights.hessian * sdf_second_differences_adjoint(gsec, spec).reshape(V)

    total = (
        comps["reproj"]
        + lam_flow * (comps["flow_static"] + gamma * comps["flow_dynamic"])
        + weights.range * comps["range"]
        + weights.eik * comps["eik"]
        + weights.hessian * comps["hessian"]
        + weights.smooth * comps["smooth"]
        + lam_dreg * comps["dreg"]
    )
    result.losses = LossBreakdown(**comps, gamma=float(gamma), total=float(total))
    if need_grad:
        if not (np.all(np.isfinite(g_sdf)) and np.all(np.isfinite(g_flow))):
            raise NonFiniteGradient(f"non-finite gradient; losses {result.losses}")
        result.grad_sdf = g_sdf.reshape(spec.dims)
        result.grad_flow = g_flow.reshape(spec.dims + (2,)) if flow_on else np.zeros(spec.dims + (2,))
    return result


# -------------------------------------------------------------------- batches

def _tile_anchor_mask(valid, th, tw):
    """True at (v, u) when the th x tw tile starting there is fully valid."""
    H, W = valid.shape
    c = np.zeros((H + 1, W + 1), dtype=np.int64)
    c[1:, 1:] = np.cumsum(np.cumsum(valid.astype(np.int64), axis=0), axis=1)
    total = c[th:, tw:] - c[:-th, tw:] - c[th:, :-tw] + c[:-th, :-tw]
    return total == th * tw


class RaySampler:
    """Draws tile-grouped camera rays and LiDAR rays at one key frame."""

    def __init__(self, frames, spec, key_frame, tile=8, sigma_aux=1.0):
        if frames.num_frames < 2:
            raise ValueError("fitting needs at least two frames")
        if not 0 <= key_frame < frames.num_frames - 1:
            raise ValueError("key frame needs a following frame")
        self.frames = frames
        self.spec = spec
        self.key = key_frame
        self.tile = tile
        self.sigma_aux = sigma_aux
        T, C, H, W, _ = frames.images.shape
        self.images = frames.images.reshape(T * C, H, W, 3)
        self.size = (W, H)
        T_next = frames.relative_pose(key_frame, key_frame + 1)
        vv, uu = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
        pix = np.stack([uu, vv], axis=-1).reshape(-1, 2).astype(np.float64)
        self.pixels = pix
        self.cams = []
        for c, cam in enumerate(frames.cameras):
            rays = pixel_rays(cam.intrinsics.K, cam.extrinsic, pix)
            _, _, hit = aabb_clip_batch(rays.origins, rays.directions, spec.lower, spec.upper)
            valid = hit.reshape(H, W).copy()
            valid[0, :] = valid[-1, :] = False
            valid[:, 0] = valid[:, -1] = False
            anchors = np.argwhere(_tile_anchor_mask(valid, tile, tile))
            A, b = reprojection_affine(cam.intrinsics.K, cam.extrinsic, T_next)
            self.cams.append(dict(
                rays=rays,
                z_scale=ray_depth_scale(cam.intrinsics.K, pix),
                anchors=anchors,
                A=A,
                b=b,
                src=key_frame * C + c,
                tgt=(key_frame + 1) * C + c,
                cam=cam,
            ))
        self.has_cues = frames.flow_cues is not None
        self.aux_frames = []
        if frames.backward_cues:
            self.aux_frames = sorted(k[1] for k in frames.backward_cues if k[0] == key_frame)
        self.lidar_rays = None
        if frames.lidar is not None and frames.lidar[key_frame] is not None:
            from .geometry import lidar_rays

            pts, origin = frames.lidar[key_frame]
            if len(pts):
                rays = lidar_rays(pts, origin)
                _, _, hit = aabb_clip_batch(rays.origins, rays.directions, spec.lower, spec.upper)
                self.lidar_rays = rays[hit]

    def all_camera_pixels(self, camera):
        W, H = self.size
        return self.cams[camera]["rays"], self.cams[camera]["z_scale"]

    def camera_batch(self, n_tiles, params, rng, aux=True):
        W, H = self.size
        C = len(self.cams)
        th = tw = self.tile
        cam_ids = rng.integers(0, C, size=n_tiles)
        sel_pix = []
        per_ray_cam = []
        for c in cam_ids:
            anchors = self.cams[c]["anchors"]
            v0, u0 = anchors[rng.integers(0, len(anchors))]
            vv, uu = np.meshgrid(np.arange(v0, v0 + th), np.arange(u0, u0 + tw), indexing="ij")
            sel_pix.append((vv * W + uu).reshape(-1))
            per_ray_cam.append(np.full(th * tw, c))
        sel_pix = np.concatenate(sel_pix)
        per_ray_cam = np.concatenate(per_ray_cam)
        origins = np.empty((len(sel_pix), 3))
        dirs = np.empty((len(sel_pix), 3))
        zs = np.empty(len(sel_pix))
        for c in range(C):
            m = per_ray_cam == c
            if np.any(m):
                origins[m] = self.cams[c]["rays"].origins[sel_pix[m]]
                dirs[m] = self.cams[c]["rays"].directions[sel_pix[m]]
                zs[m] = self.cams[c]["z_scale"][sel_pix[m]]
        rays = Rays(origins, dirs, "camera", pixels=self.pixels[sel_pix])
        return self._assemble(rays, sel_pix, per_ray_cam, zs, (n_tiles, th, tw), params, rng, aux)

    def _assemble(self, rays, sel_pix, per_ray_cam, zs, tile_shape, params, rng, aux):
        frames = self.frames
        W, H = self.size
        C = len(self.cams)
        depths = sample_points(rays, self.spec, params, rng)
        As = np.stack([self.cams[c]["A"] for c in range(C)])[per_ray_cam]
        bs = np.stack([self.cams[c]["b"] for c in range(C)])[per_ray_cam]
        src = np.array([self.cams[c]["src"] for c in range(C)])[per_ray_cam]
        tgt = np.array([self.cams[c]["tgt"] for c in range(C)])[per_ray_cam]
        pix = self.pixels[sel_pix]
        u = pix[:, 0].astype(np.int64)
        v = pix[:, 1].astype(np.int64)
        off = np.arange(-1, 2)
        src_patch = self.images[src[:, None, None], v[:, None, None] + off[None, :, None], u[:, None, None] + off[None, None, :]]
        image_tiles = self.images[src, v, u].reshape(tile_shape + (3,))
        cue = movable = None
        if self.has_cues:
            cue = frames.flow_cues[self.key][per_ray_cam, v, u]
            movable = (frames.movable_masks[self.key][per_ray_cam, v, u]
                       if frames.movable_masks is not None else np.zeros(len(u), dtype=bool))
        batch = CameraBatch(
            rays=rays, depths=depths, pixels=pix, z_scale=zs, src_patch=src_patch, images=self.images,
            tgt_image=tgt, A=As, b=bs, cue=cue, movable=movable, tile_shape=tile_shape, image_tiles=image_tiles,
        )
        if aux and self.aux_frames and self.has_cues:
            probs_frames = self.aux_frames
            t_aux = sample_auxiliary_frame(frames.poses, self.key, self.sigma_aux, rng)
            if t_aux is not None and t_aux in probs_frames:
                T_aux = frames.relative_pose(self.key, t_aux)
                Aa, ba = [], []
                for c in range(C):
                    cam = self.cams[c]["cam"]
                    A, b = reprojection_affine(cam.intrinsics.K, cam.extrinsic, T_aux)
                    Aa.append(A)
                    ba.append(b)
                batch.aux_A = np.stack(Aa)[per_ray_cam]
                batch.aux_b = np.stack(ba)[per_ray_cam]
                batch.aux_cue = frames.backward_cues[(self.key, t_aux)][per_ray_cam, v, u]
        return batch

    def lidar_batch(self, n_rays, params, rng):
        if self.lidar_rays is None or n_rays <= 0:
            return None
        n = len(self.lidar_rays)
        sel = rng.choice(n, size=min(n_rays, n), replace=False)
        rays = self.lidar_rays[np.sort(sel)]
        return LidarBatch(rays, sample_points(rays, self.spec, params, rng))
