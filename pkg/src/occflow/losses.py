"""Loss terms and dynamic/static disentanglement.

Each term has a plain evaluation function. Terms that the fitting loop
differentiates also have a ``*_grad`` companion returning the value together
with the derivative w.r.t. its immediate inputs; the objective chains those
back onto the grids.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .geometry import NonPositiveDepth, reproject_with_flow

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


class NonPositiveRange(ValueError):
    """A rendered or measured range is not strictly positive."""


@dataclass
class LossWeights:
    flow: float = 5e-3
    range: float = 0.2
    eik: float = 0.1
    hessian: float = 0.01
    smooth: float = 0.02
    dreg: float = 0.1
    thre: float = 10.0
    silog: float = 0.85
    photometric_mix: float = 0.85
    dynamic_threshold: float = 2.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be nonnegative")
        if self.thre <= 0:
            raise ValueError("thre must be positive")
        if not 0.0 <= self.silog <= 1.0 or not 0.0 <= self.photometric_mix <= 1.0:
            raise ValueError("silog and photometric_mix must lie in [0, 1]")

    def replace(self, **kw):
        d = asdict(self)
        d.update(kw)
        return LossWeights(**d)


@dataclass
class LossBreakdown:
    reproj: float = 0.0
    flow_static: float = 0.0
    flow_dynamic: float = 0.0
    range: float = 0.0
    eik: float = 0.0
    hessian: float = 0.0
    smooth: float = 0.0
    dreg: float = 0.0
    gamma: float = 1.0
    total: float = 0.0


def total_loss(components, weights, gamma=1.0, stage=2):
    """Weighted sum of loss components; stage 1 drops the flow and dreg terms.

    ``components`` is a mapping or LossBreakdown with the per-term values.
    """
    if isinstance(components, LossBreakdown):
        components = asdict(components)
    c = {k: float(components.get(k, 0.0)) for k in
         ("reproj", "flow_static", "flow_dynamic", "range", "eik", "hessian", "smooth", "dreg")}
    lam_flow = weights.flow if stage == 2 else 0.0
    lam_dreg = weights.dreg if stage == 2 else 0.0
    total = (
        c["reproj"]
        + lam_flow * (c["flow_static"] + gamma * c["flow_dynamic"])
        + weights.range * c["range"]
        + weights.eik * c["eik"]
        + weights.hessian * c["hessian"]
        + weights.smooth * c["smooth"]
        + lam_dreg * c["dreg"]
    )
    return LossBreakdown(**c, gamma=float(gamma), total=float(total))


# ---------------------------------------------------------------- photometric

def _ssim_parts(a, b):
    # patches (..., 3, 3, C); statistics over the 9 pixels per channel
    n = a.shape[-3] * a.shape[-2]
    mu_a = a.mean(axis=(-3, -2))
    mu_b = b.mean(axis=(-3, -2))
    da = a - mu_a[..., None, None, :]
    db = b - mu_b[..., None, None, :]
    var_a = (da * da).sum(axis=(-3, -2)) / n
    var_b = (db * db).sum(axis=(-3, -2)) / n
    cov = (da * db).sum(axis=(-3, -2)) / n
    A = 2 * mu_a * mu_b + SSIM_C1
    B = 2 * cov + SSIM_C2
    C = mu_a**2 + mu_b**2 + SSIM_C1
    D = var_a + var_b + SSIM_C2
    return n, mu_a, mu_b, da, db, A, B, C, D


def ssim(a, b):
    """Per-channel SSIM of two patches averaged over channels."""
    _, _, _, _, _, A, B, C, D = _ssim_parts(np.asarray(a, float), np.asarray(b, float))
    return (A * B / (C * D)).mean(axis=-1)


def photometric(patch_a, patch_b, alpha_pm=0.85):
    """Mix of D-SSIM and L1 between two (3, 3, 3) RGB patches (vectorized)."""
    a = np.asarray(patch_a, dtype=np.float64)
    b = np.asarray(patch_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("patch shapes differ")
    l1 = np.abs(a - b).mean(axis=(-3, -2, -1))
    return alpha_pm * (1.0 - ssim(a, b)) / 2.0 + (1.0 - alpha_pm) * l1


def photometric_grad(patch_a, patch_b, alpha_pm=0.85):
    """``photometric`` and its derivative w.r.t. ``patch_b``."""
    a = np.asarray(patch_a, dtype=np.float64)
    b = np.asarray(patch_b, dtype=np.float64)
    n, mu_a, mu_b, da, db, A, B, C, D = _ssim_parts(a, b)
    S = A * B / (C * D)
    channels = a.shape[-1]
    diff = b - a
    l1 = np.abs(diff).mean(axis=(-3, -2, -1))
    value = alpha_pm * (1.0 - S.mean(axis=-1)) / 2.0 + (1.0 - alpha_pm) * l1
    e = lambda x: x[..., None, None, :]
    dS = e(S) * (
        e(2 * mu_a / (n * A))
        + 2 * da / (n * e(B))
        - e(2 * mu_b / (n * C))
        - 2 * db / (n * e(D))
    )
    per_patch = a.shape[-3] * a.shape[-2] * a.shape[-1]
    grad = -alpha_pm / (2.0 * channels) * dS + (1.0 - alpha_pm) * np.sign(diff) / per_patch
    return value, grad


def bilinear_patch(images, image_index, uv):
    """Sample 3x3 patches centered at continuous pixels.

    ``images`` is (M, H, W, C); ``image_index`` (...) selects the image and
    ``uv`` (..., 2) the patch center. Returns ``(patch, d_patch_d_uv, valid)``
    with shapes (..., 3, 3, C), (..., 3, 3, C, 2) and (...). Invalid patches
    (any tap outside the image, NaN centers) are zero.
    """
    M, H, W, C = images.shape
    u = uv[..., 0]
    v = uv[..., 1]
    finite = np.isfinite(u) & np.isfinite(v)
    uf = np.where(finite, u, 0.0)
    vf = np.where(finite, v, 0.0)
    u0 = np.floor(uf).astype(np.int64)
    v0 = np.floor(vf).astype(np.int64)
    valid = finite & (u0 >= 1) & (u0 + 2 <= W - 1) & (v0 >= 1) & (v0 + 2 <= H - 1)
    u0 = np.where(valid, u0, 1)
    v0 = np.where(valid, v0, 1)
    fu = np.where(valid, uf - u0, 0.0)[..., None, None, None]
    fv = np.where(valid, vf - v0, 0.0)[..., None, None, None]
    flat = images.reshape(-1, C)
    off = np.arange(-1, 3)
    rows = v0[..., None] + off  # (..., 4)
    cols = u0[..., None] + off
    base = np.asarray(image_index)[..., None, None] * (H * W)
    lin = base + rows[..., :, None] * W + cols[..., None, :]
    block = flat[lin]  # (..., 4, 4, C)
    tl = block[..., :3, :3, :]
    tr = block[..., :3, 1:, :]
    bl = block[..., 1:, :3, :]
    br = block[..., 1:, 1:, :]
    patch = (1 - fu) * (1 - fv) * tl + fu * (1 - fv) * tr + (1 - fu) * fv * bl + fu * fv * br
    du = (1 - fv) * (tr - tl) + fv * (br - bl)
    dv = (1 - fu) * (bl - tl) + fu * (br - tr)
    vm = valid[..., None, None, None]
    patch = np.where(vm, patch, 0.0)
    grad = np.stack([np.where(vm, du, 0.0), np.where(vm, dv, 0.0)], axis=-1)
    return patch, grad, valid


def image_patch(image, x):
    """3x3 patch of an (H, W, C) image around integer pixel ``x = (u, v)``."""
    u, v = int(round(x[0])), int(round(x[1]))
    H, W = image.shape[:2]
    if not (1 <= u <= W - 2 and 1 <= v <= H - 2):
        raise ValueError("patch would leave the image")
    return image[v - 1 : v + 2, u - 1 : u + 2]


# ---------------------------------------------------------------- reprojection

def _sample_terms(sample, x, K, T_cam2ego, T_rel, z_scale, flow=None):
    """Reprojected pixels of every sample of one ray (NaN where invalid)."""
    z = sample.depths * z_scale
    f = sample.flow if flow is None else flow
    out = np.full(z.shape + (2,), np.nan)
    for i, (zi, fi) in enumerate(zip(z, f)):
        try:
            out[i] = reproject_with_flow(x, zi, fi, T_rel, K, T_cam2ego)
        except NonPositiveDepth:
            pass
    return out


def loss_reproj(sample, x, image_t, image_t1, T_rel, K, T_cam2ego, z_scale=1.0, alpha_pm=0.85):
    """Weighted photometric error of one rendered ray.

    ``sample`` is a single-ray :class:`~occflow.render.RaySample` slice
    (depths, flow and weights of shape (N,), (N, 2), (N,)). Samples whose
    reprojection leaves the image contribute nothing.
    """
    src = image_patch(image_t, x)
    uv = _sample_terms(sample, x, K, T_cam2ego, T_rel, z_scale)
    tgt, _, valid = bilinear_patch(image_t1[None], np.zeros(len(uv), dtype=np.int64), uv)
    photo = photometric(np.broadcast_to(src, tgt.shape), tgt, alpha_pm)
    return float(np.sum(np.where(valid, sample.weights * photo, 0.0)))


def loss_flow(sample, x, cue, T_rel, K, T_cam2ego, z_scale=1.0, flow=None):
    """Weighted L1 between the flow cue at ``x`` and sample-induced flow."""
    uv = _sample_terms(sample, x, K, T_cam2ego, T_rel, z_scale, flow)
    valid = np.all(np.isfinite(uv), axis=-1)
    err = np.abs(np.asarray(cue) - (uv - np.asarray(x))).sum(axis=-1)
    return float(np.sum(np.where(valid, sample.weights * np.where(valid, err, 0.0), 0.0)))


def static_flow(x, d, T_rel, K, T_cam2ego):
    """Ego-motion-only optical flow of pixel ``x`` at camera depth ``d``."""
    x = np.asarray(x, dtype=np.float64)
    return reproject_with_flow(x, d, np.zeros(x.shape[:-1] + (2,)), T_rel, K, T_cam2ego) - x


def dynamic_mask(f_opt, depth, T_rel, K, T_cam2ego, movable, threshold, valid=None, pixels=None):
    """Dynamic flags and residual flow ``f_opt - f_static`` for pixels.

    ``f_opt`` (..., 2), ``depth`` camera-z depth (...), ``movable`` bool (...).
    ``pixels`` defaults to the integer grid of an (H, W) map. Pixels without
    a valid depth are never dynamic; the returned ``ok`` flag marks pixels
    whose static flow could be computed.
    """
    f_opt = np.asarray(f_opt, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if pixels is None:
        H, W = depth.shape
        vv, uu = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
        pixels = np.stack([uu, vv], axis=-1).astype(np.float64)
    ok = depth > 0 if valid is None else (np.asarray(valid, bool) & (depth > 0))
    f_s = np.zeros_like(f_opt)
    if np.any(ok):
        from .geometry import backproject, reproject_points

        pts = backproject(K, T_cam2ego, pixels[ok], depth[ok])
        uv, z = reproject_points(K, T_cam2ego, pts, np.zeros(pts.shape[:-1] + (2,)), T_rel)
        front = z > 0
        sub = np.zeros((int(ok.sum()), 2))
        sub[front] = uv[front] - pixels[ok][front]
        idx = np.flatnonzero(ok.ravel())
        ok.ravel()[idx[~front]] = False
        f_s.reshape(-1, 2)[idx[front]] = sub[front]
    f_d = f_opt - f_s
    dyn = ok & np.asarray(movable, bool) & (np.linalg.norm(f_d, axis=-1) > threshold)
    return dyn, np.where(ok[..., None], f_d, 0.0), ok


def rebalance_gamma(m_all, m_dyn, thre):
    if m_all < 1:
        raise ValueError("need at least one sampled ray")
    if m_dyn == 0:
        return float(thre)
    return float(min(m_all / m_dyn, thre))


def rebalanced_flow_loss(static_value, dynamic_value, m_all, m_dyn, thre):
    """``L_s + gamma * L_d`` with the occurrence-based dynamic scale gamma."""
    gamma = rebalance_gamma(m_all, m_dyn, thre)
    if m_dyn == 0:
        dynamic_value = 0.0
    return static_value + gamma * dynamic_value, gamma


# ---------------------------------------------------------------- range

def loss_range(pred, gt, silog=0.85):
    """Scale-invariant log loss between rendered and measured ranges."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if np.any(pred <= 0) or np.any(gt <= 0):
        raise NonPositiveRange("ranges must be strictly positive")
    g = np.log(pred) - np.log(gt)
    return float(np.mean(g * g) - silog * np.mean(g) ** 2)


def loss_range_grad(pred, gt, silog=0.85):
    value = loss_range(pred, gt, silog)
    g = np.log(pred) - np.log(gt)
    M = len(g)
    grad = 2.0 * (g - silog * g.mean()) / (M * pred)
    return value, grad


# ---------------------------------------------------------------- SDF regularizers

def loss_eikonal(grad_samples):
    """Mean of (1 - |g|)^2 over sampled gradient vectors (..., 3)."""
    norm = np.linalg.norm(np.asarray(grad_samples, dtype=np.float64), axis=-1)
    return float(np.mean((1.0 - norm) ** 2))


def loss_eikonal_grad(grad_samples):
    g = np.asarray(grad_samples, dtype=np.float64)
    norm = np.linalg.norm(g, axis=-1)
    value = float(np.mean((1.0 - norm) ** 2))
    safe = np.where(norm > 0, norm, 1.0)
    coef = np.where(norm > 0, -2.0 * (1.0 - norm) / safe, 0.0) / norm.size
    return value, coef[..., None] * g


def loss_hessian(second):
    """Mean absolute second difference over interior voxels and six channels."""
    v = second.values if hasattr(second, "values") else np.asarray(second)
    inner = v[1:-1, 1:-1, 1:-1]
    return float(np.mean(np.abs(inner)))


def loss_hessian_grad(second):
    v = second.values if hasattr(second, "values") else np.asarray(second)
    inner = v[1:-1, 1:-1, 1:-1]
    grad = np.zeros_like(v)
    grad[1:-1, 1:-1, 1:-1] = np.sign(inner) / inner.size
    return float(np.mean(np.abs(inner))), grad


# ---------------------------------------------------------------- smoothness

_NORM_EPS = 1e-7


def _edge_terms(x, image):
    # x (..., h, w), image (..., h, w, 3)
    dx = x[..., :, 1:] - x[..., :, :-1]
    dy = x[..., 1:, :] - x[..., :-1, :]
    ex = np.exp(-np.abs(image[..., :, 1:, :] - image[..., :, :-1, :]).mean(axis=-1))
    ey = np.exp(-np.abs(image[..., 1:, :, :] - image[..., :-1, :, :]).mean(axis=-1))
    return dx, dy, ex, ey


def _edge_value(x, image):
    dx, dy, ex, ey = _edge_terms(x, image)
    return (np.abs(dx) * ex).mean(axis=(-2, -1)) + (np.abs(dy) * ey).mean(axis=(-2, -1))


def _edge_grad(x, image):
    dx, dy, ex, ey = _edge_terms(x, image)
    nx = dx.shape[-2] * dx.shape[-1]
    ny = dy.shape[-2] * dy.shape[-1]
    gx = np.sign(dx) * ex / nx
    gy = np.sign(dy) * ey / ny
    g = np.zeros_like(x)
    g[..., :, 1:] += gx
    g[..., :, :-1] -= gx
    g[..., 1:, :] += gy
    g[..., :-1, :] -= gy
    return g


def loss_smooth(depth, flow, image):
    """Edge-aware smoothness of one tile or a stack of tiles.

    ``depth`` (..., h, w), ``flow`` (..., h, w, 2) or None, ``image``
    (..., h, w, 3). Depth is mean-normalized per tile; the value is averaged
    over tiles.
    """
    depth = np.asarray(depth, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    if depth.shape[-1] < 2 or depth.shape[-2] < 2:
        raise ValueError("smoothness needs tiles of at least 2x2 pixels")
    mean = depth.mean(axis=(-2, -1), keepdims=True)
    value = _edge_value(depth / (mean + _NORM_EPS), image)
    if flow is not None:
        flow = np.asarray(flow, dtype=np.float64)
        for c in range(flow.shape[-1]):
            value = value + _edge_value(flow[..., c], image)
    return float(np.mean(value))


def loss_smooth_grad(depth, flow, image):
    """Value plus gradients w.r.t. depth (..., h, w) and flow (..., h, w, 2)."""
    value = loss_smooth(depth, flow, image)
    n_tiles = int(np.prod(depth.shape[:-2])) if depth.ndim > 2 else 1
    mean = depth.mean(axis=(-2, -1), keepdims=True)
    denom = mean + _NORM_EPS
    g_norm = _edge_grad(depth / denom, image) / n_tiles
    npx = depth.shape[-2] * depth.shape[-1]
    g_depth = g_norm / denom - (g_norm * depth).sum(axis=(-2, -1), keepdims=True) / denom**2 / npx
    g_flow = None
    if flow is not None:
        g_flow = np.stack([_edge_grad(flow[..., c], image) / n_tiles for c in range(flow.shape[-1])], axis=-1)
    return value, g_depth, g_flow


# ---------------------------------------------------------------- dynamic regularization

def loss_dreg(rendered_flows):
    """Mean L1 norm of rendered flows on static rays (M_s, 2)."""
    f = np.asarray(rendered_flows, dtype=np.float64).reshape(-1, 2)
    if len(f) == 0:
        return 0.0
    return float(np.abs(f).sum(axis=-1).mean())


def loss_dreg_grad(rendered_flows):
    f = np.asarray(rendered_flows, dtype=np.float64).reshape(-1, 2)
    if len(f) == 0:
        return 0.0, np.zeros_like(f)
    return loss_dreg(f), np.sign(f) / len(f)


def auxiliary_frame_probabilities(poses, t, sigma):
    """Sampling probabilities over frames before ``t`` from ego distance.

    Weights ``exp(-dist^2 / (2 sigma^2))``; as ``sigma -> 0`` all mass moves
    to the nearest previous frame.
    """
    if t < 1:
        return np.zeros(0)
    here = poses[t].translation
    dist = np.array([np.linalg.norm(poses[k].translation - here) for k in range(t)])
    if sigma <= 0:
        p = np.zeros(t)
        p[np.argmin(dist)] = 1.0
        return p
    logw = -(dist**2) / (2.0 * sigma**2)
    logw -= logw.max()
    w = np.exp(logw)
    return w / w.sum()


def sample_auxiliary_frame(poses, t, sigma, rng):
    p = auxiliary_frame_probabilities(poses, t, sigma)
    if len(p) == 0:
        return None
    return int(rng.choice(len(p), p=p))
