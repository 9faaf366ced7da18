"""NeuS-style compositing over SDF grids and expectation rendering.

Opacities follow the pairwise NeuS rule
``alpha_i = max((phi(s_i) - phi(s_i+1)) / phi(s_i), 0)`` with
``phi(x) = sigmoid(xi * x)``, evaluated in log space. The last sample along a
ray carries no opacity. There is no background model: rays that leave the
grid with residual transmittance simply have a weight sum below one.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import Rays, aabb_clip_batch, pixel_rays, ray_depth_scale
from .grid import gather, trilinear_stencil

# losses mask rays whose weight sum is at or below this
WEIGHT_SUM_VALID = 0.05


class NoIntersection(ValueError):
    """A ray does not intersect the grid volume."""


@dataclass
class RenderParams:
    n_samples: int = 128
    xi: float = 50.0
    jitter: bool = False

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError("need at least two samples per ray")
        if self.xi <= 0:
            raise ValueError("temperature xi must be positive")

    @classmethod
    def for_grid(cls, spec, n_samples=128, jitter=False, xi_per_voxel=10.0):
        """Default temperature of ``xi_per_voxel / voxel_size``."""
        return cls(n_samples, xi_per_voxel / float(np.min(spec.voxel_size)), jitter)


def sample_points(rays, spec, params, rng=None):
    """Stratified depths inside the grid box, shape (R, N), ascending.

    Without jitter the bin midpoints are used.
    """
    t_near, t_far, hit = aabb_clip_batch(rays.origins, rays.directions, spec.lower, spec.upper)
    if not np.all(hit):
        raise NoIntersection(f"{int(np.sum(~hit))} ray(s) miss the grid")
    start = np.maximum(t_near, 0.0)
    n = params.n_samples
    width = (t_far - start) / n
    if params.jitter:
        if rng is None:
            rng = np.random.default_rng()
        offsets = rng.random((len(start), n))
    else:
        offsets = np.full((len(start), n), 0.5)
    return start[:, None] + (np.arange(n)[None, :] + offsets) * width[:, None]


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def neus_alphas(s, xi):
    """Opacities for consecutive SDF samples, shape (..., N-1)."""
    lp = _log_sigmoid(xi * np.asarray(s, dtype=np.float64))
    delta = lp[..., 1:] - lp[..., :-1]
    return -np.expm1(np.minimum(delta, 0.0))


def transmittance(alpha):
    """Exclusive cumulative product of (1 - alpha)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    keep = np.cumprod(1.0 - alpha, axis=-1)
    ones = np.ones(alpha.shape[:-1] + (1,))
    return np.concatenate([ones, keep[..., :-1]], axis=-1)


def composite_weights(alpha):
    alpha = np.asarray(alpha, dtype=np.float64)
    return alpha * transmittance(alpha)


def render_expectation(w, v):
    """Weighted sum over the sample axis; ``v`` may carry a trailing channel axis."""
    w = np.asarray(w, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == w.ndim:
        return np.sum(w * v, axis=-1)
    return np.einsum("...n,...nc->...c", w, v)


@dataclass
class RaySample:
    depths: np.ndarray
    sdf: np.ndarray
    flow: np.ndarray
    alphas: np.ndarray
    weights: np.ndarray
    depth: np.ndarray
    rendered_flow: np.ndarray
    weight_sum: np.ndarray
    # cached for the adjoint pass
    points: Optional[np.ndarray] = None
    stencil: Optional[tuple] = None
    log_phi: Optional[np.ndarray] = None
    log_phi_neg: Optional[np.ndarray] = None
    delta: Optional[np.ndarray] = None
    trans: Optional[np.ndarray] = None
    xi: float = 0.0


def render_samples(sdf_values, flow_values, spec, rays, depths, xi):
    """Render rays at fixed sample depths over raw grid arrays.

    ``flow_values`` may be None (treated as a zero flow field).
    """
    points = rays.at(depths)
    idx, wts = trilinear_stencil(spec, points)
    V = spec.num_voxels
    s = gather(sdf_values.reshape(V, 1), idx, wts)[..., 0]
    if flow_values is None:
        f = np.zeros(s.shape + (2,))
    else:
        f = gather(flow_values.reshape(V, 2), idx, wts)
    lp = _log_sigmoid(xi * s)
    lpn = _log_sigmoid(-xi * s)
    delta = lp[..., 1:] - lp[..., :-1]
    alpha = np.zeros_like(s)
    alpha[..., :-1] = -np.expm1(np.minimum(delta, 0.0))
    trans = transmittance(alpha)
    w = alpha * trans
    return RaySample(
        depths=depths,
        sdf=s,
        flow=f,
        alphas=alpha,
        weights=w,
        depth=np.sum(w * depths, axis=-1),
        rendered_flow=np.einsum("rn,rnc->rc", w, f),
        weight_sum=w.sum(axis=-1),
        points=points,
        stencil=(idx, wts),
        log_phi=lp,
        log_phi_neg=lpn,
        delta=delta,
        trans=trans,
        xi=xi,
    )


def weights_backward(sample, grad_w):
    """Pull dL/dw back to dL/ds along each ray (shape (R, N))."""
    alpha, trans = sample.alphas, sample.trans
    R, N = alpha.shape
    # dL/dalpha_k = T_k * (g_k - U_k), U_k = sum_{i>k} g_i alpha_i prod_{k<j<i}(1 - alpha_j)
    U = np.zeros((R, N))
    for k in range(N - 2, -1, -1):
        U[:, k] = grad_w[:, k + 1] * alpha[:, k + 1] + (1.0 - alpha[:, k + 1]) * U[:, k + 1]
    grad_alpha = trans * (grad_w - U)
    ga = grad_alpha[:, :-1]
    active = sample.delta < 0.0
    e = np.where(active, np.exp(np.minimum(sample.delta, 0.0)), 0.0)
    # d log(phi(s)) / ds = xi * sigmoid(-xi s)
    dlp = sample.xi * np.exp(sample.log_phi_neg)
    grad_s = np.zeros((R, N))
    grad_s[:, :-1] += ga * e * dlp[:, :-1]
    grad_s[:, 1:] -= ga * e * dlp[:, 1:]
    return grad_s


def render_ray(sdf, flow, rays, params, rng=None):
    """Render a batch of rays through the SDF and flow fields."""
    depths = sample_points(rays, sdf.spec, params, rng)
    flow_values = None if flow is None else flow.values
    return render_samples(sdf.values, flow_values, sdf.spec, rays, depths, params.xi)


def render_tile(sdf, flow, camera, tile, params, rng=None, chunk=8192):
    """Render a pixel rectangle ``(u0, v0, u1, v1)`` (half-open) of a camera.

    Returns camera-z depth, rendered flow (ego meters, 2 channels) and weight
    sum maps of shape (v1 - v0, u1 - u0). Pixels whose ray misses the grid
    carry depth 0 and weight sum 0.
    """
    u0, v0, u1, v1 = (int(c) for c in tile)
    K = camera.intrinsics
    if u0 < 0 or v0 < 0 or u1 > K.width or v1 > K.height or u1 <= u0 or v1 <= v0:
        raise ValueError(f"tile {tile} outside image bounds {K.width}x{K.height}")
    vv, uu = np.meshgrid(np.arange(v0, v1), np.arange(u0, u1), indexing="ij")
    pixels = np.stack([uu, vv], axis=-1).reshape(-1, 2).astype(np.float64)
    rays = pixel_rays(K.K, camera.extrinsic, pixels)
    scale = ray_depth_scale(K.K, pixels)
    n = len(pixels)
    depth = np.zeros(n)
    fl = np.zeros((n, 2))
    wsum = np.zeros(n)
    spec = sdf.spec
    _, _, hit = aabb_clip_batch(rays.origins, rays.directions, spec.lower, spec.upper)
    hit_idx = np.flatnonzero(hit)
    for start in range(0, len(hit_idx), chunk):
        sel = hit_idx[start : start + chunk]
        sample = render_ray(sdf, flow, rays[sel], params, rng)
        depth[sel] = sample.depth * scale[sel]
        fl[sel] = sample.rendered_flow
        wsum[sel] = sample.weight_sum
    shape = (v1 - v0, u1 - u0)
    return depth.reshape(shape), fl.reshape(shape + (2,)), wsum.reshape(shape)
