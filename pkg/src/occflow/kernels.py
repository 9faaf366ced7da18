"""Forward reference kernels for the temporal feature fusion path.

Ego-motion warping of feature volumes, BEV slicing, deformable attention,
the backward/forward attention sweep, gated BEV-volume fusion and the
tri-plane lift. Parameters are supplied by the caller (or randomized); no
training happens here.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.special import expit, softmax

from .geometry import RigidTransform
from .grid import FeatureVolume

__all__ = [
    "BevSlices",
    "DeformAttnParams",
    "ego_align",
    "volume_to_bev",
    "slices_to_volume",
    "bilinear_zero",
    "deformable_sample",
    "deformable_attention",
    "bfam",
    "bev_volume_fuse",
    "tpv_lift",
    "temporal_fusion",
    "selftest",
]


@dataclass
class BevSlices:
    """Z horizontal slices (Z, H, W, C) plus the z-averaged slice (H, W, C)."""

    slices: np.ndarray
    global_slice: np.ndarray

    def __post_init__(self):
        self.slices = np.asarray(self.slices, dtype=np.float64)
        self.global_slice = np.asarray(self.global_slice, dtype=np.float64)
        if self.slices.ndim != 4 or self.global_slice.shape != self.slices.shape[1:]:
            raise ValueError("slices must be (Z, H, W, C) and the global slice (H, W, C)")

    def __len__(self):
        return len(self.slices) + 1

    def stacked(self):
        """All Z + 1 maps, global slice last."""
        return np.concatenate([self.slices, self.global_slice[None]], axis=0)

    @classmethod
    def from_stack(cls, stack):
        stack = np.asarray(stack, dtype=np.float64)
        return cls(stack[:-1], stack[-1])

    def copy(self):
        return BevSlices(self.slices.copy(), self.global_slice.copy())


@dataclass
class DeformAttnParams:
    """Linear heads predicting sampling offsets and attention logits from the query.

    ``offset_weight`` is (C, M*heads*points*2) and ``attn_weight`` is
    (C, M*heads*points), with M the number of value maps. Offsets are in
    grid cells, ordered (row, col). ``beta`` scales the residual in
    :func:`bfam`.
    """

    offset_weight: np.ndarray
    offset_bias: np.ndarray
    attn_weight: np.ndarray
    attn_bias: np.ndarray
    n_heads: int
    n_points: int
    n_maps: int = 1
    beta: float = 1.0

    def __post_init__(self):
        n = self.n_maps * self.n_heads * self.n_points
        if min(self.n_heads, self.n_points, self.n_maps) < 1:
            raise ValueError("head, point and map counts must be positive")
        self.offset_weight = np.asarray(self.offset_weight, dtype=np.float64)
        self.offset_bias = np.asarray(self.offset_bias, dtype=np.float64).reshape(-1)
        self.attn_weight = np.asarray(self.attn_weight, dtype=np.float64)
        self.attn_bias = np.asarray(self.attn_bias, dtype=np.float64).reshape(-1)
        if self.offset_weight.shape[1:] != (2 * n,) or self.offset_bias.shape != (2 * n,):
            raise ValueError(f"offset head must produce {2 * n} values")
        if self.attn_weight.shape[1:] != (n,) or self.attn_bias.shape != (n,):
            raise ValueError(f"attention head must produce {n} logits")
        if self.offset_weight.shape[0] != self.attn_weight.shape[0]:
            raise ValueError("offset and attention heads disagree on channel count")

    @property
    def channels(self):
        return self.offset_weight.shape[0]

    @classmethod
    def random(cls, channels, n_heads=2, n_points=4, n_maps=1, beta=0.5, offset_scale=1.5, seed=0):
        rng = np.random.default_rng(seed)
        n = n_maps * n_heads * n_points
        return cls(
            rng.normal(0, offset_scale / np.sqrt(channels), (channels, 2 * n)),
            rng.normal(0, offset_scale, 2 * n),
            rng.normal(0, 1 / np.sqrt(channels), (channels, n)),
            rng.normal(0, 0.5, n),
            n_heads, n_points, n_maps, beta,
        )

    def predict(self, query):
        """Offsets (H, W, M, heads, points, 2) and weights (H, W, M, heads, points)."""
        H, W, _ = query.shape
        shape = (H, W, self.n_maps, self.n_heads, self.n_points)
        offsets = (query @ self.offset_weight + self.offset_bias).reshape(shape + (2,))
        logits = (query @ self.attn_weight + self.attn_bias).reshape(H, W, -1)
        weights = softmax(logits, axis=-1).reshape(shape)
        return offsets, weights


# ----------------------------------------------------------------- warping

def ego_align(volume, T_rel, points=None):
    """Warp a historical feature volume into the current ego frame.

    ``T_rel`` maps current-frame points into the historical frame; the
    volume is read trilinearly at ``T_rel`` applied to ``points`` (current
    voxel centers by default). Reads outside the volume are zero.
    """
    spec = volume.spec
    if points is None:
        points = spec.centers()
    T = T_rel if isinstance(T_rel, RigidTransform) else RigidTransform(T_rel)
    q = spec.to_index(T.apply(points))
    # snap round-off so grid-aligned motions copy values exactly
    near = np.round(q)
    q = np.where(np.abs(q - near) < 1e-9, near, q)
    coords = np.moveaxis(q, -1, 0)
    out = np.stack(
        [map_coordinates(volume.values[..., c], coords, order=1, mode="constant", cval=0.0)
         for c in range(volume.channels)],
        axis=-1,
    )
    return FeatureVolume(spec, out)


# ----------------------------------------------------------------- BEV slices

def volume_to_bev(volume):
    values = volume.values if isinstance(volume, FeatureVolume) else np.asarray(volume, dtype=np.float64)
    return BevSlices(np.moveaxis(values, 2, 0), values.mean(axis=2))


def slices_to_volume(bev):
    """Volume (H, W, Z, C) and the global slice back from BEV slices."""
    return np.moveaxis(bev.slices, 0, 2).copy(), bev.global_slice.copy()


# ----------------------------------------------------------------- attention

def bilinear_zero(value, rows, cols):
    """Bilinear read of (H, W, C) at fractional (rows, cols); outside reads 0."""
    H, W, C = value.shape
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = rows - r0
    fc = cols - c0
    out = np.zeros(rows.shape + (C,))
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            r = r0 + dr
            c = c0 + dc
            ok = (r >= 0) & (r < H) & (c >= 0) & (c < W)
            v = value[np.clip(r, 0, H - 1), np.clip(c, 0, W - 1)]
            out += np.where(ok, wr * wc, 0.0)[..., None] * v
    return out


def deformable_sample(values, offsets, weights):
    """Weighted sum of bilinear reads around each reference cell.

    ``values`` is a list of M maps (H, W, C); offsets (H, W, M, heads,
    points, 2) and weights (H, W, M, heads, points). The reference point of
    query (i, j) is cell (i, j) in every value map.
    """
    values = [np.asarray(v, dtype=np.float64) for v in values]
    H, W, C = values[0].shape
    ii, jj = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    out = np.zeros((H, W, C))
    for m, value in enumerate(values):
        rows = ii[..., None, None] + offsets[:, :, m, ..., 0]
        cols = jj[..., None, None] + offsets[:, :, m, ..., 1]
        samples = bilinear_zero(value, rows, cols)
        out += np.einsum("ijhp,ijhpc->ijc", weights[:, :, m], samples)
    return out


def deformable_attention(query, values, params):
    """Deformable attention of a query map (H, W, C) over ``values`` maps.

    Weights are normalized jointly over maps, heads and points; every head
    reads all channels.
    """
    query = np.asarray(query, dtype=np.float64)
    if len(values) != params.n_maps:
        raise ValueError(f"expected {params.n_maps} value maps, got {len(values)}")
    offsets, weights = params.predict(query)
    return deformable_sample(values, offsets, weights)


def _attend_slices(target, sources, params):
    """Slice-wise attention: slice s of the target queries slice s of each source."""
    out = np.empty_like(target)
    for s in range(len(target)):
        out[s] = deformable_attention(target[s], [src[s] for src in sources], params)
    return out


def bfam(sequence, params):
    """Backward then forward residual attention sweep over BEV stacks.

    ``sequence`` lists the stacked slices (Z + 1, H, W, C) oldest first, so
    the current frame is last. The global slice is attended like any other
    slice. Returns a new list in the same order.
    """
    B = [np.array(b.stacked() if isinstance(b, BevSlices) else b, dtype=np.float64) for b in sequence]
    n = len(B)
    if n < 1:
        raise ValueError("need at least one frame")
    if params.n_maps != 2:
        raise ValueError("backward-forward attention reads two maps per step")

    def at(i):
        # frame i steps before the current one
        return n - 1 - i

    for i in range(n - 1):
        cur, prev = at(i + 1), at(i)
        B[cur] = B[cur] + params.beta * _attend_slices(B[cur], [B[prev], B[cur]], params)
    for i in range(n - 2, -1, -1):
        cur, older = at(i), at(i + 1)
        B[cur] = B[cur] + params.beta * _attend_slices(B[cur], [B[older], B[cur]], params)
    return B


# ----------------------------------------------------------------- fusion, lift

def bev_volume_fuse(volume, global_slice, gate_weight, gate_bias):
    """Add the global slice along z through a sigmoid gate on the volume."""
    V = np.asarray(volume, dtype=np.float64)
    gate = expit(V @ np.asarray(gate_weight, dtype=np.float64) + np.asarray(gate_bias, dtype=np.float64))
    return V + gate * np.asarray(global_slice, dtype=np.float64)[:, :, None, :]


def tpv_lift(plane_hw, plane_zh, plane_wz):
    """Sum of three broadcast planes: out[i, j, k] = hw[i, j] + zh[k, i] + wz[j, k]."""
    hw = np.asarray(plane_hw, dtype=np.float64)
    zh = np.asarray(plane_zh, dtype=np.float64)
    wz = np.asarray(plane_wz, dtype=np.float64)
    H, W, C = hw.shape
    Z = zh.shape[0]
    if zh.shape != (Z, H, C) or wz.shape != (W, Z, C):
        raise ValueError("plane shapes must be (H, W, C), (Z, H, C) and (W, Z, C)")
    return hw[:, :, None, :] + np.transpose(zh, (1, 0, 2))[:, None, :, :] + wz[None, :, :, :]


def temporal_fusion(volumes, poses, params, gate_weight, gate_bias):
    """Full temporal path for volumes ordered oldest first.

    ``poses`` are ego-to-world transforms of each frame; the last frame is
    the current one. Returns the fused current-frame volume (H, W, Z, C).
    """
    cur = poses[-1]
    stacks = []
    for vol, pose in zip(volumes, poses):
        aligned = ego_align(vol, pose.inverse() @ cur)
        stacks.append(volume_to_bev(aligned).stacked())
    fused = bfam(stacks, params)
    V, Bg = slices_to_volume(BevSlices.from_stack(fused[-1]))
    return bev_volume_fuse(V, Bg, gate_weight, gate_bias)


# ----------------------------------------------------------------- self test

def _brute_deformable(values, offsets, weights):
    H, W, C = values[0].shape
    out = np.zeros((H, W, C))
    for i in range(H):
        for j in range(W):
            for m, value in enumerate(values):
                for h in range(offsets.shape[3]):
                    for p in range(offsets.shape[4]):
                        r = i + offsets[i, j, m, h, p, 0]
                        c = j + offsets[i, j, m, h, p, 1]
                        r0, c0 = int(np.floor(r)), int(np.floor(c))
                        acc = np.zeros(C)
                        for rr in (r0, r0 + 1):
                            for cc in (c0, c0 + 1):
                                if 0 <= rr < H and 0 <= cc < W:
                                    acc += (1 - abs(r - rr)) * (1 - abs(c - cc)) * value[rr, cc]
                        out[i, j] += weights[i, j, m, h, p] * acc
    return out


def selftest(seed=0):
    """Run the kernel oracles; returns a list of (name, passed, detail)."""
    from .grid import GridSpec

    rng = np.random.default_rng(seed)
    results = []

    def record(name, err, tol):
        results.append((name, bool(err <= tol), f"max error {err:.3g} (tol {tol:g})"))

    spec = GridSpec((-2.0, -2.0, -1.0), 0.5, (8, 8, 4))
    vol = FeatureVolume(spec, rng.normal(size=spec.dims + (3,)))
    same = ego_align(vol, RigidTransform.identity()).values
    shift = ego_align(vol, RigidTransform.from_rt(np.eye(3), (0.5, 0.0, 0.0))).values
    expect = np.zeros_like(vol.values)
    expect[:-1] = vol.values[1:]
    record("ego_align", max(np.abs(same - vol.values).max(), np.abs(shift - expect).max()), 1e-12)

    bev = volume_to_bev(vol)
    back, _ = slices_to_volume(bev)
    record("volume_to_bev", max(np.abs(back - vol.values).max(),
                                np.abs(bev.global_slice - vol.values.mean(axis=2)).max()), 1e-12)

    maps = [rng.normal(size=(5, 6, 3)) for _ in range(2)]
    offsets = rng.normal(0, 2.0, (5, 6, 2, 2, 3, 2))
    weights = softmax(rng.normal(size=(5, 6, 12)), axis=-1).reshape(5, 6, 2, 2, 3)
    record("deformable_attention",
           np.abs(deformable_sample(maps, offsets, weights) - _brute_deformable(maps, offsets, weights)).max(), 1e-6)

    params = DeformAttnParams.random(3, n_heads=2, n_points=2, n_maps=2, beta=0.0, seed=seed)
    seq = [rng.normal(size=(3, 4, 5, 3)) for _ in range(3)]
    out = bfam(seq, params)
    record("bfam", max(np.abs(a - b).max() for a, b in zip(out, seq)), 0.0)

    V = rng.normal(size=(4, 5, 3, 2))
    Bg = rng.normal(size=(4, 5, 2))
    Wg = rng.normal(size=(2, 2))
    bg = rng.normal(size=2)
    fused = bev_volume_fuse(V, Bg, Wg, bg)
    brute = np.empty_like(V)
    for i, j, k in np.ndindex(V.shape[:3]):
        g = 1.0 / (1.0 + np.exp(-(V[i, j, k] @ Wg + bg)))
        brute[i, j, k] = V[i, j, k] + g * Bg[i, j]
    record("bev_volume_fuse", np.abs(fused - brute).max(), 1e-12)

    hw, zh, wz = rng.normal(size=(4, 5, 2)), rng.normal(size=(3, 4, 2)), rng.normal(size=(5, 3, 2))
    lifted = tpv_lift(hw, zh, wz)
    brute = np.empty((4, 5, 3, 2))
    for i, j, k in np.ndindex(4, 5, 3):
        brute[i, j, k] = hw[i, j] + zh[k, i] + wz[j, k]
    record("tpv_lift", np.abs(lifted - brute).max(), 1e-12)
    return results
