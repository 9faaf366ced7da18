import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import softmax

from occflow.geometry import RigidTransform
from occflow.grid import FeatureVolume, GridSpec
from occflow.kernels import (
    BevSlices,
    DeformAttnParams,
    bev_volume_fuse,
    bfam,
    bilinear_zero,
    deformable_attention,
    deformable_sample,
    ego_align,
    selftest,
    slices_to_volume,
    temporal_fusion,
    tpv_lift,
    volume_to_bev,
)

SPEC = GridSpec((-2.0, -2.0, -1.0), 0.5, (8, 8, 4))


def random_volume(seed=0, channels=3, spec=SPEC):
    return FeatureVolume(spec, np.random.default_rng(seed).normal(size=spec.dims + (channels,)))


# ------------------------------------------------------------------ ego alignment

def test_ego_align_identity():
    vol = random_volume()
    np.testing.assert_array_equal(ego_align(vol, RigidTransform.identity()).values, vol.values)


def test_ego_align_one_voxel_shift():
    vol = random_volume(1)
    out = ego_align(vol, RigidTransform.from_rt(np.eye(3), (0.5, 0.0, 0.0))).values
    np.testing.assert_allclose(out[:-1], vol.values[1:], atol=1e-12)
    assert np.all(out[-1] == 0)
    out = ego_align(vol, RigidTransform.from_rt(np.eye(3), (0.0, -1.0, 0.0))).values
    np.testing.assert_allclose(out[:, 2:], vol.values[:, :-2], atol=1e-12)
    assert np.all(out[:, :2] == 0)


def test_ego_align_half_voxel_is_average():
    vol = random_volume(2)
    out = ego_align(vol, RigidTransform.from_rt(np.eye(3), (0.25, 0.0, 0.0))).values
    np.testing.assert_allclose(out[:-1], 0.5 * (vol.values[:-1] + vol.values[1:]), atol=1e-12)


def test_ego_align_quarter_turn_permutes_axes():
    spec = GridSpec((-2.0, -2.0, -1.0), 0.5, (8, 8, 4))
    vol = random_volume(3, spec=spec)
    out = ego_align(vol, RigidTransform.from_yaw(np.pi / 2)).values
    # current (x, y) reads historical (-y, x): index (i, j) <- (7 - j, i)
    np.testing.assert_allclose(out, _quarter(vol.values), atol=1e-9)


def _quarter(v):
    out = np.empty_like(v)
    n = v.shape[0]
    for i in range(n):
        for j in range(n):
            out[i, j] = v[n - 1 - j, i]
    return out


def test_ego_align_composes_integer_shifts():
    vol = random_volume(4)
    a = RigidTransform.from_rt(np.eye(3), (0.5, 0.0, 0.0))
    b = RigidTransform.from_rt(np.eye(3), (0.0, 1.0, 0.0))
    twice = ego_align(ego_align(vol, a), b).values
    once = ego_align(vol, a @ b).values
    np.testing.assert_allclose(twice, once, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 1000), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_ego_align_is_linear(seed, a, b):
    u, v = random_volume(seed), random_volume(seed + 1)
    T = RigidTransform.from_yaw(0.3, (0.37, -0.21, 0.1))
    lhs = ego_align(FeatureVolume(SPEC, a * u.values + b * v.values), T).values
    rhs = a * ego_align(u, T).values + b * ego_align(v, T).values
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


# ------------------------------------------------------------------ BEV slices

def test_bev_round_trip_and_global_mean():
    vol = random_volume(5)
    bev = volume_to_bev(vol)
    assert len(bev) == 5 and bev.stacked().shape == (5, 8, 8, 3)
    back, g = slices_to_volume(bev)
    np.testing.assert_array_equal(back, vol.values)
    np.testing.assert_allclose(g, vol.values.mean(axis=2), atol=1e-15)
    np.testing.assert_array_equal(BevSlices.from_stack(bev.stacked()).slices, bev.slices)
    with pytest.raises(ValueError):
        BevSlices(np.zeros((2, 3, 4, 5)), np.zeros((3, 4, 6)))


# ------------------------------------------------------------------ deformable attention

def test_bilinear_zero_reads():
    v = np.arange(12, dtype=float).reshape(3, 4, 1)
    assert bilinear_zero(v, np.array([1.0]), np.array([2.0]))[0, 0] == 6.0
    assert bilinear_zero(v, np.array([0.5]), np.array([0.5]))[0, 0] == pytest.approx((0 + 1 + 4 + 5) / 4)
    assert bilinear_zero(v, np.array([-1.0]), np.array([0.0]))[0, 0] == 0.0
    # half outside: the missing corner contributes zero
    assert bilinear_zero(v, np.array([-0.5]), np.array([0.0]))[0, 0] == pytest.approx(0.0)
    assert bilinear_zero(v, np.array([2.5]), np.array([3.0]))[0, 0] == pytest.approx(0.5 * 11)


def test_zero_offsets_return_weighted_reference():
    rng = np.random.default_rng(0)
    maps = [rng.normal(size=(4, 5, 3)) for _ in range(2)]
    w = softmax(rng.normal(size=(4, 5, 8)), axis=-1).reshape(4, 5, 2, 2, 2)
    out = deformable_sample(maps, np.zeros((4, 5, 2, 2, 2, 2)), w)
    share = w.sum(axis=(3, 4))
    np.testing.assert_allclose(out, share[..., 0:1] * maps[0] + share[..., 1:2] * maps[1], atol=1e-12)


def test_attention_weights_normalized():
    p = DeformAttnParams.random(4, n_heads=3, n_points=2, n_maps=2)
    _, w = p.predict(np.random.default_rng(1).normal(size=(3, 3, 4)))
    np.testing.assert_allclose(w.sum(axis=(2, 3, 4)), 1.0, atol=1e-12)
    assert np.all(w >= 0)


def test_constant_values_with_in_range_offsets():
    p = DeformAttnParams.random(2, n_heads=2, n_points=2, offset_scale=0.0)
    p.offset_bias[:] = 0.3
    const = np.full((5, 5, 2), 1.7)
    out = deformable_attention(np.random.default_rng(2).normal(size=(5, 5, 2)), [const], p)
    np.testing.assert_allclose(out[:-1, :-1], 1.7, atol=1e-12)


def test_params_validation():
    with pytest.raises(ValueError):
        DeformAttnParams(np.zeros((2, 8)), np.zeros(8), np.zeros((2, 3)), np.zeros(3), 2, 2)
    p = DeformAttnParams.random(2, n_maps=1)
    with pytest.raises(ValueError):
        deformable_attention(np.zeros((2, 2, 2)), [np.zeros((2, 2, 2))] * 2, p)


def test_deformable_attention_matches_brute_force():
    rng = np.random.default_rng(3)
    maps = [rng.normal(size=(4, 6, 2)) for _ in range(2)]
    offsets = rng.normal(0, 2.0, (4, 6, 2, 2, 3, 2))
    w = softmax(rng.normal(size=(4, 6, 12)), axis=-1).reshape(4, 6, 2, 2, 3)
    out = deformable_sample(maps, offsets, w)
    i, j = 2, 3
    expect = np.zeros(2)
    for m in range(2):
        for h in range(2):
            for q in range(3):
                r, c = i + offsets[i, j, m, h, q, 0], j + offsets[i, j, m, h, q, 1]
                r0, c0 = int(np.floor(r)), int(np.floor(c))
                for rr in (r0, r0 + 1):
                    for cc in (c0, c0 + 1):
                        if 0 <= rr < 4 and 0 <= cc < 6:
                            expect += w[i, j, m, h, q] * (1 - abs(r - rr)) * (1 - abs(c - cc)) * maps[m][rr, cc]
    np.testing.assert_allclose(out[i, j], expect, atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000), a=st.floats(-2, 2))
def test_deformable_sample_linear_in_values(seed, a):
    rng = np.random.default_rng(seed)
    u, v = rng.normal(size=(3, 4, 2)), rng.normal(size=(3, 4, 2))
    off = rng.normal(0, 1.5, (3, 4, 1, 2, 2, 2))
    w = softmax(rng.normal(size=(3, 4, 4)), axis=-1).reshape(3, 4, 1, 2, 2)
    lhs = deformable_sample([u + a * v], off, w)
    rhs = deformable_sample([u], off, w) + a * deformable_sample([v], off, w)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


# ------------------------------------------------------------------ backward-forward sweep

def attend(target, sources, p):
    out = np.empty_like(target)
    for s in range(len(target)):
        out[s] = deformable_attention(target[s], [src[s] for src in sources], p)
    return out


def test_bfam_golden_trace_three_frames():
    rng = np.random.default_rng(4)
    p = DeformAttnParams.random(3, n_heads=2, n_points=2, n_maps=2, beta=0.7, seed=5)
    oldest, middle, current = (rng.normal(size=(3, 4, 4, 3)) for _ in range(3))
    b = p.beta
    # backward: refine each older frame from its newer neighbour
    middle = middle + b * attend(middle, [current, middle], p)
    oldest = oldest + b * attend(oldest, [middle, oldest], p)
    # forward: refine newer frames from their (already refined) older neighbour
    middle = middle + b * attend(middle, [oldest, middle], p)
    current = current + b * attend(current, [middle, current], p)
    rng = np.random.default_rng(4)
    seq = [rng.normal(size=(3, 4, 4, 3)) for _ in range(3)]
    out = bfam(seq, p)
    for got, want in zip(out, (oldest, middle, current)):
        np.testing.assert_allclose(got, want, atol=1e-12)


def test_bfam_zero_scale_is_identity():
    p = DeformAttnParams.random(3, n_maps=2, beta=0.0)
    seq = [np.random.default_rng(i).normal(size=(2, 3, 3, 3)) for i in range(4)]
    for a, b in zip(bfam(seq, p), seq):
        np.testing.assert_array_equal(a, b)


def test_bfam_single_frame_and_validation():
    p = DeformAttnParams.random(3, n_maps=2)
    x = np.random.default_rng(0).normal(size=(2, 3, 3, 3))
    np.testing.assert_array_equal(bfam([x], p)[0], x)
    with pytest.raises(ValueError):
        bfam([x, x], DeformAttnParams.random(3, n_maps=1))
    with pytest.raises(ValueError):
        bfam([], p)


def test_bfam_accepts_bev_slices():
    p = DeformAttnParams.random(3, n_maps=2, seed=2)
    vols = [volume_to_bev(random_volume(i)) for i in range(2)]
    a = bfam(vols, p)
    b = bfam([v.stacked() for v in vols], p)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


# ------------------------------------------------------------------ fusion and lift

def test_bev_volume_fuse_gate_limits():
    V = np.random.default_rng(0).normal(size=(3, 4, 2, 2))
    Bg = np.random.default_rng(1).normal(size=(3, 4, 2))
    W = np.zeros((2, 2))
    np.testing.assert_allclose(bev_volume_fuse(V, Bg, W, np.full(2, 50.0)), V + Bg[:, :, None], atol=1e-12)
    np.testing.assert_allclose(bev_volume_fuse(V, Bg, W, np.full(2, -50.0)), V, atol=1e-12)
    np.testing.assert_allclose(bev_volume_fuse(V, Bg, W, np.zeros(2)), V + 0.5 * Bg[:, :, None], atol=1e-15)


def test_tpv_lift_index_oracle():
    rng = np.random.default_rng(0)
    hw, zh, wz = rng.normal(size=(4, 5, 2)), rng.normal(size=(3, 4, 2)), rng.normal(size=(5, 3, 2))
    out = tpv_lift(hw, zh, wz)
    assert out.shape == (4, 5, 3, 2)
    for i, j, k in [(0, 0, 0), (3, 4, 2), (1, 2, 1)]:
        np.testing.assert_allclose(out[i, j, k], hw[i, j] + zh[k, i] + wz[j, k], atol=1e-15)
    with pytest.raises(ValueError):
        tpv_lift(hw, zh[:, :3], wz)


def test_temporal_fusion_static_ego_with_zero_scale():
    vols = [random_volume(i) for i in range(3)]
    poses = [RigidTransform.identity()] * 3
    p = DeformAttnParams.random(3, n_maps=2, beta=0.0)
    W, b = np.zeros((3, 3)), np.full(3, -60.0)
    np.testing.assert_allclose(temporal_fusion(vols, poses, p, W, b), vols[-1].values, atol=1e-12)


def test_selftest_passes():
    results = selftest()
    assert {name for name, _, _ in results} >= {"ego_align", "bfam", "tpv_lift", "deformable_attention"}
    assert all(ok for _, ok, _ in results)
