import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from occflow.geometry import Camera, Intrinsics, RigidTransform, camera_extrinsic
from occflow.losses import static_flow
from occflow.synth import (
    GROUND,
    Primitive,
    SyntheticScene,
    analytic_flow,
    analytic_sdf,
    hit_primitive,
    render_gt_views,
    sphere_trace,
    standard_grid,
    standard_scene,
    voxelize,
)


def small_camera(name="front", yaw=0.0, pitch=0.0, W=24, H=18, f=20.0):
    K = Intrinsics.from_focal(f, f, (W - 1) / 2, (H - 1) / 2, W, H)
    return Camera(name, K, camera_extrinsic((0.0, 0.0, 1.5), yaw=yaw, pitch=pitch))


def scene_with(prims, poses=None, **kw):
    poses = poses or [RigidTransform.identity()] * 2
    return SyntheticScene(prims, [small_camera()], poses, **kw)


# ------------------------------------------------------------------ fields

def test_primitive_validation():
    with pytest.raises(ValueError):
        Primitive("cone", [0, 0, 0], 1.0)
    with pytest.raises(ValueError):
        Primitive("sphere", [0, 0, 0], 0.0)
    with pytest.raises(ValueError):
        Primitive("box", [0, 0, 0], [1.0, -1.0, 1.0])


def test_single_sphere_sdf():
    s = scene_with([Primitive("sphere", [0, 0, 5], 1.0)], ground_height=-100.0)
    p = np.array([[0, 0, 5.0], [3, 0, 5.0], [0, 4, 8.0]])
    np.testing.assert_allclose(analytic_sdf(s, 0, p), [-1.0, 2.0, 4.0], atol=1e-12)


def test_ground_plane_zero():
    s = scene_with([], ground_height=0.3)
    assert analytic_sdf(s, 0, np.array([4.0, -2.0, 0.3])) == 0.0
    assert hit_primitive(s, 0, np.array([4.0, -2.0, 0.3])) == GROUND


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_union_is_minimum(seed):
    rng = np.random.default_rng(seed)
    sphere = Primitive("sphere", rng.uniform(-2, 2, 3), rng.uniform(0.3, 1.5))
    box = Primitive("box", rng.uniform(-2, 2, 3), rng.uniform(0.2, 1.0, 3))
    s = scene_with([sphere, box], ground_height=-10.0)
    p = rng.uniform(-4, 4, (20, 3))
    each = np.stack([p[:, 2] + 10.0, sphere.sdf(0, p), box.sdf(0, p)])
    got = analytic_sdf(s, 0, p)
    assert np.all(got <= each + 1e-15)
    np.testing.assert_array_equal(got, each.min(axis=0))


def test_box_sdf_examples():
    b = Primitive("box", [0, 0, 0], [1.0, 2.0, 3.0])
    np.testing.assert_allclose(b.sdf(0, np.array([[2.0, 0, 0], [0, 0, 0], [2.0, 3.0, 0]])), [1.0, -1.0, np.sqrt(2)])


def test_analytic_flow_inside_and_outside():
    prim = Primitive("sphere", [0, 0, 1], 0.5, velocity=[0.4, -0.1], movable=True)
    s = scene_with([prim])
    np.testing.assert_array_equal(analytic_flow(s, 0, np.array([0.0, 0, 1.0])), [0.4, -0.1])
    np.testing.assert_array_equal(analytic_flow(s, 0, np.array([3.0, 0, 1.0])), [0.0, 0.0])
    # the sphere has moved by frame 2
    np.testing.assert_array_equal(analytic_flow(s, 2, np.array([0.8, -0.2, 1.0])), [0.4, -0.1])


def test_voxelized_flow_matches_containment():
    scene = standard_scene(width=16, height=12, focal=12.0)
    spec = standard_grid()
    sdf, flow = voxelize(scene, spec)
    world = scene.poses[scene.key_frame].apply(spec.centers().reshape(-1, 3))
    inside = np.zeros(len(world), bool)
    for prim in scene.primitives:
        if prim.movable:
            inside |= prim.sdf(scene.key_frame, world) < 0
    moving = np.linalg.norm(flow.values.reshape(-1, 2), axis=-1) > 0
    np.testing.assert_array_equal(moving, inside)
    assert spec.dims == (64, 64, 32)


# ------------------------------------------------------------------ tracing

def test_sphere_trace_closed_form():
    s = scene_with([Primitive("sphere", [10.0, 0, 0], 2.0)], ground_height=-100.0)
    t = sphere_trace(s, 0, np.zeros((1, 3)), np.array([[1.0, 0, 0]]))
    assert t[0] == pytest.approx(8.0, abs=1e-5)


def test_sphere_trace_miss_upward():
    s = scene_with([], ground_height=0.0)
    assert np.isnan(sphere_trace(s, 0, np.array([[0, 0, 1.0]]), np.array([[0, 0, 1.0]]))[0])


def test_sphere_trace_hits_lie_on_surface():
    scene = standard_scene(width=16, height=12, focal=12.0)
    rng = np.random.default_rng(0)
    d = rng.normal(size=(200, 3))
    d[:, 0] = np.abs(d[:, 0]) + 0.3
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.tile([0.0, 0.0, 1.5], (200, 1))
    t = sphere_trace(scene, scene.key_frame, o, d)
    ok = np.isfinite(t)
    assert ok.sum() > 100
    assert np.abs(analytic_sdf(scene, scene.key_frame, o[ok] + t[ok, None] * d[ok])).max() < 1e-5


# ------------------------------------------------------------------ views

def test_static_scene_static_ego():
    s = scene_with([Primitive("box", [6.0, 0, 1.0], [0.5, 2.0, 1.0], texture_seed=3)])
    frames, truth = render_gt_views(s, sigma_cue=0.0, lidar_rays_per_frame=0)
    assert np.abs(truth.flow).max() < 1e-9
    np.testing.assert_array_equal(frames.images[0], frames.images[1])
    assert not frames.movable_masks.any()


def test_pure_translation_flow_is_static_flow():
    poses = [RigidTransform.from_rt(np.eye(3), (0.6 * t, 0.1 * t, 0.0)) for t in range(2)]
    s = SyntheticScene([Primitive("box", [7.0, 0, 1.0], [0.5, 3.0, 1.5], texture_seed=1)],
                       [small_camera(pitch=0.2)], poses)
    frames, truth = render_gt_views(s, sigma_cue=0.0, lidar_rays_per_frame=0)
    cam = frames.cameras[0]
    hit = truth.hit[0, 0]
    vv, uu = np.nonzero(hit)
    pix = np.stack([uu, vv], -1).astype(float)
    fs = static_flow(pix, truth.depth[0, 0][hit], frames.relative_pose(0, 1), cam.intrinsics.K, cam.extrinsic)
    np.testing.assert_allclose(fs, truth.flow[0, 0][hit], atol=1e-6)


def test_moving_sphere_mask_is_footprint():
    prim = Primitive("sphere", [6.0, 0.0, 1.5], 1.0, texture_seed=2, velocity=[0.0, 0.3], movable=True)
    s = scene_with([prim])
    frames, truth = render_gt_views(s, sigma_cue=0.0, lidar_rays_per_frame=0)
    np.testing.assert_array_equal(frames.movable_masks[0, 0], truth.primitive[0, 0] == 0)
    assert frames.movable_masks[0, 0].sum() > 10


def test_flow_differs_from_static_only_on_movers():
    scene = standard_scene(width=48, height=36, focal=36.0)
    frames, truth = render_gt_views(scene, sigma_cue=0.0, lidar_rays_per_frame=0)
    t = scene.key_frame
    T_rel = frames.relative_pose(t, t + 1)
    for c, cam in enumerate(frames.cameras):
        hit = truth.hit[t, c]
        vv, uu = np.nonzero(hit)
        pix = np.stack([uu, vv], -1).astype(float)
        fs = static_flow(pix, truth.depth[t, c][hit], T_rel, cam.intrinsics.K, cam.extrinsic)
        moved = np.linalg.norm(fs - truth.flow[t, c][hit], axis=-1) > 1e-6
        assert not np.any(moved & ~frames.movable_masks[t, c][hit])


def test_cue_noise_level_and_lidar():
    s = scene_with([Primitive("box", [6.0, 0, 1.0], [0.5, 4.0, 2.0])])
    frames, truth = render_gt_views(s, sigma_cue=0.5, seed=1, lidar_rays_per_frame=400)
    hit = truth.hit[0]
    resid = (frames.flow_cues[0] - truth.flow[0])[hit]
    assert abs(resid.std() - 0.5) < 0.05
    pts, origin = frames.lidar[0]
    assert len(pts) > 100
    world = s.poses[0].apply(pts)
    assert np.abs(analytic_sdf(s, 0, world)).max() < 1e-5


def test_standard_scene_layout():
    scene = standard_scene()
    assert scene.num_frames == 5 and len(scene.cameras) == 3
    movers = [p for p in scene.primitives if p.movable]
    assert len(movers) == 2
    assert {tuple(p.velocity) for p in movers} == {(0.4, 0.0), (-0.2, 0.3)}
    assert sum(p.shape == "box" for p in scene.primitives) == 3
    step = scene.poses[1].translation - scene.poses[0].translation
    assert np.linalg.norm(step) == pytest.approx(0.5)
