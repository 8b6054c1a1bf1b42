import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from panrefine import dataset_io as dio
from panrefine.mask_refine import InstanceMask, PanopticLabel
from panrefine.panoptic_tsdf import (
    CameraIntrinsics,
    LabeledRgbdFrame,
    PanopticVoxelMap,
    Pose,
    Voxel,
    backproject,
    backproject_image,
    label_image,
    project_point,
    unique_coords,
    voxel_label,
    voxel_sdf_update,
    zero_crossings,
)

import oracles


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(0, 1, 1, 1, 4, 4)
    with pytest.raises(ValueError):
        CameraIntrinsics(1, 1, 5, 1, 4, 4)
    with pytest.raises(ValueError):
        CameraIntrinsics(1, 1, 1, 1, 4, 4, depth_scale=0)


def test_backproject_hand_values(small_cam):
    p = backproject(small_cam, (79.5 + 12.0, 59.5 - 6.0), 2.0)
    np.testing.assert_allclose(p, [12 * 2 / 120, -6 * 2 / 120, 2.0])
    with pytest.raises(ValueError):
        backproject(small_cam, (0, 0), 0.0)
    with pytest.raises(ValueError):
        backproject(small_cam, (160, 0), 1.0)


@settings(max_examples=200, deadline=None)
# stay off the exact image border, where round-off can push a point outside
@given(st.floats(0.001, 159.99), st.floats(0.001, 119.99), st.floats(0.1, 20))
def test_project_backproject_roundtrip(u, v, z):
    cam = CameraIntrinsics(120.0, 120.0, 79.5, 59.5, 160, 120)
    uv = project_point(cam, backproject(cam, (u, v), z))
    assert uv is not None
    assert uv[0] == pytest.approx(u, abs=1e-9)
    assert uv[1] == pytest.approx(v, abs=1e-9)


def test_project_outside(small_cam):
    assert project_point(small_cam, (0, 0, -1)) is None
    assert project_point(small_cam, (100, 0, 1)) is None


def test_backproject_image_matches_pointwise(small_cam, rng):
    depth = rng.uniform(0.5, 3, small_cam.shape) * (rng.random(small_cam.shape) > 0.3)
    pts, rows, cols = backproject_image(small_cam, depth)
    assert len(pts) == np.count_nonzero(depth)
    for i in rng.integers(0, len(pts), 20):
        np.testing.assert_allclose(pts[i], backproject(small_cam, (cols[i], rows[i]), depth[rows[i], cols[i]]))


def test_pose_roundtrip_and_validation(rng):
    pose = Pose.look_at((1, 2, 3), (0, 0, 0), up=(0, 0, 1))
    np.testing.assert_allclose(Pose.from_matrix(pose.matrix).matrix, pose.matrix)
    p = rng.normal(size=(10, 3))
    np.testing.assert_allclose(pose.to_camera(pose.to_world(p)), p, atol=1e-12)
    # the optical axis points at the target
    np.testing.assert_allclose(pose.to_camera([[0, 0, 0]])[0][:2], [0, 0], atol=1e-12)
    with pytest.raises(ValueError):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        Pose.from_matrix(np.eye(3))
    with pytest.raises(ValueError):
        Pose.look_at((0, 0, 0), (0, 0, 1), up=(0, 0, 1))


def test_voxel_update_by_hand():
    v = voxel_sdf_update(Voxel(), 0.1, 1.0, PanopticLabel(1, 1))
    v = voxel_sdf_update(v, -0.2, 2.0, PanopticLabel(1, 2))
    assert v.tsdf == pytest.approx((0.1 - 0.4) / 3)
    assert v.weight == 3.0
    assert voxel_label(v) == PanopticLabel(1, 2)
    with pytest.raises(ValueError):
        voxel_sdf_update(v, 0.0, 0.0)


def test_voxel_update_is_pure():
    v = Voxel(0.1, 1.0, {PanopticLabel(1, 1): 1.0})
    voxel_sdf_update(v, 0.0, 1.0, PanopticLabel(2, 1))
    assert v.label_votes == {PanopticLabel(1, 1): 1.0}
    assert v.weight == 1.0


def test_label_tie_goes_to_smallest():
    v = Voxel(0, 2, {PanopticLabel(3, 1): 1.0, PanopticLabel(2, 5): 1.0})
    assert voxel_label(v) == PanopticLabel(2, 5)
    assert voxel_label(Voxel()) is None


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(-0.5, 0.5), st.floats(0.01, 5.0)), min_size=1, max_size=30), st.randoms())
def test_update_order_invariance(obs, random):
    tau = 0.2
    def fuse(seq):
        v = Voxel()
        for d, w in seq:
            v = voxel_sdf_update(v, min(d, tau), w)
        return v
    a = fuse(obs)
    shuffled = list(obs)
    random.shuffle(shuffled)
    b = fuse(shuffled)
    expected_d, expected_w = oracles.weighted_mean_tsdf([d for d, _ in obs], [w for _, w in obs], tau)
    assert a.tsdf == pytest.approx(expected_d, rel=1e-9, abs=1e-12)
    assert b.tsdf == pytest.approx(a.tsdf, rel=1e-9, abs=1e-12)
    assert a.weight == pytest.approx(expected_w)


def test_label_image_later_wins():
    a = np.zeros((2, 2), bool)
    a[0] = True
    b = np.zeros((2, 2), bool)
    b[:, 0] = True
    masks = [InstanceMask(a, PanopticLabel(1, 1)), InstanceMask(b, PanopticLabel(1, 2))]
    slots = {PanopticLabel(1, 1): 0, PanopticLabel(1, 2): 1}
    np.testing.assert_array_equal(label_image(masks, (2, 2), slots.get), [[1, 0], [1, -1]])


def test_unique_coords_matches_numpy(rng):
    c = rng.integers(-40, 40, (5000, 3))
    np.testing.assert_array_equal(unique_coords(c), np.unique(c, axis=0))
    far = np.array([[0, 0, 0], [10**5, 10**5, 10**5], [0, 0, 0]])
    np.testing.assert_array_equal(unique_coords(far), np.unique(far, axis=0))
    assert unique_coords(np.zeros((0, 3))).shape == (0, 3)


def test_map_validation():
    with pytest.raises(ValueError):
        PanopticVoxelMap(0)
    with pytest.raises(ValueError):
        PanopticVoxelMap(0.05, 0.01)
    with pytest.raises(ValueError):
        PanopticVoxelMap(0.05, weighting="linear")


def flat_wall(cam, z=2.0):
    return np.full(cam.shape, z)


def test_single_frame_wall(small_cam):
    m = PanopticVoxelMap(0.05, 0.2)
    bitmap = np.zeros(small_cam.shape, bool)
    bitmap[:, :80] = True
    masks = [InstanceMask(bitmap, PanopticLabel(4, 2))]
    stats = m.integrate_frame(LabeledRgbdFrame(flat_wall(small_cam), masks, small_cam, Pose.identity()))
    assert stats.valid_pixels == small_cam.width * small_cam.height
    assert stats.updated == m.voxel_count > 0
    data = m.to_arrays()
    assert data["tsdf"].dtype == np.float32
    # every stored value sits within the truncation band
    assert np.all(np.abs(data["tsdf"]) <= 0.2)
    assert np.all(data["weight"] == 1.0)
    # voxel centred at z = 1.975 sees +0.025; it projects to column 78, inside the mask
    v = m.get_voxel((-1, 0, 39))
    assert v.tsdf == pytest.approx(0.025, abs=1e-6)
    assert v.label_votes == {PanopticLabel(4, 2): 1.0}
    assert m.get_voxel((0, 0, 10)) is None
    zc = zero_crossings(m)
    assert len(zc) > 0
    np.testing.assert_allclose(zc[:, 2], 2.0, atol=1e-6)


def test_far_side_is_not_carved(small_cam):
    m = PanopticVoxelMap(0.05, 0.2)
    m.integrate_frame(LabeledRgbdFrame(flat_wall(small_cam), [], small_cam, Pose.identity()))
    coords = m.to_arrays()["coords"]
    centres = m.voxel_centers(coords)
    assert centres[:, 2].max() <= 2.0 + 0.2 + 1e-9


def test_weight_monotone_and_weighting(small_cam):
    m = PanopticVoxelMap(0.05, 0.2)
    frame = LabeledRgbdFrame(flat_wall(small_cam), [], small_cam, Pose.identity())
    m.integrate_frame(frame)
    w1 = m.get_voxel((0, 0, 39)).weight
    m.integrate_frame(frame)
    assert m.get_voxel((0, 0, 39)).weight == 2 * w1
    inv = PanopticVoxelMap(0.05, 0.2, weighting="inverse_square")
    inv.integrate_frame(frame)
    assert inv.get_voxel((0, 0, 39)).weight == pytest.approx(1 / 1.975**2, rel=1e-6)


def test_integration_rejects_mismatch(small_cam):
    m = PanopticVoxelMap()
    with pytest.raises(ValueError):
        m.integrate_frame(LabeledRgbdFrame(np.ones((10, 10)), [], small_cam, Pose.identity()))
    bad = [InstanceMask(np.ones((3, 3)), PanopticLabel(1, 1))]
    with pytest.raises(ValueError):
        m.integrate_frame(LabeledRgbdFrame(flat_wall(small_cam), bad, small_cam, Pose.identity()))
    assert m.voxel_count == 0


def test_empty_depth_does_nothing(small_cam):
    m = PanopticVoxelMap()
    stats = m.integrate_frame(LabeledRgbdFrame(np.zeros(small_cam.shape), [], small_cam, Pose.identity()))
    assert stats.updated == 0 and m.voxel_count == 0


def test_majority_label(small_cam):
    m = PanopticVoxelMap(0.05, 0.2)
    full = np.ones(small_cam.shape, bool)
    depth = flat_wall(small_cam)
    for label in [PanopticLabel(1, 1), PanopticLabel(2, 1), PanopticLabel(2, 1)]:
        m.integrate_frame(LabeledRgbdFrame(depth, [InstanceMask(full, label)], small_cam, Pose.identity()))
    pts = m.extract_surface_points(0.05)
    assert pts and all(lab == PanopticLabel(2, 1) for _, lab, _ in pts)
    coords = [tuple(np.floor(p / 0.05).astype(int)) for p, _, _ in pts]
    assert coords == sorted(coords)


def test_frame_order_invariance(small_cam, rng):
    prims = [dio.Primitive("sphere", ((0, 0, 0), 0.6), 1)]
    poses = [Pose.look_at((2 * math.cos(a), 2 * math.sin(a), 0.3), (0, 0, 0), up=(0, 0, 1)) for a in (0, 0.4, 0.8, 1.2)]
    frames = []
    for pose in poses:
        depth, _ = dio.render_frame(prims, small_cam, pose)
        frames.append(LabeledRgbdFrame(depth, [], small_cam, pose))
    a, b = PanopticVoxelMap(0.05), PanopticVoxelMap(0.05)
    for f in frames:
        a.integrate_frame(f)
    for i in rng.permutation(len(frames)):
        b.integrate_frame(frames[i])
    da, db = a.to_arrays(), b.to_arrays()
    np.testing.assert_array_equal(da["coords"], db["coords"])
    np.testing.assert_array_equal(da["weight"], db["weight"])
    np.testing.assert_allclose(da["tsdf"], db["tsdf"], rtol=1e-5, atol=1e-6)


def test_arrays_roundtrip(boxes_dataset):
    seq = dio.load_sequence(boxes_dataset)
    m = PanopticVoxelMap(0.1)
    for f in seq.frames(with_rgb=False):
        m.integrate_frame(LabeledRgbdFrame(f.depth, f.masks, seq.intrinsics, f.pose))
    data = m.to_arrays()
    back = PanopticVoxelMap.from_arrays(data, m.voxel_size, m.truncation)
    again = back.to_arrays()
    for k in data:
        np.testing.assert_array_equal(data[k], again[k])
    pa, sa, wa = m.surface_arrays(0.05)
    pb, sb, wb = back.surface_arrays(0.05)
    np.testing.assert_array_equal(pa, pb)
    assert [m.labels[s] if s >= 0 else None for s in sa] == [back.labels[s] if s >= 0 else None for s in sb]


def test_sphere_radial_error():
    cam = CameraIntrinsics(300.0, 300.0, 159.5, 119.5, 320, 240)
    prims, _, _ = dio.default_scene("sphere")
    m = PanopticVoxelMap(0.05, 0.2)
    for pose in dio.default_trajectory("sphere", 12):
        depth, _ = dio.render_frame(prims, cam, pose)
        m.integrate_frame(LabeledRgbdFrame(depth, [], cam, pose))
    r = np.linalg.norm(np.vstack([zero_crossings(m, ax) for ax in range(3)]), axis=1)
    assert len(r) > 1000
    assert math.sqrt(np.mean((r - 1.0) ** 2)) <= 0.025


def test_first_observation_exact():
    v = voxel_sdf_update(Voxel(), 0.2, 3.7)
    assert v.tsdf == 0.2 and v.weight == 3.7


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.sampled_from([-0.2, 0.2, 0.1999999]), st.floats(1e-3, 1e3)), min_size=1, max_size=20))
def test_mean_never_leaves_band(obs):
    v = Voxel()
    for d, w in obs:
        v = voxel_sdf_update(v, d, w)
        assert -0.2 <= v.tsdf <= 0.2


def test_same_frame_twice_keeps_values(small_cam, rng):
    depth = rng.uniform(1.8, 2.2, small_cam.shape)
    m = PanopticVoxelMap(0.05, 0.2)
    frame = LabeledRgbdFrame(depth, [], small_cam, Pose.identity())
    m.integrate_frame(frame)
    once = m.to_arrays()
    m.integrate_frame(frame)
    twice = m.to_arrays()
    np.testing.assert_array_equal(once["tsdf"], twice["tsdf"])
    np.testing.assert_array_equal(2 * once["weight"], twice["weight"])
