from __future__ import annotations

import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conav.pointcloud import (
    GROUP_SIZE,
    NUM_GROUPS,
    NUM_POINTS,
    CloudFileError,
    EmptyCloudError,
    ObjectMask,
    PointCloud,
    PointCloudOptions,
    build_cloud,
    coverage_radius,
    extract_object,
    fps_centers,
    group,
    knn_group,
    load_frame,
    load_masks,
    merge,
    project,
    read_cloud,
    read_ply,
    remove_outliers,
    uniform_sample,
    unproject,
    viewpoint_cloud,
    write_cloud,
    write_ply,
)
from conav.scene import Camera

from oracles import fps_bruteforce, knn_bruteforce, random_rigid, unproject_pixel


def cam_for(h, w, pose=None, f=100.0):
    pose = np.eye(4) if pose is None else pose
    return Camera(f, f, (w - 1) / 2, (h - 1) / 2, w, h, tuple(pose.ravel().tolist()))


def random_cloud(rng, n):
    return PointCloud(np.hstack([rng.normal(size=(n, 3)), rng.random((n, 3))]))


def frame_of(scene, vp, heading):
    fr = scene.viewpoints[vp].frames[heading]
    rgb_p, depth_p = fr.resolve(scene.base_dir)
    return load_frame(rgb_p), load_frame(depth_p), fr.camera


# ---- unproject ---------------------------------------------------------------------------


def test_principal_point_ray():
    cam = Camera(100, 100, 2, 1, 5, 3)
    depth = np.zeros((3, 5))
    depth[1, 2] = 2.0
    rgb = np.zeros((3, 5, 3), np.uint8)
    rgb[1, 2] = (255, 0, 51)
    c = unproject(rgb, depth, cam)
    np.testing.assert_allclose(c.points, [[0, 0, 2.0, 1.0, 0.0, 0.2]])


def test_all_invalid_depth_is_empty():
    cam = cam_for(4, 4)
    depth = np.zeros((4, 4))
    depth[0, 0] = np.nan
    assert unproject(np.zeros((4, 4, 3), np.uint8), depth, cam).is_empty


def test_dimension_mismatch():
    cam = cam_for(4, 4)
    with pytest.raises(ValueError):
        unproject(np.zeros((4, 4, 3), np.uint8), np.ones((4, 5)), cam)
    with pytest.raises(ValueError):
        unproject(np.zeros((4, 5, 3), np.uint8), np.ones((4, 4)), cam)


def test_unproject_matches_per_pixel_oracle():
    rng = np.random.default_rng(3)
    pose = random_rigid(rng)
    cam = Camera(100.0, 100.0, 1.5, 1.5, 4, 4, tuple(pose.ravel().tolist()))
    depth = rng.uniform(0.5, 5.0, size=(4, 4))
    depth[2, 1] = 0.0
    rgb = rng.integers(0, 256, size=(4, 4, 3), dtype=np.uint8)
    c = unproject(rgb, depth, cam)
    expected = []
    for v in range(4):
        for u in range(4):
            if depth[v, u] > 0:
                xyz = unproject_pixel(u, v, depth[v, u], 100.0, 100.0, 1.5, 1.5, pose.tolist())
                expected.append(xyz + [ch / 255.0 for ch in rgb[v, u]])
    assert len(c) == 15
    np.testing.assert_allclose(c.points, np.array(expected), rtol=0, atol=1e-9)


@given(
    st.integers(0, 2**32 - 1),
    st.floats(0.05, 50.0),
    st.floats(0, 127.99),
    st.floats(0, 95.99),
)
def test_project_inverts_unproject(seed, d, u, v):
    rng = np.random.default_rng(seed)
    pose = random_rigid(rng)
    cam = Camera(rng.uniform(50, 600), rng.uniform(50, 600), 64.0, 48.0, 128, 96, tuple(pose.ravel().tolist()))
    pt = np.array([(u - cam.cx) * d / cam.fx, (v - cam.cy) * d / cam.fy, d, 1.0])
    world = (pose @ pt)[:3]
    np.testing.assert_allclose(project(world, cam)[0], [u, v, d], rtol=0, atol=1e-6)


# ---- masks, merge ------------------------------------------------------------------------


def test_full_mask_equals_unproject(rgbd_scene):
    rgb, depth, cam = frame_of(rgbd_scene, "r0", 0)
    full = ObjectMask("all", np.ones(depth.shape, bool))
    assert extract_object(rgb, depth, cam, full).points.tolist() == unproject(rgb, depth, cam).points.tolist()


def test_single_pixel_mask(rgbd_scene):
    rgb, depth, cam = frame_of(rgbd_scene, "r0", 0)
    bm = np.zeros(depth.shape, bool)
    bm[50, 70] = True
    c = extract_object(rgb, depth, cam, ObjectMask("dot", bm))
    assert len(c) == 1 and c.label == "dot"
    np.testing.assert_allclose(
        c.xyz[0], unproject_pixel(70, 50, float(depth[50, 70]), cam.fx, cam.fy, cam.cx, cam.cy, cam.pose_matrix.tolist()),
        atol=1e-9,
    )


def test_mask_over_invalid_depth_keeps_label(rgbd_scene):
    rgb, depth, cam = frame_of(rgbd_scene, "r0", 0)
    bm = np.zeros(depth.shape, bool)
    bm[0, :] = True  # the top rows have no depth
    c = extract_object(rgb, depth, cam, ObjectMask("sky", bm))
    assert c.is_empty and c.label == "sky"


def test_empty_mask_rejected():
    with pytest.raises(ValueError):
        ObjectMask("none", np.zeros((2, 2), bool))


def test_disjoint_masks_partition_sizes(rgbd_scene):
    rgb, depth, cam = frame_of(rgbd_scene, "r0", 0)
    valid = np.isfinite(depth) & (depth > 0)
    left = np.zeros(depth.shape, bool)
    left[:, :60] = True
    a = extract_object(rgb, depth, cam, ObjectMask("l", left))
    b = extract_object(rgb, depth, cam, ObjectMask("r", ~left))
    assert len(a) == int((valid & left).sum())
    assert len(a) + len(b) == len(unproject(rgb, depth, cam)) == int(valid.sum())


def test_merge_examples():
    rng = np.random.default_rng(0)
    c = random_cloud(rng, 3)
    assert merge([c]) is c
    two, three = random_cloud(rng, 2), random_cloud(rng, 3)
    m = merge([two, three])
    assert len(m) == 5
    np.testing.assert_array_equal(m.points, np.vstack([two.points, three.points]))
    assert merge([PointCloud.empty(), PointCloud.empty()]).is_empty
    with pytest.raises(ValueError):
        merge([])


def test_merged_object_clouds_equal_union_mask(rgbd_scene, fixtures_dir):
    rgb, depth, cam = frame_of(rgbd_scene, "r0", 0)
    masks = load_masks(fixtures_dir / "frames" / "r0_h0_masks.npz")
    assert sorted(m.label for m in masks) == ["box", "floor"]
    merged = merge([extract_object(rgb, depth, cam, m) for m in masks])
    union = np.zeros(depth.shape, bool)
    for m in masks:
        union |= m.bitmap
    ref = unproject(rgb, depth, cam, mask=union)
    as_set = lambda c: {tuple(p) for p in c.points.tolist()}  # noqa: E731
    assert len(merged) == len(ref)
    assert as_set(merged) == as_set(ref)


def test_point_cloud_validation():
    with pytest.raises(ValueError):
        PointCloud(np.array([[0, 0, np.inf, 0, 0, 0]]))
    with pytest.raises(ValueError):
        PointCloud(np.array([[0, 0, 0, 0, 1.5, 0]]))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 4)))


# ---- sampling ----------------------------------------------------------------------------


def test_uniform_sample_exact_size_is_copy():
    c = random_cloud(np.random.default_rng(1), 16)
    out = uniform_sample(c, 16, seed=5)
    np.testing.assert_array_equal(out.points, c.points)
    assert out.points is not c.points


def test_uniform_sample_deterministic():
    c = random_cloud(np.random.default_rng(1), 10)
    a, b = uniform_sample(c, 4, seed=9), uniform_sample(c, 4, seed=9)
    np.testing.assert_array_equal(a.points, b.points)


def test_uniform_sample_frequency():
    # 4 of 10 without replacement: every point is kept with probability 0.4
    c = PointCloud(np.hstack([np.arange(10.0)[:, None], np.zeros((10, 5))]))
    counts = np.zeros(10)
    trials = 100_000
    for s in range(trials):
        counts[uniform_sample(c, 4, seed=s).xyz[:, 0].astype(int)] += 1
    np.testing.assert_allclose(counts / trials, 0.4, atol=0.01)


def test_uniform_sample_undersized_tops_up():
    c = random_cloud(np.random.default_rng(2), 5)
    out = uniform_sample(c, 12, seed=0)
    assert len(out) == 12
    np.testing.assert_array_equal(out.points[:5], c.points)
    rows = {tuple(p) for p in c.points.tolist()}
    assert all(tuple(p) in rows for p in out.points.tolist())


def test_uniform_sample_errors():
    with pytest.raises(EmptyCloudError):
        uniform_sample(PointCloud.empty(), 4, 0)
    with pytest.raises(ValueError):
        uniform_sample(random_cloud(np.random.default_rng(0), 3), 0, 0)


@given(st.integers(1, 60), st.integers(1, 60), st.integers(0, 2**32 - 1))
def test_uniform_sample_preserves_membership(n, m, seed):
    c = random_cloud(np.random.default_rng(seed), n)
    out = uniform_sample(c, m, seed)
    assert len(out) == m
    rows = {tuple(p) for p in c.points.tolist()}
    assert all(tuple(p) in rows for p in out.points.tolist())
    if n >= m:
        assert len({tuple(p) for p in out.points.tolist()}) == len({tuple(p) for p in c.points.tolist()} & {tuple(p) for p in out.points.tolist()})


# ---- FPS and kNN -------------------------------------------------------------------------


def test_fps_all_points():
    c = random_cloud(np.random.default_rng(4), 9)
    assert sorted(fps_centers(c, 9, start=3).tolist()) == list(range(9))


def test_fps_unit_square_diagonal():
    sq = PointCloud(np.array([[0, 0, 0, 0, 0, 0], [1, 0, 0, 0, 0, 0], [1, 1, 0, 0, 0, 0], [0, 1, 0, 0, 0, 0]], float))
    assert fps_centers(sq, 2, start=0).tolist() == [0, 2]


def test_fps_matches_bruteforce_50():
    c = random_cloud(np.random.default_rng(5), 50)
    got = fps_centers(c, 8, seed=17)
    assert got.tolist() == fps_bruteforce(c.xyz, 8, int(got[0]))
    assert got[0] == np.random.default_rng(17).integers(50)


def test_fps_tie_breaks_low_index():
    # all points equidistant from the start: the lowest remaining index wins
    pts = np.zeros((5, 6))
    pts[1:, 0] = 1.0
    pts[1, 1], pts[2, 1], pts[3, 2], pts[4, 2] = 0, 0, 0, 0
    pts[1:, :3] = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0]]
    assert fps_centers(PointCloud(pts), 2, start=0).tolist() == [0, 1]


def test_fps_errors():
    c = random_cloud(np.random.default_rng(0), 3)
    with pytest.raises(ValueError):
        fps_centers(c, 4)
    with pytest.raises(ValueError):
        fps_centers(c, 0)


def test_fps_duplicates_never_repeat():
    pts = np.zeros((6, 6))
    assert sorted(fps_centers(PointCloud(pts), 6, start=2).tolist()) == list(range(6))


@given(st.integers(0, 2**32 - 1), st.integers(5, 40))
def test_fps_coverage_non_increasing(seed, n):
    c = random_cloud(np.random.default_rng(seed), n)
    full = fps_centers(c, n, start=0)
    radii = [coverage_radius(c, full[:m]) for m in range(1, n + 1)]
    assert all(b <= a + 1e-12 for a, b in zip(radii, radii[1:]))
    assert radii[-1] == 0.0


def test_knn_k1_is_center():
    c = random_cloud(np.random.default_rng(6), 20)
    g = knn_group(c, [3, 7, 11], 1)
    assert g.patches.tolist() == [[3], [7], [11]]


def test_knn_collinear():
    pts = np.zeros((7, 6))
    pts[:, 0] = np.arange(7)
    g = knn_group(PointCloud(pts), [3], 3)
    assert g.patches[0].tolist() == [3, 2, 4]


def test_knn_matches_bruteforce_100():
    c = random_cloud(np.random.default_rng(8), 100)
    centers = fps_centers(c, 16, seed=1)
    g = knn_group(c, centers, 8)
    assert g.m == 16 and g.k == 8
    for i, ctr in enumerate(centers):
        assert g.patches[i].tolist() == knn_bruteforce(c.xyz, int(ctr), 8)


def test_knn_errors():
    c = random_cloud(np.random.default_rng(0), 4)
    with pytest.raises(ValueError):
        knn_group(c, [0], 5)
    with pytest.raises(ValueError):
        knn_group(c, [9], 2)


@given(st.integers(0, 2**32 - 1), st.integers(2, 80), st.data())
def test_knn_patch_invariants(seed, n, data):
    c = random_cloud(np.random.default_rng(seed), n)
    m = data.draw(st.integers(1, n))
    k = data.draw(st.integers(1, n))
    g = group(c, m, k, seed)
    assert g.center_indices.shape == (m,) and g.patches.shape == (m, k)
    assert (g.patches < n).all()
    for ctr, patch in zip(g.center_indices, g.patches):
        assert patch[0] == ctr
        d = np.sum((c.xyz[patch[1:]] - c.xyz[ctr]) ** 2, axis=1)
        assert (np.diff(d) >= 0).all()


def test_default_constants():
    assert (NUM_POINTS, NUM_GROUPS, GROUP_SIZE) == (8192, 512, 32)
    opts = PointCloudOptions()
    assert (opts.num_points, opts.num_groups, opts.group_size) == (8192, 512, 32)


# ---- I/O ---------------------------------------------------------------------------------


@given(
    xyz=hnp.arrays(np.float32, st.tuples(st.integers(0, 30), st.just(3)), elements=st.floats(-1e3, 1e3, width=32)),
    seed=st.integers(0, 2**31),
)
def test_cloud_file_round_trip(xyz, seed, tmp_path_factory):
    rgb = np.random.default_rng(seed).random((xyz.shape[0], 3)).astype(np.float32)
    c = PointCloud(np.hstack([xyz, rgb]).astype(np.float64))
    p = tmp_path_factory.mktemp("c") / "x.pc6"
    write_cloud(c, p)
    assert read_cloud(p) == c


def test_cloud_file_errors(tmp_path):
    p = tmp_path / "bad.pc6"
    p.write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(CloudFileError, match="magic"):
        read_cloud(p)
    p.write_bytes(struct.pack("<4sIQ", b"PC6\0", 2, 0))
    with pytest.raises(CloudFileError, match="version"):
        read_cloud(p)
    p.write_bytes(struct.pack("<4sIQ", b"PC6\0", 1, 3) + bytes(24))
    with pytest.raises(CloudFileError, match="expected 3"):
        read_cloud(p)
    p.write_bytes(b"PC")
    with pytest.raises(CloudFileError, match="truncated"):
        read_cloud(p)


def test_ply_round_trip(tmp_path):
    c = random_cloud(np.random.default_rng(12), 40)
    write_ply(c, tmp_path / "a.ply")
    back = read_ply(tmp_path / "a.ply")
    np.testing.assert_allclose(back.xyz, c.xyz, atol=5e-7)
    np.testing.assert_allclose(back.rgb, np.rint(c.rgb * 255) / 255, atol=1e-12)


def test_external_binary_ply(fixtures_dir):
    path = fixtures_dir / "external" / "tool_export.ply"
    raw = path.read_bytes()
    header, body = raw.split(b"end_header\n", 1)
    declared = int(next(l.split()[2] for l in header.decode().splitlines() if l.startswith("element vertex")))
    c = read_ply(path)
    assert len(c) == declared == 37
    # decode the first record by hand: 3 doubles, 3 floats, 3 bytes
    x, y, z, *_n, r, g, b = struct.unpack_from("<dddfffBBB", body, 0)
    np.testing.assert_allclose(c.points[0], [x, y, z, r / 255, g / 255, b / 255])


def test_remove_outliers_drops_far_point():
    rng = np.random.default_rng(0)
    pts = np.hstack([rng.normal(scale=0.1, size=(200, 3)), np.zeros((200, 3))])
    pts = np.vstack([pts, [[50, 50, 50, 0, 0, 0]]])
    out = remove_outliers(PointCloud(pts))
    assert len(out) < 201
    assert not np.any(np.all(out.xyz == 50, axis=1))


# ---- viewpoint clouds --------------------------------------------------------------------


def test_fixture_frame_samples_to_8192(rgbd_scene):
    c = build_cloud(rgbd_scene, "r0", PointCloudOptions(), seed=0)
    assert c.points.shape == (8192, 6)
    full = viewpoint_cloud(rgbd_scene, "r0")
    assert len(full) > 8192


def test_build_cloud_skips_geometry_only(fixture8, rgbd_scene):
    assert build_cloud(fixture8, "a0", PointCloudOptions(), 0) is None
    assert build_cloud(rgbd_scene, "r0", PointCloudOptions(enabled=False), 0) is None


def test_camera_points_land_in_front(rgbd_scene):
    # every point of heading 0 at r0 is ahead of the camera along +y
    c = viewpoint_cloud(rgbd_scene, "r0", headings=[0])
    assert (c.xyz[:, 1] > 0).all()
    c6 = viewpoint_cloud(rgbd_scene, "r0", headings=[6])
    assert (c6.xyz[:, 1] < 0).all()
