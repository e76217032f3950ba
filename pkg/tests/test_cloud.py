import numpy as np
import pytest

from udfnav import cloud as cl


def brute_force_nearest(points, query):
    return np.min(np.linalg.norm(points - query, axis=1))


def brute_force_chamfer(a, b):
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
    return d.min(axis=1).mean() + d.min(axis=0).mean()


# ---------------------------------------------------------------------------
# loading and filtering

def test_load_xyz_no_threshold(tmp_path):
    p = tmp_path / "three.xyz"
    p.write_text("0 0 0\n1 2 3\n-1 0.5 2\n")
    c = cl.load_cloud(p)
    assert len(c) == 3
    assert np.allclose(c.points[1], [1, 2, 3])


def test_confidence_filter_retains_order(tmp_path):
    p = tmp_path / "conf.xyz"
    p.write_text("0 0 0 0.2\n1 0 0 0.9\n2 0 0 0.5\n")
    c = cl.load_cloud(p, confidence_threshold=0.4)
    assert len(c) == 2
    assert np.allclose(c.points[:, 0], [1, 2])  # input order preserved


def test_threshold_without_confidence_channel_keeps_all(tmp_path):
    p = tmp_path / "plain.xyz"
    p.write_text("0 0 0\n1 0 0\n")
    assert len(cl.load_cloud(p, confidence_threshold=0.9)) == 2


@pytest.mark.parametrize("fmt", ["xyz", "ply"])
def test_fuzzed_roundtrip_filter_matches_reference(tmp_path, fmt):
    rng = np.random.default_rng(11)
    n = 400
    pts = rng.uniform(-5, 5, (n, 3))
    conf = rng.uniform(0, 1, n)
    colors = rng.uniform(0, 1, (n, 3))
    original = cl.PointCloud(pts, colors, conf)
    path = tmp_path / f"fuzz.{fmt}"
    cl.save_cloud(original, path)
    for thresh in (0.0, 0.25, 0.5, 0.9):
        got = cl.load_cloud(path, confidence_threshold=thresh)
        keep = conf >= thresh  # scalar reference filter
        assert len(got) == keep.sum()
        assert np.allclose(got.points, pts[keep], atol=1e-12)
        assert np.allclose(got.confidence, conf[keep], atol=1e-12)


def test_ply_binary_roundtrip_exact(tmp_path):
    rng = np.random.default_rng(3)
    c = cl.PointCloud(rng.uniform(-1, 1, (50, 3)), confidence=rng.uniform(0, 1, 50))
    path = tmp_path / "c.ply"
    cl.save_cloud(c, path)
    back = cl.load_cloud(path)
    assert np.array_equal(back.points, c.points)  # doubles round-trip exactly
    assert np.array_equal(back.confidence, c.confidence)


def test_malformed_xyz_reports_line(tmp_path):
    p = tmp_path / "bad.xyz"
    p.write_text("0 0 0\n1 oops 2\n")
    with pytest.raises(cl.CloudParseError) as err:
        cl.load_cloud(p)
    assert err.value.line == 2


def test_truncated_ply_reports_offset(tmp_path):
    c = cl.PointCloud(np.random.default_rng(0).uniform(size=(20, 3)))
    path = tmp_path / "t.ply"
    cl.save_cloud(c, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-17])
    with pytest.raises(cl.CloudParseError):
        cl.load_cloud(path)


def test_zero_survivors_is_error(tmp_path):
    p = tmp_path / "low.xyz"
    p.write_text("0 0 0 0.1\n1 1 1 0.2\n")
    with pytest.raises(cl.EmptyCloudError):
        cl.load_cloud(p, confidence_threshold=0.5)


# ---------------------------------------------------------------------------
# normalization

def test_normalize_two_points():
    c = cl.PointCloud(np.array([[0.0, 0, 0], [2.0, 0, 0]]))
    out, scale, center = cl.normalize(c)
    assert np.allclose(out.points, [[-1, 0, 0], [1, 0, 0]])
    assert scale == 1.0
    assert np.allclose(center, [1, 0, 0])


def test_normalize_cube_corners_fixed_point():
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)],
                       dtype=float)
    out, scale, center = cl.normalize(cl.PointCloud(corners))
    assert np.allclose(out.points, corners)
    assert scale == 1.0
    assert np.allclose(center, 0.0)


def test_normalize_roundtrip_identity():
    rng = np.random.default_rng(7)
    c = cl.PointCloud(rng.uniform(-40, 90, (300, 3)))
    normed, scale, center = cl.normalize(c)
    assert normed.points.min() >= -1.0 - 1e-12 and normed.points.max() <= 1.0 + 1e-12
    back = cl.denormalize(normed, scale, center)
    assert np.allclose(back.points, c.points, atol=1e-12)


def test_normalize_degenerate_cloud():
    c = cl.PointCloud(np.ones((5, 3)))
    with pytest.raises(cl.ZeroExtentError):
        cl.normalize(c)


# ---------------------------------------------------------------------------
# nearest neighbor queries

def test_nearest_distance_trivial():
    idx = cl.SpatialIndex(np.array([[1.0, 0, 0]]))
    assert idx.nearest_distance(np.array([0.0, 0, 0])) == 1.0
    assert idx.nearest_distance(np.array([1.0, 0, 0])) == 0.0


def test_nearest_distance_matches_linear_scan():
    rng = np.random.default_rng(42)
    pts = rng.uniform(-1, 1, (1000, 3))
    idx = cl.SpatialIndex(pts)
    queries = rng.uniform(-1.5, 1.5, (100, 3))
    got = idx.distances(queries)
    for q, g in zip(queries, got):
        assert abs(g - brute_force_nearest(pts, q)) <= 1e-12


def test_nearest_rejects_nonfinite():
    idx = cl.SpatialIndex(np.zeros((1, 3)))
    with pytest.raises(ValueError):
        idx.nearest_distance(np.array([np.nan, 0, 0]))


def test_nearest_tie_breaks_to_lowest_index():
    pts = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0.0, 1.0, 0]])
    idx = cl.SpatialIndex(pts)
    dists, ids = idx.nearest(np.zeros((1, 3)))
    assert dists[0] == 1.0 and ids[0] == 0


# ---------------------------------------------------------------------------
# chamfer

def test_chamfer_identical_zero():
    rng = np.random.default_rng(1)
    c = cl.PointCloud(rng.uniform(size=(40, 3)))
    assert cl.chamfer(c, c) == 0.0


def test_chamfer_singletons():
    a = cl.PointCloud(np.array([[0.0, 0, 0]]))
    b = cl.PointCloud(np.array([[1.0, 0, 0]]))
    assert cl.chamfer(a, b) == pytest.approx(2.0, abs=1e-15)


def test_chamfer_matches_brute_force_and_symmetry():
    rng = np.random.default_rng(5)
    for trial in range(5):
        a = cl.PointCloud(rng.uniform(-1, 1, (50, 3)))
        b = cl.PointCloud(rng.uniform(-1, 1, (50, 3)))
        got = cl.chamfer(a, b)
        assert abs(got - brute_force_chamfer(a.points, b.points)) <= 1e-10
        assert got == cl.chamfer(b, a)
        assert got >= 0.0


# ---------------------------------------------------------------------------
# ICP

def rotation_about_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


def structured_cloud(rng, n=400):
    """Asymmetric blob arrangement; gives ICP a well-defined basin."""
    blobs = [
        rng.normal([0.5, 0.0, 0.0], 0.08, (n // 2, 3)),
        rng.normal([-0.4, 0.3, 0.2], 0.15, (n // 4, 3)),
        rng.normal([0.0, -0.5, -0.3], 0.04, (n - n // 2 - n // 4, 3)),
    ]
    return np.vstack(blobs)


def test_icp_identity_when_equal():
    rng = np.random.default_rng(2)
    pts = structured_cloud(rng)
    res = cl.icp_align(cl.PointCloud(pts), cl.PointCloud(pts))
    assert res.residual <= 1e-12
    assert np.allclose(res.transform.rotation, np.eye(3), atol=1e-9)
    assert np.allclose(res.transform.translation, 0.0, atol=1e-9)


def test_icp_recovers_small_rigid_motion():
    rng = np.random.default_rng(3)
    src = structured_cloud(rng)
    rot = rotation_about_z(np.radians(5.0))
    t = np.array([0.1, 0.0, 0.0])
    target = src @ rot.T + t
    res = cl.icp_align(cl.PointCloud(src), cl.PointCloud(target),
                       max_iters=100, tol=1e-15)
    rot_err = res.transform.rotation @ rot.T
    angle_err = np.arccos(np.clip((np.trace(rot_err) - 1) / 2, -1, 1))
    assert angle_err <= 1e-6
    assert np.linalg.norm(res.transform.translation - t) <= 1e-6


def test_icp_residual_monotone_on_partial_overlap():
    rng = np.random.default_rng(4)
    src = structured_cloud(rng, 600)
    rot = rotation_about_z(np.radians(8.0))
    moved = src @ rot.T + np.array([0.05, -0.02, 0.01])
    # partial overlap: drop disjoint subsets from the two sides
    res = cl.icp_align(cl.PointCloud(src[:450]), cl.PointCloud(moved[150:]),
                       max_iters=60, tol=1e-15)
    diffs = np.diff(res.residuals)
    assert np.all(diffs <= 1e-12)


def test_icp_transforms_stay_rigid_every_iteration():
    rng = np.random.default_rng(5)
    src = structured_cloud(rng)
    target = src @ rotation_about_z(0.3).T + np.array([0.02, 0.03, -0.01])
    res = cl.icp_align(cl.PointCloud(src), cl.PointCloud(target), max_iters=40)
    # RigidTransform validates orthonormality and det=+1 on construction;
    # re-check explicitly on every recorded iterate
    for tr in res.transforms:
        assert np.allclose(tr.rotation.T @ tr.rotation, np.eye(3), atol=1e-9)
        assert abs(np.linalg.det(tr.rotation) - 1.0) <= 1e-9


def test_icp_degenerate_covariance():
    src = cl.PointCloud(np.zeros((10, 3)) + np.array([1.0, 2.0, 3.0]))
    target = cl.PointCloud(np.random.default_rng(0).uniform(size=(10, 3)))
    with pytest.raises(cl.AlignmentError) as err:
        cl.icp_align(src, target)
    assert err.value.last_transform is not None


def test_icp_scale_estimation_behind_flag():
    rng = np.random.default_rng(6)
    src = structured_cloud(rng)
    target = 1.3 * (src @ rotation_about_z(0.05).T) + np.array([0.1, 0, 0])
    res = cl.icp_align(cl.PointCloud(src), cl.PointCloud(target),
                       max_iters=200, tol=1e-15, estimate_scale=True)
    assert res.scale == pytest.approx(1.3, abs=1e-6)
    # default stays rigid-only
    res_rigid = cl.icp_align(cl.PointCloud(src), cl.PointCloud(target))
    assert res_rigid.scale == 1.0


# ---------------------------------------------------------------------------
# validation

def test_pointcloud_rejects_nonfinite():
    with pytest.raises(ValueError):
        cl.PointCloud(np.array([[np.inf, 0, 0]]))


def test_pointcloud_rejects_mismatched_channels():
    with pytest.raises(ValueError):
        cl.PointCloud(np.zeros((3, 3)), confidence=np.zeros(2))


def test_rigid_transform_validates():
    with pytest.raises(ValueError):
        cl.RigidTransform(np.eye(3) * 2.0, np.zeros(3))
    reflection = np.diag([1.0, 1.0, -1.0])
    with pytest.raises(ValueError):
        cl.RigidTransform(reflection, np.zeros(3))
