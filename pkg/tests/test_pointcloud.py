import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fslidar.errors import DegenerateFov, LabelCountMismatch, MalformedFile, MissingPose
from fslidar.pointcloud import (EMPTY_DEPTH, LidarScan, back_project, compose_label_words, load_label_words,
                                load_labels, load_poses, load_scan, load_sequence, save_label_words, save_labels,
                                save_poses, save_scan, save_sequence, spherical_project)


def _scan(rng, n=200, pose=None):
    pts = rng.uniform(-20, 20, (n, 4)).astype(np.float32)
    pts[:, 3] = rng.uniform(0, 1, n)
    return LidarScan(pts, pose)


def test_bin_round_trip_is_bit_exact(tmp_path):
    scan = _scan(np.random.default_rng(0))
    save_scan(tmp_path / "a.bin", scan)
    back = load_scan(tmp_path / "a.bin")
    assert back.points.tobytes() == scan.points.tobytes()
    assert (tmp_path / "a.bin").stat().st_size == 16 * len(scan)


def test_truncated_bin_rejected(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"\x00" * 17)
    with pytest.raises(MalformedFile):
        load_scan(tmp_path / "bad.bin")


def test_label_words_keep_instance_bits(tmp_path):
    words = np.array([0x00010004, 0xABCD0001, 7], dtype=np.uint32)
    save_label_words(tmp_path / "x.label", words)
    assert np.array_equal(load_label_words(tmp_path / "x.label"), words)
    assert list(load_labels(tmp_path / "x.label")) == [4, 1, 7]
    save_labels(tmp_path / "y.label", [9, 9, 9], words)
    assert list(load_label_words(tmp_path / "y.label")) == [0x00010009, 0xABCD0009, 9]
    with pytest.raises(LabelCountMismatch):
        load_labels(tmp_path / "y.label", 4)


def test_compose_rejects_wide_ids():
    with pytest.raises(ValueError):
        compose_label_words([70000])


def test_poses_round_trip_exact(tmp_path):
    rng = np.random.default_rng(1)
    poses = [rng.normal(size=(3, 4)) for _ in range(5)]
    save_poses(tmp_path / "poses.txt", poses)
    back = load_poses(tmp_path / "poses.txt")
    assert all(np.array_equal(a, b) for a, b in zip(poses, back))
    (tmp_path / "bad.txt").write_text("1 2 3\n")
    with pytest.raises(MalformedFile):
        load_poses(tmp_path / "bad.txt")


def test_sequence_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    scans = []
    for i in range(3):
        s = _scan(rng, 50, np.hstack([np.eye(3), [[i], [0], [0]]]))
        s.frame_index = i
        scans.append(s)
    labels = [rng.integers(0, 5, 50) for _ in scans]
    save_sequence(tmp_path / "00", scans, labels)
    back_scans, back_labels = load_sequence(tmp_path / "00")
    for a, b, la, lb in zip(scans, back_scans, labels, back_labels):
        assert a.points.tobytes() == b.points.tobytes()
        assert np.array_equal(a.pose, b.pose)
        assert np.array_equal(la, lb)


def test_world_xyz_needs_pose():
    scan = _scan(np.random.default_rng(3), 10)
    with pytest.raises(MissingPose):
        scan.world_xyz()
    pose = np.hstack([np.eye(3), [[1.0], [2.0], [3.0]]])
    scan.pose = pose
    assert np.allclose(scan.world_xyz(), scan.xyz + [1, 2, 3])


def test_scan_validation():
    with pytest.raises(ValueError):
        LidarScan(np.zeros((1, 4), dtype=np.float32))
    with pytest.raises(ValueError):
        LidarScan(np.array([[np.nan, 1, 1, 0]], dtype=np.float32))


def test_projection_nearest_point_wins():
    pts = np.array([[10, 0, 0, 0.1], [5, 0, 0, 0.2], [5, 0, 0, 0.3]], dtype=np.float32)
    ri = spherical_project(LidarScan(pts), 8, 16)
    r, c = ri.pixel_of_point[0]
    assert (ri.pixel_of_point == [r, c]).all()
    # equal depths: lower index wins
    assert ri.point_of_pixel[r, c] == 1
    assert ri.depth[r, c] == pytest.approx(5.0)
    assert ri.features[r, c, 4] == pytest.approx(0.2)
    assert (ri.depth[ri.point_of_pixel < 0] == EMPTY_DEPTH).all()
    assert (ri.features[ri.point_of_pixel < 0] == 0).all()


def test_projection_rejects_degenerate_fov():
    with pytest.raises(DegenerateFov):
        spherical_project(_scan(np.random.default_rng(0)), 8, 16, fov_up=-5, fov_down=-5)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, (30, 3), elements=st.floats(-50, 50, width=32)),
       st.integers(1, 16), st.integers(1, 64))
def test_projection_is_total_and_minimal(xyz, h, w):
    keep = np.linalg.norm(xyz.astype(np.float64), axis=1) > 1e-3
    if not keep.any():
        return
    pts = np.column_stack([xyz[keep], np.zeros(keep.sum(), np.float32)])
    ri = spherical_project(LidarScan(pts), h, w)
    rows, cols = ri.pixel_of_point.T
    assert ((0 <= rows) & (rows < h) & (0 <= cols) & (cols < w)).all()
    depth = np.linalg.norm(pts[:, :3].astype(np.float64), axis=1)
    for i, (r, c) in enumerate(ri.pixel_of_point):
        rep = ri.point_of_pixel[r, c]
        assert rep >= 0 and depth[rep] <= depth[i]
    # back-projection of the pixel labels recovers each representative's own label
    labels = np.arange(len(pts))
    back = back_project(ri.pixel_labels(labels), ri)
    assert np.array_equal(back, ri.point_of_pixel[rows, cols])
