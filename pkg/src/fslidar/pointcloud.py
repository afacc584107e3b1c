"""LiDAR scans, KITTI-format I/O and spherical range-view projection."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateFov, LabelCountMismatch, MalformedFile, MissingPose, ShapeMismatch

EMPTY_DEPTH = -1.0
FEATURE_NAMES = ("x", "y", "z", "depth", "intensity")
DEFAULT_FOV_UP = 3.0
DEFAULT_FOV_DOWN = -25.0

SEMANTIC_MASK = 0xFFFF


@dataclass
class LidarScan:
    points: np.ndarray                   # (N, 4) float32: x, y, z, intensity
    pose: np.ndarray | None = None       # (3, 4) sensor -> world; None when unknown
    sequence_id: str = "00"
    frame_index: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ShapeMismatch(f"points must be N x 4, got {pts.shape}")
        if len(pts) == 0:
            raise ValueError("a scan needs at least one point")
        if not np.isfinite(pts).all():
            raise ValueError("scan contains non-finite coordinates")
        if (np.linalg.norm(pts[:, :3].astype(np.float64), axis=1) <= 0).any():
            raise ValueError("scan contains a point at the sensor origin")
        self.points = pts
        if self.pose is not None:
            pose = np.asarray(self.pose, dtype=np.float64)
            if pose.shape != (3, 4):
                raise ShapeMismatch(f"pose must be 3 x 4, got {pose.shape}")
            self.pose = pose

    def __len__(self):
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3].astype(np.float64)

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3].astype(np.float64)

    def world_xyz(self) -> np.ndarray:
        if self.pose is None or not np.isfinite(self.pose).all():
            raise MissingPose(f"scan {self.sequence_id}/{self.frame_index} has no valid pose")
        return self.xyz @ self.pose[:, :3].T + self.pose[:, 3]


@dataclass
class RangeImage:
    height: int
    width: int
    depth: np.ndarray           # (H, W), EMPTY_DEPTH where nothing landed
    features: np.ndarray        # (H, W, 5) x, y, z, depth, intensity; zeros where empty
    pixel_of_point: np.ndarray  # (N, 2) row, col
    point_of_pixel: np.ndarray  # (H, W) representative point index, -1 where empty

    @property
    def valid(self) -> np.ndarray:
        return self.point_of_pixel >= 0

    def pixel_labels(self, point_labels, fill: int = 0) -> np.ndarray:
        """Label each pixel with its representative point's label."""
        point_labels = np.asarray(point_labels)
        if len(point_labels) != len(self.pixel_of_point):
            raise ShapeMismatch("one label per projected point is required")
        out = np.full((self.height, self.width), fill, dtype=point_labels.dtype)
        mask = self.valid
        out[mask] = point_labels[self.point_of_pixel[mask]]
        return out


# --------------------------------------------------------------------------
# KITTI on-disk formats

def load_scan(path, pose=None, sequence_id: str = "00", frame_index: int = 0) -> LidarScan:
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % 16:
        raise MalformedFile(f"{path}: {len(raw)} bytes is not a whole number of 16-byte points")
    points = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float32)
    return LidarScan(points, pose, sequence_id, frame_index)


def save_scan(path, scan: LidarScan) -> None:
    Path(path).write_bytes(np.ascontiguousarray(scan.points, dtype="<f4").tobytes())


def load_label_words(path, n_points: int | None = None) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) % 4:
        raise MalformedFile(f"{path}: {len(raw)} bytes is not a whole number of label words")
    words = np.frombuffer(raw, dtype="<u4").astype(np.uint32)
    if n_points is not None and len(words) != n_points:
        raise LabelCountMismatch(f"{path}: {len(words)} labels for {n_points} points")
    return words


def load_labels(path, n_points: int | None = None) -> np.ndarray:
    """Semantic ids (low 16 bits of each label word)."""
    return (load_label_words(path, n_points) & SEMANTIC_MASK).astype(np.int64)


def compose_label_words(semantic, instance_words=None) -> np.ndarray:
    """Pack semantic ids into label words, keeping the upper (instance) bits of ``instance_words``."""
    semantic = np.asarray(semantic, dtype=np.int64)
    if semantic.size and (semantic.min() < 0 or semantic.max() > SEMANTIC_MASK):
        raise ValueError("semantic ids must fit in 16 bits")
    words = semantic.astype(np.uint32)
    if instance_words is not None:
        instance_words = np.asarray(instance_words, dtype=np.uint32)
        if instance_words.shape != words.shape:
            raise LabelCountMismatch("instance words and semantic ids differ in length")
        words = (instance_words & np.uint32(~SEMANTIC_MASK & 0xFFFFFFFF)) | words
    return words


def save_label_words(path, words) -> None:
    Path(path).write_bytes(np.ascontiguousarray(words, dtype="<u4").tobytes())


def save_labels(path, semantic, instance_words=None) -> None:
    save_label_words(path, compose_label_words(semantic, instance_words))


def load_poses(path) -> list[np.ndarray]:
    poses = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        vals = line.split()
        if len(vals) != 12:
            raise MalformedFile(f"{path}:{lineno}: expected 12 values, got {len(vals)}")
        poses.append(np.array([float(v) for v in vals]).reshape(3, 4))
    return poses


def save_poses(path, poses) -> None:
    lines = [" ".join(repr(float(v)) for v in np.asarray(p, dtype=np.float64).reshape(-1))
             for p in poses]
    Path(path).write_text("\n".join(lines) + "\n")


def load_sequence(seq_dir, with_labels: bool = True):
    """Read ``<seq>/velodyne/*.bin``, ``<seq>/labels/*.label`` and ``<seq>/poses.txt``.

    Returns a list of scans and a list of label arrays (``None`` entries when
    a label file is absent).
    """
    seq_dir = Path(seq_dir)
    bins = sorted((seq_dir / "velodyne").glob("*.bin"))
    pose_file = seq_dir / "poses.txt"
    poses = load_poses(pose_file) if pose_file.exists() else [None] * len(bins)
    if len(poses) < len(bins):
        raise MalformedFile(f"{pose_file}: {len(poses)} poses for {len(bins)} scans")
    scans, labels = [], []
    for i, b in enumerate(bins):
        scan = load_scan(b, poses[i], seq_dir.name, int(b.stem))
        scans.append(scan)
        lab = seq_dir / "labels" / f"{b.stem}.label"
        labels.append(load_labels(lab, len(scan)) if with_labels and lab.exists() else None)
    return scans, labels


def save_sequence(seq_dir, scans, labels=None) -> None:
    seq_dir = Path(seq_dir)
    (seq_dir / "velodyne").mkdir(parents=True, exist_ok=True)
    if labels is not None:
        (seq_dir / "labels").mkdir(parents=True, exist_ok=True)
    for i, scan in enumerate(scans):
        save_scan(seq_dir / "velodyne" / f"{scan.frame_index:06d}.bin", scan)
        if labels is not None and labels[i] is not None:
            save_labels(seq_dir / "labels" / f"{scan.frame_index:06d}.label", labels[i])
    if all(s.pose is not None for s in scans):
        save_poses(seq_dir / "poses.txt", [s.pose for s in scans])


# --------------------------------------------------------------------------
# range view

def spherical_project(scan: LidarScan, height: int = 64, width: int = 2048,
                      fov_up: float = DEFAULT_FOV_UP, fov_down: float = DEFAULT_FOV_DOWN) -> RangeImage:
    if height < 1 or width < 1:
        raise ValueError("range image must be at least 1 x 1")
    if fov_up <= fov_down:
        raise DegenerateFov(f"fov_up ({fov_up}) must exceed fov_down ({fov_down})")
    up, down = np.radians(fov_up), np.radians(fov_down)

    xyz = scan.xyz
    depth = np.linalg.norm(xyz, axis=1)
    yaw = np.arctan2(xyz[:, 1], xyz[:, 0])
    pitch = np.arcsin(np.clip(xyz[:, 2] / depth, -1.0, 1.0))

    col = np.floor(0.5 * (1.0 - yaw / np.pi) * width)
    row = np.floor((1.0 - (pitch - down) / (up - down)) * height)
    col = np.clip(col, 0, width - 1).astype(np.int64)
    row = np.clip(row, 0, height - 1).astype(np.int64)

    # nearest point wins a pixel; equal depths fall back to the lower point index
    n = len(depth)
    order = np.lexsort((np.arange(n), depth))
    flat = row[order] * width + col[order]
    pix, first = np.unique(flat, return_index=True)
    rep = order[first]

    point_of_pixel = np.full(height * width, -1, dtype=np.int64)
    point_of_pixel[pix] = rep
    point_of_pixel = point_of_pixel.reshape(height, width)

    depth_img = np.full((height, width), EMPTY_DEPTH)
    depth_img.flat[pix] = depth[rep]
    feats = np.zeros((height, width, len(FEATURE_NAMES)))
    feats.reshape(-1, len(FEATURE_NAMES))[pix] = np.column_stack(
        [xyz[rep], depth[rep], scan.intensity[rep]])
    return RangeImage(height, width, depth_img, feats, np.column_stack([row, col]), point_of_pixel)


def back_project(pixel_labels, ri: RangeImage) -> np.ndarray:
    pixel_labels = np.asarray(pixel_labels)
    if pixel_labels.shape != (ri.height, ri.width):
        raise ShapeMismatch(f"pixel labels {pixel_labels.shape} vs range image {(ri.height, ri.width)}")
    return pixel_labels[ri.pixel_of_point[:, 0], ri.pixel_of_point[:, 1]]
