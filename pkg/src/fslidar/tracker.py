"""Pseudo ground truth by tracking annotated novel objects through a sequence.

Any object with a ``propagate(prev_scan, prev_labels, next_scan)`` method can
serve as the tracker; :class:`GeometricTracker` is the built-in one.  It works
in world coordinates, shifts each novel object by a translation estimated
with a few nearest-neighbour (ICP-style) iterations, and hands a next-frame
point the novel label of the closest shifted object point only if that point
is within ``radius`` and closer than every non-novel point of the previous
frame.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .classspace import ClassSpace
from .errors import AnnotationOutOfRange
from .pointcloud import LidarScan, load_label_words, save_labels

GT, FORWARD, BACKWARD = "ground-truth", "pseudo-forward", "pseudo-backward"
ENTRIES_FILE = "augmented.json"


@dataclass
class TrackConfig:
    frames_forward: int = 10
    frames_backward: int = 10
    gap: int = 15
    radius: float = 1.0
    min_points: int = 3
    icp_iterations: int = 3
    ground_tol: float | None = 0.05

    def __post_init__(self):
        if self.frames_forward < 0 or self.frames_backward < 0:
            raise ValueError("frame counts must be >= 0")
        if self.gap < 1:
            raise ValueError("tracking gap must be >= 1")
        if self.radius <= 0:
            raise ValueError("matching radius must be > 0")

    @property
    def total_frames(self) -> int:
        return self.frames_forward + self.frames_backward


class Tracker(Protocol):
    def propagate(self, prev: LidarScan, prev_labels: np.ndarray, nxt: LidarScan) -> np.ndarray: ...


def _clusters(xyz: np.ndarray, link: float) -> np.ndarray:
    n = len(xyz)
    pairs = cKDTree(xyz).query_pairs(link, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    return connected_components(graph, directed=False)[1]


def _estimate_shift(obj_xyz, next_tree, next_xyz, radius, iterations) -> np.ndarray:
    """Median nearest-neighbour displacement, iterated ICP-style."""
    shift = np.zeros(3)
    for _ in range(iterations):
        moved = obj_xyz + shift
        dist, idx = next_tree.query(moved, distance_upper_bound=radius)
        ok = np.isfinite(dist)
        if not ok.any():
            break
        step = np.median(next_xyz[idx[ok]] - moved[ok], axis=0)
        shift += step
        if np.linalg.norm(step) < 1e-6:
            break
    return shift


def ground_mask(xyz: np.ndarray, tol: float, iterations: int = 64, seed: int = 0) -> np.ndarray:
    """Points within ``tol`` of the dominant near-horizontal plane (seeded RANSAC)."""
    low = np.flatnonzero(xyz[:, 2] <= np.median(xyz[:, 2]))
    if len(low) < 3:
        return np.zeros(len(xyz), dtype=bool)
    rng = np.random.default_rng(seed)
    best, best_count = None, -1
    for _ in range(iterations):
        a, b, c = xyz[rng.choice(low, 3, replace=False)]
        normal = np.cross(b - a, c - a)
        norm = np.linalg.norm(normal)
        if norm < 1e-9 or abs(normal[2]) / norm < 0.9:
            continue
        normal /= norm
        dist = np.abs((xyz - a) @ normal)
        count = int((dist < tol).sum())
        if count > best_count:
            best, best_count = dist, count
    if best is None:
        return np.zeros(len(xyz), dtype=bool)
    return best < tol


def _match(next_w, candidates, moved, moved_labels, bg_dist, radius):
    out = np.zeros(len(next_w), dtype=np.int64)
    owner = np.full(len(next_w), -1)
    if not moved:
        return out, owner
    pts = np.concatenate(moved)
    lab = np.concatenate(moved_labels)
    obj = np.concatenate([np.full(len(m), k) for k, m in enumerate(moved)])
    d, i = cKDTree(pts).query(next_w[candidates], distance_upper_bound=radius)
    hit = np.isfinite(d) & (d < bg_dist[candidates])
    out[candidates[hit]] = lab[i[hit]]
    owner[candidates[hit]] = obj[i[hit]]
    return out, owner


def propagate_labels(prev: LidarScan, prev_labels, nxt: LidarScan, cs: ClassSpace,
                     radius: float = 1.0, min_points: int = 3, icp_iterations: int = 3,
                     ground_tol: float | None = 0.05, refine_iterations: int = 2) -> np.ndarray:
    """Carry novel-class labels from ``prev`` to ``nxt``; everything else becomes unlabeled.

    Each connected novel object is shifted by its median nearest-neighbour
    displacement; the shift is then refined from how the extent of the
    matched points moved, which recovers motion along flat faces where
    nearest neighbours see none.  With ``ground_tol`` set, points on the
    fitted ground plane of the next scan never receive a novel label.
    """
    prev_labels = np.asarray(prev_labels, dtype=np.int64)
    prev_w, next_w = prev.world_xyz(), nxt.world_xyz()
    novel = np.isin(prev_labels, cs.novel_dense)
    if not novel.any():
        return np.zeros(len(nxt), dtype=np.int64)

    candidates = np.arange(len(next_w))
    background = ~novel
    if ground_tol is not None:
        candidates = candidates[~ground_mask(next_w, ground_tol)]
        background &= ~ground_mask(prev_w, ground_tol)
    next_tree = cKDTree(next_w[candidates])
    if background.any():
        bg_dist, _ = cKDTree(prev_w[background]).query(next_w, distance_upper_bound=radius)
    else:
        bg_dist = np.full(len(next_w), np.inf)

    objects, labels, shifts = [], [], []
    for c in np.unique(prev_labels[novel]):
        idx = np.flatnonzero(prev_labels == c)
        comp = _clusters(prev_w[idx], radius)
        for k in np.unique(comp):
            pts = prev_w[idx[comp == k]]
            if len(pts) < min_points:
                continue
            objects.append(pts)
            labels.append(np.full(len(pts), c))
            shifts.append(_estimate_shift(pts, next_tree, next_w[candidates], radius, icp_iterations))

    out, owner = _match(next_w, candidates, [o + s for o, s in zip(objects, shifts)], labels, bg_dist, radius)
    for _ in range(refine_iterations):
        for k, pts in enumerate(objects):
            got = next_w[owner == k]
            if len(got) < min_points:
                continue
            delta = 0.5 * ((got.min(0) - (pts + shifts[k]).min(0)) + (got.max(0) - (pts + shifts[k]).max(0)))
            if np.linalg.norm(delta) < radius:
                shifts[k] = shifts[k] + delta
        out, owner = _match(next_w, candidates, [o + s for o, s in zip(objects, shifts)], labels,
                            bg_dist, radius)
    return out


class GeometricTracker:
    def __init__(self, cs: ClassSpace, radius: float = 1.0, min_points: int = 3, icp_iterations: int = 3,
                 ground_tol: float | None = 0.05):
        self.cs, self.radius = cs, radius
        self.min_points, self.icp_iterations, self.ground_tol = min_points, icp_iterations, ground_tol

    @classmethod
    def from_config(cls, cs: ClassSpace, cfg: TrackConfig) -> "GeometricTracker":
        return cls(cs, cfg.radius, cfg.min_points, cfg.icp_iterations, cfg.ground_tol)

    def propagate(self, prev, prev_labels, nxt):
        return propagate_labels(prev, prev_labels, nxt, self.cs, self.radius, self.min_points,
                                self.icp_iterations, self.ground_tol)


def emission_indices(t: int, n_frames: int, cfg: TrackConfig) -> tuple[list[int], list[int]]:
    fwd = [t + cfg.gap * i for i in range(1, cfg.frames_forward + 1) if t + cfg.gap * i < n_frames]
    bwd = [t - cfg.gap * i for i in range(1, cfg.frames_backward + 1) if t - cfg.gap * i >= 0]
    return fwd, bwd


def _walk(scans, labels, start, stop, step, emit, tracker):
    out, cur = [], labels
    for i in range(start + step, stop + step, step):
        cur = tracker.propagate(scans[i - step], cur, scans[i])
        if i in emit:
            out.append((i, cur))
    return out


def track_bidirectional(scans: Sequence[LidarScan], t: int, labels, cfg: TrackConfig,
                        tracker: Tracker) -> list[tuple[int, np.ndarray, str, int]]:
    """Emit ``(position, labels, direction, step)`` at positions ``t ± gap * i``.

    Labels are carried through every intermediate scan; positions index
    ``scans``.  Runs that would leave the sequence are truncated.
    """
    n = len(scans)
    if not 0 <= t < n:
        raise AnnotationOutOfRange(f"annotated position {t} outside 0..{n - 1}")
    fwd, bwd = emission_indices(t, n, cfg)
    out = []
    if fwd:
        for i, lab in _walk(scans, labels, t, fwd[-1], 1, set(fwd), tracker):
            out.append((i, lab, FORWARD, (i - t) // cfg.gap))
    if bwd:
        for i, lab in _walk(scans, labels, t, bwd[-1], -1, set(bwd), tracker):
            out.append((i, lab, BACKWARD, (t - i) // cfg.gap))
    return out


@dataclass
class Entry:
    scan: LidarScan
    labels: np.ndarray
    provenance: str = GT
    source_frame: int | None = None
    step: int = 0
    gap: int = 0

    def manifest_row(self) -> dict:
        return {"sequence": self.scan.sequence_id, "frame": int(self.scan.frame_index),
                "provenance": self.provenance,
                "source_frame": None if self.source_frame is None else int(self.source_frame),
                "step": int(self.step), "gap": int(self.gap)}


@dataclass
class AugmentedDataset:
    entries: list[Entry] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def of_kind(self, pseudo: bool) -> list[Entry]:
        return [e for e in self.entries if (e.provenance != GT) == pseudo]

    def novel_ratio(self, cs: ClassSpace, pseudo: bool | None = None) -> float:
        entries = self.entries if pseudo is None else self.of_kind(pseudo)
        total = sum(len(e.labels) for e in entries)
        novel = sum(int(np.isin(e.labels, cs.novel_dense).sum()) for e in entries)
        return novel / total if total else 0.0


def build_augmented_dataset(ground_truths, sequences: dict, cfg: TrackConfig, cs: ClassSpace,
                            tracker: Tracker | None = None) -> AugmentedDataset:
    """``ground_truths`` holds ``(sequence_id, position, labels)`` with novel-stage labels;
    ``sequences`` maps a sequence id to its list of scans."""
    tracker = tracker or GeometricTracker.from_config(cs, cfg)
    ds = AugmentedDataset()
    for seq_id, t, labels in ground_truths:
        scans = sequences[seq_id]
        if not 0 <= t < len(scans):
            raise AnnotationOutOfRange(f"annotated position {t} outside sequence {seq_id}")
        labels = np.asarray(labels, dtype=np.int64)
        ds.entries.append(Entry(scans[t], labels))
        if cfg.total_frames == 0:
            continue
        for i, lab, direction, step in track_bidirectional(scans, t, labels, cfg, tracker):
            ds.entries.append(Entry(scans[i], lab, direction, scans[t].frame_index, step, cfg.gap))
    return ds


def write_augmented(out_dir, ds: AugmentedDataset, cs: ClassSpace, data_dir=None) -> Path:
    """Write every entry as a ``.label`` file under ``pseudo_labels/`` plus ``augmented.json``.

    Semantic ids are written as raw class ids.  When ``data_dir`` holds the
    original label files, their upper (instance) bits are carried over.
    """
    out_dir = Path(out_dir)
    root = out_dir / "pseudo_labels"
    rows = []
    for e in ds.entries:
        seq = e.scan.sequence_id
        tag = "gt" if e.provenance == GT else f"{'f' if e.provenance == FORWARD else 'b'}{e.source_frame:06d}"
        rel = Path(seq) / f"{e.scan.frame_index:06d}_{tag}.label"
        (root / seq).mkdir(parents=True, exist_ok=True)
        inst = None
        if data_dir is not None:
            orig = Path(data_dir) / "sequences" / seq / "labels" / f"{e.scan.frame_index:06d}.label"
            if orig.exists():
                inst = load_label_words(orig, len(e.labels))
        save_labels(root / rel, cs.to_raw(e.labels), inst)
        rows.append({**e.manifest_row(), "file": str(Path("pseudo_labels") / rel)})
    (out_dir / ENTRIES_FILE).write_text(json.dumps({"entries": rows}, indent=1, sort_keys=True) + "\n")
    return out_dir / ENTRIES_FILE
