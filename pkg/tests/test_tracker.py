import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fslidar.classspace import remap_for_stage
from fslidar.errors import AnnotationOutOfRange
from fslidar.pointcloud import load_label_words, save_labels
from fslidar.synthgen import generate_sequence, translating_box_scene, write_sequence
from fslidar.tracker import (BACKWARD, ENTRIES_FILE, FORWARD, GT, GeometricTracker, TrackConfig,
                             build_augmented_dataset, emission_indices, ground_mask, propagate_labels,
                             track_bidirectional, write_augmented)


@pytest.fixture(scope="module")
def box():
    spec = translating_box_scene(12)
    frames = generate_sequence(spec)
    cs = spec.class_space()
    scans = [f[0] for f in frames]
    labels = [cs.to_dense(f[1]) for f in frames]
    return spec, cs, scans, labels


def _iou(a, b):
    union = (a | b).sum()
    return (a & b).sum() / union if union else 1.0


def test_box_tracking_iou_over_ten_steps(box):
    _, cs, scans, labels = box
    car = cs.dense_of(4)
    cur = remap_for_stage(labels[0], "novel", cs)
    tracker = GeometricTracker(cs)
    for step in range(1, 11):
        cur = tracker.propagate(scans[step - 1], cur, scans[step])
        assert _iou(cur == car, labels[step] == car) >= 0.9, step
        assert set(np.unique(cur)) <= {0, car}


@given(st.integers(0, 200), st.integers(1, 300), st.integers(0, 12), st.integers(0, 12), st.integers(1, 30))
def test_emission_indices_exact(t, n, fwd, bwd, gap):
    if t >= n:
        return
    cfg = TrackConfig(frames_forward=fwd, frames_backward=bwd, gap=gap)
    f, b = emission_indices(t, n, cfg)
    assert f == [t + gap * i for i in range(1, fwd + 1) if t + gap * i < n]
    assert b == [t - gap * i for i in range(1, bwd + 1) if t - gap * i >= 0]


class _Recorder:
    """Records every (prev, next) hop and passes labels through."""

    def __init__(self):
        self.hops = []

    def propagate(self, prev, prev_labels, nxt):
        self.hops.append((prev.frame_index, nxt.frame_index))
        return prev_labels


def test_walk_visits_every_intermediate_frame(box):
    _, cs, scans, labels = box
    rec = _Recorder()
    cfg = TrackConfig(frames_forward=2, frames_backward=1, gap=3)
    out = track_bidirectional(scans, 4, labels[4], cfg, rec)
    assert [(i, d, s) for i, _, d, s in out] == [(7, FORWARD, 1), (10, FORWARD, 2), (1, BACKWARD, 1)]
    assert rec.hops == [(4, 5), (5, 6), (6, 7), (7, 8), (8, 9), (9, 10), (4, 3), (3, 2), (2, 1)]
    with pytest.raises(AnnotationOutOfRange):
        track_bidirectional(scans, 40, labels[0], cfg, rec)


def test_ground_is_never_labelled_novel(box):
    _, cs, scans, labels = box
    lab = remap_for_stage(labels[0], "novel", cs)
    out = propagate_labels(scans[0], lab, scans[1], cs)
    ground = labels[1] == cs.dense_of(1)
    assert not out[ground].any()
    gm = ground_mask(scans[1].world_xyz(), 0.05)
    assert (gm == ground).mean() > 0.99


def test_nothing_to_track_gives_all_unlabeled(box):
    _, cs, scans, labels = box
    out = propagate_labels(scans[0], np.zeros(len(scans[0]), dtype=int), scans[1], cs)
    assert not out.any()


def test_zero_frames_gives_ground_truth_only(box):
    _, cs, scans, labels = box
    gts = [("00", 3, remap_for_stage(labels[3], "novel", cs))]
    ds = build_augmented_dataset(gts, {"00": scans}, TrackConfig(0, 0, 1), cs)
    assert len(ds) == 1 and ds.entries[0].provenance == GT
    assert ds.entries[0].scan is scans[3]


def test_augmented_dataset_and_write_through(box, tmp_path):
    spec, cs, scans, labels = box
    write_sequence(tmp_path / "data", spec, [(s, cs.to_raw(l)) for s, l in zip(scans, labels)])
    # give the original label files instance ids in the upper 16 bits
    lab_dir = tmp_path / "data" / "sequences" / "00" / "labels"
    rng = np.random.default_rng(0)
    for i, s in enumerate(scans):
        inst = (rng.integers(1, 50, len(s)).astype(np.uint32) << 16)
        save_labels(lab_dir / f"{s.frame_index:06d}.label", cs.to_raw(labels[i]), inst)
    cfg = TrackConfig(frames_forward=2, frames_backward=1, gap=2)
    gts = [("00", 4, remap_for_stage(labels[4], "novel", cs))]
    ds = build_augmented_dataset(gts, {"00": scans}, cfg, cs)
    assert [e.scan.frame_index for e in ds.entries] == [4, 6, 8, 2]
    assert ds.novel_ratio(cs, pseudo=True) > 0
    write_augmented(tmp_path / "aug", ds, cs, tmp_path / "data")
    rows = json.loads((tmp_path / "aug" / ENTRIES_FILE).read_text())["entries"]
    assert [r["provenance"] for r in rows] == [GT, FORWARD, FORWARD, BACKWARD]
    for e, r in zip(ds.entries, rows):
        words = load_label_words(tmp_path / "aug" / r["file"])
        orig = load_label_words(lab_dir / f"{e.scan.frame_index:06d}.label")
        assert np.array_equal(words >> 16, orig >> 16)
        assert np.array_equal(words & 0xFFFF, cs.to_raw(e.labels))
