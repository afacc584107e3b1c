import numpy as np
import pytest
from hypothesis import given, strategies as st

from fslidar.classspace import ClassSpace, build_class_space, remap_for_stage, semantic_kitti_class_space
from fslidar.errors import EmptyNovelSet, OverlappingClassSets, UnknownLabel


def test_semantic_kitti_split_has_twenty_classes():
    cs = semantic_kitti_class_space()
    assert cs.num_classes == 20
    assert len(cs.base) == 15 and len(cs.novel) == 4
    assert cs.num_base_outputs == 16


def test_minimal_space_canonical_order():
    cs = build_class_space([1], [2], 0)
    assert cs.num_classes == 3
    assert cs.raw_ids == (0, 1, 2)
    assert list(cs.to_dense([0, 1, 2])) == [0, 1, 2]


def test_overlap_and_empty_novel_rejected():
    with pytest.raises(OverlappingClassSets):
        build_class_space([1, 2], [2], 0)
    with pytest.raises(OverlappingClassSets):
        build_class_space([0, 1], [2], 0)
    with pytest.raises(EmptyNovelSet):
        build_class_space([1], [], 0)


def test_dense_reindexing_is_a_bijection():
    cs = build_class_space([10, 40, 7], [3, 99], 255)
    dense = cs.to_dense(list(cs.raw_ids))
    assert list(dense) == list(range(cs.num_classes))
    assert list(cs.to_raw(dense)) == list(cs.raw_ids)
    with pytest.raises(UnknownLabel):
        cs.to_dense([5])


def test_remap_examples(small_cs):
    labels = np.array([0, 1, 3])
    assert list(remap_for_stage(labels, "base", small_cs)) == [0, 1, 0]
    assert list(remap_for_stage(labels, "novel", small_cs)) == [0, 0, 3]
    zeros = np.zeros(5, dtype=int)
    for stage in ("base", "novel"):
        assert (remap_for_stage(zeros, stage, small_cs) == 0).all()
    with pytest.raises(UnknownLabel):
        remap_for_stage([7], "base", small_cs)


@given(st.lists(st.integers(0, 4), min_size=1, max_size=50), st.sampled_from(["base", "novel"]))
def test_remap_idempotent_and_hides_other_stage(labels, stage):
    cs = build_class_space([1, 2], [3, 4], 0)
    once = remap_for_stage(labels, stage, cs)
    assert np.array_equal(remap_for_stage(once, stage, cs), once)
    hidden = cs.novel_dense if stage == "base" else cs.base_dense
    assert not np.isin(once, hidden).any()


def test_definition_file_round_trip(tmp_path):
    cs = semantic_kitti_class_space()
    cs.save(tmp_path / "classes.txt")
    back = ClassSpace.load(tmp_path / "classes.txt")
    assert back == cs
    assert back.dumps() == cs.dumps()
