"""Base / novel / unlabeled class sets and stage-dependent label remapping.

Labels inside the pipeline are always *dense* ids laid out as
``[unlabeled, base..., novel...]`` so that the novel head's logits can be
concatenated after the base head's.  Raw ids (e.g. SemanticKITTI learning-map
ids) are converted with :meth:`ClassSpace.to_dense` / :meth:`ClassSpace.to_raw`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import EmptyNovelSet, OverlappingClassSets, UnknownLabel

STAGES = ("base", "novel")

# SemanticKITTI learning-map ids (0 = unlabeled).
SEMANTIC_KITTI_NAMES = {
    0: "unlabeled", 1: "car", 2: "bicycle", 3: "motorcycle", 4: "truck",
    5: "other-vehicle", 6: "person", 7: "bicyclist", 8: "motorcyclist",
    9: "road", 10: "parking", 11: "sidewalk", 12: "other-ground",
    13: "building", 14: "fence", 15: "vegetation", 16: "trunk",
    17: "terrain", 18: "pole", 19: "traffic-sign",
}
SEMANTIC_KITTI_NOVEL = (1, 6, 7, 8)


@dataclass(frozen=True)
class ClassSpace:
    unlabeled_id: int
    base: tuple[int, ...]
    novel: tuple[int, ...]
    names: Mapping[int, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "base", tuple(int(c) for c in self.base))
        object.__setattr__(self, "novel", tuple(int(c) for c in self.novel))
        names = {c: str(self.names.get(c, f"class_{c}")) for c in self.raw_ids}
        object.__setattr__(self, "names", names)
        lut = {raw: i for i, raw in enumerate(self.raw_ids)}
        object.__setattr__(self, "_dense_of", lut)

    @property
    def raw_ids(self) -> tuple[int, ...]:
        """Raw ids in canonical order."""
        return (self.unlabeled_id, *self.base, *self.novel)

    @property
    def num_classes(self) -> int:
        return 1 + len(self.base) + len(self.novel)

    @property
    def num_base_outputs(self) -> int:
        """Width of the base head: unlabeled plus every base class."""
        return 1 + len(self.base)

    @property
    def base_dense(self) -> np.ndarray:
        return np.arange(1, 1 + len(self.base))

    @property
    def novel_dense(self) -> np.ndarray:
        return np.arange(1 + len(self.base), self.num_classes)

    @property
    def background_group(self) -> np.ndarray:
        """Dense ids of ``{u} ∪ C_base``."""
        return np.arange(0, 1 + len(self.base))

    def dense_names(self) -> list[str]:
        return [self.names[r] for r in self.raw_ids]

    def dense_of(self, raw: int) -> int:
        try:
            return self._dense_of[int(raw)]
        except KeyError:
            raise UnknownLabel(f"class id {raw} is not part of the class space") from None

    def to_dense(self, raw_labels) -> np.ndarray:
        raw_labels = np.asarray(raw_labels)
        if raw_labels.size == 0:
            return raw_labels.astype(np.int64)
        hi = max(int(raw_labels.max()), max(self.raw_ids)) + 1
        if raw_labels.min() < 0:
            raise UnknownLabel(f"negative class id {int(raw_labels.min())}")
        lut = np.full(hi, -1, dtype=np.int64)
        for raw, dense in self._dense_of.items():
            lut[raw] = dense
        out = lut[raw_labels]
        if (out < 0).any():
            bad = int(raw_labels[out < 0][0])
            raise UnknownLabel(f"class id {bad} is not part of the class space")
        return out

    def to_raw(self, dense_labels) -> np.ndarray:
        dense_labels = self.check_dense(dense_labels)
        return np.asarray(self.raw_ids, dtype=np.int64)[dense_labels]

    def check_dense(self, labels) -> np.ndarray:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            bad = labels[(labels < 0) | (labels >= self.num_classes)][0]
            raise UnknownLabel(f"dense label {int(bad)} outside 0..{self.num_classes - 1}")
        return labels

    # -- plain-text definition file: one "name id group" record per line --
    def dumps(self) -> str:
        lines = ["# name id group"]
        lines.append(f"{self.names[self.unlabeled_id]} {self.unlabeled_id} unlabeled")
        lines += [f"{self.names[c]} {c} base" for c in self.base]
        lines += [f"{self.names[c]} {c} novel" for c in self.novel]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "ClassSpace":
        unlabeled, base, novel, names = None, [], [], {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            name, cid, group = line.split()
            cid = int(cid)
            names[cid] = name
            if group == "unlabeled":
                unlabeled = cid
            elif group == "base":
                base.append(cid)
            elif group == "novel":
                novel.append(cid)
            else:
                raise ValueError(f"unknown class group {group!r}")
        if unlabeled is None:
            raise ValueError("class-space file declares no unlabeled class")
        return build_class_space(base, novel, unlabeled, names)

    @classmethod
    def load(cls, path) -> "ClassSpace":
        return cls.loads(Path(path).read_text())


def build_class_space(base: Sequence[int], novel: Sequence[int], unlabeled: int = 0,
                      names: Mapping[int, str] | None = None) -> ClassSpace:
    base, novel = [int(c) for c in base], [int(c) for c in novel]
    if not novel:
        raise EmptyNovelSet("the novel class set must not be empty")
    everything = [int(unlabeled), *base, *novel]
    if len(set(everything)) != len(everything):
        seen, dup = set(), None
        for c in everything:
            if c in seen:
                dup = c
                break
            seen.add(c)
        raise OverlappingClassSets(f"class id {dup} appears in more than one group")
    return ClassSpace(int(unlabeled), tuple(base), tuple(novel), dict(names or {}))


def semantic_kitti_class_space() -> ClassSpace:
    """The 15 base / 4 novel split over SemanticKITTI's 19 evaluated classes."""
    base = [c for c in range(1, 20) if c not in SEMANTIC_KITTI_NOVEL]
    return build_class_space(base, SEMANTIC_KITTI_NOVEL, 0, SEMANTIC_KITTI_NAMES)


def remap_for_stage(labels, stage: str, cs: ClassSpace) -> np.ndarray:
    """Hide the other stage's classes behind the unlabeled id (dense labels)."""
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}, got {stage!r}")
    labels = cs.check_dense(labels).copy()
    n_base_out = cs.num_base_outputs
    if stage == "base":
        labels[labels >= n_base_out] = 0
    else:
        labels[(labels > 0) & (labels < n_base_out)] = 0
    return labels
