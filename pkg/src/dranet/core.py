"""Label vocabulary, composition encoding, and dataset split contracts.

Compositions pair an attribute with an object. The open-world prediction
space is the full cartesian product of the two vocabularies, indexed by
``pair_id = attribute_id * num_objects + object_id`` so that the object
index varies fastest (matching the outer-product layout of score rows in
the evaluation module). All types here are immutable after construction
and safe to share across workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np


@dataclass(frozen=True)
class VocabularySpec:
    """Ordered attribute and object name lists.

    Names are case-sensitive exact strings; callers ingesting external
    data must normalize before construction.
    """

    attributes: tuple[str, ...]
    objects: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "attributes", tuple(self.attributes))
        object.__setattr__(self, "objects", tuple(self.objects))
        for kind, names in (("attribute", self.attributes), ("object", self.objects)):
            if not names:
                raise ValueError(f"{kind} list must be non-empty")
            if len(set(names)) != len(names):
                raise ValueError(f"duplicate {kind} names: {sorted(names)}")

    @property
    def num_attributes(self) -> int:
        return len(self.attributes)

    @property
    def num_objects(self) -> int:
        return len(self.objects)

    @property
    def num_pairs(self) -> int:
        return len(self.attributes) * len(self.objects)

    def attribute_index(self, name: str) -> int:
        try:
            return self.attributes.index(name)
        except ValueError:
            raise KeyError(f"unknown attribute {name!r}") from None

    def object_index(self, name: str) -> int:
        try:
            return self.objects.index(name)
        except ValueError:
            raise KeyError(f"unknown object {name!r}") from None


@dataclass(frozen=True)
class CompositionLabel:
    attribute_id: int
    object_id: int

    def pair_id(self, num_objects: int) -> int:
        return self.attribute_id * num_objects + self.object_id


def encode_pair(attribute_id: int, object_id: int, num_objects: int) -> int:
    return attribute_id * num_objects + object_id


def decode_pair(pair_id: int, num_objects: int) -> tuple[int, int]:
    return pair_id // num_objects, pair_id % num_objects


def open_world_space(vocab: VocabularySpec) -> list[CompositionLabel]:
    """All attribute-object pairs in pair_id order."""
    return [
        CompositionLabel(a, o)
        for a in range(vocab.num_attributes)
        for o in range(vocab.num_objects)
    ]


@dataclass(frozen=True)
class DatasetSplit:
    """Seen/unseen pair partition plus the sample lists referencing it.

    ``train`` and ``test`` hold (sample_ref, label) entries; sample_ref is
    an opaque string (typically an image path relative to the manifest).
    """

    seen_pairs: frozenset[int]
    unseen_pairs: frozenset[int]
    train: tuple[tuple[str, CompositionLabel], ...] = field(default_factory=tuple)
    test: tuple[tuple[str, CompositionLabel], ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "seen_pairs", frozenset(self.seen_pairs))
        object.__setattr__(self, "unseen_pairs", frozenset(self.unseen_pairs))
        object.__setattr__(self, "train", tuple(self.train))
        object.__setattr__(self, "test", tuple(self.test))


def validate_split(split: DatasetSplit, vocab: VocabularySpec) -> list[str]:
    """Check every DatasetSplit invariant; returns one entry per violation.

    An empty report means the split is valid. Violations are report
    entries rather than exceptions so ingestion code can show all
    problems at once.
    """
    report: list[str] = []
    num_objects = vocab.num_objects
    num_pairs = vocab.num_pairs

    overlap = split.seen_pairs & split.unseen_pairs
    for pair in sorted(overlap):
        a, o = decode_pair(pair, num_objects)
        report.append(f"disjointness violated: pair ({a},{o}) is both seen and unseen")

    for pair in sorted(split.seen_pairs | split.unseen_pairs):
        if not (0 <= pair < num_pairs):
            report.append(f"pair_id {pair} out of range for {num_pairs} pairs")

    seen_attrs = {decode_pair(p, num_objects)[0] for p in split.seen_pairs}
    seen_objs = {decode_pair(p, num_objects)[1] for p in split.seen_pairs}
    for pair in sorted(split.unseen_pairs):
        a, o = decode_pair(pair, num_objects)
        if a not in seen_attrs:
            report.append(f"unseen element not covered: attribute {a} appears in no seen pair")
        if o not in seen_objs:
            report.append(f"unseen element not covered: object {o} appears in no seen pair")

    for ref, label in split.train:
        pair = label.pair_id(num_objects)
        if pair not in split.seen_pairs:
            report.append(f"train label not in seen pairs: {ref!r} -> pair {pair}")

    allowed = split.seen_pairs | split.unseen_pairs
    for ref, label in split.test:
        pair = label.pair_id(num_objects)
        if pair not in allowed:
            report.append(f"test label outside seen and unseen pairs: {ref!r} -> pair {pair}")

    return report


@dataclass(frozen=True)
class FeatureMap:
    """Rank-3 (channels, height, width) real array with finite entries."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"feature map must be (C,H,W) with positive dims, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("feature map contains non-finite entries")
        object.__setattr__(self, "data", arr)


@dataclass(frozen=True)
class ImageBatch:
    """Batch of RGB images in [0,1] with one composition label per image."""

    data: np.ndarray
    labels: tuple[CompositionLabel, ...]

    def __post_init__(self):
        arr = np.asarray(self.data)
        labels = tuple(self.labels)
        if arr.ndim != 4 or arr.shape[1] != 3:
            raise ValueError(f"image batch must be (batch,3,H,W), got {arr.shape}")
        if arr.shape[0] < 1:
            raise ValueError("image batch must contain at least one image")
        if len(labels) != arr.shape[0]:
            raise ValueError(f"{len(labels)} labels for batch of {arr.shape[0]}")
        if arr.min() < 0 or arr.max() > 1:
            raise ValueError("image values must lie in [0,1]")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "labels", labels)


def labels_to_arrays(labels: Iterable[CompositionLabel]) -> tuple[np.ndarray, np.ndarray]:
    """Split labels into (attribute_ids, object_ids) index arrays."""
    attrs = np.array([lab.attribute_id for lab in labels], dtype=np.int64)
    objs = np.array([lab.object_id for lab in labels], dtype=np.int64)
    return attrs, objs
