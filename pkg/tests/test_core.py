import pytest

from dranet.core import (
    CompositionLabel,
    DatasetSplit,
    VocabularySpec,
    decode_pair,
    encode_pair,
    open_world_space,
    validate_split,
)


def make_vocab(num_attrs, num_objs):
    return VocabularySpec(
        attributes=tuple(f"a{i}" for i in range(num_attrs)),
        objects=tuple(f"o{i}" for i in range(num_objs)),
    )


def test_open_world_space_sizes():
    assert len(open_world_space(make_vocab(16, 12))) == 192
    assert len(open_world_space(make_vocab(115, 245))) == 28175
    assert open_world_space(make_vocab(1, 1)) == [CompositionLabel(0, 0)]


def test_open_world_space_order_and_uniqueness():
    vocab = make_vocab(3, 4)
    space = open_world_space(vocab)
    assert len(set(space)) == len(space) == 12
    for pair_id, label in enumerate(space):
        assert label.pair_id(vocab.num_objects) == pair_id


def test_pair_id_round_trip_large_vocab():
    num_objects = 245
    for a in range(0, 115, 7):
        for o in range(0, 245, 11):
            assert decode_pair(encode_pair(a, o, num_objects), num_objects) == (a, o)
    # full bijection onto [0, |A|*|O|)
    all_ids = {encode_pair(a, o, num_objects) for a in range(115) for o in range(245)}
    assert all_ids == set(range(115 * 245))


def test_vocabulary_invariants():
    with pytest.raises(ValueError):
        VocabularySpec(attributes=(), objects=("o",))
    with pytest.raises(ValueError):
        VocabularySpec(attributes=("a", "a"), objects=("o",))
    vocab = make_vocab(2, 2)
    assert vocab.attribute_index("a1") == 1
    with pytest.raises(KeyError):
        vocab.attribute_index("A1")  # case-sensitive


def test_validate_split_uncovered_element():
    vocab = make_vocab(4, 3)
    # attribute 3 appears only in the unseen pair
    seen = {encode_pair(a, o, 3) for a in range(3) for o in range(3)}
    split = DatasetSplit(seen_pairs=seen, unseen_pairs={encode_pair(3, 2, 3)})
    report = validate_split(split, vocab)
    assert len(report) == 1
    assert "unseen element not covered" in report[0]


def test_validate_split_disjointness():
    vocab = make_vocab(2, 2)
    split = DatasetSplit(seen_pairs={0, 1, 2}, unseen_pairs={2, 3})
    report = validate_split(split, vocab)
    assert sum("disjointness" in entry for entry in report) == 1


def test_validate_split_valid_is_empty():
    vocab = make_vocab(2, 2)
    split = DatasetSplit(
        seen_pairs={0, 1, 2},
        unseen_pairs={3},
        train=(("x.png", CompositionLabel(0, 0)),),
        test=(("y.png", CompositionLabel(1, 1)),),
    )
    assert validate_split(split, vocab) == []


def test_validate_split_sample_membership():
    vocab = make_vocab(2, 2)
    split = DatasetSplit(
        seen_pairs={0, 1, 2},
        unseen_pairs={3},
        train=(("bad.png", CompositionLabel(1, 1)),),  # pair 3 is unseen
    )
    report = validate_split(split, vocab)
    assert any("train label not in seen pairs" in entry for entry in report)
