import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dranet.core import decode_pair, validate_split
from dranet.faults import ConfigError, DataError
from dranet.synth import (
    GeneratorConfig,
    SplitSpec,
    build_split,
    foreground_mask,
    generate_dataset,
    load_external_split,
    render_composition,
)


def small_config(**kwargs):
    defaults = dict(
        image_size=32,
        object_shapes=("circle", "square", "triangle", "star"),
        attribute_styles=("red", "green", "striped", "dotted"),
        noise_std=0.0,
        samples_per_pair=2,
        seed=11,
    )
    defaults.update(kwargs)
    return GeneratorConfig(**defaults)


def test_render_determinism_bitwise():
    config = small_config(noise_std=0.05)
    a = render_composition(0, 0, jitter_seed=7, config=config)
    b = render_composition(0, 0, jitter_seed=7, config=config)
    assert np.array_equal(a.image, b.image)
    c = render_composition(0, 0, jitter_seed=8, config=config)
    assert not np.array_equal(a.image, c.image)


def test_large_small_mask_ratio():
    config = small_config(attribute_styles=("large", "small", "red"), image_size=64)
    large = render_composition(0, 0, jitter_seed=3, config=config)
    small = render_composition(1, 0, jitter_seed=3, config=config)
    large_px = int(foreground_mask(large.image).sum())
    small_px = int(foreground_mask(small.image).sum())
    assert small_px > 0
    assert large_px >= 2 * small_px


def test_red_channel_dominates_inside_shape():
    config = small_config()
    sample = render_composition(0, 0, jitter_seed=1, config=config)  # red circle
    mask = foreground_mask(sample.image)
    red, green, blue = sample.image[0], sample.image[1], sample.image[2]
    assert np.all(red[mask] > green[mask])
    assert np.all(red[mask] > blue[mask])


def test_render_invalid_ids_fault():
    config = small_config()
    with pytest.raises(DataError):
        render_composition(99, 0, 0, config)
    with pytest.raises(DataError):
        render_composition(0, -1, 0, config)


def test_styles_and_shapes_all_render():
    config = GeneratorConfig(
        image_size=32,
        object_shapes=("circle", "square", "triangle", "star", "cross", "ring", "diamond", "bar"),
        attribute_styles=("red", "green", "blue", "yellow", "magenta", "cyan",
                          "striped", "dotted", "checker", "large", "small"),
        noise_std=0.0,
        samples_per_pair=1,
        seed=0,
    )
    for a in range(11):
        for o in range(8):
            sample = render_composition(a, o, 0, config)
            assert np.isfinite(sample.image).all()
            assert foreground_mask(sample.image).sum() > 8  # style and shape visible


def test_build_split_2x2_exhaustive():
    config = small_config(object_shapes=("circle", "square"),
                          attribute_styles=("red", "green"))
    vocab = config.vocabulary()
    # every possible single held-out pair keeps all elements seen
    for seed in range(8):
        split = build_split(vocab, SplitSpec(unseen_fraction=0.25, seed=seed))
        assert len(split.unseen_pairs) == 1
        assert len(split.seen_pairs) == 3
        assert validate_split(split, vocab) == []


def test_build_split_infeasible():
    config = small_config(object_shapes=("circle", "square"),
                          attribute_styles=("red", "green"))
    with pytest.raises(DataError):
        build_split(config.vocabulary(), SplitSpec(unseen_fraction=0.99, seed=0))


def test_build_split_deterministic():
    vocab = small_config().vocabulary()
    spec = SplitSpec(unseen_fraction=0.2, seed=42)
    assert build_split(vocab, spec) == build_split(vocab, spec)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_build_split_coverage_property(seed):
    config = GeneratorConfig(image_size=32, samples_per_pair=1, seed=0)
    vocab = config.vocabulary()
    spec = SplitSpec(unseen_fraction=0.2, min_seen_per_element=2, seed=seed)
    split = build_split(vocab, spec)
    attr_counts = np.zeros(vocab.num_attributes, dtype=int)
    obj_counts = np.zeros(vocab.num_objects, dtype=int)
    for pair in split.seen_pairs:
        a, o = decode_pair(pair, vocab.num_objects)
        attr_counts[a] += 1
        obj_counts[o] += 1
    assert attr_counts.min() >= 2
    assert obj_counts.min() >= 2
    assert validate_split(split, vocab) == []


def test_generate_dataset_counts_and_manifest(tmp_path):
    config = GeneratorConfig(image_size=32, noise_std=0.0, samples_per_pair=2, seed=5)
    spec = SplitSpec(unseen_fraction=0.2, seed=5)
    split, manifest = generate_dataset(config, spec, tmp_path / "d1")
    # 8x8 vocab, fraction 0.2 -> round(12.8) = 13 unseen
    assert len(split.unseen_pairs) == 13
    assert len(split.train) == 2 * (64 - 13)
    test_pairs = {label.pair_id(8) for _, label in split.test}
    assert test_pairs == split.seen_pairs | split.unseen_pairs

    split2, manifest2 = generate_dataset(config, spec, tmp_path / "d2")
    assert manifest.read_bytes() == manifest2.read_bytes()


def test_generate_dataset_single_sample_per_pair(tmp_path):
    config = GeneratorConfig(image_size=32, samples_per_pair=1, seed=1,
                             object_shapes=("circle", "square", "bar"),
                             attribute_styles=("red", "blue", "striped"))
    split, _ = generate_dataset(config, SplitSpec(unseen_fraction=0.2, seed=1), tmp_path)
    from collections import Counter
    counts = Counter(label.pair_id(3) for _, label in split.train)
    assert all(count == 1 for count in counts.values())
    assert set(counts) == split.seen_pairs


def test_load_external_split_round_trip(tmp_path):
    config = small_config(samples_per_pair=1)
    split, manifest = generate_dataset(config, SplitSpec(unseen_fraction=0.2, seed=2), tmp_path)
    dataset = load_external_split(manifest)
    assert dataset.split == split
    assert dataset.vocab == config.vocabulary()
    ref, label = dataset.split.train[0]
    image = dataset.load_image(ref)
    assert image.shape == (3, 32, 32)
    assert 0.0 <= image.min() and image.max() <= 1.0


def write_manifest_text(tmp_path, body):
    path = tmp_path / "manifest.txt"
    path.write_text(body, encoding="utf-8")
    return path


HEADER = (
    "#attributes: red,green\n"
    "#objects: circle,square\n"
    "#seen_pairs: red|circle;red|square;green|circle\n"
    "#unseen_pairs: green|square\n"
)


def test_manifest_train_label_in_unseen_fault(tmp_path):
    path = write_manifest_text(tmp_path, HEADER + "img1.png\tgreen\tsquare\ttrain\n")
    with pytest.raises(DataError, match="train label not in seen pairs"):
        load_external_split(path)


def test_manifest_well_formed_three_lines(tmp_path):
    body = HEADER + (
        "img1.png\tred\tcircle\ttrain\n"
        "img2.png\tgreen\tsquare\ttest\n"
        "img3.png\tred\tsquare\ttest\n"
    )
    dataset = load_external_split(write_manifest_text(tmp_path, body))
    assert len(dataset.split.train) == 1
    assert len(dataset.split.test) == 2


def test_manifest_case_sensitive_labels(tmp_path):
    path = write_manifest_text(tmp_path, HEADER + "img1.png\tRED\tcircle\ttrain\n")
    with pytest.raises(DataError, match="unknown attribute 'RED'"):
        load_external_split(path)


def test_manifest_malformed_line(tmp_path):
    path = write_manifest_text(tmp_path, HEADER + "img1.png red circle train\n")
    with pytest.raises(DataError, match="line 5"):
        load_external_split(path)


def test_manifest_missing_image_fault(tmp_path):
    body = HEADER + "img1.png\tred\tcircle\ttrain\nimg2.png\tgreen\tsquare\ttest\n"
    dataset = load_external_split(write_manifest_text(tmp_path, body))
    with pytest.raises(DataError, match="missing image"):
        dataset.load_image("img1.png")


def test_config_validation_faults():
    with pytest.raises(ConfigError):
        GeneratorConfig(image_size=16)
    with pytest.raises(ConfigError):
        GeneratorConfig(attribute_styles=("red",))
    with pytest.raises(ConfigError):
        GeneratorConfig(attribute_styles=("red", "nope"))
    with pytest.raises(ConfigError):
        SplitSpec(unseen_fraction=1.5)


def test_linear_probe_separates_shapes():
    """Noise-free renders are linearly separable by object shape."""
    config = GeneratorConfig(image_size=32, noise_std=0.0, samples_per_pair=1, seed=3)
    images, labels = [], []
    for o in range(len(config.object_shapes)):
        for a in range(len(config.attribute_styles)):
            for jitter in range(3):
                sample = render_composition(a, o, jitter, config)
                images.append(sample.image.reshape(-1))
                labels.append(o)
    x = np.stack(images)
    x = np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)
    y = np.eye(len(config.object_shapes))[labels]
    weights, *_ = np.linalg.lstsq(x, y, rcond=None)
    predictions = np.argmax(x @ weights, axis=1)
    assert np.array_equal(predictions, labels)
