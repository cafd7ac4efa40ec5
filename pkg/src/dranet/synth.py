"""Procedural attribute-object image generator and split construction.

Every image composes one object shape with one attribute style. Styles
are rendered relative to the shape they decorate: texture periods scale
with the shape's footprint and size styles multiply the shape's base
radius, so attribute pixels are context-dependent while object geometry
stays stable. That asymmetry is what makes contextual-vs-local attention
comparisons meaningful on this data.

All operations are pure functions of their explicit seeds; rendering the
same (attribute, object, jitter_seed, config) twice yields bitwise-equal
images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .core import (
    CompositionLabel,
    DatasetSplit,
    VocabularySpec,
    decode_pair,
    encode_pair,
    validate_split,
)
from .faults import ConfigError, DataError

SHAPE_NAMES = ("circle", "square", "triangle", "star", "cross", "ring", "diamond", "bar")

COLOR_STYLES = {
    "red": (0.90, 0.12, 0.12),
    "green": (0.12, 0.85, 0.15),
    "blue": (0.15, 0.20, 0.90),
    "yellow": (0.88, 0.80, 0.10),
    "magenta": (0.85, 0.15, 0.80),
    "cyan": (0.10, 0.80, 0.85),
}
TEXTURE_STYLES = ("striped", "dotted", "checker")
SIZE_STYLES = {"large": 1.45, "small": 0.55}
STYLE_NAMES = tuple(COLOR_STYLES) + TEXTURE_STYLES + tuple(SIZE_STYLES)

BACKGROUND = 0.05
TEXTURE_BRIGHT = 0.82
TEXTURE_DARK = 0.30
NEUTRAL_GRAY = 0.72
BASE_RADIUS_FRACTION = 0.26
ROTATION_JITTER = math.radians(25)

# Train and test renders of the same pair must never share a jitter seed.
TEST_JITTER_OFFSET = 1_000_000


@dataclass(frozen=True)
class GeneratorConfig:
    """Renderer settings; the vocabulary is derived from the style/shape lists."""

    image_size: int = 64
    object_shapes: tuple[str, ...] = SHAPE_NAMES
    attribute_styles: tuple[str, ...] = (
        "red", "green", "blue", "yellow", "magenta", "cyan", "striped", "dotted",
    )
    noise_std: float = 0.06
    samples_per_pair: int = 20
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "object_shapes", tuple(self.object_shapes))
        object.__setattr__(self, "attribute_styles", tuple(self.attribute_styles))
        if self.image_size < 32:
            raise ConfigError(f"image_size must be >= 32, got {self.image_size}")
        if len(self.object_shapes) < 2 or len(self.attribute_styles) < 2:
            raise ConfigError("need at least 2 object shapes and 2 attribute styles")
        for s in self.object_shapes:
            if s not in SHAPE_NAMES:
                raise ConfigError(f"unknown object shape {s!r}")
        for s in self.attribute_styles:
            if s not in STYLE_NAMES:
                raise ConfigError(f"unknown attribute style {s!r}")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if self.samples_per_pair < 1:
            raise ConfigError("samples_per_pair must be >= 1")

    def vocabulary(self) -> VocabularySpec:
        return VocabularySpec(attributes=self.attribute_styles, objects=self.object_shapes)

    @property
    def test_samples_per_pair(self) -> int:
        return max(1, self.samples_per_pair // 4)


@dataclass(frozen=True)
class SplitSpec:
    unseen_fraction: float = 0.2
    min_seen_per_element: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.unseen_fraction < 1.0:
            raise ConfigError("unseen_fraction must lie in (0,1)")
        if self.min_seen_per_element < 1:
            raise ConfigError("min_seen_per_element must be >= 1")


@dataclass(frozen=True)
class RenderedSample:
    image: np.ndarray
    label: CompositionLabel
    provenance: dict = field(default_factory=dict)


def _polygon_mask(px: np.ndarray, py: np.ndarray, vertices: list[tuple[float, float]]) -> np.ndarray:
    """Even-odd-rule point-in-polygon test, vectorized over a pixel grid."""
    inside = np.zeros(px.shape, dtype=bool)
    n = len(vertices)
    for k in range(n):
        x1, y1 = vertices[k]
        x2, y2 = vertices[(k + 1) % n]
        crosses = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = (x2 - x1) * (py - y1) / (y2 - y1) + x1
        inside ^= crosses & (px < x_at)
    return inside


def _star_vertices(points: int = 5, inner: float = 0.45) -> list[tuple[float, float]]:
    verts = []
    for k in range(2 * points):
        r = 1.0 if k % 2 == 0 else inner
        theta = math.pi * k / points - math.pi / 2
        verts.append((r * math.cos(theta), r * math.sin(theta)))
    return verts


_TRIANGLE = [
    (math.cos(math.radians(90 + 120 * k)), -math.sin(math.radians(90 + 120 * k)))
    for k in range(3)
]
_STAR = _star_vertices()


def _shape_mask(shape: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Mask in shape-local coordinates where the base footprint has radius 1."""
    if shape == "circle":
        return x * x + y * y <= 1.0
    if shape == "ring":
        r2 = x * x + y * y
        return (r2 <= 1.0) & (r2 >= 0.55 ** 2)
    if shape == "square":
        return np.maximum(np.abs(x), np.abs(y)) <= 0.82
    if shape == "diamond":
        return np.abs(x) + np.abs(y) <= 1.0
    if shape == "cross":
        return ((np.abs(x) <= 0.33) & (np.abs(y) <= 1.0)) | ((np.abs(y) <= 0.33) & (np.abs(x) <= 1.0))
    if shape == "bar":
        return (np.abs(x) <= 1.0) & (np.abs(y) <= 0.28)
    if shape == "triangle":
        return _polygon_mask(x, y, _TRIANGLE)
    if shape == "star":
        return _polygon_mask(x, y, _STAR)
    raise DataError(f"unknown object shape {shape!r}")


def _style_fill(style: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """RGB fill over shape-local coordinates. Texture period is relative to
    the unit footprint, so the pattern scales with the object it decorates."""
    if style in COLOR_STYLES:
        color = COLOR_STYLES[style]
        return np.stack([np.full(x.shape, c) for c in color])
    if style in SIZE_STYLES:
        return np.full((3,) + x.shape, NEUTRAL_GRAY)
    period = 0.4
    if style == "striped":
        bright = (np.floor(y / period).astype(int) % 2) == 0
    elif style == "checker":
        bright = ((np.floor(x / period) + np.floor(y / period)).astype(int) % 2) == 0
    elif style == "dotted":
        cx = np.mod(x, period) - period / 2
        cy = np.mod(y, period) - period / 2
        bright = cx * cx + cy * cy >= (0.32 * period) ** 2
    else:
        raise DataError(f"unknown attribute style {style!r}")
    gray = np.where(bright, TEXTURE_BRIGHT, TEXTURE_DARK)
    return np.stack([gray, gray, gray])


def render_composition(attribute_id: int, object_id: int, jitter_seed: int,
                       config: GeneratorConfig) -> RenderedSample:
    """Render one composition; deterministic in (ids, jitter_seed, config.seed)."""
    if not 0 <= attribute_id < len(config.attribute_styles):
        raise DataError(f"attribute_id {attribute_id} out of range")
    if not 0 <= object_id < len(config.object_shapes):
        raise DataError(f"object_id {object_id} out of range")
    style = config.attribute_styles[attribute_id]
    shape = config.object_shapes[object_id]
    size = config.image_size

    rng = np.random.default_rng([config.seed, attribute_id, object_id, jitter_seed])
    offset_x, offset_y = rng.uniform(-0.08, 0.08, size=2) * size
    rotation = rng.uniform(-ROTATION_JITTER, ROTATION_JITTER)
    scale_jitter = rng.uniform(0.92, 1.08)

    radius = BASE_RADIUS_FRACTION * size * scale_jitter * SIZE_STYLES.get(style, 1.0)
    center = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    xr = xx - center - offset_x
    yr = yy - center - offset_y
    cos_t, sin_t = math.cos(rotation), math.sin(rotation)
    xl = (cos_t * xr + sin_t * yr) / radius
    yl = (-sin_t * xr + cos_t * yr) / radius

    mask = _shape_mask(shape, xl, yl)
    fill = _style_fill(style, xl, yl)
    image = np.full((3, size, size), BACKGROUND, dtype=np.float64)
    image = np.where(mask[None, :, :], fill, image)
    if config.noise_std > 0:
        image = image + rng.normal(0.0, config.noise_std, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    return RenderedSample(
        image=image,
        label=CompositionLabel(attribute_id, object_id),
        provenance={
            "jitter_seed": jitter_seed,
            "offset": (float(offset_x), float(offset_y)),
            "rotation": float(rotation),
            "scale": float(radius),
        },
    )


def foreground_mask(image: np.ndarray, threshold: float = 0.15) -> np.ndarray:
    """Approximate shape mask recovered from a rendered image.

    Valid for noise-free renders: every style fill is brighter than the
    background plus threshold, including the darkest texture cells.
    """
    return image.mean(axis=0) > threshold


def build_split(vocab: VocabularySpec, spec: SplitSpec, max_attempts: int = 2000) -> DatasetSplit:
    """Choose unseen pairs by seeded rejection sampling with a coverage check.

    Every attribute and object must remain in at least
    ``min_seen_per_element`` seen pairs; candidate sets violating that are
    rejected and redrawn rather than greedily repaired, which keeps the
    held-out set unbiased.
    """
    num_pairs = vocab.num_pairs
    num_unseen = int(round(spec.unseen_fraction * num_pairs))
    num_seen = num_pairs - num_unseen
    if num_unseen < 1:
        raise DataError(
            f"unseen_fraction {spec.unseen_fraction} selects no unseen pair out of {num_pairs}"
        )
    needed = max(vocab.num_attributes, vocab.num_objects) * spec.min_seen_per_element
    if num_seen < needed:
        raise DataError(
            f"infeasible split: {num_seen} seen pairs cannot cover every element "
            f"{spec.min_seen_per_element} time(s) (need >= {needed})"
        )

    rng = np.random.default_rng(spec.seed)
    for _ in range(max_attempts):
        perm = rng.permutation(num_pairs)
        unseen = perm[:num_unseen]
        seen = perm[num_unseen:]
        attr_counts = np.zeros(vocab.num_attributes, dtype=int)
        obj_counts = np.zeros(vocab.num_objects, dtype=int)
        for pair in seen:
            a, o = decode_pair(int(pair), vocab.num_objects)
            attr_counts[a] += 1
            obj_counts[o] += 1
        if attr_counts.min() >= spec.min_seen_per_element and obj_counts.min() >= spec.min_seen_per_element:
            return DatasetSplit(
                seen_pairs=frozenset(int(p) for p in seen),
                unseen_pairs=frozenset(int(p) for p in unseen),
            )
    raise DataError(
        f"infeasible split: no coverage-preserving held-out set found in {max_attempts} draws"
    )


# -- dataset persistence -------------------------------------------------------


def _image_to_png(image: np.ndarray, path: Path) -> None:
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def _png_to_image(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def _pair_token(vocab: VocabularySpec, pair: int) -> str:
    a, o = decode_pair(pair, vocab.num_objects)
    return f"{vocab.attributes[a]}|{vocab.objects[o]}"


def write_manifest(path: Path, vocab: VocabularySpec, split: DatasetSplit) -> None:
    lines = [
        "#attributes: " + ",".join(vocab.attributes),
        "#objects: " + ",".join(vocab.objects),
        "#seen_pairs: " + ";".join(_pair_token(vocab, p) for p in sorted(split.seen_pairs)),
        "#unseen_pairs: " + ";".join(_pair_token(vocab, p) for p in sorted(split.unseen_pairs)),
    ]
    for ref, label in split.train:
        lines.append(f"{ref}\t{vocab.attributes[label.attribute_id]}\t"
                     f"{vocab.objects[label.object_id]}\ttrain")
    for ref, label in split.test:
        lines.append(f"{ref}\t{vocab.attributes[label.attribute_id]}\t"
                     f"{vocab.objects[label.object_id]}\ttest")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def generate_dataset(config: GeneratorConfig, spec: SplitSpec,
                     out_dir: str | Path) -> tuple[DatasetSplit, Path]:
    """Render the full dataset to disk and return (split, manifest path).

    Train contains ``samples_per_pair`` renders for each seen pair; test
    contains fresh renders (disjoint jitter seeds) for every pair, seen
    and unseen alike.
    """
    out_dir = Path(out_dir)
    vocab = config.vocabulary()
    split = build_split(vocab, spec)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)

    train: list[tuple[str, CompositionLabel]] = []
    test: list[tuple[str, CompositionLabel]] = []
    for pair in sorted(split.seen_pairs):
        a, o = decode_pair(pair, vocab.num_objects)
        for k in range(config.samples_per_pair):
            sample = render_composition(a, o, k, config)
            ref = f"images/{vocab.attributes[a]}_{vocab.objects[o]}_train_{k:03d}.png"
            _image_to_png(sample.image, out_dir / ref)
            train.append((ref, sample.label))
    for pair in sorted(split.seen_pairs | split.unseen_pairs):
        a, o = decode_pair(pair, vocab.num_objects)
        for k in range(config.test_samples_per_pair):
            sample = render_composition(a, o, TEST_JITTER_OFFSET + k, config)
            ref = f"images/{vocab.attributes[a]}_{vocab.objects[o]}_test_{k:03d}.png"
            _image_to_png(sample.image, out_dir / ref)
            test.append((ref, sample.label))

    split = DatasetSplit(
        seen_pairs=split.seen_pairs,
        unseen_pairs=split.unseen_pairs,
        train=tuple(train),
        test=tuple(test),
    )
    report = validate_split(split, vocab)
    if report:
        raise DataError("generated split failed validation: " + "; ".join(report))
    manifest = out_dir / "manifest.txt"
    write_manifest(manifest, vocab, split)
    return split, manifest


@dataclass(frozen=True)
class ExternalDataset:
    """A parsed manifest: vocabulary, validated split, and an image loader."""

    vocab: VocabularySpec
    split: DatasetSplit
    root: Path

    def load_image(self, ref: str) -> np.ndarray:
        path = self.root / ref
        if not path.exists():
            raise DataError(f"missing image file {path}")
        return _png_to_image(path)


def _parse_pair_list(text: str, vocab: VocabularySpec, line_no: int) -> frozenset[int]:
    pairs = set()
    text = text.strip()
    if not text:
        return frozenset()
    for token in text.split(";"):
        parts = token.split("|")
        if len(parts) != 2:
            raise DataError(f"line {line_no}: malformed pair token {token!r}")
        try:
            a = vocab.attribute_index(parts[0])
            o = vocab.object_index(parts[1])
        except KeyError as exc:
            raise DataError(f"line {line_no}: {exc.args[0]}") from None
        pairs.add(encode_pair(a, o, vocab.num_objects))
    return frozenset(pairs)


def load_external_split(manifest_path: str | Path) -> ExternalDataset:
    """Parse a manifest file, validating all split invariants on load.

    Faults carry the 1-based line number of the offending entry. Label
    names are matched case-sensitively against the header vocabularies.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    lines = manifest_path.read_text(encoding="utf-8").splitlines()

    headers: dict[str, tuple[str, int]] = {}
    records: list[tuple[int, str]] = []
    for idx, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            headers[key.strip()] = (value.strip(), idx)
        else:
            records.append((idx, line))

    for required in ("attributes", "objects", "seen_pairs", "unseen_pairs"):
        if required not in headers:
            raise DataError(f"manifest missing '#{required}:' header")

    attrs = tuple(x.strip() for x in headers["attributes"][0].split(",") if x.strip())
    objs = tuple(x.strip() for x in headers["objects"][0].split(",") if x.strip())
    try:
        vocab = VocabularySpec(attributes=attrs, objects=objs)
    except ValueError as exc:
        raise DataError(f"invalid vocabulary headers: {exc}") from None

    seen = _parse_pair_list(headers["seen_pairs"][0], vocab, headers["seen_pairs"][1])
    unseen = _parse_pair_list(headers["unseen_pairs"][0], vocab, headers["unseen_pairs"][1])

    train: list[tuple[str, CompositionLabel]] = []
    test: list[tuple[str, CompositionLabel]] = []
    for line_no, line in records:
        fields = line.split("\t")
        if len(fields) != 4:
            raise DataError(f"line {line_no}: expected 4 tab-separated fields, got {len(fields)}")
        ref, attr_name, obj_name, subset = fields
        try:
            label = CompositionLabel(vocab.attribute_index(attr_name), vocab.object_index(obj_name))
        except KeyError as exc:
            raise DataError(f"line {line_no}: {exc.args[0]}") from None
        pair = label.pair_id(vocab.num_objects)
        if subset == "train":
            if pair not in seen:
                raise DataError(f"line {line_no}: train label not in seen pairs ({attr_name}|{obj_name})")
            train.append((ref, label))
        elif subset == "test":
            if pair not in seen | unseen:
                raise DataError(f"line {line_no}: test label outside seen and unseen pairs")
            test.append((ref, label))
        else:
            raise DataError(f"line {line_no}: subset must be 'train' or 'test', got {subset!r}")

    split = DatasetSplit(seen_pairs=seen, unseen_pairs=unseen, train=tuple(train), test=tuple(test))
    report = validate_split(split, vocab)
    if report:
        raise DataError("manifest split invalid: " + "; ".join(report))
    return ExternalDataset(vocab=vocab, split=split, root=manifest_path.parent)
