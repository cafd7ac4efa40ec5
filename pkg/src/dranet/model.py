"""Full model: encoder, two attention branches, four classifiers.

The attribute branch defaults to the non-local block pair and the object
branch to the local pair; either can be swapped or disabled for
ablations. Reversed branch embeddings are swapped before classification:
the attribute branch's reversal feeds the reversal-based *object*
classifier and vice versa. Disabled branches ("none") emit pooled
features concatenated with a learned projection of the same, keeping the
classifier input width at 2C so ablations do not change capacity.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from . import blocks
from .autograd import Tensor, concat, conv2d, matmul, mean, parameter, relu, reshape
from .blocks import (
    BlockOutput,
    LocalChannelParams,
    LocalSpatialParams,
    NonLocalChannelParams,
    NonLocalSpatialParams,
)
from .faults import ConfigError

BRANCH_KINDS = ("nonlocal", "local", "none")
DISTILL_MODES = ("off", "reversal_teacher", "n_oriented", "l_oriented")
FUSION_MODES = ("weighted_sum_product", "product_sum")

CHECKPOINT_MAGIC = b"DRCKPT01"


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and ablation flags.

    ``num_attributes``/``num_objects`` may be 0 in configs, meaning
    "resolve from the dataset vocabulary"; they must be positive before
    parameters can be created. ``classifier_hidden`` 0 means linear
    classifiers, None means the default of 2C.
    """

    num_attributes: int = 0
    num_objects: int = 0
    encoder: tuple[tuple[int, int], ...] = ((32, 2), (48, 2), (64, 2))
    classifier_hidden: int | None = None
    attr_branch: str = "nonlocal"
    obj_branch: str = "local"
    use_reverse: bool = True
    distill_mode: str = "reversal_teacher"
    fusion_mode: str = "weighted_sum_product"
    freeze_encoder: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "encoder", tuple(tuple(s) for s in self.encoder))
        if self.num_attributes < 0 or self.num_objects < 0:
            raise ConfigError("vocabulary sizes must be non-negative")
        if not self.encoder:
            raise ConfigError("encoder needs at least one stage")
        for stage in self.encoder:
            if len(stage) != 2 or stage[0] < 1 or stage[1] < 1:
                raise ConfigError(f"bad encoder stage {stage}; want (out_channels, stride)")
        if self.attr_branch not in BRANCH_KINDS:
            raise ConfigError(f"attr_branch must be one of {BRANCH_KINDS}")
        if self.obj_branch not in BRANCH_KINDS:
            raise ConfigError(f"obj_branch must be one of {BRANCH_KINDS}")
        if self.distill_mode not in DISTILL_MODES:
            raise ConfigError(f"distill_mode must be one of {DISTILL_MODES}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}")
        if self.classifier_hidden is not None and self.classifier_hidden < 0:
            raise ConfigError("classifier_hidden must be None, 0, or positive")

    @property
    def channels(self) -> int:
        return self.encoder[-1][0]

    @property
    def effective_hidden(self) -> int:
        return 2 * self.channels if self.classifier_hidden is None else self.classifier_hidden

    def resolved(self, num_attributes: int, num_objects: int) -> "ModelConfig":
        """Fill in (or check) vocabulary sizes against a dataset."""
        if self.num_attributes and self.num_attributes != num_attributes:
            raise ConfigError(
                f"config expects {self.num_attributes} attributes, dataset has {num_attributes}")
        if self.num_objects and self.num_objects != num_objects:
            raise ConfigError(
                f"config expects {self.num_objects} objects, dataset has {num_objects}")
        return replace(self, num_attributes=num_attributes, num_objects=num_objects)


@dataclass
class ClassifierParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor | None = None
    b2: Tensor | None = None

    @classmethod
    def init(cls, in_width: int, out_width: int, hidden: int,
             rng: np.random.Generator, prefix: str, dtype) -> "ClassifierParams":
        if hidden == 0:
            return cls(
                w1=blocks.init_weight(rng, (in_width, out_width), in_width, f"{prefix}.w", dtype),
                b1=blocks.zeros_param((out_width,), f"{prefix}.b", dtype),
            )
        return cls(
            w1=blocks.init_weight(rng, (in_width, hidden), in_width, f"{prefix}.w1", dtype),
            b1=blocks.zeros_param((hidden,), f"{prefix}.b1", dtype),
            w2=blocks.init_weight(rng, (hidden, out_width), hidden, f"{prefix}.w2", dtype),
            b2=blocks.zeros_param((out_width,), f"{prefix}.b2", dtype),
        )

    def named(self) -> Iterator[tuple[str, Tensor]]:
        yield self.w1.name, self.w1
        yield self.b1.name, self.b1
        if self.w2 is not None:
            yield self.w2.name, self.w2
            yield self.b2.name, self.b2

    def forward(self, x: Tensor) -> Tensor:
        out = matmul(x, self.w1) + self.b1
        if self.w2 is not None:
            out = matmul(relu(out), self.w2) + self.b2
        return out


@dataclass
class BranchParams:
    """One feature branch: a spatial block plus a channel block of one kind."""

    kind: str
    spatial: NonLocalSpatialParams | LocalSpatialParams | None = None
    channel: NonLocalChannelParams | LocalChannelParams | None = None
    bypass_proj: Tensor | None = None  # (C, C), used when kind == "none"

    @classmethod
    def init(cls, kind: str, channels: int, rng: np.random.Generator,
             prefix: str, dtype) -> "BranchParams":
        if kind == "nonlocal":
            return cls(
                kind=kind,
                spatial=NonLocalSpatialParams.init(channels, rng, f"{prefix}.spatial", dtype),
                channel=NonLocalChannelParams.init(channels, rng, f"{prefix}.channel", dtype),
            )
        if kind == "local":
            return cls(
                kind=kind,
                spatial=LocalSpatialParams.init(channels, rng, f"{prefix}.spatial", dtype),
                channel=LocalChannelParams.init(channels, rng, f"{prefix}.channel", dtype),
            )
        return cls(
            kind=kind,
            bypass_proj=blocks.init_weight(rng, (channels, channels), channels,
                                            f"{prefix}.bypass_proj", dtype),
        )

    def named(self) -> Iterator[tuple[str, Tensor]]:
        if self.kind == "none":
            yield self.bypass_proj.name, self.bypass_proj
            return
        yield from self.spatial.named()
        yield from self.channel.named()


@dataclass
class EncoderParams:
    weights: list[Tensor]
    biases: list[Tensor]

    @classmethod
    def init(cls, stages, rng: np.random.Generator, dtype) -> "EncoderParams":
        weights, biases = [], []
        in_ch = 3
        for i, (out_ch, _) in enumerate(stages):
            weights.append(blocks.init_weight(rng, (out_ch, in_ch, 3, 3), in_ch * 9,
                                               f"encoder.stage{i}.w", dtype))
            biases.append(blocks.zeros_param((out_ch,), f"encoder.stage{i}.b", dtype))
            in_ch = out_ch
        return cls(weights=weights, biases=biases)

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for w, b in zip(self.weights, self.biases):
            yield w.name, w
            yield b.name, b


@dataclass
class ModelParams:
    encoder: EncoderParams
    attr_branch: BranchParams
    obj_branch: BranchParams
    attr_cls: ClassifierParams
    obj_cls: ClassifierParams
    rev_attr_cls: ClassifierParams
    rev_obj_cls: ClassifierParams

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.encoder.named()
        yield from self.attr_branch.named()
        yield from self.obj_branch.named()
        for cls_params in (self.attr_cls, self.obj_cls, self.rev_attr_cls, self.rev_obj_cls):
            yield from cls_params.named()

    def trainable_parameters(self, config: ModelConfig) -> Iterator[tuple[str, Tensor]]:
        for name, tensor in self.named_parameters():
            if config.freeze_encoder and name.startswith("encoder."):
                continue
            yield name, tensor


@dataclass
class BranchEmbeddings:
    attr: Tensor  # e_n-style concat, (B, 2C)
    obj: Tensor
    attr_reversed: Tensor
    obj_reversed: Tensor


@dataclass
class ModelOutputs:
    attr_logits: Tensor
    obj_logits: Tensor
    rev_attr_logits: Tensor
    rev_obj_logits: Tensor
    embeddings: BranchEmbeddings
    attr_blocks: tuple[BlockOutput, BlockOutput] | None = None
    obj_blocks: tuple[BlockOutput, BlockOutput] | None = None
    feature_map: Tensor | None = None


def init_params(config: ModelConfig, dtype=np.float32) -> ModelParams:
    """Deterministic parameter initialization from the config seed.

    Weights draw from a zero-mean normal with variance 1/fan_in; biases
    and the non-local scale factors start at exactly zero.
    """
    if config.num_attributes < 1 or config.num_objects < 1:
        raise ConfigError("vocabulary sizes unresolved; call config.resolved(...) first")
    rng = np.random.default_rng(config.seed)
    channels = config.channels
    in_width = 2 * channels
    hidden = config.effective_hidden
    return ModelParams(
        encoder=EncoderParams.init(config.encoder, rng, dtype),
        attr_branch=BranchParams.init(config.attr_branch, channels, rng, "attr", dtype),
        obj_branch=BranchParams.init(config.obj_branch, channels, rng, "obj", dtype),
        attr_cls=ClassifierParams.init(in_width, config.num_attributes, hidden, rng, "cls.attr", dtype),
        obj_cls=ClassifierParams.init(in_width, config.num_objects, hidden, rng, "cls.obj", dtype),
        rev_attr_cls=ClassifierParams.init(in_width, config.num_attributes, hidden, rng, "cls.rev_attr", dtype),
        rev_obj_cls=ClassifierParams.init(in_width, config.num_objects, hidden, rng, "cls.rev_obj", dtype),
    )


def encode(images: Tensor, params: ModelParams, config: ModelConfig) -> Tensor:
    """Strided conv stages with ReLU; (B,3,H,W) -> (B,C,H',W')."""
    out = images
    for (out_ch, stride), w, b in zip(config.encoder, params.encoder.weights, params.encoder.biases):
        out = relu(conv2d(out, w, bias=b, stride=stride, pad=1))
    return out


def _branch_forward(z: Tensor, branch: BranchParams) -> tuple[Tensor, Tensor, tuple | None]:
    if branch.kind == "nonlocal":
        spatial = blocks.nsm_forward(z, branch.spatial)
        channel = blocks.ncm_forward(z, branch.channel)
    elif branch.kind == "local":
        spatial = blocks.lsm_forward(z, branch.spatial)
        channel = blocks.lcm_forward(z, branch.channel)
    else:
        batch, channels = z.shape[0], z.shape[1]
        pooled = mean(reshape(z, (batch, channels, z.shape[2] * z.shape[3])), axis=2)
        emb = concat([pooled, matmul(pooled, branch.bypass_proj)], axis=1)
        return emb, emb, None
    forward, reverse = blocks.concat_embeddings(spatial, channel)
    return forward, reverse, (spatial, channel)


def forward(images: Tensor, params: ModelParams, config: ModelConfig) -> ModelOutputs:
    """Full forward pass producing the four logit sets.

    The reversal swap: the attribute branch's reversed embedding feeds the
    reversal-based object classifier, and the object branch's reversal
    feeds the reversal-based attribute classifier.
    """
    z = encode(images, params, config)
    attr_emb, attr_rev, attr_blk = _branch_forward(z, params.attr_branch)
    obj_emb, obj_rev, obj_blk = _branch_forward(z, params.obj_branch)
    return ModelOutputs(
        attr_logits=params.attr_cls.forward(attr_emb),
        obj_logits=params.obj_cls.forward(obj_emb),
        rev_attr_logits=params.rev_attr_cls.forward(obj_rev),
        rev_obj_logits=params.rev_obj_cls.forward(attr_rev),
        embeddings=BranchEmbeddings(attr=attr_emb, obj=obj_emb,
                                    attr_reversed=attr_rev, obj_reversed=obj_rev),
        attr_blocks=attr_blk,
        obj_blocks=obj_blk,
        feature_map=z,
    )


# -- checkpoints ------------------------------------------------------------------


def config_to_dict(config: ModelConfig) -> dict:
    return {
        "num_attributes": config.num_attributes,
        "num_objects": config.num_objects,
        "encoder": [list(s) for s in config.encoder],
        "classifier_hidden": config.classifier_hidden,
        "attr_branch": config.attr_branch,
        "obj_branch": config.obj_branch,
        "use_reverse": config.use_reverse,
        "distill_mode": config.distill_mode,
        "fusion_mode": config.fusion_mode,
        "freeze_encoder": config.freeze_encoder,
        "seed": config.seed,
    }


def config_from_dict(data: dict) -> ModelConfig:
    known = set(config_to_dict(ModelConfig()).keys())
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
    kwargs = dict(data)
    if "encoder" in kwargs:
        kwargs["encoder"] = tuple(tuple(s) for s in kwargs["encoder"])
    return ModelConfig(**kwargs)


def save_checkpoint(path: str | Path, params: ModelParams, config: ModelConfig) -> None:
    """Single binary blob: magic, JSON manifest, float32 payload, checksum."""
    names, shapes, payloads = [], [], []
    for name, tensor in params.named_parameters():
        names.append(name)
        shapes.append(list(tensor.data.shape))
        payloads.append(np.ascontiguousarray(tensor.data, dtype=np.float32).tobytes())
    payload = b"".join(payloads)
    header = {
        "format": "dranet-checkpoint",
        "version": 1,
        "config": config_to_dict(config),
        "tensors": [{"name": n, "shape": s} for n, s in zip(names, shapes)],
        "checksum": hashlib.sha256(payload).hexdigest(),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)


def load_checkpoint(path: str | Path,
                    expected_config: ModelConfig | None = None) -> tuple[ModelParams, ModelConfig]:
    """Load and validate a checkpoint; shapes must agree with its config."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path} is not a checkpoint (bad magic)")
    offset = len(CHECKPOINT_MAGIC)
    (header_len,) = struct.unpack_from("<Q", raw, offset)
    offset += 8
    header = json.loads(raw[offset:offset + header_len].decode("utf-8"))
    payload = raw[offset + header_len:]
    if hashlib.sha256(payload).hexdigest() != header["checksum"]:
        raise ConfigError(f"{path} payload checksum mismatch (corrupt checkpoint)")

    config = config_from_dict(header["config"])
    if expected_config is not None and config_to_dict(expected_config) != header["config"]:
        raise ConfigError("checkpoint config does not match the expected config")

    params = init_params(config, dtype=np.float32)
    stored = {t["name"]: tuple(t["shape"]) for t in header["tensors"]}
    cursor = 0
    order = [t["name"] for t in header["tensors"]]
    offsets = {}
    for name in order:
        count = int(np.prod(stored[name])) if stored[name] else 1
        offsets[name] = (cursor, count)
        cursor += count * 4
    for name, tensor in params.named_parameters():
        if name not in stored:
            raise ConfigError(f"checkpoint missing parameter {name!r}")
        if stored[name] != tensor.data.shape:
            raise ConfigError(
                f"checkpoint shape mismatch for {name!r}: "
                f"stored {stored[name]}, config wants {tensor.data.shape}")
        start, count = offsets[name]
        data = np.frombuffer(payload, dtype=np.float32, count=count, offset=start)
        tensor.data = data.reshape(tensor.data.shape).copy()
    return params, config
