"""The four attention blocks: non-local and local, spatial and channel.

Each block maps a (batch, C, H, W) feature map to a pooled embedding plus
a reversed embedding. The reversed path re-normalizes the complement of
the block's attention (1 - sigmoid of the raw affinity for the non-local
blocks, 1 - mask for the local ones), approximating the features left
over once the attended content is removed. Non-local blocks share their
projection weights and scale factor between the forward and reversed
paths; the scale factors start at exactly zero so both paths begin as
plain global average pooling.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .autograd import (
    Tensor,
    concat,
    conv2d,
    matmul,
    mean,
    parameter,
    relu,
    reshape,
    sigmoid,
    softmax,
    transpose,
)

NONLOCAL_SPATIAL_REDUCTION = 8
NONLOCAL_CHANNEL_BINS = 4
NONLOCAL_CHANNEL_REDUCTION = 4
LOCAL_CHANNEL_REDUCTION = 4


def init_weight(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
                 name: str, dtype) -> Tensor:
    data = rng.normal(0.0, np.sqrt(1.0 / fan_in), size=shape).astype(dtype)
    return parameter(data, name)


def zeros_param(shape, name: str, dtype) -> Tensor:
    return parameter(np.zeros(shape, dtype=dtype), name)


@dataclass
class BlockOutput:
    """Pooled embeddings plus the attention artifacts for inspection."""

    embedding: Tensor
    reversed_embedding: Tensor
    attention: Tensor
    reversed_attention: Tensor
    output_map: Tensor | None = None


@dataclass
class NonLocalSpatialParams:
    query_proj: Tensor  # (c, C)
    key_proj: Tensor  # (c, C)
    value_proj: Tensor  # (C, C)
    alpha: Tensor  # scalar, init 0

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator, prefix: str,
             dtype=np.float32) -> "NonLocalSpatialParams":
        reduced = max(1, channels // NONLOCAL_SPATIAL_REDUCTION)
        return cls(
            query_proj=init_weight(rng, (reduced, channels), channels, f"{prefix}.query", dtype),
            key_proj=init_weight(rng, (reduced, channels), channels, f"{prefix}.key", dtype),
            value_proj=init_weight(rng, (channels, channels), channels, f"{prefix}.value", dtype),
            alpha=zeros_param((), f"{prefix}.alpha", dtype),
        )

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for t in (self.query_proj, self.key_proj, self.value_proj, self.alpha):
            yield t.name, t


@dataclass
class NonLocalChannelParams:
    query_w: Tensor  # (m, d)
    query_b: Tensor  # (d,)
    key_w: Tensor
    key_b: Tensor
    value_w: Tensor  # (m, 1)
    value_b: Tensor  # (1,)
    beta: Tensor  # scalar, init 0
    bins: int

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator, prefix: str,
             dtype=np.float32, bins: int = NONLOCAL_CHANNEL_BINS) -> "NonLocalChannelParams":
        d = max(1, channels // NONLOCAL_CHANNEL_REDUCTION)
        return cls(
            query_w=init_weight(rng, (bins, d), bins, f"{prefix}.query_w", dtype),
            query_b=zeros_param((d,), f"{prefix}.query_b", dtype),
            key_w=init_weight(rng, (bins, d), bins, f"{prefix}.key_w", dtype),
            key_b=zeros_param((d,), f"{prefix}.key_b", dtype),
            value_w=init_weight(rng, (bins, 1), bins, f"{prefix}.value_w", dtype),
            value_b=zeros_param((1,), f"{prefix}.value_b", dtype),
            beta=zeros_param((), f"{prefix}.beta", dtype),
            bins=bins,
        )

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for t in (self.query_w, self.query_b, self.key_w, self.key_b,
                  self.value_w, self.value_b, self.beta):
            yield t.name, t


@dataclass
class LocalSpatialParams:
    mask_conv: Tensor  # (1, C, 3, 3), same-padding

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator, prefix: str,
             dtype=np.float32) -> "LocalSpatialParams":
        return cls(mask_conv=init_weight(rng, (1, channels, 3, 3), channels * 9,
                                          f"{prefix}.mask_conv", dtype))

    def named(self) -> Iterator[tuple[str, Tensor]]:
        yield self.mask_conv.name, self.mask_conv


@dataclass
class LocalChannelParams:
    squeeze_w: Tensor  # (C, C/r)
    squeeze_b: Tensor
    excite_w: Tensor  # (C/r, C)
    excite_b: Tensor

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator, prefix: str,
             dtype=np.float32, reduction: int = LOCAL_CHANNEL_REDUCTION) -> "LocalChannelParams":
        hidden = max(1, channels // reduction)
        return cls(
            squeeze_w=init_weight(rng, (channels, hidden), channels, f"{prefix}.squeeze_w", dtype),
            squeeze_b=zeros_param((hidden,), f"{prefix}.squeeze_b", dtype),
            excite_w=init_weight(rng, (hidden, channels), hidden, f"{prefix}.excite_w", dtype),
            excite_b=zeros_param((channels,), f"{prefix}.excite_b", dtype),
        )

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for t in (self.squeeze_w, self.squeeze_b, self.excite_w, self.excite_b):
            yield t.name, t


_POOL_MATRICES: dict[tuple[int, int, str], np.ndarray] = {}


def pooling_matrix(positions: int, bins: int, dtype) -> np.ndarray:
    """Adaptive average pooling over flattened positions as a (bins, N) matrix.

    Bin i covers [floor(i*N/bins), ceil((i+1)*N/bins)); bins overlap when
    bins > N, so any positive (N, bins) combination is valid.
    """
    key = (positions, bins, np.dtype(dtype).str)
    cached = _POOL_MATRICES.get(key)
    if cached is None:
        mat = np.zeros((bins, positions), dtype=dtype)
        for i in range(bins):
            lo = int(np.floor(i * positions / bins))
            hi = int(np.ceil((i + 1) * positions / bins))
            hi = max(hi, lo + 1)
            mat[i, lo:hi] = 1.0 / (hi - lo)
        _POOL_MATRICES[key] = cached = mat
    return cached


def nsm_forward(z: Tensor, p: NonLocalSpatialParams) -> BlockOutput:
    """Non-local spatial attention over all position pairs.

    Affinity w[i,j] pairs query position i with key position j; rows are
    softmax-normalized. The reversed map renormalizes 1 - sigmoid(w), and
    both paths add the input residually before pooling.
    """
    batch, channels, height, width = z.shape
    n = height * width
    zf = reshape(z, (batch, channels, n))
    queries = matmul(p.query_proj, zf)  # (B, c, N)
    keys = matmul(p.key_proj, zf)
    values = matmul(p.value_proj, zf)  # (B, C, N)
    affinity = matmul(transpose(queries, (0, 2, 1)), keys)  # (B, N, N)
    att = softmax(affinity, axis=-1)
    att_rev = softmax(1.0 - sigmoid(affinity), axis=-1)
    fused = p.alpha * matmul(values, transpose(att, (0, 2, 1))) + zf
    fused_rev = p.alpha * matmul(values, transpose(att_rev, (0, 2, 1))) + zf
    return BlockOutput(
        embedding=mean(fused, axis=2),
        reversed_embedding=mean(fused_rev, axis=2),
        attention=att,
        reversed_attention=att_rev,
        output_map=fused,
    )


def ncm_forward(z: Tensor, p: NonLocalChannelParams) -> BlockOutput:
    """Non-local channel attention over per-channel spatial descriptors.

    Pooling happens first: each channel is summarized by ``bins`` adaptive
    spatial averages before the affinity between channels is formed.
    """
    batch, channels, height, width = z.shape
    n = height * width
    zf = reshape(z, (batch, channels, n))
    pool = Tensor(pooling_matrix(n, p.bins, z.dtype).T)  # (N, m)
    descriptors = matmul(zf, pool)  # (B, C, m)
    queries = matmul(descriptors, p.query_w) + p.query_b  # (B, C, d)
    keys = matmul(descriptors, p.key_w) + p.key_b
    values = matmul(descriptors, p.value_w) + p.value_b  # (B, C, 1)
    affinity = matmul(queries, transpose(keys, (0, 2, 1)))  # (B, C, C)
    att = softmax(affinity, axis=-1)
    att_rev = softmax(1.0 - sigmoid(affinity), axis=-1)
    pooled = mean(zf, axis=2)  # (B, C)
    emb = p.beta * reshape(matmul(att, values), (batch, channels)) + pooled
    emb_rev = p.beta * reshape(matmul(att_rev, values), (batch, channels)) + pooled
    return BlockOutput(
        embedding=emb,
        reversed_embedding=emb_rev,
        attention=att,
        reversed_attention=att_rev,
    )


def lsm_forward(z: Tensor, p: LocalSpatialParams) -> BlockOutput:
    """Local spatial attention: a sigmoid mask and its complement weight the map."""
    batch, channels, height, width = z.shape
    mask = sigmoid(conv2d(z, p.mask_conv, stride=1, pad=1))  # (B, 1, H, W)
    mask_rev = 1.0 - mask
    emb = mean(reshape(z * mask, (batch, channels, height * width)), axis=2)
    emb_rev = mean(reshape(z * mask_rev, (batch, channels, height * width)), axis=2)
    return BlockOutput(
        embedding=emb,
        reversed_embedding=emb_rev,
        attention=mask,
        reversed_attention=mask_rev,
    )


def lcm_forward(z: Tensor, p: LocalChannelParams) -> BlockOutput:
    """Local channel attention, squeeze-excite style, on pooled features."""
    batch, channels, height, width = z.shape
    pooled = mean(reshape(z, (batch, channels, height * width)), axis=2)  # (B, C)
    hidden = relu(matmul(pooled, p.squeeze_w) + p.squeeze_b)
    gate = sigmoid(matmul(hidden, p.excite_w) + p.excite_b)  # (B, C)
    return BlockOutput(
        embedding=pooled * gate,
        reversed_embedding=pooled * (1.0 - gate),
        attention=gate,
        reversed_attention=1.0 - gate,
    )


def concat_embeddings(spatial: BlockOutput, channel: BlockOutput) -> tuple[Tensor, Tensor]:
    """Concatenate a block pair into the branch embedding and its reversal."""
    forward = concat([spatial.embedding, channel.embedding], axis=1)
    reverse = concat([spatial.reversed_embedding, channel.reversed_embedding], axis=1)
    return forward, reverse
