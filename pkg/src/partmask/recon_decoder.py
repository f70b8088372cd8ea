"""Reconstruction head conditioned on the class token.

Blurred attention maps carry the spatial layout; the class token carries
texture, injected per channel through adaptive instance normalization
between convolutions. The combined objective is the pixel reconstruction
error plus a weighted map-diversity penalty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, NumericError, ShapeError
from .numerics import Rng, Tensor, conv2d, matmul, upsample_nearest2d
from .partlearn import AttentionMaps

SIGMA_EPS = 1e-5
# tiny pre-sqrt guard so constant channels keep a finite gradient
_VAR_GUARD = 1e-24


def _conv_init(rng: Rng, c_out, c_in, k) -> Tensor:
    bound = 1.0 / math.sqrt(c_in * k * k)
    return Tensor(rng.uniform(-bound, bound, (c_out, c_in, k, k)), requires_grad=True)


def _style_init(rng: Rng, width, cond_dim) -> Tensor:
    bound = 1.0 / math.sqrt(cond_dim)
    return Tensor(rng.uniform(-bound, bound, (width, cond_dim)), requires_grad=True)


@dataclass
class DecoderParams:
    """Conv stacks plus the per-layer style projections of the class token."""

    conv_weights: list[Tensor]   # block convs, then the final output conv
    style_scales: list[Tensor]   # (width, cond_dim) per normalization layer
    style_biases: list[Tensor]
    upsample: int                # patch-grid to image-resolution factor

    def __post_init__(self):
        if len(self.style_scales) < 2:
            raise ConfigError("decoder needs at least two conv+norm blocks")
        if len(self.conv_weights) != len(self.style_scales) + 1:
            raise ShapeError("expected one conv per block plus a final output conv")
        for conv_w, w_s, w_b in zip(self.conv_weights, self.style_scales, self.style_biases):
            width = conv_w.shape[0]
            if w_s.shape[0] != width or w_b.shape[0] != width:
                raise ShapeError(f"style projections must emit {width} channels")

    @property
    def block_count(self):
        return len(self.style_scales)

    @classmethod
    def create(cls, rng: Rng, in_channels, cond_dim, upsample, widths=(32, 16, 8), out_channels=3, kernel=3):
        if len(widths) < 2:
            raise ConfigError("decoder needs at least two conv+norm blocks")
        convs, scales, biases = [], [], []
        prev = in_channels
        for width in widths:
            convs.append(_conv_init(rng, width, prev, kernel))
            scales.append(_style_init(rng, width, cond_dim))
            biases.append(_style_init(rng, width, cond_dim))
            prev = width
        convs.append(_conv_init(rng, out_channels, prev, kernel))
        return cls(conv_weights=convs, style_scales=scales, style_biases=biases, upsample=upsample)

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for i, w in enumerate(self.conv_weights):
            out[f"conv{i}"] = w
        for i, (s, b) in enumerate(zip(self.style_scales, self.style_biases)):
            out[f"style{i}.scale"] = s
            out[f"style{i}.bias"] = b
        return out


@dataclass
class ImagePair:
    """An original image and its reconstruction, shape (C, H, W) each."""

    original: Tensor
    reconstruction: Tensor

    def __post_init__(self):
        if self.original.shape != self.reconstruction.shape:
            raise ShapeError(
                f"image shapes differ: {self.original.shape} vs {self.reconstruction.shape}"
            )
        if not (np.all(np.isfinite(self.original.data)) and np.all(np.isfinite(self.reconstruction.data))):
            raise NumericError("image pair contains non-finite values")


def adain(x: Tensor, class_token: Tensor, w_s: Tensor, w_b: Tensor) -> Tensor:
    """Normalize each channel over space, then scale/shift from the class token."""
    s = matmul(w_s, class_token)
    b = matmul(w_b, class_token)
    c = x.shape[0]
    if s.shape != (c, 1) or b.shape != (c, 1):
        raise ShapeError(f"style vectors {s.shape}/{b.shape} do not match {c} channels")
    s = s.reshape(c, 1, 1)
    b = b.reshape(c, 1, 1)
    mu = x.mean(axis=(1, 2), keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=(1, 2), keepdims=True)
    sigma = (var + _VAR_GUARD) ** 0.5
    return s * (centered / (sigma + SIGMA_EPS)) + b


def decode(maps: AttentionMaps, class_token: Tensor, params: DecoderParams) -> Tensor:
    """Render an image from blurred maps, styled by the class token."""
    if maps.blurred is None:
        raise ContractError("decode needs blurred attention maps; run blur_maps first")
    n = maps.blurred.shape[0]
    h, w = maps.grid
    x = upsample_nearest2d(maps.blurred.reshape(n, h, w), params.upsample)
    for conv_w, w_s, w_b in zip(params.conv_weights[:-1], params.style_scales, params.style_biases):
        x = adain(conv2d(x, conv_w), class_token, w_s, w_b)
    return conv2d(x, params.conv_weights[-1])


def recon_loss(pair: ImagePair) -> Tensor:
    """Channel-summed squared error, averaged over spatial positions."""
    diff = pair.original - pair.reconstruction
    h, w = pair.original.shape[1], pair.original.shape[2]
    return (diff * diff).sum() * (1.0 / (h * w))


def part_learning_loss(recon: Tensor, div: Tensor, weight: float) -> Tensor:
    """Total objective: reconstruction plus `weight` times diversity."""
    if recon.size != 1 or div.size != 1:
        raise ContractError("loss terms must be scalars")
    return recon + float(weight) * div
