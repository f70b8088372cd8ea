"""Learning where parts live.

Gates the encoder's class token into one token per part, correlates part
tokens against patch tokens to get per-part attention over positions, and
derives everything downstream of those maps: blurred variants for the
reconstruction head, a diversity penalty that decorrelates the maps, the
argmax part segmentation, and foreground patch selection.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .numerics import Rng, Tensor, box_blur2d, concat, matmul, sigmoid, softmax, tanh

COSINE_EPS = 1e-12


@dataclass
class EncoderTokens:
    """Class token (C,1) and patch tokens (C,H*W) from one encoder pass."""

    class_token: Tensor
    patch_tokens: Tensor
    grid: tuple[int, int]

    def __post_init__(self):
        c = self.class_token.shape[0]
        if self.class_token.shape != (c, 1):
            raise ShapeError(f"class token must be (C,1), got {self.class_token.shape}")
        h, w = self.grid
        if self.patch_tokens.shape != (c, h * w):
            raise ShapeError(
                f"patch tokens {self.patch_tokens.shape} do not match C={c}, grid {self.grid}"
            )


def _fan_in_uniform(rng: Rng, shape) -> Tensor:
    bound = 1.0 / math.sqrt(shape[-1])
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


@dataclass
class PartAttentionParams:
    """Trainable weights for part-token gating and map correlation."""

    w_c1: list[Tensor]   # per part, (D, C)
    w_c2: list[Tensor]   # per part, (C, D)
    w_p: Tensor          # (E, C)
    w: Tensor            # (E, C)

    def __post_init__(self):
        n = len(self.w_c1)
        if n < 2:
            raise ConfigError(f"need at least 2 parts, got {n}")
        if len(self.w_c2) != n:
            raise ShapeError("w_c1 and w_c2 must pair up per part")
        d, c = self.w_c1[0].shape
        for a, b in zip(self.w_c1, self.w_c2):
            if a.shape != (d, c) or b.shape != (c, d):
                raise ShapeError("all per-part gate weights must share (D, C)")
        if self.w_p.shape[1] != c or self.w.shape[1] != c or self.w_p.shape[0] != self.w.shape[0]:
            raise ShapeError("correlation weights must be (E, C) with matching E and C")

    @property
    def n_parts(self):
        return len(self.w_c1)

    @classmethod
    def create(cls, rng: Rng, channels, n_parts, bottleneck=None, embed=None):
        d = bottleneck if bottleneck is not None else max(1, channels // 2)
        e = embed if embed is not None else channels
        w_c1 = [_fan_in_uniform(rng, (d, channels)) for _ in range(n_parts)]
        w_c2 = [_fan_in_uniform(rng, (channels, d)) for _ in range(n_parts)]
        return cls(w_c1=w_c1, w_c2=w_c2,
                   w_p=_fan_in_uniform(rng, (e, channels)),
                   w=_fan_in_uniform(rng, (e, channels)))

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for i, (a, b) in enumerate(zip(self.w_c1, self.w_c2)):
            out[f"gate{i}.down"] = a
            out[f"gate{i}.up"] = b
        out["corr.parts"] = self.w_p
        out["corr.patches"] = self.w
        return out


@dataclass
class AttentionMaps:
    """Per-part position distributions (N, H*W), optionally blurred."""

    maps: Tensor
    blurred: Tensor | None
    grid: tuple[int, int]


@dataclass
class PartSegmentation:
    """Argmax part label per patch plus per-part patch counts."""

    labels: np.ndarray   # (H*W,) int64 in [0, N)
    counts: np.ndarray   # (N,) int64
    grid: tuple[int, int]

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        h, w = self.grid
        if self.labels.shape != (h * w,):
            raise ShapeError(f"labels shape {self.labels.shape} does not match grid {self.grid}")
        n = self.counts.shape[0]
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= n):
            raise ShapeError("labels must lie in [0, N)")
        if not np.array_equal(np.bincount(self.labels, minlength=n), self.counts):
            raise ShapeError("counts must tally the labels exactly")

    @classmethod
    def from_labels(cls, labels, grid, n_parts=None):
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        n = n_parts if n_parts is not None else (int(labels.max()) + 1 if labels.size else 1)
        return cls(labels=labels, counts=np.bincount(labels, minlength=n), grid=grid)


def part_tokens(tokens: EncoderTokens, params: PartAttentionParams) -> Tensor:
    """Per-part reweightings of the class token, stacked as (C, N) columns."""
    cols = []
    for w1, w2 in zip(params.w_c1, params.w_c2):
        gate = sigmoid(matmul(w2, tanh(matmul(w1, tokens.class_token))))
        cols.append(tokens.class_token * gate)
    return concat(cols, axis=1)


def attention_maps(part_toks: Tensor, tokens: EncoderTokens, params: PartAttentionParams) -> AttentionMaps:
    """Correlate part tokens with patch tokens; softmax over positions per part."""
    logits = matmul(matmul(part_toks.T, params.w_p.T), matmul(params.w, tokens.patch_tokens))
    return AttentionMaps(maps=softmax(logits, axis=1), blurred=None, grid=tokens.grid)


def blur_maps(maps: AttentionMaps, kernel_size) -> AttentionMaps:
    """Box-blur each map on its grid (replicate padding); fills `blurred`."""
    k = int(kernel_size)
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"blur kernel must be odd and positive, got {k}")
    h, w = maps.grid
    limit = min(h, w)
    if k > limit:
        k = limit if limit % 2 == 1 else limit - 1
        warnings.warn(f"blur kernel clamped to {k} for a {h}x{w} grid", stacklevel=2)
    n = maps.maps.shape[0]
    blurred = box_blur2d(maps.maps.reshape(n, h, w), k).reshape(n, h * w)
    return AttentionMaps(maps=maps.maps, blurred=blurred, grid=maps.grid)


def diversity_loss(maps: AttentionMaps) -> Tensor:
    """Mean squared pairwise cosine similarity between distinct maps.

    The same-pair terms of the underlying objective vanish identically for
    nonzero rows, so only the off-diagonal cosines are accumulated.
    """
    m = maps.maps
    sq = (m * m).sum(axis=1, keepdims=True)
    if np.any(sq.data <= 0.0):
        raise NumericError("diversity loss needs nonzero attention rows")
    norms = sq ** 0.5
    cos = matmul(m, m.T) / (matmul(norms, norms.T) + COSINE_EPS)
    n = m.shape[0]
    off_diagonal = Tensor(1.0 - np.eye(n))
    return (cos * cos * off_diagonal).sum() * (1.0 / (n * n))


def segment(maps: AttentionMaps) -> PartSegmentation:
    """Label each patch with its strongest part (ties to the lower index)."""
    m = maps.maps.data
    if not np.all(np.isfinite(m)):
        raise NumericError("attention maps must be finite to segment")
    labels = np.argmax(m, axis=0).astype(np.int64)
    counts = np.bincount(labels, minlength=m.shape[0]).astype(np.int64)
    return PartSegmentation(labels=labels, counts=counts, grid=maps.grid)


def select_foreground(maps: AttentionMaps, keep_fraction) -> list[int]:
    """Indices of the patches most strongly claimed by any part.

    Scores each patch by its max over parts and keeps the top
    ceil(keep_fraction * L), ties to the lower index, sorted ascending.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ConfigError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    scores = maps.maps.data.max(axis=0)
    kept = int(math.ceil(keep_fraction * scores.shape[0]))
    order = np.argsort(-scores, kind="stable")
    return sorted(int(i) for i in order[:kept])
