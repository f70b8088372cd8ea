"""Toy masked autoencoder: patch tokenization, a small transformer encoder
over visible patches, a lighter decoder with a learned mask token, the
masked-pixel regression loss, and the optimizer step.

Widths are desk-scale by default and fully configurable. Run with an empty
mask list to use the encoder as a feature extractor (class token + patch
tokens) for part learning.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DataError, NumericError, ShapeError
from .numerics import (
    Rng,
    Tensor,
    backward,
    broadcast_rows,
    concat,
    gelu,
    matmul,
    put_rows,
    slice_cols,
    slice_rows,
    softmax,
    take_rows,
)

CHECKPOINT_MAGIC = b"SMAE"
CHECKPOINT_VERSION = 1
_LN_EPS = 1e-5


@dataclass(frozen=True)
class PatchGrid:
    """Patch tiling of an image: grid shape, patch count L, and row width."""

    patch_size: int
    shape: tuple[int, int]      # (H, W) measured in patches
    channels: int = 3

    @property
    def length(self):
        return self.shape[0] * self.shape[1]

    @property
    def patch_dim(self):
        return self.channels * self.patch_size * self.patch_size

    @classmethod
    def for_image(cls, height, width, patch_size, channels=3):
        if height % patch_size or width % patch_size:
            raise ConfigError(
                f"image {height}x{width} is not divisible by patch size {patch_size}"
            )
        return cls(patch_size=patch_size, shape=(height // patch_size, width // patch_size), channels=channels)


def patchify(image, grid: PatchGrid) -> Tensor:
    """Rows of flattened patches in row-major patch order, channel-major inside."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    s = grid.patch_size
    gh, gw = grid.shape
    if arr.shape != (grid.channels, gh * s, gw * s):
        raise ConfigError(f"image shape {arr.shape} does not match grid {grid}")
    rows = arr.reshape(grid.channels, gh, s, gw, s).transpose(1, 3, 0, 2, 4).reshape(grid.length, grid.patch_dim)
    return Tensor(rows.copy())


def unpatchify(rows, grid: PatchGrid) -> Tensor:
    arr = rows.data if isinstance(rows, Tensor) else np.asarray(rows, dtype=np.float64)
    s = grid.patch_size
    gh, gw = grid.shape
    if arr.shape != (grid.length, grid.patch_dim):
        raise ConfigError(f"rows shape {arr.shape} does not match grid {grid}")
    image = arr.reshape(gh, gw, grid.channels, s, s).transpose(2, 0, 3, 1, 4).reshape(grid.channels, gh * s, gw * s)
    return Tensor(image.copy())


def sinusoidal_positions(length, width) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(width, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * np.floor(i / 2.0) / width)
    return np.where(i % 2 == 0, np.sin(angles), np.cos(angles))


class MaeModel:
    """Encoder over visible tokens plus class token; decoder over all positions.

    `use_positions=False` drops the sinusoidal encodings, making the tokens
    purely appearance-driven; the part-learning phase runs that way so its
    attention maps cannot collapse onto fixed spatial templates.
    """

    def __init__(self, grid: PatchGrid, rng: Rng, enc_width=64, enc_depth=4, enc_heads=4,
                 dec_width=32, dec_depth=2, dec_heads=2, mlp_ratio=4.0, use_positions=True):
        if enc_width % enc_heads or dec_width % dec_heads:
            raise ConfigError("widths must divide evenly into heads")
        self.grid = grid
        self.enc_width, self.enc_depth, self.enc_heads = enc_width, enc_depth, enc_heads
        self.dec_width, self.dec_depth, self.dec_heads = dec_width, dec_depth, dec_heads
        self.mlp_ratio = mlp_ratio
        self.last_encoder_len = None   # diagnostics: sequence length of the latest encoder pass

        p: dict[str, Tensor] = {}
        self.params = p

        def uni(shape, fan_in):
            bound = 1.0 / math.sqrt(fan_in)
            return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)

        p["embed.w"] = uni((grid.patch_dim, enc_width), grid.patch_dim)
        p["embed.b"] = Tensor(np.zeros((1, enc_width)), requires_grad=True)
        p["cls"] = Tensor(rng.normal(0.0, 0.02, (1, enc_width)), requires_grad=True)
        for d in range(enc_depth):
            self._init_block(f"enc{d}", enc_width, mlp_ratio, rng)
        self._init_norm("enc.ln", enc_width)
        p["dec.embed.w"] = uni((enc_width, dec_width), enc_width)
        p["dec.embed.b"] = Tensor(np.zeros((1, dec_width)), requires_grad=True)
        p["dec.mask"] = Tensor(rng.normal(0.0, 0.02, (1, dec_width)), requires_grad=True)
        for d in range(dec_depth):
            self._init_block(f"dec{d}", dec_width, mlp_ratio, rng)
        self._init_norm("dec.ln", dec_width)
        p["head.w"] = uni((dec_width, grid.patch_dim), dec_width)
        p["head.b"] = Tensor(np.zeros((1, grid.patch_dim)), requires_grad=True)

        if use_positions:
            self.enc_pos = sinusoidal_positions(grid.length, enc_width)
            self.dec_pos = sinusoidal_positions(grid.length, dec_width)
        else:
            self.enc_pos = np.zeros((grid.length, enc_width))
            self.dec_pos = np.zeros((grid.length, dec_width))

    def _init_norm(self, name, width):
        self.params[f"{name}.g"] = Tensor(np.ones((1, width)), requires_grad=True)
        self.params[f"{name}.b"] = Tensor(np.zeros((1, width)), requires_grad=True)

    def _init_block(self, prefix, width, mlp_ratio, rng):
        p = self.params

        def uni(shape, fan_in):
            bound = 1.0 / math.sqrt(fan_in)
            return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)

        self._init_norm(f"{prefix}.ln1", width)
        for name in ("wq", "wk", "wv", "wo"):
            p[f"{prefix}.attn.{name}"] = uni((width, width), width)
            p[f"{prefix}.attn.b{name[1]}"] = Tensor(np.zeros((1, width)), requires_grad=True)
        self._init_norm(f"{prefix}.ln2", width)
        hidden = int(width * mlp_ratio)
        p[f"{prefix}.mlp.w1"] = uni((width, hidden), width)
        p[f"{prefix}.mlp.b1"] = Tensor(np.zeros((1, hidden)), requires_grad=True)
        p[f"{prefix}.mlp.w2"] = uni((hidden, width), hidden)
        p[f"{prefix}.mlp.b2"] = Tensor(np.zeros((1, width)), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def load_state(self, state: dict[str, np.ndarray]):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise DataError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, tensor in self.params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != tensor.data.shape:
                raise DataError(f"checkpoint shape {arr.shape} for '{name}', expected {tensor.data.shape}")
            tensor.data = arr.copy()


def _layer_norm(x, g, b):
    mu = x.mean(axis=1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    return centered / ((var + _LN_EPS) ** 0.5) * g + b


def _attention(p, prefix, x, heads):
    width = x.shape[1]
    head_dim = width // heads
    q = matmul(x, p[f"{prefix}.wq"]) + p[f"{prefix}.bq"]
    k = matmul(x, p[f"{prefix}.wk"]) + p[f"{prefix}.bk"]
    v = matmul(x, p[f"{prefix}.wv"]) + p[f"{prefix}.bv"]
    inv = 1.0 / math.sqrt(head_dim)
    merged = []
    for h in range(heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        qh, kh, vh = slice_cols(q, lo, hi), slice_cols(k, lo, hi), slice_cols(v, lo, hi)
        att = softmax(matmul(qh, kh.T) * inv, axis=1)
        merged.append(matmul(att, vh))
    out = concat(merged, axis=1)
    return matmul(out, p[f"{prefix}.wo"]) + p[f"{prefix}.bo"]


def _block(p, prefix, x, heads):
    x = x + _attention(p, f"{prefix}.attn", _layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"]), heads)
    h = _layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
    h = matmul(gelu(matmul(h, p[f"{prefix}.mlp.w1"]) + p[f"{prefix}.mlp.b1"]), p[f"{prefix}.mlp.w2"]) + p[f"{prefix}.mlp.b2"]
    return x + h


def encode(model: MaeModel, patches, masked=()):
    """Encoder pass over the visible tokens; returns the normalized sequence
    (class token first) and the visible index array."""
    grid = model.grid
    patches = patches if isinstance(patches, Tensor) else Tensor(patches)
    if patches.shape != (grid.length, grid.patch_dim):
        raise ShapeError(f"patches shape {patches.shape} does not match grid ({grid.length}, {grid.patch_dim})")
    masked = [int(i) for i in masked]
    if len(set(masked)) != len(masked):
        raise ContractError("masked indices must be distinct")
    if masked and (min(masked) < 0 or max(masked) >= grid.length):
        raise ContractError(f"masked indices must lie in [0, {grid.length})")
    visible = np.setdiff1d(np.arange(grid.length, dtype=np.int64), masked)

    p = model.params
    emb = matmul(patches, p["embed.w"]) + p["embed.b"] + Tensor(model.enc_pos)
    if visible.size == grid.length:
        seq = concat([p["cls"], emb], axis=0)
    elif visible.size:
        seq = concat([p["cls"], take_rows(emb, visible)], axis=0)
    else:
        seq = p["cls"]
    x = seq
    for d in range(model.enc_depth):
        x = _block(p, f"enc{d}", x, model.enc_heads)
    x = _layer_norm(x, p["enc.ln.g"], p["enc.ln.b"])
    model.last_encoder_len = x.shape[0]
    return x, visible


def forward(model: MaeModel, patches, masked):
    """Encode visible patches, decode every position.

    Returns (class_token (C,1), patch_tokens (C,V), predicted_pixels (L,patch_dim)).
    With `masked` empty the encoder sees the full grid, which is the feature
    mode part learning uses.
    """
    grid = model.grid
    p = model.params
    x, visible = encode(model, patches, masked)

    class_token = slice_rows(x, 0, 1).T
    patch_tokens = slice_rows(x, 1, x.shape[0]).T

    y = matmul(x, p["dec.embed.w"]) + p["dec.embed.b"]
    base = broadcast_rows(p["dec.mask"], grid.length)
    if visible.size:
        full = put_rows(base, visible, slice_rows(y, 1, y.shape[0]))
    else:
        full = base
    full = full + Tensor(model.dec_pos)
    for d in range(model.dec_depth):
        full = _block(p, f"dec{d}", full, model.dec_heads)
    full = _layer_norm(full, p["dec.ln.g"], p["dec.ln.b"])
    predicted = matmul(full, p["head.w"]) + p["head.b"]
    return class_token, patch_tokens, predicted


def mim_loss(predicted: Tensor, target: Tensor, masked) -> Tensor:
    """Mean squared error over the masked rows only."""
    masked = list(masked)
    if not masked:
        raise ContractError("mim loss needs at least one masked patch")
    idx = np.asarray(masked, dtype=np.int64)
    diff = take_rows(predicted, idx) - take_rows(target, idx)
    return (diff * diff).mean()


class AdamW:
    """Decoupled-weight-decay Adam with linear warmup then cosine decay to zero."""

    def __init__(self, params: dict[str, Tensor], peak_lr, weight_decay=0.0,
                 warmup_steps=0, total_steps=1, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(params)
        self.peak_lr = float(peak_lr)
        self.weight_decay = float(weight_decay)
        self.warmup_steps = int(warmup_steps)
        self.total_steps = int(total_steps)
        self.betas = betas
        self.eps = eps
        self.m = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in self.params.items()}
        self.step_count = 0
        self.last_lr = 0.0
        self.frozen: set[str] = set()

    def lr_at(self, step) -> float:
        if self.warmup_steps > 0 and step < self.warmup_steps:
            return self.peak_lr * step / self.warmup_steps
        if self.total_steps <= self.warmup_steps:
            return self.peak_lr
        frac = (step - self.warmup_steps) / (self.total_steps - self.warmup_steps)
        return 0.5 * self.peak_lr * (1.0 + math.cos(math.pi * min(frac, 1.0)))

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def step(self) -> float:
        lr = self.lr_at(self.step_count)
        b1, b2 = self.betas
        self.step_count += 1
        k = self.step_count
        for name, t in self.params.items():
            if name in self.frozen or t.grad is None:
                continue
            g = t.grad
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1 ** k)
            v_hat = v / (1.0 - b2 ** k)
            t.data = t.data - lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * t.data)
        self.last_lr = lr
        return lr


def train_step(model: MaeModel, optimizer: AdamW, batch, plans) -> float:
    """One update over a batch; returns the pre-update mean masked-pixel loss."""
    if len(batch) != len(plans):
        raise ContractError(f"{len(batch)} images vs {len(plans)} plans")
    losses = []
    for patches, plan in zip(batch, plans):
        if plan.masked_indices is None:
            raise ContractError("plans must carry sampled mask indices")
        patches = patches if isinstance(patches, Tensor) else Tensor(patches)
        target = Tensor(patches.data)
        _, _, predicted = forward(model, patches, plan.masked_indices)
        losses.append(mim_loss(predicted, target, plan.masked_indices))
    total = losses[0]
    for extra in losses[1:]:
        total = total + extra
    total = total * (1.0 / len(batch))
    value = total.item()
    optimizer.zero_grad()
    backward(total)
    if not math.isfinite(value):
        norms = {}
        for name, t in optimizer.params.items():
            if t.grad is not None:
                norms[name.split(".")[0]] = norms.get(name.split(".")[0], 0.0) + float((t.grad ** 2).sum())
        summary = ", ".join(f"{k}={math.sqrt(v):.3e}" for k, v in sorted(norms.items()))
        raise NumericError(
            f"non-finite loss {value} at step {optimizer.step_count} "
            f"(lr={optimizer.lr_at(optimizer.step_count)}); grad norms: {summary}"
        )
    optimizer.step()
    return value


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, then length-prefixed name/shape/payload

def save_checkpoint(path, params: dict):
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, value in params.items():
            data = value.data if isinstance(value, Tensor) else np.asarray(value)
            data = np.ascontiguousarray(data, dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    try:
        blob = open(path, "rb").read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint: {exc}") from None
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"bad checkpoint magic in {path}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    offset = 8
    state: dict[str, np.ndarray] = {}
    while offset < len(blob):
        try:
            (name_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (ndim,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            shape = struct.unpack_from(f"<{ndim}I", blob, offset)
            offset += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
            offset += 8 * count
        except (struct.error, ValueError) as exc:
            raise DataError(f"truncated checkpoint {path}: {exc}") from None
        state[name] = arr.astype(np.float64)
    return state
