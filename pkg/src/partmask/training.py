"""Run orchestration: part-learning training, masked pretraining, plan export.

Every run is driven by one seeded root generator; independent substreams are
keyed by purpose, epoch, and image id, so results are reproducible bit for
bit from a resolved config regardless of how work is ordered.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .datasets import load_dataset, majority_patch_labels, read_array, write_array
from .errors import ConfigError, DataError, NumericError
from .mae_core import (
    AdamW,
    MaeModel,
    PatchGrid,
    encode,
    load_checkpoint,
    patchify,
    save_checkpoint,
    train_step,
)
from .mask_scheduler import ScheduleConfig, alpha, compute_num_mask, sample_mask_indices
from .numerics import Rng, Tensor, backward, no_grad, slice_rows
from .partlearn import (
    EncoderTokens,
    PartAttentionParams,
    PartSegmentation,
    attention_maps,
    blur_maps,
    diversity_loss,
    part_tokens,
    segment,
    select_foreground,
)
from .recon_decoder import DecoderParams, ImagePair, decode, part_learning_loss, recon_loss

# substream ids for the root generator
S_ENCODER, S_PARTS, S_DECODER, S_MODEL, S_ORDER, S_MASK, S_AUG = range(7)

PRETRAIN_STRATEGIES = ("semantic", "random", "whole-parts-only", "per-part-only", "reverse")


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _chain_mean(losses):
    total = losses[0]
    for extra in losses[1:]:
        total = total + extra
    return total * (1.0 / len(losses))


def foreground_iou(pred_grid, gt_grid, n_parts) -> float:
    """Mean IoU of the best injective part-to-label matching over foreground labels."""
    fg = [int(v) for v in np.unique(gt_grid) if v > 0]
    if not fg:
        return float("nan")
    iou = np.zeros((len(fg), n_parts))
    for a, label in enumerate(fg):
        gt_mask = gt_grid == label
        for part in range(n_parts):
            pred_mask = pred_grid == part
            union = np.logical_or(gt_mask, pred_mask).sum()
            if union:
                iou[a, part] = np.logical_and(gt_mask, pred_mask).sum() / union
    rows, cols = linear_sum_assignment(-iou)
    return float(iou[rows, cols].mean())


class PartModel:
    """Encoder + part attention + reconstruction decoder for one part run."""

    def __init__(self, cfg, grid: PatchGrid, root: Rng):
        self.grid = grid
        self.encoder = MaeModel(
            grid, root.split(S_ENCODER),
            enc_width=cfg.enc_width, enc_depth=cfg.enc_depth, enc_heads=cfg.enc_heads,
            dec_width=cfg.dec_width, dec_depth=cfg.dec_depth, dec_heads=cfg.dec_heads,
            use_positions=cfg.encoder_positions,
        )
        self.parts = PartAttentionParams.create(
            root.split(S_PARTS), channels=cfg.enc_width, n_parts=cfg.n_parts)
        self.decoder = DecoderParams.create(
            root.split(S_DECODER), in_channels=cfg.n_parts, cond_dim=cfg.enc_width,
            upsample=grid.patch_size)
        self.blur_kernel = cfg.blur_kernel

    def parameters(self) -> dict:
        out = {}
        out.update({f"encoder.{k}": v for k, v in self.encoder.parameters().items()})
        out.update({f"parts.{k}": v for k, v in self.parts.tensors().items()})
        out.update({f"decoder.{k}": v for k, v in self.decoder.tensors().items()})
        return out

    def load_state(self, state):
        params = self.parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise DataError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, tensor in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != tensor.data.shape:
                raise DataError(f"checkpoint shape {arr.shape} for '{name}', expected {tensor.data.shape}")
            tensor.data = arr.copy()

    def maps_for(self, patches):
        seq, _ = encode(self.encoder, patches)
        fc = slice_rows(seq, 0, 1).T
        ft = slice_rows(seq, 1, seq.shape[0]).T
        tokens = EncoderTokens(fc, ft, self.grid.shape)
        maps = attention_maps(part_tokens(tokens, self.parts), tokens, self.parts)
        return fc, blur_maps(maps, self.blur_kernel)

    def losses_for(self, patches, image_tensor):
        fc, maps = self.maps_for(patches)
        rec = recon_loss(ImagePair(image_tensor, decode(maps, fc, self.decoder)))
        return rec, diversity_loss(maps), maps


def run_partlearn(cfg) -> dict:
    """Train the part objective; writes metrics, dumps, and a checkpoint."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    images, gt = load_dataset(cfg.dataset)
    n, channels, height, width = images.shape
    grid = PatchGrid.for_image(height, width, cfg.patch_size, channels=channels)
    root = Rng(cfg.seed)
    model = PartModel(cfg, grid, root)
    params = model.parameters()

    steps_per_epoch = math.ceil(n / cfg.batch_size)
    opt = AdamW(params, peak_lr=cfg.peak_lr, weight_decay=cfg.weight_decay,
                warmup_steps=cfg.warmup_epochs * steps_per_epoch,
                total_steps=cfg.epochs * steps_per_epoch)

    patch_tensors = [patchify(images[i], grid) for i in range(n)]
    image_tensors = [Tensor(images[i]) for i in range(n)]
    gt_grids = None
    if gt is not None:
        gt_grids = [majority_patch_labels(gt[i], cfg.patch_size) for i in range(n)]

    rows = []
    for epoch in range(1, cfg.epochs + 1):
        if epoch - 1 == cfg.encoder_warm_epochs:
            opt.frozen |= {name for name in params if name.startswith("encoder.")}
        order = root.split(S_ORDER).split(epoch).permutation(n)
        rec_sum = div_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            chunk = order[start:start + cfg.batch_size]
            opt.zero_grad()
            losses = []
            for i in chunk:
                rec, div, _ = model.losses_for(patch_tensors[i], image_tensors[i])
                rec_sum += rec.item()
                div_sum += div.item()
                losses.append(part_learning_loss(rec, div, cfg.lam))
            total = _chain_mean(losses)
            value = total.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite part loss {value} at epoch {epoch}")
            backward(total)
            opt.step()
        rec_mean, div_mean = rec_sum / n, div_sum / n
        fg = float("nan")
        if gt_grids is not None:
            fg = _mean_iou(model, patch_tensors, gt_grids, cfg.n_parts, grid)
        rows.append((epoch, rec_mean, div_mean, rec_mean + cfg.lam * div_mean, fg))

    _write_csv(out / "metrics.csv", ["epoch", "recon_loss", "div_loss", "total_loss", "fg_iou"], rows)
    _dump_segmentations(model, patch_tensors, grid, out, cfg.keep_fraction)
    save_checkpoint(out / "checkpoint.smae", params)
    return {"out": out, "metrics": rows}


def _mean_iou(model: PartModel, patch_tensors, gt_grids, n_parts, grid) -> float:
    scores = []
    with no_grad():
        for patches, gt_grid in zip(patch_tensors, gt_grids):
            _, maps = model.maps_for(patches)
            labels = segment(maps).labels.reshape(grid.shape)
            scores.append(foreground_iou(labels, gt_grid, n_parts))
    return float(np.mean(scores))


def _dump_segmentations(model: PartModel, patch_tensors, grid, out: Path, keep_fraction):
    gh, gw = grid.shape
    labels = np.zeros((len(patch_tensors), 1, gh, gw))
    fg_rows = []
    with no_grad():
        for i, patches in enumerate(patch_tensors):
            _, maps = model.maps_for(patches)
            labels[i, 0] = segment(maps).labels.reshape(gh, gw)
            kept = select_foreground(maps, keep_fraction)
            fg_rows.append((i, ";".join(str(v) for v in kept)))
    write_array(out / "segmentation.sten", labels)
    _write_csv(out / "foreground.csv", ["image_id", "kept_patches"], fg_rows)


def _segmentation_from_checkpoint(cfg, grid: PatchGrid, images) -> list[np.ndarray]:
    from .cli import RunConfig, read_config_file  # late import; cli owns the config format

    ckpt_path = Path(cfg.segmentation)
    resolved = ckpt_path.parent / "config.resolved"
    if not resolved.exists():
        raise DataError(f"no config.resolved next to checkpoint {ckpt_path}")
    part_cfg = read_config_file(RunConfig(), resolved)
    model = PartModel(part_cfg, grid, Rng(part_cfg.seed))
    model.load_state(load_checkpoint(ckpt_path))
    grids = []
    with no_grad():
        for i in range(images.shape[0]):
            _, maps = model.maps_for(patchify(images[i], grid))
            grids.append(segment(maps).labels.reshape(grid.shape))
    return grids


def resolve_segmentations(cfg, grid: PatchGrid, images):
    """Per-image patch-grid label maps for masking, plus the part count.

    Sources: `random` strategy (single part), a patch-grid label dump, a
    pixel-resolution label file (majority-reduced), or a part checkpoint
    with its resolved config alongside.
    """
    n = images.shape[0]
    if cfg.strategy == "random":
        return [np.zeros(grid.shape, dtype=np.int64) for _ in range(n)], 1
    if not cfg.segmentation:
        raise ConfigError(f"strategy '{cfg.strategy}' needs --segmentation")
    if str(cfg.segmentation).endswith(".smae"):
        grids = _segmentation_from_checkpoint(cfg, grid, images)
    else:
        raw = read_array(cfg.segmentation)
        if raw.shape[0] != n or raw.shape[1] != 1:
            raise DataError(f"segmentation {cfg.segmentation} does not match the dataset")
        maps = raw[:, 0].astype(np.int64)
        if maps.shape[1:] == grid.shape:
            grids = [maps[i] for i in range(n)]
        elif maps.shape[1:] == (grid.shape[0] * grid.patch_size, grid.shape[1] * grid.patch_size):
            grids = [majority_patch_labels(maps[i], grid.patch_size) for i in range(n)]
        else:
            raise DataError(
                f"segmentation grid {maps.shape[1:]} matches neither the patch grid "
                f"{grid.shape} nor the image resolution"
            )
    n_parts = max(int(g.max()) for g in grids) + 1
    return grids, n_parts


def _plan_rng(root: Rng, epoch, image_id) -> Rng:
    return root.split(S_MASK).split(epoch).split(int(image_id))


def run_pretrain(cfg) -> dict:
    """Masked pretraining with part-aware adaptive masking; writes metrics + checkpoint."""
    if cfg.strategy not in PRETRAIN_STRATEGIES:
        raise ConfigError(f"unknown strategy '{cfg.strategy}', pick one of {PRETRAIN_STRATEGIES}")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    images, _ = load_dataset(cfg.dataset)
    n, channels, height, width = images.shape
    grid = PatchGrid.for_image(height, width, cfg.patch_size, channels=channels)
    label_grids, n_parts = resolve_segmentations(cfg, grid, images)

    segs, segs_flipped = [], []
    for g in label_grids:
        segs.append(PartSegmentation.from_labels(g.ravel(), grid.shape, n_parts))
        segs_flipped.append(PartSegmentation.from_labels(g[:, ::-1].ravel(), grid.shape, n_parts))
    patch_plain = [patchify(images[i], grid) for i in range(n)]
    patch_flipped = [patchify(images[i, :, :, ::-1].copy(), grid) for i in range(n)]

    root = Rng(cfg.seed)
    model = MaeModel(grid, root.split(S_MODEL),
                     enc_width=cfg.enc_width, enc_depth=cfg.enc_depth, enc_heads=cfg.enc_heads,
                     dec_width=cfg.dec_width, dec_depth=cfg.dec_depth, dec_heads=cfg.dec_heads)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    opt = AdamW(model.parameters(), peak_lr=cfg.peak_lr, weight_decay=cfg.weight_decay,
                warmup_steps=cfg.warmup_epochs * steps_per_epoch,
                total_steps=cfg.epochs * steps_per_epoch)
    sched = ScheduleConfig(mask_ratio=cfg.mask_ratio, gamma=cfg.gamma, total_epochs=cfg.epochs,
                           reverse=cfg.reverse_schedule or cfg.strategy == "reverse")

    rows = []
    for epoch in range(1, cfg.epochs + 1):
        if cfg.strategy == "per-part-only":
            effective = 0
        elif cfg.strategy == "whole-parts-only":
            effective = cfg.epochs
        else:
            effective = epoch
        a = alpha(effective, sched)
        order = root.split(S_ORDER).split(epoch).permutation(n)
        loss_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            chunk = order[start:start + cfg.batch_size]
            batch, plans = [], []
            for i in chunk:
                i = int(i)
                flip = root.split(S_AUG).split(epoch).split(i).uniform() < 0.5
                seg = segs_flipped[i] if flip else segs[i]
                rng = _plan_rng(root, epoch, i)
                plan = sample_mask_indices(seg, compute_num_mask(seg, sched, effective, rng), rng)
                batch.append(patch_flipped[i] if flip else patch_plain[i])
                plans.append(plan)
            loss_sum += train_step(model, opt, batch, plans) * len(chunk)
        rows.append((epoch, a, loss_sum / n, opt.last_lr))

    _write_csv(out / "metrics.csv", ["epoch", "alpha", "mim_loss", "lr"], rows)
    save_checkpoint(out / "checkpoint.smae", model.parameters())
    return {"out": out, "metrics": rows}


def export_plans(cfg) -> dict:
    """Emit mask plans for the requested epochs without training anything."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.strategy == "random" or cfg.segmentation == "":
        raise ConfigError("export-plans needs --segmentation")
    raw = read_array(cfg.segmentation)
    if raw.shape[1] != 1:
        raise DataError(f"{cfg.segmentation} is not a label file")
    maps = raw[:, 0].astype(np.int64)
    gh, gw = maps.shape[1:]
    grids = [maps[i] for i in range(maps.shape[0])]
    if cfg.dataset:
        images, _ = load_dataset(cfg.dataset)
        grid = PatchGrid.for_image(images.shape[2], images.shape[3], cfg.patch_size,
                                   channels=images.shape[1])
        if maps.shape[1:] != grid.shape:
            grids = [majority_patch_labels(m, cfg.patch_size) for m in maps]
            gh, gw = grids[0].shape
    n_parts = max(int(g.max()) for g in grids) + 1
    segs = [PartSegmentation.from_labels(g.ravel(), (gh, gw), n_parts) for g in grids]

    epochs = [int(tok) for tok in str(cfg.plan_epochs).split(",") if tok.strip() != ""]
    if not epochs:
        raise ConfigError("export-plans needs --plan-epochs, e.g. 0,50,100")
    sched = ScheduleConfig(mask_ratio=cfg.mask_ratio, gamma=cfg.gamma, total_epochs=cfg.epochs,
                           reverse=cfg.reverse_schedule)
    root = Rng(cfg.seed)
    rows = []
    for epoch in epochs:
        for image_id, seg in enumerate(segs):
            rng = _plan_rng(root, epoch, image_id)
            plan = sample_mask_indices(seg, compute_num_mask(seg, sched, epoch, rng), rng)
            rows.append((epoch, image_id, plan.alpha,
                         *[int(v) for v in plan.num_mask],
                         ";".join(str(v) for v in plan.masked_indices)))
    header = ["epoch", "image_id", "alpha"] + [f"num_mask_{i}" for i in range(n_parts)] + ["masked_indices"]
    _write_csv(out / "plans.csv", header, rows)
    return {"out": out, "rows": rows, "n_parts": n_parts}


def report_metrics(path) -> str:
    """Plain-text summary of a metrics CSV."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise DataError(f"cannot read metrics: {exc}") from None
    if not rows:
        raise DataError(f"{path}: no rows")
    lines = [f"{path}: {len(rows)} rows"]
    for column in rows[0]:
        try:
            values = np.array([float(r[column]) for r in rows])
        except ValueError:
            continue
        if column in ("epoch", "image_id"):
            continue
        finite = values[np.isfinite(values)]
        if finite.size == 0:
            lines.append(f"  {column}: all nan")
            continue
        lines.append(
            f"  {column}: first={values[0]:.6g} last={values[-1]:.6g} "
            f"min={finite.min():.6g} max={finite.max():.6g}"
        )
    return "\n".join(lines)
