"""Per-part mask budgets with an easy-to-hard interpolation schedule.

Two masking regimes are blended by a weight that grows with training
progress: proportional masking (the same ratio inside every part) and
greedy whole-part masking (entire parts removed in a random order until
the budget runs out). The blend is integerized so the total masked count
is exact for every epoch, then indices are sampled per part without
replacement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ContractError
from .numerics import Rng
from .partlearn import PartSegmentation

__all__ = [
    "MaskPlan",
    "ScheduleConfig",
    "alpha",
    "budget_whole_parts",
    "compute_num_mask",
    "sample_mask_indices",
]


@dataclass
class ScheduleConfig:
    mask_ratio: float
    gamma: float = 2.0
    total_epochs: int = 100
    reverse: bool = False

    def __post_init__(self):
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.gamma <= 0.0:
            raise ConfigError(f"gamma must be positive, got {self.gamma}")
        if self.total_epochs < 1:
            raise ConfigError(f"total_epochs must be >= 1, got {self.total_epochs}")


@dataclass
class MaskPlan:
    """Masked-patch quota per part for one epoch, plus sampled indices."""

    num_mask: np.ndarray                       # (N,) int64
    alpha: float
    total_masked: int
    masked_indices: list[int] | None = None    # sorted when present
    part_order: np.ndarray = field(default=None, repr=False)  # permutation used for the whole-part budget


def alpha(epoch, cfg: ScheduleConfig) -> float:
    """Blend weight for the current epoch: 0 = proportional, 1 = whole-part."""
    if epoch < 0 or epoch > cfg.total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {cfg.total_epochs}]")
    a = (epoch / cfg.total_epochs) ** cfg.gamma
    a = min(max(a, 0.0), 1.0)
    return 1.0 - a if cfg.reverse else a


def budget_whole_parts(counts, mask_ratio, order) -> np.ndarray:
    """Real-valued per-part quotas when whole parts are masked greedily in `order`.

    Walking the shuffled parts, each is masked fully while budget remains;
    the boundary part takes the remainder. Implemented with the running-sum
    form so the total is exactly L * mask_ratio.
    """
    counts = np.asarray(counts, dtype=np.float64)
    order = np.asarray(order, dtype=np.int64)
    n = counts.shape[0]
    if sorted(order.tolist()) != list(range(n)):
        raise ContractError("order must be a permutation of the part indices")
    shuffled = counts[order]
    budget = counts.sum() * mask_ratio
    marks = budget - np.cumsum(shuffled) + shuffled
    remains = np.where(marks < 0.0, 0.0, marks)
    masked = np.where(remains < shuffled, remains, shuffled)
    out = np.empty_like(masked)
    out[order] = masked
    return out


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def _integerize(reals, total, caps):
    """Largest-remainder rounding of `reals` to sum `total`, capped per entry.

    Floors every quota, then hands out the missing units in descending
    fractional order (ties to the lower index), skipping entries already at
    their cap and cycling until the budget is placed.
    """
    reals = np.asarray(reals, dtype=np.float64)
    caps = np.asarray(caps, dtype=np.int64)
    result = np.floor(reals).astype(np.int64)
    frac = reals - result
    deficit = int(total) - int(result.sum())
    order = np.lexsort((np.arange(reals.size), -frac))
    while deficit > 0:
        placed = False
        for idx in order:
            if deficit == 0:
                break
            if result[idx] < caps[idx]:
                result[idx] += 1
                deficit -= 1
                placed = True
        if not placed:
            raise ContractError("mask budget exceeds total part capacity")
    return result


def compute_num_mask(seg: PartSegmentation, cfg: ScheduleConfig, epoch, rng: Rng) -> MaskPlan:
    """Blend proportional and whole-part quotas for `epoch` and integerize.

    The whole-part permutation is drawn from `rng`; the integer total equals
    round(L * mask_ratio) for every epoch, with each entry clamped to its
    part's patch count.
    """
    counts = seg.counts
    total_patches = int(counts.sum())
    if total_patches != seg.labels.shape[0]:
        raise ContractError("segmentation counts disagree with its labels")
    a = alpha(epoch, cfg)
    proportional = cfg.mask_ratio * counts.astype(np.float64)
    order = rng.permutation(counts.shape[0])
    whole = budget_whole_parts(counts, cfg.mask_ratio, order)
    blended = (1.0 - a) * proportional + a * whole
    target = _round_half_up(total_patches * cfg.mask_ratio)
    num_mask = _integerize(blended, target, counts)
    return MaskPlan(
        num_mask=num_mask,
        alpha=a,
        total_masked=int(num_mask.sum()),
        masked_indices=None,
        part_order=order,
    )


def sample_mask_indices(seg: PartSegmentation, plan: MaskPlan, rng: Rng) -> MaskPlan:
    """Draw each part's quota uniformly without replacement from its patches."""
    if np.any(plan.num_mask > seg.counts):
        raise ContractError("mask plan exceeds per-part patch counts")
    chosen: list[int] = []
    for part, quota in enumerate(plan.num_mask):
        quota = int(quota)
        if quota == 0:
            continue
        members = np.flatnonzero(seg.labels == part)
        chosen.extend(int(i) for i in rng.sample(members, quota))
    return replace(plan, masked_indices=sorted(chosen))
