import numpy as np
import pytest

from partmask.datasets import gen_two_blobs
from partmask.errors import ConfigError, ContractError, DataError
from partmask.mae_core import (
    AdamW,
    MaeModel,
    PatchGrid,
    forward,
    load_checkpoint,
    mim_loss,
    patchify,
    save_checkpoint,
    train_step,
    unpatchify,
)
from partmask.mask_scheduler import MaskPlan, ScheduleConfig, compute_num_mask, sample_mask_indices
from partmask.numerics import Rng, Tensor, backward
from partmask.partlearn import PartSegmentation

from gradcheck import check_gradients

# golden value from the seed-pinned 200-step run below (loss_200 / loss_1)
GOLDEN_200_STEP_RATIO = 0.06325922358272694


def _tiny_model(rng, grid):
    return MaeModel(grid, rng, enc_width=16, enc_depth=1, enc_heads=2,
                    dec_width=8, dec_depth=1, dec_heads=2, mlp_ratio=2.0)


# ---------------------------------------------------------------------------
# patchify


def test_patchify_single_patch_channel_major():
    grid = PatchGrid.for_image(2, 2, 2)
    image = np.arange(12.0).reshape(3, 2, 2)
    rows = patchify(image, grid)
    assert rows.shape == (1, 12)
    assert np.array_equal(rows.data[0], image.reshape(-1))


def test_patchify_roundtrip_random():
    grid = PatchGrid.for_image(8, 12, 4)
    rng = Rng(0)
    for seed in range(10):
        image = rng.split(seed).normal(0, 1, (3, 8, 12))
        again = unpatchify(patchify(image, grid), grid)
        assert np.array_equal(again.data, image)


def test_patchify_row_order():
    grid = PatchGrid.for_image(4, 4, 2)
    image = np.zeros((3, 4, 4))
    image[:, :2, :2] = 1.0   # top-left
    image[:, :2, 2:] = 2.0   # top-right
    image[:, 2:, :2] = 3.0   # bottom-left
    image[:, 2:, 2:] = 4.0   # bottom-right
    rows = patchify(image, grid).data
    assert np.array_equal(rows, np.repeat([[1.0], [2.0], [3.0], [4.0]], 12, axis=1))


def test_patch_grid_divisibility():
    with pytest.raises(ConfigError):
        PatchGrid.for_image(30, 32, 4)


# ---------------------------------------------------------------------------
# forward


def test_forward_no_mask_full_sequence():
    rng = Rng(1)
    grid = PatchGrid.for_image(8, 8, 4)
    model = _tiny_model(rng, grid)
    patches = Tensor(rng.normal(0, 1, (grid.length, grid.patch_dim)))
    fc, ft, pred = forward(model, patches, [])
    assert model.last_encoder_len == grid.length + 1
    assert fc.shape == (16, 1)
    assert ft.shape == (16, grid.length)
    assert pred.shape == (grid.length, grid.patch_dim)


def test_forward_all_masked_degenerate():
    rng = Rng(2)
    grid = PatchGrid.for_image(8, 8, 4)
    model = _tiny_model(rng, grid)
    patches = Tensor(rng.normal(0, 1, (grid.length, grid.patch_dim)))
    _, ft, pred = forward(model, patches, list(range(grid.length)))
    assert model.last_encoder_len == 1
    assert ft.shape == (16, 0)
    assert pred.shape == (grid.length, grid.patch_dim)


def test_forward_rejects_bad_indices():
    rng = Rng(3)
    grid = PatchGrid.for_image(8, 8, 4)
    model = _tiny_model(rng, grid)
    patches = Tensor(rng.normal(0, 1, (grid.length, grid.patch_dim)))
    with pytest.raises(ContractError):
        forward(model, patches, [0, 0])
    with pytest.raises(ContractError):
        forward(model, patches, [grid.length])


def test_forward_visible_count_scaling():
    rng = Rng(4)
    grid = PatchGrid.for_image(16, 16, 4)  # L = 16
    model = _tiny_model(rng, grid)
    patches = Tensor(rng.normal(0, 1, (grid.length, grid.patch_dim)))
    masked = list(range(12))  # mask 75%
    forward(model, patches, masked)
    assert model.last_encoder_len == 1 + int(np.ceil(0.25 * grid.length))


def test_forward_gradient_matches_finite_differences():
    rng = Rng(5)
    grid = PatchGrid.for_image(4, 4, 2)
    model = _tiny_model(rng, grid)
    patches = Tensor(rng.normal(0, 1, (grid.length, grid.patch_dim)), requires_grad=True)
    target = Tensor(rng.normal(0, 1, (grid.length, grid.patch_dim)))
    masked = [1, 2]

    def build():
        _, _, pred = forward(model, patches, masked)
        return mim_loss(pred, target, masked)

    check_gradients(build, [patches], h=1e-5, tol=1e-5)


# ---------------------------------------------------------------------------
# mim loss


def test_mim_loss_zero_when_equal_on_masked_rows():
    pred = Tensor(np.arange(12.0).reshape(3, 4))
    target = Tensor(np.arange(12.0).reshape(3, 4))
    target.data[0] += 10.0  # unmasked row may differ freely
    assert mim_loss(pred, target, [1, 2]).item() == 0.0


def test_mim_loss_constant_diff():
    pred = Tensor(np.zeros((2, 4)))
    target = Tensor(np.full((2, 4), 2.0))
    assert mim_loss(pred, target, [1]).item() == 4.0


def test_mim_loss_two_row_average():
    pred = Tensor(np.zeros((2, 2)))
    target = Tensor(np.array([[1.0, 1.0], [np.sqrt(3.0), np.sqrt(3.0)]]))
    assert mim_loss(pred, target, [0, 1]).item() == pytest.approx(2.0, abs=1e-12)


def test_mim_loss_empty_mask_rejected():
    with pytest.raises(ContractError):
        mim_loss(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 2))), [])


def test_mim_loss_gradient_zero_outside_mask():
    rng = Rng(6)
    pred = Tensor(rng.normal(0, 1, (5, 3)), requires_grad=True)
    target = Tensor(rng.normal(0, 1, (5, 3)))
    backward(mim_loss(pred, target, [1, 3]))
    assert np.array_equal(pred.grad[0], np.zeros(3))
    assert np.array_equal(pred.grad[2], np.zeros(3))
    assert np.array_equal(pred.grad[4], np.zeros(3))
    assert not np.array_equal(pred.grad[1], np.zeros(3))


# ---------------------------------------------------------------------------
# optimizer


def test_lr_schedule_warmup_endpoints():
    opt = AdamW({}, peak_lr=2.4e-3, warmup_steps=40, total_steps=800)
    assert opt.lr_at(0) == 0.0
    assert opt.lr_at(40) == pytest.approx(2.4e-3)
    assert opt.lr_at(800) == pytest.approx(0.0, abs=1e-18)
    mid = opt.lr_at(420)
    assert 0.0 < mid < 2.4e-3


def test_zero_lr_step_keeps_parameters_bit_identical():
    rng = Rng(7)
    grid = PatchGrid.for_image(4, 4, 2)
    model = _tiny_model(rng, grid)
    opt = AdamW(model.parameters(), peak_lr=1e-3, weight_decay=0.05,
                warmup_steps=10, total_steps=100)
    before = {k: t.data.copy() for k, t in model.parameters().items()}
    patches = Tensor(rng.normal(0, 1, (grid.length, grid.patch_dim)))
    plan = MaskPlan(num_mask=np.array([2]), alpha=0.0, total_masked=2, masked_indices=[0, 3])
    train_step(model, opt, [patches], [plan])  # step 0 uses lr(0) = 0
    for name, t in model.parameters().items():
        assert np.array_equal(t.data, before[name]), name
    assert any(np.any(m != 0.0) for m in opt.m.values())


def test_frozen_parameters_stay_put():
    rng = Rng(8)
    grid = PatchGrid.for_image(4, 4, 2)
    model = _tiny_model(rng, grid)
    opt = AdamW(model.parameters(), peak_lr=1e-2, warmup_steps=0, total_steps=10)
    opt.frozen = {"embed.w"}
    before = model.params["embed.w"].data.copy()
    patches = Tensor(rng.normal(0, 1, (grid.length, grid.patch_dim)))
    plan = MaskPlan(num_mask=np.array([2]), alpha=0.0, total_masked=2, masked_indices=[0, 3])
    for _ in range(3):
        train_step(model, opt, [patches], [plan])
    assert np.array_equal(model.params["embed.w"].data, before)


def _run_200_steps():
    rng = Rng(1234)
    grid = PatchGrid.for_image(16, 16, 4)
    images, _ = gen_two_blobs(8, 16, 16, rng.split(0))
    patches = [patchify(images[i], grid) for i in range(8)]
    model = MaeModel(grid, rng.split(1), enc_width=32, enc_depth=2, enc_heads=4,
                     dec_width=16, dec_depth=1, dec_heads=2)
    opt = AdamW(model.parameters(), peak_lr=2.4e-3, weight_decay=0.05,
                warmup_steps=10, total_steps=200)
    seg = PartSegmentation.from_labels(np.zeros(grid.length, dtype=np.int64), grid.shape, 1)
    sched = ScheduleConfig(mask_ratio=0.75, gamma=2.0, total_epochs=200)
    first = last = None
    for step in range(200):
        plans = []
        for i in range(8):
            r = rng.split(2).split(step).split(i)
            plans.append(sample_mask_indices(seg, compute_num_mask(seg, sched, 0, r), r))
        last = train_step(model, opt, patches, plans)
        if step == 0:
            first = last
    return first, last


def test_train_step_reduces_loss_golden():
    first, last = _run_200_steps()
    assert last < 0.5 * first
    ratio = last / first
    assert GOLDEN_200_STEP_RATIO * 0.8 < ratio < GOLDEN_200_STEP_RATIO * 1.2


def test_training_deterministic_across_runs():
    a = _run_200_steps()
    b = _run_200_steps()
    assert a == b


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip(tmp_path):
    rng = Rng(9)
    grid = PatchGrid.for_image(4, 4, 2)
    model = _tiny_model(rng, grid)
    path = tmp_path / "model.smae"
    save_checkpoint(path, model.parameters())
    blob = path.read_bytes()
    assert blob[:4] == b"SMAE"
    state = load_checkpoint(path)
    fresh = _tiny_model(Rng(10), grid)
    fresh.load_state(state)
    for name, t in model.parameters().items():
        assert np.array_equal(fresh.params[name].data, t.data)


def test_checkpoint_shape_validation(tmp_path):
    rng = Rng(11)
    grid = PatchGrid.for_image(4, 4, 2)
    model = _tiny_model(rng, grid)
    path = tmp_path / "model.smae"
    save_checkpoint(path, model.parameters())
    state = load_checkpoint(path)
    state["embed.w"] = np.zeros((2, 2))
    with pytest.raises(DataError):
        model.load_state(state)
    del state["embed.w"]
    with pytest.raises(DataError):
        model.load_state(state)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.smae"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(DataError):
        load_checkpoint(path)
