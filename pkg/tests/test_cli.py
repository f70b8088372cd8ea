import numpy as np
import pytest

from partmask.cli import RunConfig, main, read_config_file
from partmask.datasets import read_array
from partmask.errors import ConfigError
from partmask.mask_scheduler import ScheduleConfig, compute_num_mask
from partmask.numerics import Rng
from partmask.partlearn import PartSegmentation
from partmask.training import foreground_iou


def _gen(tmp_path, kind="two-blobs", count=6, size=32, seed=3, **extra):
    out = tmp_path / "data"
    args = ["gen-data", "--kind", kind, "--count", str(count), "--image-size", str(size),
            "--seed", str(seed), "--out", str(out)]
    for key, val in extra.items():
        args += [f"--{key.replace('_', '-')}", str(val)]
    assert main(args) == 0
    return out / (kind.replace("-", "_") + ".sten")


# ---------------------------------------------------------------------------
# config plumbing


def test_defaults_match_published_recipe():
    cfg = RunConfig()
    assert cfg.lam == 0.03
    assert cfg.blur_kernel == 7
    assert cfg.n_parts == 6
    assert cfg.gamma == 2.0
    assert cfg.mask_ratio == 0.75
    assert cfg.peak_lr == 2.4e-3
    assert cfg.weight_decay == 0.05
    assert cfg.keep_fraction == 0.25


def test_warmup_default_is_five_percent():
    cfg = RunConfig(epochs=800).resolved()
    assert cfg.warmup_epochs == 40


def test_config_file_roundtrip(tmp_path):
    path = tmp_path / "cfg"
    path.write_text("seed=9\nmask_ratio=0.5\nreverse_schedule=true\n# comment\n")
    cfg = read_config_file(RunConfig(), path)
    assert cfg.seed == 9
    assert cfg.mask_ratio == 0.5
    assert cfg.reverse_schedule is True
    path.write_text("not_a_key=1\n")
    with pytest.raises(ConfigError):
        read_config_file(RunConfig(), path)


def test_exit_codes(tmp_path, capsys):
    # config error: bad strategy
    data = _gen(tmp_path)
    assert main(["pretrain", "--dataset", str(data), "--strategy", "bogus",
                 "--epochs", "1", "--out", str(tmp_path / "x")]) == 2
    # config error: semantic without segmentation
    assert main(["pretrain", "--dataset", str(data), "--strategy", "semantic",
                 "--epochs", "1", "--out", str(tmp_path / "x")]) == 2
    # data error: missing dataset
    assert main(["train-parts", "--dataset", str(tmp_path / "nope.sten"),
                 "--epochs", "1", "--out", str(tmp_path / "x")]) == 3
    capsys.readouterr()


# ---------------------------------------------------------------------------
# gen-data


def test_gen_data_outputs(tmp_path):
    data = _gen(tmp_path, count=4)
    assert data.stat().st_size == 24 + 4 * 3 * 32 * 32 * 8
    assert (tmp_path / "data" / "config.resolved").exists()


def test_gen_data_seed_reproducible(tmp_path):
    a = _gen(tmp_path / "a", seed=5)
    b = _gen(tmp_path / "b", seed=5)
    assert a.read_bytes() == b.read_bytes()


# ---------------------------------------------------------------------------
# train-parts


def test_train_parts_run(tmp_path):
    data = _gen(tmp_path, count=4, seed=2)
    out = tmp_path / "parts"
    assert main(["train-parts", "--dataset", str(data), "--epochs", "2", "--n-parts", "3",
                 "--batch-size", "2", "--blur-kernel", "3", "--seed", "1",
                 "--out", str(out)]) == 0
    metrics = (out / "metrics.csv").read_text().splitlines()
    assert metrics[0] == "epoch,recon_loss,div_loss,total_loss,fg_iou"
    assert len(metrics) == 3
    seg = read_array(out / "segmentation.sten")
    assert seg.shape == (4, 1, 8, 8)
    assert (out / "checkpoint.smae").exists()
    assert (out / "foreground.csv").exists()
    fg = (out / "foreground.csv").read_text().splitlines()
    assert fg[0] == "image_id,kept_patches"
    assert len(fg[1].split(",")[1].split(";")) == 16  # ceil(0.25 * 64)


def test_train_parts_lambda_zero_excludes_diversity(tmp_path):
    data = _gen(tmp_path, count=2, seed=2)
    out = tmp_path / "parts0"
    assert main(["train-parts", "--dataset", str(data), "--epochs", "1", "--n-parts", "3",
                 "--lam", "0.0", "--blur-kernel", "3", "--seed", "1",
                 "--out", str(out)]) == 0
    header, row = (out / "metrics.csv").read_text().splitlines()[:2]
    cells = row.split(",")
    rec, div, total = float(cells[1]), float(cells[2]), float(cells[3])
    assert div > 0.0
    assert total == rec


# ---------------------------------------------------------------------------
# pretrain


def test_pretrain_semantic_from_gt_sidecar(tmp_path):
    data = _gen(tmp_path, kind="k-parts", count=4, seed=6)
    out = tmp_path / "pre"
    assert main(["pretrain", "--dataset", str(data),
                 "--segmentation", str(data.with_suffix(".labels.sten")),
                 "--epochs", "3", "--batch-size", "2", "--seed", "4",
                 "--out", str(out)]) == 0
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "epoch,alpha,mim_loss,lr"
    final = lines[-1].split(",")
    assert float(final[1]) == 1.0  # alpha hits the endpoint on the last epoch
    assert (out / "checkpoint.smae").exists()


def test_pretrain_random_equals_single_part_totals(tmp_path):
    data = _gen(tmp_path, count=4, seed=6)
    grid_len = 64
    images = read_array(data)
    labels = [np.zeros((8, 8), dtype=np.int64) for _ in range(4)]
    sched = ScheduleConfig(mask_ratio=0.75, gamma=2.0, total_epochs=10)
    for epoch in (0, 5, 10):
        seg = PartSegmentation.from_labels(labels[0].ravel(), (8, 8), 1)
        plan = compute_num_mask(seg, sched, epoch, Rng(epoch))
        assert plan.total_masked == round(grid_len * 0.75)


def test_pretrain_from_part_checkpoint(tmp_path):
    data = _gen(tmp_path, count=4, seed=2)
    parts_out = tmp_path / "parts"
    assert main(["train-parts", "--dataset", str(data), "--epochs", "1", "--n-parts", "3",
                 "--blur-kernel", "3", "--seed", "1", "--out", str(parts_out)]) == 0
    out = tmp_path / "pre2"
    assert main(["pretrain", "--dataset", str(data),
                 "--segmentation", str(parts_out / "checkpoint.smae"),
                 "--epochs", "2", "--batch-size", "2", "--seed", "4",
                 "--out", str(out)]) == 0
    assert (out / "metrics.csv").exists()


def test_pretrain_strategies_run(tmp_path):
    data = _gen(tmp_path, kind="k-parts", count=2, seed=6)
    side = str(data.with_suffix(".labels.sten"))
    for strategy in ("per-part-only", "whole-parts-only", "reverse", "random"):
        out = tmp_path / f"pre-{strategy}"
        args = ["pretrain", "--dataset", str(data), "--strategy", strategy,
                "--epochs", "2", "--batch-size", "2", "--seed", "4", "--out", str(out)]
        if strategy != "random":
            args += ["--segmentation", side]
        assert main(args) == 0


# ---------------------------------------------------------------------------
# export-plans


def test_export_plans_epoch_zero_proportional(tmp_path):
    data = _gen(tmp_path, kind="k-parts", count=3, seed=8)
    out = tmp_path / "plans"
    assert main(["export-plans", "--dataset", str(data),
                 "--segmentation", str(data.with_suffix(".labels.sten")),
                 "--plan-epochs", "0,50,100", "--epochs", "100",
                 "--seed", "2", "--out", str(out)]) == 0
    lines = (out / "plans.csv").read_text().splitlines()
    header = lines[0].split(",")
    n_parts = sum(1 for h in header if h.startswith("num_mask_"))
    rows = [line.split(",") for line in lines[1:]]

    images, labels = read_array(data), read_array(data.with_suffix(".labels.sten"))
    from partmask.datasets import majority_patch_labels
    totals = {}
    for row in rows:
        epoch, image_id, a = int(row[0]), int(row[1]), float(row[2])
        quotas = [int(v) for v in row[3:3 + n_parts]]
        indices = [int(v) for v in row[-1].split(";")] if row[-1] else []
        assert len(indices) == sum(quotas)
        totals.setdefault(image_id, set()).add(sum(quotas))
        if epoch == 0:
            assert a == 0.0
            grid = majority_patch_labels(labels[image_id, 0], 4)
            counts = np.bincount(grid.ravel().astype(np.int64), minlength=n_parts)
            reals = 0.75 * counts
            base = np.floor(reals)
            deficit = round(0.75 * grid.size) - int(base.sum())
            order = sorted(range(n_parts), key=lambda i: (-(reals[i] - base[i]), i))
            expect = base.astype(int)
            for i in order[:deficit]:
                expect[i] += 1
            assert quotas == expect.tolist()
    # conservation across epochs for each image
    assert all(len(v) == 1 for v in totals.values())


def test_export_plans_final_epoch_prefix_structure(tmp_path):
    data = _gen(tmp_path, kind="k-parts", count=4, seed=8)
    out = tmp_path / "plans2"
    assert main(["export-plans", "--dataset", str(data),
                 "--segmentation", str(data.with_suffix(".labels.sten")),
                 "--plan-epochs", "100", "--epochs", "100",
                 "--seed", "2", "--out", str(out)]) == 0
    lines = (out / "plans.csv").read_text().splitlines()
    n_parts = sum(1 for h in lines[0].split(",") if h.startswith("num_mask_"))

    from partmask.datasets import majority_patch_labels
    labels = read_array(data.with_suffix(".labels.sten"))
    from partmask.training import _plan_rng
    root = Rng(2)
    for line in lines[1:]:
        row = line.split(",")
        image_id = int(row[1])
        quotas = np.array([int(v) for v in row[3:3 + n_parts]])
        grid = majority_patch_labels(labels[image_id, 0], 4)
        counts = np.bincount(grid.ravel().astype(np.int64), minlength=n_parts)
        order = _plan_rng(root, 100, image_id).permutation(n_parts)
        # fully masked parts must form a prefix of the shuffled order
        # (allowing one partial boundary part, then zeros)
        state = "full"
        for part in order:
            if counts[part] == 0:
                continue
            if state == "full" and quotas[part] == counts[part]:
                continue
            if state == "full":
                state = "after"
                continue
            assert quotas[part] == 0
    assert len(lines) == 1 + 4


# ---------------------------------------------------------------------------
# determinism of full runs


def test_rerun_with_resolved_config_is_byte_identical(tmp_path):
    data = _gen(tmp_path, count=4, seed=2)
    out_a = tmp_path / "a"
    assert main(["train-parts", "--dataset", str(data), "--epochs", "2", "--n-parts", "3",
                 "--blur-kernel", "3", "--batch-size", "2", "--seed", "1",
                 "--out", str(out_a)]) == 0
    out_b = tmp_path / "b"
    assert main(["train-parts", "--config", str(out_a / "config.resolved"),
                 "--out", str(out_b)]) == 0
    assert (out_a / "metrics.csv").read_bytes() == (out_b / "metrics.csv").read_bytes()
    assert (out_a / "checkpoint.smae").read_bytes() == (out_b / "checkpoint.smae").read_bytes()


def test_pretrain_rerun_with_resolved_config(tmp_path):
    data = _gen(tmp_path, kind="k-parts", count=4, seed=6)
    out_a = tmp_path / "pa"
    assert main(["pretrain", "--dataset", str(data),
                 "--segmentation", str(data.with_suffix(".labels.sten")),
                 "--epochs", "2", "--batch-size", "2", "--seed", "4",
                 "--out", str(out_a)]) == 0
    out_b = tmp_path / "pb"
    assert main(["pretrain", "--config", str(out_a / "config.resolved"),
                 "--out", str(out_b)]) == 0
    assert (out_a / "metrics.csv").read_bytes() == (out_b / "metrics.csv").read_bytes()
    assert (out_a / "checkpoint.smae").read_bytes() == (out_b / "checkpoint.smae").read_bytes()


# ---------------------------------------------------------------------------
# report and helpers


def test_report_command(tmp_path, capsys):
    data = _gen(tmp_path, count=2, seed=2)
    out = tmp_path / "parts"
    main(["train-parts", "--dataset", str(data), "--epochs", "1", "--n-parts", "3",
          "--blur-kernel", "3", "--seed", "1", "--out", str(out)])
    capsys.readouterr()
    assert main(["report", str(out / "metrics.csv")]) == 0
    captured = capsys.readouterr().out
    assert "recon_loss" in captured


def test_foreground_iou_perfect_and_permuted():
    gt = np.array([[0, 1], [2, 0]])
    pred_same = np.array([[0, 1], [2, 0]])
    assert foreground_iou(pred_same, gt, 3) == 1.0
    pred_swapped = np.array([[1, 2], [0, 1]])  # parts renamed, same regions
    assert foreground_iou(pred_swapped, gt, 3) == 1.0
    pred_bad = np.zeros((2, 2), dtype=int)
    assert foreground_iou(pred_bad, gt, 3) < 0.5
