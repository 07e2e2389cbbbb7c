import json
import math

import numpy as np
import pytest
import torch

from scarseg.augment import AugmentConfig
from scarseg.errors import ConfigError
from scarseg.networks import NetworkSpec2D, NetworkSpec3D
from scarseg.perturb import PerturbationConfig
from scarseg.preprocess import PreprocessConfig
from scarseg.synthgen import PhantomConfig, generate_phantoms
from scarseg.training import (TrainConfig, dice_loss, lr_at, supervised_loss,
                              train_2d, train_cascade)


def onehot2(fg: torch.Tensor) -> torch.Tensor:
    """(H, W) binary -> (1, 2, H, W) background/foreground stack, float64."""
    fg = fg.double()
    return torch.stack([1.0 - fg, fg])[None]


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(lr_2d=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(lr_schedule="cosine")


# --- dice loss -----------------------------------------------------------------


def test_dice_perfect_match():
    g = torch.zeros(6, 6)
    g[1:4, 2:5] = 1
    loss = dice_loss(onehot2(g), onehot2(g))
    assert loss.item() == pytest.approx(-1.0, abs=1e-12)


def test_dice_zero_overlap():
    g = torch.zeros(6, 6)
    g[0, 0] = 1
    p = torch.zeros(1, 2, 6, 6)
    p[0, 0] = 1.0  # all-background prediction
    loss = dice_loss(p, onehot2(g))
    assert abs(loss.item()) < 1e-4


def test_dice_hand_value():
    # p = (1, 0.5, 0, 0), g = (1, 1, 0, 0): -2*1.5 / (1.25 + 2) = -0.923...
    p_fg = torch.tensor([[1.0, 0.5], [0.0, 0.0]])
    g_fg = torch.tensor([[1.0, 1.0], [0.0, 0.0]])
    loss = dice_loss(onehot2(p_fg), onehot2(g_fg))
    assert loss.item() == pytest.approx(-2 * 1.5 / (1.25 + 2), abs=1e-4)


def test_dice_range_and_skip_absent_class():
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = torch.from_numpy(rng.random((2, 3, 4, 4)))
        p = p / p.sum(dim=1, keepdim=True)
        g_lab = torch.from_numpy(rng.integers(0, 2, (2, 4, 4)))  # class 2 absent
        g = torch.nn.functional.one_hot(g_lab, 3).movedim(-1, 1).double()
        loss = dice_loss(p, g)
        assert -1.0 <= loss.item() <= 0.0


def test_dice_all_background_batch():
    p = torch.rand(1, 2, 4, 4, requires_grad=True)
    g = torch.zeros(1, 2, 4, 4)
    g[:, 0] = 1
    loss = dice_loss(p, g)
    assert loss.item() == 0.0
    loss.backward()  # still connected to the graph


def test_dice_permutation_invariant():
    rng = np.random.default_rng(1)
    p_fg = torch.from_numpy(rng.random((5, 5)))
    g_fg = torch.from_numpy((rng.random((5, 5)) < 0.4).astype(np.float64))
    base = dice_loss(onehot2(p_fg), onehot2(g_fg)).item()
    perm = rng.permutation(25)
    p2 = p_fg.flatten()[perm].reshape(5, 5)
    g2 = g_fg.flatten()[perm].reshape(5, 5)
    assert dice_loss(onehot2(p2), onehot2(g2)).item() == pytest.approx(base, abs=1e-12)


def central_difference_grad(p: np.ndarray, g: np.ndarray, h: float = 1e-6) -> np.ndarray:
    def f(arr):
        t = torch.from_numpy(arr)
        return dice_loss(onehot2(t), onehot2(torch.from_numpy(g))).item()

    grad = np.zeros_like(p)
    for idx in np.ndindex(p.shape):
        plus = p.copy()
        minus = p.copy()
        plus[idx] += h
        minus[idx] -= h
        grad[idx] = (f(plus) - f(minus)) / (2 * h)
    return grad


def test_dice_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    for _ in range(3):
        p = rng.uniform(0.01, 0.99, (8, 8))
        g = (rng.random((8, 8)) < 0.5).astype(np.float64)
        g.flat[int(rng.integers(0, 64))] = 1.0  # ensure nonempty
        leaf = torch.from_numpy(p).requires_grad_(True)
        loss = dice_loss(onehot2(leaf), onehot2(torch.from_numpy(g)))
        loss.backward()
        analytic = leaf.grad.numpy()
        numeric = central_difference_grad(p, g)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
        assert np.max(np.abs(analytic - numeric) / denom) <= 1e-4


# --- deep supervision ------------------------------------------------------------


def big_logits_from_labels(labels: torch.Tensor, num_classes: int = 2,
                           scale: float = 30.0) -> torch.Tensor:
    onehot = torch.nn.functional.one_hot(labels.long(), num_classes)
    return (onehot.movedim(-1, 1).double() * 2 - 1) * scale


def test_supervised_loss_main_only():
    gt = torch.zeros(1, 8, 8, dtype=torch.long)
    gt[0, 2:5, 2:5] = 1
    main = big_logits_from_labels(gt)
    rubbish = torch.randn(1, 2, 4, 4, dtype=torch.float64)
    loss_weighted = supervised_loss([main, rubbish], gt, [1.0, 0.0])
    loss_main = supervised_loss([main], gt, [1.0])
    assert loss_weighted.item() == pytest.approx(loss_main.item(), abs=1e-12)


def test_supervised_loss_perfect_everywhere():
    gt = torch.zeros(1, 8, 8, dtype=torch.long)
    gt[0, 0:4, 0:4] = 1
    outs = [big_logits_from_labels(gt),
            big_logits_from_labels(gt[:, ::2, ::2]),
            big_logits_from_labels(gt[:, ::4, ::4])]
    loss = supervised_loss(outs, gt, [4.0, 2.0, 1.0])
    assert loss.item() == pytest.approx(-1.0, abs=1e-6)


def test_supervised_loss_weighted_sum_arithmetic():
    # per-level losses engineered to (-1, -0.5, 0); total = -(4 + 1)/7
    gt = torch.zeros(1, 4, 4, dtype=torch.long)
    gt[0, 0, 0] = 1
    main = big_logits_from_labels(gt)

    t = 2 - math.sqrt(3.0)  # single-voxel prob giving dice exactly -1/2
    p1 = torch.full((2, 2), 1e-12, dtype=torch.float64)
    p1[0, 0] = t
    lvl1 = torch.stack([torch.log(1 - p1), torch.log(p1)])[None]

    p2 = torch.full((1, 1), 1e-12, dtype=torch.float64)
    lvl2 = torch.stack([torch.log(1 - p2), torch.log(p2)])[None]

    loss = supervised_loss([main, lvl1, lvl2], gt, [4.0, 2.0, 1.0])
    assert loss.item() == pytest.approx(-(4.0 + 1.0) / 7.0, abs=1e-3)


def test_supervised_loss_weight_mismatch():
    gt = torch.zeros(1, 4, 4, dtype=torch.long)
    with pytest.raises(ConfigError):
        supervised_loss([big_logits_from_labels(gt)], gt, [1.0, 1.0])


# --- learning rate ---------------------------------------------------------------


def test_lr_schedule():
    cfg = TrainConfig(epochs=750)
    assert lr_at(0, cfg, 0.01) == 0.01
    assert lr_at(749, cfg, 0.01) > 0
    assert lr_at(375, cfg, 0.01) == pytest.approx(0.01 * 0.5 ** 0.9, abs=1e-12)
    const = TrainConfig(epochs=750, lr_schedule="constant")
    assert lr_at(600, const, 0.005) == 0.005


# --- the loops (tiny budgets) ------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("tinyrun")
    manifest = generate_phantoms(PhantomConfig(count=3, seed=31,
                                               fraction_healthy=0.0), root / "data")
    pre = PreprocessConfig.emidec()
    spec2d = NetworkSpec2D(out_channels=5, levels=3, base_width=8)
    spec3d = NetworkSpec3D(in_channels=3, out_channels=5, levels=2, base_width=8)
    cfg = TrainConfig(epochs=2, steps_per_epoch=2, batch_size_2d=4, batch_size_3d=1,
                      seed=7, checkpoint_interval=0)
    ids = manifest.case_ids
    ck2d = train_2d(manifest, ids, spec2d, pre, AugmentConfig.none(), cfg,
                    root / "out2d")
    return root, manifest, pre, spec2d, spec3d, cfg, ck2d


def test_train_2d_writes_log_and_checkpoint(tiny_run):
    root, *_ , ck2d = tiny_run
    assert ck2d.exists()
    lines = (root / "out2d" / "train2d_log.jsonl").read_text().splitlines()
    assert len(lines) == 2
    rec = json.loads(lines[0])
    assert set(rec) == {"epoch", "mean_loss", "lr"}
    assert math.isfinite(rec["mean_loss"])


def test_train_2d_deterministic(tiny_run):
    root, manifest, pre, spec2d, _, cfg, _ = tiny_run
    a = train_2d(manifest, manifest.case_ids, spec2d, pre, AugmentConfig.none(),
                 cfg, root / "det_a")
    b = train_2d(manifest, manifest.case_ids, spec2d, pre, AugmentConfig.none(),
                 cfg, root / "det_b")
    la = json.loads((root / "det_a" / "train2d_log.jsonl").read_text().splitlines()[0])
    lb = json.loads((root / "det_b" / "train2d_log.jsonl").read_text().splitlines()[0])
    assert la["mean_loss"] == lb["mean_loss"]


def test_train_2d_empty_set(tiny_run):
    root, manifest, pre, spec2d, _, cfg, _ = tiny_run
    with pytest.raises(ConfigError):
        train_2d(manifest, [], spec2d, pre, AugmentConfig.none(), cfg, root / "x")


def test_cascade_gate_and_frozen_2d(tiny_run):
    root, manifest, pre, spec2d, spec3d, cfg, ck2d = tiny_run
    perturb = PerturbationConfig(enable_after_epoch=1)
    before = torch.load(ck2d, map_location="cpu", weights_only=False)["state_dict"]

    ck3d = train_cascade(manifest, manifest.case_ids, ck2d, spec3d, pre,
                         AugmentConfig.none(), AugmentConfig.none(), perturb, cfg,
                         root / "out3d")
    assert ck3d.exists()

    after = torch.load(ck2d, map_location="cpu", weights_only=False)["state_dict"]
    for k in before:
        assert torch.equal(before[k], after[k])

    lines = [json.loads(l) for l in
             (root / "out3d" / "train3d_log.jsonl").read_text().splitlines()]
    assert len(lines) == 2
    # epoch 0 is below the gate: only 'none' operators
    counts0 = lines[0]["perturbation_operator_counts"]
    assert counts0["none"] == cfg.steps_per_epoch * cfg.batch_size_3d
    assert sum(v for k, v in counts0.items()
               if k not in ("none", "elevated_augment")) == 0


def test_cascade_vanilla_mode(tiny_run):
    root, manifest, pre, spec2d, spec3d, cfg, ck2d = tiny_run
    perturb = PerturbationConfig(enable_after_epoch=0, p_delete_class=0.5,
                                 p_zero_mask=0.5, p_fake_scar=0.0, p_fake_mvo=0.0)
    train_cascade(manifest, manifest.case_ids, ck2d, spec3d, pre,
                  AugmentConfig.none(), AugmentConfig.none(), perturb, cfg,
                  root / "out3dv", vanilla=True)
    lines = [json.loads(l) for l in
             (root / "out3dv" / "train3d_vanilla_log.jsonl").read_text().splitlines()]
    for rec in lines:
        counts = rec["perturbation_operator_counts"]
        assert counts["none"] == cfg.steps_per_epoch * cfg.batch_size_3d
        assert counts["elevated_augment"] == 0


def test_cascade_channel_mismatch(tiny_run):
    root, manifest, pre, spec2d, _, cfg, ck2d = tiny_run
    bad_spec = NetworkSpec3D(in_channels=2, out_channels=5, levels=2, base_width=8)
    with pytest.raises(ConfigError):
        train_cascade(manifest, manifest.case_ids, ck2d, bad_spec, pre,
                      AugmentConfig.none(), AugmentConfig.none(),
                      PerturbationConfig(), cfg, root / "bad")
