"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s`. The error-correction
experiment (criteria 7 and 8) trains real networks on synthetic phantoms and
dominates the runtime; everything is CPU-sized but expect tens of minutes.
"""

import math
import time

import numpy as np
import pytest
import torch

from oracles import allpairs_hausdorff, flood_fill_components, set_avd, set_dsc
from scarseg.augment import AugmentConfig
from scarseg.data import LabelMask, Volume, load_case, save_raw_case, DatasetManifest, ManifestEntry
from scarseg.evaluation import aggregate_fold_means, avd, dsc, hausdorff_mm
from scarseg.inference import _forward_3d, predict_2d_stack, predict_cascade, robustness_probe
from scarseg.networks import (NetworkSpec2D, NetworkSpec3D, build_network,
                              load_checkpoint)
from scarseg.perturb import (PerturbationConfig, add_fake_mvo, add_fake_scar,
                             delete_class_slices, percentile_nearest_rank,
                             sample_perturbation)
from scarseg.preprocess import PreprocessConfig, preprocess_case
from scarseg.synthgen import PhantomConfig, generate_phantoms
from scarseg.training import TrainConfig, dice_loss, load_training_cases, train_2d, train_cascade

SPACING = (10.0, 1.458, 1.458)

pytestmark = pytest.mark.acceptance


def ok(n: int, message: str) -> None:
    print(f"\nACCEPTANCE {n:02d} PASS: {message}")


# -----------------------------------------------------------------------------
# 1. metric-oracle equivalence


def test_criterion_01_metric_oracle_equivalence():
    start = time.time()
    rng = np.random.default_rng(20240501)
    for _ in range(50):
        p = rng.random((4, 8, 8)) < rng.uniform(0.1, 0.5)
        g = rng.random((4, 8, 8)) < rng.uniform(0.1, 0.5)
        assert dsc(p, g) == set_dsc(p, g)
        assert avd(p, g, SPACING) == set_avd(p, g, SPACING)
        if p.any() and g.any():
            assert abs(hausdorff_mm(p, g, SPACING) -
                       allpairs_hausdorff(p, g, SPACING)) <= 1e-9
    elapsed = time.time() - start
    assert elapsed < 10.0
    ok(1, f"dsc/avd exact and hausdorff within 1e-9 of brute force on 50 mask "
          f"pairs ({elapsed:.1f}s)")


# -----------------------------------------------------------------------------
# 2. hand-value checks


def test_criterion_02_metric_hand_values():
    g = np.zeros((1, 2, 2), bool)
    g[0, 0, 0] = g[0, 0, 1] = True
    p = np.zeros((1, 2, 2), bool)
    p[0, 0, 0] = True
    assert dsc(p, g) == 2.0 / 3.0

    a = np.zeros((2, 5, 6), bool)
    b = np.zeros((2, 5, 6), bool)
    a[0, 0, 0] = True
    b[0, 3, 4] = True
    assert abs(hausdorff_mm(a, b, (10.0, 1.0, 1.0)) - 5.0) <= 1e-9

    p10 = np.zeros((2, 4, 4), bool)
    g7 = np.zeros((2, 4, 4), bool)
    p10.flat[:10] = True
    g7.flat[:7] = True
    assert abs(avd(p10, g7, SPACING) - 3 * (10.0 * 1.458 * 1.458)) <= 1e-9
    ok(2, "dsc 2/3, hausdorff 5.0 mm, avd 63.77 mm^3 all exact")


# -----------------------------------------------------------------------------
# 3. dice-loss gradient check


def _loss_value(p: np.ndarray, g: np.ndarray) -> float:
    t = torch.from_numpy(p)
    probs = torch.stack([1.0 - t, t])[None]
    gt = torch.from_numpy(g)
    onehot = torch.stack([1.0 - gt, gt])[None]
    return dice_loss(probs, onehot).item()


def test_criterion_03_dice_loss_gradient():
    start = time.time()
    rng = np.random.default_rng(777)
    h = 1e-6
    for _ in range(20):
        p = rng.uniform(0.01, 0.99, (8, 8))
        g = (rng.random((8, 8)) < 0.5).astype(np.float64)
        g.flat[int(rng.integers(0, 64))] = 1.0

        leaf = torch.from_numpy(p).requires_grad_(True)
        probs = torch.stack([1.0 - leaf, leaf])[None]
        gt = torch.from_numpy(g)
        onehot = torch.stack([1.0 - gt, gt])[None]
        dice_loss(probs, onehot).backward()
        analytic = leaf.grad.numpy()

        for idx in np.ndindex(p.shape):
            plus, minus = p.copy(), p.copy()
            plus[idx] += h
            minus[idx] -= h
            numeric = (_loss_value(plus, g) - _loss_value(minus, g)) / (2 * h)
            denom = max(abs(analytic[idx]), abs(numeric))
            if denom < 1e-12:
                continue
            assert abs(analytic[idx] - numeric) / denom <= 1e-4
    elapsed = time.time() - start
    assert elapsed < 30.0
    ok(3, f"analytic dice-loss gradient matches central differences on 20 "
          f"instances ({elapsed:.1f}s)")


# -----------------------------------------------------------------------------
# 4. perturbation operator distribution


def _compact_sample():
    """A small stack where every operator has something to act on."""
    gt = np.zeros((7, 32, 32), np.uint8)
    yy, xx = np.mgrid[0:32, 0:32]
    r = np.hypot(yy - 16, xx - 16)
    for z in range(7):
        gt[z][(r > 5) & (r <= 11)] = 2
    gt[2][(r > 5) & (r <= 8) & (xx > 16)] = 3
    gt[3][(r > 5) & (r <= 8) & (xx > 16)] = 3
    gt[3][(r > 5.5) & (r <= 6.5) & (xx > 20)] = 4
    rng = np.random.default_rng(5)
    image = gt.astype(np.float32) * 0.2 + rng.normal(0, 0.05, gt.shape).astype(np.float32)
    channels = np.stack([(gt == 3), (gt == 4)]).astype(np.uint8)
    return image, gt, channels


def test_criterion_04_perturbation_distribution():
    start = time.time()
    image, gt, channels = _compact_sample()
    cfg = PerturbationConfig()
    rng = np.random.default_rng(31337)

    for _ in range(1000):
        _, record = sample_perturbation(channels, image, gt, cfg, epoch=99, rng=rng)
        assert record.operator == "none"

    counts = {op: 0 for op in ("delete_class", "zero_mask", "fake_scar",
                               "fake_mvo", "none")}
    n = 100_000
    for _ in range(n):
        _, record = sample_perturbation(channels, image, gt, cfg, epoch=100, rng=rng)
        counts[record.operator] += 1
    expected = {"delete_class": 0.10, "zero_mask": 0.10, "fake_scar": 0.10,
                "fake_mvo": 0.02, "none": 0.68}
    for op, p in expected.items():
        assert abs(counts[op] / n - p) < 0.01, (op, counts[op] / n)
    elapsed = time.time() - start
    assert elapsed < 60.0
    freqs = {op: round(counts[op] / n, 4) for op in counts}
    ok(4, f"operator frequencies {freqs} within 1% of "
          f"(0.10, 0.10, 0.10, 0.02, 0.68); gate epoch respected ({elapsed:.1f}s)")


# -----------------------------------------------------------------------------
# 5. containment and locality, with oracles


def _oracle_largest(candidates: np.ndarray) -> set:
    comps = flood_fill_components(candidates, 8)
    best_size = max(len(c) for c in comps)
    tied = [c for c in comps if len(c) == best_size]
    return min(tied, key=lambda c: min(y * candidates.shape[1] + x for y, x in c))


def test_criterion_05_perturbation_containment_locality():
    cfg = PerturbationConfig()
    phantoms = PhantomConfig(count=8, seed=90, fraction_healthy=0.25)
    from scarseg.synthgen import make_phantom

    cases = [make_phantom(phantoms, i) for i in range(phantoms.count)]
    rng = np.random.default_rng(424242)
    applications = 0
    while applications < 1000:
        volume, mask = cases[int(rng.integers(len(cases)))]
        channels = np.stack([(mask.labels == 3), (mask.labels == 4)]).astype(np.uint8)
        op = ("fake_scar", "fake_mvo", "delete_class")[applications % 3]

        if op == "fake_scar":
            out, record = add_fake_scar(channels, volume.data, mask.labels, cfg, rng)
            if record.voxels_changed:
                k = record.slice_index
                added = (out[0, k] > 0) & (channels[0, k] == 0)
                assert (mask.labels[k][added] == 2).all()  # inside GT myocardium
                # recompute candidates and compare against the flood-fill oracle
                myo = mask.labels[k] == 2
                vals = sorted(volume.data[k][myo])
                rank = math.ceil(cfg.scar_percentile * len(vals) / 100.0)
                threshold = vals[rank - 1]
                assert threshold == percentile_nearest_rank(
                    volume.data[k][myo], cfg.scar_percentile)
                candidates = myo & (volume.data[k] > threshold)
                selected = {tuple(p) for p in
                            np.argwhere((out[0, k] > 0) & (channels[0, k] == 0))}
                assert selected == _oracle_largest(candidates)
        elif op == "fake_mvo":
            out, record = add_fake_mvo(channels, cfg, rng)
            new_mvo = (out[1] > 0) & (channels[1] == 0)
            assert (channels[0][new_mvo] == 1).all()  # was predicted scar
        else:
            out, record = delete_class_slices(channels, rng,
                                              active_classes=cfg.active_classes)

        if record.slice_index is not None:
            for z in range(channels.shape[1]):
                if z != record.slice_index:
                    assert (out[:, z] == channels[:, z]).all()
        applications += 1
    ok(5, "1000 applications: containment, single-slice locality, flood-fill "
          "largest component and nearest-rank percentile all hold")


# -----------------------------------------------------------------------------
# 6. network shape contracts


def test_criterion_06_network_shape_contracts():
    net2d = build_network(NetworkSpec2D.emidec(), seed=0)
    net2d.train()
    main, aux = net2d(torch.randn(32, 1, 96, 96))
    assert tuple(main.shape) == (32, 5, 96, 96)
    assert [tuple(a.shape) for a in aux] == [(32, 5, 48, 48), (32, 5, 24, 24)]

    spec3d = NetworkSpec3D(in_channels=3, out_channels=5, levels=4, base_width=16)
    net3d = build_network(spec3d, seed=0)
    for d in (5, 7, 11):
        net3d.eval()
        with torch.no_grad():
            out = net3d(torch.randn(4, 3, d, 96, 96))
        assert tuple(out.shape) == (4, 5, d, 96, 96)
    net3d.train()
    main, aux = net3d(torch.randn(1, 3, 5, 96, 96))
    assert [tuple(a.shape) for a in aux] == [(1, 5, 5, 48, 48), (1, 5, 5, 24, 24)]
    ok(6, "2D (32,1,96,96)->(32,5,96,96); 3D (4,3,D,96,96)->(4,5,D,96,96) for "
          "D in {5,7,11}; deep-supervision maps halve in-plane only")


# -----------------------------------------------------------------------------
# 7. overfit smoke test


@pytest.fixture(scope="module")
def four_slice_case(tmp_path_factory):
    root = tmp_path_factory.mktemp("overfit")
    from scarseg.synthgen import make_phantom

    volume, mask = make_phantom(PhantomConfig(count=2, seed=55,
                                              fraction_healthy=0.0), 0)
    scar_slices = np.flatnonzero((mask.labels >= 3).any(axis=(1, 2)))
    z0 = max(0, min(int(scar_slices[0]), volume.num_slices - 4))
    sub = Volume.from_array(volume.data[z0:z0 + 4], volume.spacing, "overfit_case")
    sub_mask = LabelMask(mask.labels[z0:z0 + 4], mask.scheme)
    entry = save_raw_case(root, "overfit_case", sub, sub_mask)
    manifest = DatasetManifest([entry], mask.scheme)
    return root, manifest


def test_criterion_07_overfit_smoke(four_slice_case):
    start = time.time()
    root, manifest = four_slice_case
    pre = PreprocessConfig.emidec()
    spec = NetworkSpec2D(out_channels=5, levels=3, base_width=8)
    cfg = TrainConfig(epochs=200, steps_per_epoch=5, batch_size_2d=4, seed=13,
                      checkpoint_interval=0)
    ckpt = train_2d(manifest, manifest.case_ids, spec, pre, AugmentConfig.none(),
                    cfg, root / "run")
    net, _ = load_checkpoint(ckpt)

    (volume, mask), = load_training_cases(manifest, manifest.case_ids, pre)
    with torch.no_grad():
        logits = net(torch.from_numpy(volume.data).unsqueeze(1))
    pred = logits.argmax(dim=1).numpy()
    scores = [dsc(pred == c, mask.labels == c)
              for c in mask.scheme.foreground_indices
              if (mask.labels == c).any()]
    mean_dice = float(np.mean(scores))
    elapsed = time.time() - start
    assert elapsed < 600.0
    assert mean_dice >= 0.95
    ok(7, f"4-slice overfit reaches mean foreground dice {mean_dice:.3f} "
          f"within 200 epochs ({elapsed:.0f}s)")


# -----------------------------------------------------------------------------
# 8. the error-correction experiment


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    """40 phantoms; 2D then perturbed + vanilla cascades, identical budgets."""
    root = tmp_path_factory.mktemp("experiment")
    t0 = time.time()
    manifest = generate_phantoms(PhantomConfig(count=40, seed=2024), root / "data")
    train_ids = manifest.case_ids[:30]   # includes the 13 healthy cases
    held_ids = manifest.case_ids[30:]    # all infarcted

    pre = PreprocessConfig.emidec()
    spec2d = NetworkSpec2D(out_channels=5, levels=4, base_width=16)
    spec3d = NetworkSpec3D(in_channels=3, out_channels=5, levels=3, base_width=8)
    cfg = TrainConfig(epochs=150, steps_per_epoch=8, batch_size_2d=8,
                      batch_size_3d=2, seed=11, checkpoint_interval=0)
    perturb = PerturbationConfig(enable_after_epoch=20)

    ck2d = train_2d(manifest, train_ids, spec2d, pre, AugmentConfig.standard(),
                    cfg, root / "run2d")
    ck3d = train_cascade(manifest, train_ids, ck2d, spec3d, pre,
                         AugmentConfig.standard(), AugmentConfig.elevated(),
                         perturb, cfg, root / "run3d")
    ck3d_v = train_cascade(manifest, train_ids, ck2d, spec3d, pre,
                           AugmentConfig.standard(), AugmentConfig.elevated(),
                           perturb, cfg, root / "run3d_vanilla", vanilla=True)
    elapsed = time.time() - t0
    assert elapsed < 8 * 3600.0

    net2d, _ = load_checkpoint(ck2d)
    net3d, _ = load_checkpoint(ck3d)
    net3d_v, _ = load_checkpoint(ck3d_v)
    return {"manifest": manifest, "held_ids": held_ids, "pre": pre,
            "net2d": net2d, "net3d": net3d, "net3d_vanilla": net3d_v,
            "train_seconds": elapsed}


def _held_out_cases(exp):
    for i, cid in enumerate(exp["held_ids"]):
        entry = exp["manifest"].entry(cid)
        volume, gt = load_case(entry, exp["manifest"].scheme)
        vol_p, gt_p, _ = preprocess_case(volume, gt, exp["pre"], entry.lv_center)
        _, channels = predict_2d_stack(exp["net2d"], vol_p, exp["manifest"].scheme)
        deleted, record = delete_class_slices(
            channels, np.random.default_rng(1000 + i), classes=("scar",))
        yield vol_p, gt_p, channels, deleted, record


def test_criterion_08a_robustness_under_slice_deletion(experiment):
    scheme = experiment["manifest"].scheme
    scores = []
    for vol_p, _, channels, deleted, record in _held_out_cases(experiment):
        assert record.voxels_changed > 0, "2D net predicted no scar to delete"
        probe = robustness_probe(experiment["net3d"], vol_p, channels,
                                 lambda ch, d=deleted: d, scheme)
        scores.append(probe["scar"])
    mean_scar = float(np.mean(scores))
    assert mean_scar >= 0.85, scores
    ok(8, f"(a) perturbation-trained cascade scar dice between deleted and "
          f"clean inputs: mean {mean_scar:.3f} >= 0.85 "
          f"(training took {experiment['train_seconds']:.0f}s)")


def test_criterion_08b_perturbed_beats_vanilla(experiment):
    dsc_p, dsc_v = [], []
    for vol_p, gt_p, _, deleted, _ in _held_out_cases(experiment):
        for net, acc in ((experiment["net3d"], dsc_p),
                         (experiment["net3d_vanilla"], dsc_v)):
            probs = _forward_3d(net, vol_p.data, deleted, "cpu")
            labels = probs.argmax(axis=0)
            acc.append(dsc(labels == 3, gt_p.labels == 3))
    mean_p, mean_v = float(np.mean(dsc_p)), float(np.mean(dsc_v))
    assert mean_p >= mean_v, (dsc_p, dsc_v)
    ok(8, f"(b) on the same deleted inputs, perturbation-trained scar DSC "
          f"{mean_p:.3f} >= vanilla {mean_v:.3f}")


# -----------------------------------------------------------------------------
# 9. cross-validation bookkeeping


def test_criterion_09_crossval_bookkeeping():
    mean, sd = aggregate_fold_means([76.54, 70.64, 79.75, 77.70, 75.54])
    assert abs(mean - 76.03) <= 0.01
    assert abs(sd - 3.04) <= 0.01
    ok(9, f"stub fold means aggregate to mean {mean:.2f}, population SD {sd:.2f}")


# -----------------------------------------------------------------------------
# 10. determinism


def test_criterion_10_determinism(tmp_path, four_slice_case):
    import json

    root, manifest = four_slice_case
    pre = PreprocessConfig.emidec()
    spec = NetworkSpec2D(out_channels=5, levels=3, base_width=8)
    cfg = TrainConfig(epochs=1, steps_per_epoch=3, batch_size_2d=2, seed=99,
                      checkpoint_interval=0)
    losses = []
    for name in ("a", "b"):
        train_2d(manifest, manifest.case_ids, spec, pre, AugmentConfig.standard(),
                 cfg, tmp_path / name)
        line = (tmp_path / name / "train2d_log.jsonl").read_text().splitlines()[0]
        losses.append(json.loads(line)["mean_loss"])
    assert losses[0] == losses[1]

    net2d = build_network(spec, seed=1)
    net3d = build_network(NetworkSpec3D(in_channels=3, out_channels=5, levels=2,
                                        base_width=8), seed=2)
    entry = manifest.entries[0]
    volume, _ = load_case(entry, manifest.scheme)
    scheme = manifest.scheme
    a = predict_cascade(net2d, net3d, volume, scheme, pre)
    b = predict_cascade(net2d, net3d, volume, scheme, pre)
    assert (a.labels == b.labels).all()
    ok(10, f"bit-identical first-epoch loss ({losses[0]:.6f}) and prediction "
           f"masks across repeated runs")
