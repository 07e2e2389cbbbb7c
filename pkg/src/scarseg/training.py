"""Loss functions, schedules and the two training loops.

Stage one fits the 2D slice segmenter. Stage two freezes it and fits the 3D
refiner on image volumes concatenated with the (possibly perturbed) 2D mask
channels; the loss target is always the clean ground truth. Sampling is
iteration-based: an epoch is a fixed number of random draws with
replacement, so epoch length does not depend on dataset size.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .augment import AugmentConfig, augment_sample
from .data import DatasetManifest, LabelMask, Volume, load_case
from .errors import ConfigError, NonFiniteLossError
from .networks import (NetworkSpec2D, NetworkSpec3D, build_network, load_checkpoint,
                       save_checkpoint)
from .perturb import (CHANNEL_NAMES, PerturbationConfig, PerturbationRecord,
                      sample_perturbation)
from .preprocess import PreprocessConfig, preprocess_case, resize_z_nearest, select_subvolume


@dataclass
class TrainConfig:
    epochs: int = 750
    batch_size_2d: int = 32
    batch_size_3d: int = 4
    momentum: float = 0.99            # Nesterov momentum
    lr_2d: float = 0.005
    lr_3d: float = 0.01
    lr_schedule: str = "poly"         # poly | constant
    poly_exponent: float = 0.9
    deep_supervision_weights: tuple[float, ...] = (4.0, 2.0, 1.0)
    steps_per_epoch: int = 250
    seed: int = 12345
    device: str = "cpu"
    checkpoint_interval: int = 50
    p_elevated_augment: float = 0.10  # exclusive alternative to the mask operators
    soft_mask_channels: bool = False  # feed 2D probabilities instead of hard masks

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.lr_2d <= 0 or self.lr_3d <= 0:
            raise ConfigError("learning rates must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr_schedule not in ("poly", "constant"):
            raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")
        if not 0.0 <= self.p_elevated_augment <= 1.0:
            raise ConfigError("p_elevated_augment outside [0, 1]")


def lr_at(epoch: int, config: TrainConfig, base_lr: float) -> float:
    """Learning rate for an epoch: polynomial decay from base_lr, or constant."""
    if config.lr_schedule == "constant":
        return base_lr
    return base_lr * (1.0 - epoch / config.epochs) ** config.poly_exponent


def dice_loss(probs: torch.Tensor, target_onehot: torch.Tensor,
              eps: float = 1e-5) -> torch.Tensor:
    """Soft Dice loss in [-1, 0], averaged over foreground classes.

    probs holds per-class probabilities and target_onehot the matching
    binary grids, both (B, C, *spatial). Classes with no foreground in the
    batch are skipped (their overlap is undefined); eps stabilizes the ratio
    and keeps the perfect-match value at exactly -1.
    """
    if probs.shape != target_onehot.shape:
        raise ValueError(f"shape mismatch {tuple(probs.shape)} vs "
                         f"{tuple(target_onehot.shape)}")
    reduce_dims = (0,) + tuple(range(2, probs.ndim))
    inter = (probs * target_onehot).sum(dim=reduce_dims)
    denom = (probs * probs).sum(dim=reduce_dims) + \
            (target_onehot * target_onehot).sum(dim=reduce_dims)
    per_class = -(2.0 * inter + eps) / (denom + eps)

    gt_present = target_onehot.sum(dim=reduce_dims) > 0
    if probs.shape[1] > 1:
        gt_present = gt_present.clone()
        gt_present[0] = False  # channel 0 is background
    if not bool(gt_present.any()):
        return probs.sum() * 0.0
    return per_class[gt_present].mean()


def _downsample_labels(labels: torch.Tensor, factors: Sequence[int]) -> torch.Tensor:
    # nearest-neighbor on label maps: strided slicing per spatial axis
    for axis, f in enumerate(factors):
        if f > 1:
            labels = labels.index_select(
                axis + 1, torch.arange(0, labels.shape[axis + 1], f,
                                       device=labels.device))
    return labels


def supervised_loss(outputs: Sequence[torch.Tensor], gt_labels: torch.Tensor,
                    weights: Sequence[float], eps: float = 1e-5) -> torch.Tensor:
    """Weighted Dice loss over the main output plus deep-supervision outputs.

    outputs[0] is the full-resolution logits; coarser outputs are matched to
    nearest-neighbor downsampled labels. Weights are normalized to sum to 1.
    """
    if len(weights) != len(outputs):
        raise ConfigError(f"{len(outputs)} outputs but {len(weights)} weights")
    wsum = float(sum(weights))
    if wsum <= 0:
        raise ConfigError("deep supervision weights must have positive sum")

    total = None
    for out, w in zip(outputs, weights):
        if w == 0.0:
            continue
        num_classes = out.shape[1]
        spatial = out.shape[2:]
        factors = [g // o for g, o in zip(gt_labels.shape[1:], spatial)]
        if any(g != o * f for g, o, f in zip(gt_labels.shape[1:], spatial, factors)):
            raise ValueError(f"output shape {tuple(spatial)} does not evenly divide "
                             f"label shape {tuple(gt_labels.shape[1:])}")
        labels = _downsample_labels(gt_labels, factors)
        onehot = F.one_hot(labels.long(), num_classes).movedim(-1, 1).to(out.dtype)
        term = w * dice_loss(torch.softmax(out, dim=1), onehot, eps)
        total = term if total is None else total + term
    return total / wsum


# ---------------------------------------------------------------------------
# data plumbing shared by both loops


def load_training_cases(manifest: DatasetManifest, case_ids: Sequence[str],
                        pre_cfg: PreprocessConfig) -> list[tuple[Volume, LabelMask]]:
    """Load, crop and normalize the training cases once up front."""
    cases = []
    for cid in case_ids:
        entry = manifest.entry(cid)
        volume, mask = load_case(entry, manifest.scheme)
        if mask is None:
            raise ConfigError(f"training case {cid} has no ground-truth mask")
        volume, mask, _ = preprocess_case(volume, mask, pre_cfg, entry.lv_center)
        cases.append((volume, mask))
    return cases


def _as_training_sample(volume: Volume, mask: LabelMask, depth: int,
                        rng: np.random.Generator) -> tuple[Volume, LabelMask]:
    if volume.num_slices > depth:
        return select_subvolume(volume, mask, depth, rng)
    if volume.num_slices < depth:
        return resize_z_nearest(volume, mask, depth)
    return volume, mask


def mask_channels_from_logits(logits: torch.Tensor, aux_classes: Sequence[int],
                              soft: bool) -> np.ndarray:
    """2D-stage outputs (D, C, Y, X) -> mask channels (C_aux, D, Y, X)."""
    if soft:
        probs = torch.softmax(logits, dim=1)
        chans = [probs[:, c] for c in aux_classes]
        return torch.stack(chans).cpu().numpy().astype(np.float32)
    pred = logits.argmax(dim=1)
    chans = [(pred == c).to(torch.uint8) for c in aux_classes]
    return torch.stack(chans).cpu().numpy()


def predict_channels(net2d: torch.nn.Module, volume_data: np.ndarray,
                     aux_classes: Sequence[int], device: str,
                     soft: bool = False) -> np.ndarray:
    """Run the frozen slice network over a stack and extract scar/MVO channels."""
    was_training = net2d.training
    net2d.eval()
    with torch.no_grad():
        x = torch.from_numpy(np.ascontiguousarray(volume_data)).unsqueeze(1).to(device)
        logits = net2d(x)
    if was_training:
        net2d.train()
    return mask_channels_from_logits(logits, aux_classes, soft)


def _split_outputs(out) -> tuple[torch.Tensor, list[torch.Tensor]]:
    if isinstance(out, tuple):
        return out[0], list(out[1])
    return out, []


def _ds_weights(cfg: TrainConfig, spec) -> list[float]:
    n_outputs = 1 + len([l for l in spec.ds_levels if l != 0])
    return list(cfg.deep_supervision_weights[:n_outputs])


def _check_finite(loss: torch.Tensor, epoch: int, step: int) -> None:
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite loss {loss.item()} at epoch {epoch} "
                                 f"step {step}")


def _log_line(fh, record: dict) -> None:
    fh.write(json.dumps(record) + "\n")
    fh.flush()


def state_dict_digest(net: torch.nn.Module) -> str:
    """Stable content hash of all parameters/buffers, for freeze checks."""
    h = hashlib.sha256()
    for name, tensor in sorted(net.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# stage one: the 2D slice segmenter


def train_2d(manifest: DatasetManifest, train_ids: Sequence[str], spec: NetworkSpec2D,
             pre_cfg: PreprocessConfig, aug_cfg: AugmentConfig, cfg: TrainConfig,
             out_dir: str | Path) -> Path:
    """Train the slice segmenter on randomly drawn, augmented 2D slices.

    Writes `checkpoint_2d.pt` plus interval checkpoints and a newline-JSON
    training log under out_dir; returns the final checkpoint path.
    """
    if not train_ids:
        raise ConfigError("empty training set")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    cases = load_training_cases(manifest, train_ids, pre_cfg)
    rng = np.random.default_rng(cfg.seed)
    net = build_network(spec, seed=cfg.seed).to(cfg.device)
    net.train()
    opt = torch.optim.SGD(net.parameters(), lr=cfg.lr_2d, momentum=cfg.momentum,
                          nesterov=True)

    slice_pool = [(i, z) for i, (vol, _) in enumerate(cases)
                  for z in range(vol.num_slices)]
    ds_weights = _ds_weights(cfg, spec)

    ckpt_path = out_dir / "checkpoint_2d.pt"
    with open(out_dir / "train2d_log.jsonl", "w") as log:
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg, cfg.lr_2d)
            for group in opt.param_groups:
                group["lr"] = lr
            losses = []
            for step in range(cfg.steps_per_epoch):
                imgs, labels = [], []
                for _ in range(cfg.batch_size_2d):
                    ci, z = slice_pool[int(rng.integers(0, len(slice_pool)))]
                    vol, mask = cases[ci]
                    one = vol.with_data(vol.data[z : z + 1])
                    one_mask = mask.with_labels(mask.labels[z : z + 1])
                    one, one_mask = augment_sample(one, one_mask, aug_cfg, rng)
                    imgs.append(one.data[0])
                    labels.append(one_mask.labels[0])
                x = torch.from_numpy(np.stack(imgs)).unsqueeze(1).to(cfg.device)
                y = torch.from_numpy(np.stack(labels).astype(np.int64)).to(cfg.device)

                main, aux = _split_outputs(net(x))
                loss = supervised_loss([main] + aux, y, ds_weights)
                _check_finite(loss, epoch, step)
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(float(loss.item()))

            _log_line(log, {"epoch": epoch, "mean_loss": float(np.mean(losses)),
                            "lr": lr})
            if cfg.checkpoint_interval and (epoch + 1) % cfg.checkpoint_interval == 0 \
                    and epoch + 1 < cfg.epochs:
                save_checkpoint(out_dir / f"checkpoint_2d_ep{epoch + 1}.pt", net, spec)

    net.eval()
    save_checkpoint(ckpt_path, net, spec)
    return ckpt_path


# ---------------------------------------------------------------------------
# stage two: the cascade


def train_cascade(manifest: DatasetManifest, train_ids: Sequence[str],
                  checkpoint_2d: str | Path, spec3d: NetworkSpec3D,
                  pre_cfg: PreprocessConfig, aug_standard: AugmentConfig,
                  aug_elevated: AugmentConfig, perturb_cfg: PerturbationConfig,
                  cfg: TrainConfig, out_dir: str | Path,
                  vanilla: bool = False) -> Path:
    """Train the 3D refiner behind the frozen 2D network.

    Per sample: augment the volume (elevated profile when that branch of the
    perturbation scheduler fires), run the frozen 2D net slice-wise, perturb
    the resulting mask channels (epoch-gated, skipped entirely in vanilla
    mode), concatenate with the image and optimize against the clean ground
    truth.
    """
    if not train_ids:
        raise ConfigError("empty training set")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    net2d, spec2d = load_checkpoint(checkpoint_2d)
    net2d.to(cfg.device)
    net2d.eval()
    for p in net2d.parameters():
        p.requires_grad_(False)
    frozen_digest = state_dict_digest(net2d)

    scheme = manifest.scheme
    aux_classes = scheme.auxiliary_classes
    if spec3d.in_channels != 1 + len(aux_classes):
        raise ConfigError(f"3D spec expects {spec3d.in_channels} input channels but "
                          f"scheme {scheme.name} provides {1 + len(aux_classes)}")
    if spec2d.out_channels != scheme.num_classes:
        raise ConfigError(f"2D checkpoint has {spec2d.out_channels} classes, "
                          f"scheme {scheme.name} has {scheme.num_classes}")

    cases = load_training_cases(manifest, train_ids, pre_cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    net3d = build_network(spec3d, seed=cfg.seed).to(cfg.device)
    net3d.train()
    opt = torch.optim.SGD(net3d.parameters(), lr=cfg.lr_3d, momentum=cfg.momentum,
                          nesterov=True)
    ds_weights = _ds_weights(cfg, spec3d)

    name = "checkpoint_3d_vanilla.pt" if vanilla else "checkpoint_3d.pt"
    log_name = "train3d_vanilla_log.jsonl" if vanilla else "train3d_log.jsonl"
    ckpt_path = out_dir / name

    with open(out_dir / log_name, "w") as log:
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg, cfg.lr_3d)
            for group in opt.param_groups:
                group["lr"] = lr
            losses = []
            op_counts = {op: 0 for op in
                         ("none", "delete_class", "zero_mask", "fake_scar",
                          "fake_mvo", "elevated_augment")}

            for step in range(cfg.steps_per_epoch):
                inputs, targets = [], []
                for _ in range(cfg.batch_size_3d):
                    vol, mask = cases[int(rng.integers(0, len(cases)))]
                    vol_s, mask_s = _as_training_sample(vol, mask, pre_cfg.depth, rng)

                    elevated = (not vanilla
                                and epoch >= perturb_cfg.enable_after_epoch
                                and rng.random() < cfg.p_elevated_augment)
                    aug_cfg = aug_elevated if elevated else aug_standard
                    vol_a, mask_a = augment_sample(vol_s, mask_s, aug_cfg, rng)

                    channels = predict_channels(net2d, vol_a.data, aux_classes,
                                                cfg.device, cfg.soft_mask_channels)
                    if vanilla:
                        record = PerturbationRecord("none")
                    elif elevated:
                        # exclusive with the mask operators
                        record = PerturbationRecord("none")
                        op_counts["elevated_augment"] += 1
                    else:
                        channels, record = sample_perturbation(
                            channels, vol_a.data, mask_a.labels, perturb_cfg,
                            epoch, rng)
                    op_counts[record.operator] += 1

                    inputs.append(np.concatenate(
                        [vol_a.data[None], channels.astype(np.float32)]))
                    targets.append(mask_a.labels.astype(np.int64))

                x = torch.from_numpy(np.stack(inputs)).to(cfg.device)
                y = torch.from_numpy(np.stack(targets)).to(cfg.device)
                main, aux = _split_outputs(net3d(x))
                loss = supervised_loss([main] + aux, y, ds_weights)
                _check_finite(loss, epoch, step)
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(float(loss.item()))

            _log_line(log, {"epoch": epoch, "mean_loss": float(np.mean(losses)),
                            "lr": lr, "perturbation_operator_counts": op_counts})
            if cfg.checkpoint_interval and (epoch + 1) % cfg.checkpoint_interval == 0 \
                    and epoch + 1 < cfg.epochs:
                save_checkpoint(out_dir / f"{ckpt_path.stem}_ep{epoch + 1}.pt",
                                net3d, spec3d)

    if state_dict_digest(net2d) != frozen_digest:
        raise RuntimeError("frozen 2D network changed during cascade training")
    net3d.eval()
    save_checkpoint(ckpt_path, net3d, spec3d)
    return ckpt_path
