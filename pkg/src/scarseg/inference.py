"""Two-stage cascade prediction and restoration to the original field of view.

No postprocessing beyond the per-voxel argmax: the prediction is padded back
to the acquired in-plane extent with background. The 3D network never
resamples the slice axis, so full volumes of any depth at or above one slice
run in a single pass; stacks shallower than the training depth are stretched
with nearest-neighbor slice repetition and mapped back by majority vote.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from .data import ClassScheme, LabelMask, Volume
from .errors import DataError
from .evaluation import dsc
from .preprocess import (CropInfo, PreprocessConfig, nearest_z_indices, preprocess_case,
                         resize_z_nearest, uncrop_labels)
from .training import predict_channels


@dataclass
class PredictionResult:
    """Final labels in the original field of view plus optional probabilities."""

    labels: np.ndarray                      # (Z, Y, X) uint8, original FOV
    probabilities: Optional[np.ndarray]     # (C, Z, Y, X) float32, original FOV
    provenance: dict = field(default_factory=dict)


def predict_2d_stack(net2d: torch.nn.Module, volume: Volume, scheme: ClassScheme,
                     device: str = "cpu") -> tuple[np.ndarray, np.ndarray]:
    """Slice-wise 2D prediction of a preprocessed volume.

    Returns (probs, hard_channels): probs is (D, C, Y, X) softmax output and
    hard_channels the argmax-derived binary scar/MVO stack (C_aux, D, Y, X).
    """
    net2d.eval()
    with torch.no_grad():
        x = torch.from_numpy(np.ascontiguousarray(volume.data)).unsqueeze(1).to(device)
        logits = net2d(x)
        probs = torch.softmax(logits, dim=1).cpu().numpy().astype(np.float32)
    pred = probs.argmax(axis=1)
    hard = np.stack([(pred == c) for c in scheme.auxiliary_classes]).astype(np.uint8)
    return probs, hard


def _forward_3d(net3d: torch.nn.Module, image: np.ndarray, channels: np.ndarray,
                device: str) -> np.ndarray:
    """One 3D pass; returns per-class probabilities (C, D, Y, X)."""
    net3d.eval()
    stacked = np.concatenate([image[None], channels.astype(np.float32)])
    with torch.no_grad():
        x = torch.from_numpy(stacked).unsqueeze(0).to(device)
        probs = torch.softmax(net3d(x), dim=1)[0].cpu().numpy()
    return probs.astype(np.float32)


def _forward_3d_chunked(net3d: torch.nn.Module, image: np.ndarray,
                        channels: np.ndarray, device: str,
                        chunk: int) -> np.ndarray:
    """z-chunked 3D pass with one-slice overlap and probability averaging."""
    depth = image.shape[0]
    if chunk >= depth:
        return _forward_3d(net3d, image, channels, device)
    acc = None
    counts = np.zeros((depth,), dtype=np.float32)
    start = 0
    while True:
        stop = min(start + chunk, depth)
        s = slice(stop - chunk, stop)  # right-aligned final window
        probs = _forward_3d(net3d, image[s], channels[:, s], device)
        if acc is None:
            acc = np.zeros((probs.shape[0], depth) + probs.shape[2:], dtype=np.float64)
        acc[:, s] += probs
        counts[s] += 1
        if stop == depth:
            break
        start += chunk - 1
    return (acc / counts[None, :, None, None]).astype(np.float32)


def _collapse_resized(labels_out: np.ndarray, probs_out: np.ndarray,
                      src: np.ndarray, m: int
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Map predictions on a z-stretched stack back to the m original slices.

    Each original slice takes a per-voxel majority vote over the output
    slices that were copied from it; ties go to the lowest class index.
    Probabilities are averaged over the same groups.
    """
    num_classes = probs_out.shape[0]
    labels = np.zeros((m,) + labels_out.shape[1:], dtype=labels_out.dtype)
    probs = np.zeros((num_classes, m) + probs_out.shape[2:], dtype=np.float32)
    class_ids = np.arange(num_classes)[:, None, None, None]
    for j in range(m):
        members = np.flatnonzero(src == j)
        votes = (labels_out[members][None] == class_ids).sum(axis=1)
        labels[j] = votes.argmax(axis=0)  # argmax breaks ties at the lowest class
        probs[:, j] = probs_out[:, members].mean(axis=1)
    return labels, probs


def predict_cascade(net2d: torch.nn.Module, net3d: torch.nn.Module, volume: Volume,
                    scheme: ClassScheme, pre_cfg: PreprocessConfig,
                    lv_center: Optional[tuple[int, int]] = None,
                    keep_probabilities: bool = False,
                    soft_masks: bool = False,
                    z_chunk: Optional[int] = None,
                    device: str = "cpu",
                    provenance: Optional[dict] = None) -> PredictionResult:
    """Full cascade prediction of one case, restored to the original FOV."""
    if volume.num_slices < 1:
        raise DataError(f"{volume.case_id}: empty volume")
    vol_pre, _, info = preprocess_case(volume, None, pre_cfg, lv_center)

    m = vol_pre.num_slices
    resized = m < pre_cfg.depth
    if resized:
        vol_net, _ = resize_z_nearest(vol_pre, None, pre_cfg.depth)
        src = nearest_z_indices(m, pre_cfg.depth)
    else:
        vol_net = vol_pre
        src = None

    if soft_masks:
        probs2d, _ = predict_2d_stack(net2d, vol_net, scheme, device)
        channels = np.stack([probs2d[:, c] for c in scheme.auxiliary_classes])
    else:
        _, channels = predict_2d_stack(net2d, vol_net, scheme, device)

    if z_chunk is not None:
        probs = _forward_3d_chunked(net3d, vol_net.data, channels, device, z_chunk)
    else:
        probs = _forward_3d(net3d, vol_net.data, channels, device)
    labels = probs.argmax(axis=0).astype(np.uint8)

    if resized:
        labels, probs = _collapse_resized(labels, probs, src, m)

    full_labels = uncrop_labels(labels, info, background=0)
    full_probs = None
    if keep_probabilities:
        nz = full_labels.shape[0]
        ny, nx = info.original_in_plane
        full_probs = np.zeros((probs.shape[0], nz, ny, nx), dtype=np.float32)
        full_probs[0] = 1.0  # padded region is certain background
        y0, x0 = info.start
        hy, hx = info.crop_size
        sy0, sy1 = max(y0, 0), min(y0 + hy, ny)
        sx0, sx1 = max(x0, 0), min(x0 + hx, nx)
        full_probs[:, :, sy0:sy1, sx0:sx1] = \
            probs[:, :, sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0]

    prov = dict(provenance or {})
    prov.update({"case_id": volume.case_id, "crop": info.to_dict(),
                 "resized_from_slices": m if resized else None})
    return PredictionResult(full_labels, full_probs, prov)


def robustness_probe(net3d: torch.nn.Module, volume_pre: Volume,
                     clean_channels: np.ndarray,
                     perturb_op: Callable[[np.ndarray], np.ndarray],
                     scheme: ClassScheme, device: str = "cpu") -> dict[str, float]:
    """Agreement of the 3D output under a mask perturbation.

    Runs the refiner twice on the same preprocessed volume, once with the
    clean 2D mask channels and once with `perturb_op` applied to them, and
    returns the per-foreground-class Dice between the two label outputs
    (1.0 when a class is absent from both).
    """
    probs_clean = _forward_3d(net3d, volume_pre.data, clean_channels, device)
    perturbed = perturb_op(clean_channels)
    probs_pert = _forward_3d(net3d, volume_pre.data, perturbed, device)
    lab_clean = probs_clean.argmax(axis=0)
    lab_pert = probs_pert.argmax(axis=0)
    out = {}
    for c in scheme.foreground_indices:
        out[scheme.class_names[c]] = dsc(lab_clean == c, lab_pert == c)
    return out
