"""Training-time corruption of the 2D-stage segmentation masks.

The cascade trainer feeds the 3D network image volumes plus the per-slice
scar/MVO masks produced by the frozen 2D network. To teach the 3D network to
detect and undo the errors a slice-wise model typically makes, one of four
operators is occasionally applied to those mask channels before they are
concatenated:

  delete_class  remove scar and/or MVO from one slice
  zero_mask     blank every mask channel in every slice
  fake_scar     paint a plausible wrong scar into one slice (brightest
                connected blob of the ground-truth myocardium)
  fake_mvo      relabel a small connected patch of predicted scar as MVO

Operators never touch the image or the ground-truth mask used as the loss
target, and (except zero_mask) edit exactly one slice. Mask channels are
arrays of shape (C, D, Y, X) with channel order ("scar", "mvo")[:C].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import ConfigError

CHANNEL_NAMES = ("scar", "mvo")
MYOCARDIUM_LABEL = 2

OPERATORS = ("delete_class", "zero_mask", "fake_scar", "fake_mvo", "none")


@dataclass
class PerturbationConfig:
    p_delete_class: float = 0.10
    p_zero_mask: float = 0.10
    p_fake_scar: float = 0.10
    p_fake_mvo: float = 0.02
    scar_percentile: float = 85.0
    mvo_neighbor_range: tuple[int, int] = (1, 8)
    enable_after_epoch: int = 100
    active_classes: tuple[str, ...] = ("scar", "mvo")
    min_myocardium_voxels: int = 16
    connectivity: int = 8

    def __post_init__(self):
        probs = (self.p_delete_class, self.p_zero_mask, self.p_fake_scar, self.p_fake_mvo)
        if any(p < 0 for p in probs):
            raise ConfigError("perturbation probabilities must be non-negative")
        if sum(probs) > 1.0 + 1e-12:
            raise ConfigError(f"perturbation probabilities sum to {sum(probs)} > 1; "
                              "operators are mutually exclusive per sample")
        if not 0.0 < self.scar_percentile < 100.0:
            raise ConfigError("scar_percentile must lie in (0, 100)")
        lo, hi = self.mvo_neighbor_range
        if lo < 0 or lo > hi:
            raise ConfigError(f"bad mvo_neighbor_range ({lo}, {hi})")
        if not set(self.active_classes) <= set(CHANNEL_NAMES):
            raise ConfigError(f"active_classes must be a subset of {CHANNEL_NAMES}")
        if self.connectivity not in (4, 8):
            raise ConfigError("connectivity must be 4 or 8")

    @classmethod
    def emidec(cls) -> "PerturbationConfig":
        return cls()

    @classmethod
    def myops(cls) -> "PerturbationConfig":
        # no MVO labels in that dataset: perturb the infarction class only
        return cls(p_fake_mvo=0.0, active_classes=("scar",))

    @property
    def probabilities(self) -> dict[str, float]:
        p = {"delete_class": self.p_delete_class, "zero_mask": self.p_zero_mask,
             "fake_scar": self.p_fake_scar, "fake_mvo": self.p_fake_mvo}
        p["none"] = 1.0 - sum(p.values())
        return p


@dataclass(frozen=True)
class PerturbationRecord:
    operator: str
    slice_index: Optional[int] = None
    classes: tuple[str, ...] = ()
    voxels_changed: int = 0

    def to_dict(self) -> dict:
        return {"operator": self.operator, "slice_index": self.slice_index,
                "classes": list(self.classes), "voxels_changed": self.voxels_changed}


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 8:
        return np.ones((3, 3), dtype=bool)
    return ndimage.generate_binary_structure(2, 1)


def connected_components_2d(binary: np.ndarray, connectivity: int = 8
                            ) -> tuple[np.ndarray, np.ndarray]:
    """Label connected foreground regions of a 2D binary image.

    Returns (labels, sizes) where labels assigns each foreground pixel a
    component id in 1..n and sizes[i] is the pixel count of component i+1.
    """
    if binary.ndim != 2:
        raise ValueError(f"expected a 2D slice, got shape {binary.shape}")
    labels, n = ndimage.label(binary.astype(bool), structure=_structure(connectivity))
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    return labels, sizes


def largest_component(binary: np.ndarray, connectivity: int = 8) -> np.ndarray:
    """Binary mask of the biggest connected component.

    Ties go to the component whose smallest (row, col) coordinate is
    lexicographically first, which equals the smallest flat C-order index.
    """
    labels, sizes = connected_components_2d(binary, connectivity)
    if sizes.size == 0:
        return np.zeros_like(binary, dtype=bool)
    best = sizes.max()
    tied = np.flatnonzero(sizes == best) + 1
    if len(tied) == 1:
        winner = tied[0]
    else:
        flat = labels.ravel()
        winner = min(tied, key=lambda lab: int(np.flatnonzero(flat == lab)[0]))
    return labels == winner


def percentile_nearest_rank(values, q: float) -> float:
    """The ceil(q/100 * n)-th smallest value (nearest-rank percentile)."""
    arr = np.asarray(values).ravel()
    if arr.size == 0:
        raise ValueError("percentile of an empty value list")
    if not 0.0 < q <= 100.0:
        raise ValueError(f"percentile q={q} outside (0, 100]")
    rank = math.ceil(q * arr.size / 100.0)
    rank = min(max(rank, 1), arr.size)
    return float(np.sort(arr)[rank - 1])


def _present_channels(channels: np.ndarray, names: tuple[str, ...]) -> list[str]:
    return [names[i] for i in range(channels.shape[0]) if channels[i].any()]


def delete_class_slices(channels: np.ndarray, rng: np.random.Generator,
                        active_classes: tuple[str, ...] = ("scar", "mvo"),
                        classes: Optional[tuple[str, ...]] = None
                        ) -> tuple[np.ndarray, PerturbationRecord]:
    """Erase the 2D segmentation of scar, MVO or both in one random slice.

    When `classes` is not given the target is drawn uniformly from
    {scar}, {mvo}, {both}, restricted to classes actually present in the
    stack. Deleting when nothing is present is a recorded no-op.
    """
    names = CHANNEL_NAMES[: channels.shape[0]]
    out = channels.copy()
    if classes is None:
        present = [n for n in _present_channels(channels, names) if n in active_classes]
        if not present:
            return out, PerturbationRecord("delete_class")
        if len(present) == 2:
            classes = [("scar",), ("mvo",), ("scar", "mvo")][int(rng.integers(0, 3))]
        else:
            classes = (present[0],)
    idx = [names.index(c) for c in classes if c in names]

    slice_has = out[idx].any(axis=(0, 2, 3))
    candidates = np.flatnonzero(slice_has)
    if candidates.size == 0:
        return out, PerturbationRecord("delete_class", classes=tuple(classes))
    k = int(candidates[rng.integers(0, candidates.size)])
    changed = int(np.count_nonzero(out[idx, k]))
    out[idx, k] = 0
    return out, PerturbationRecord("delete_class", k, tuple(classes), changed)


def zero_mask(channels: np.ndarray) -> tuple[np.ndarray, PerturbationRecord]:
    """Blank every mask channel in every slice; the image is untouched."""
    changed = int(np.count_nonzero(channels))
    names = CHANNEL_NAMES[: channels.shape[0]]
    return np.zeros_like(channels), PerturbationRecord("zero_mask", None, names, changed)


def add_fake_scar(channels: np.ndarray, image: np.ndarray, gt_labels: np.ndarray,
                  config: PerturbationConfig, rng: np.random.Generator
                  ) -> tuple[np.ndarray, PerturbationRecord]:
    """Paint a wrong scar annotation into one slice.

    Within one random slice that has enough ground-truth myocardium, voxels
    of that myocardium brighter than its nearest-rank intensity percentile
    are thresholded and the biggest connected component is added to the scar
    channel. By construction every added voxel lies inside the ground-truth
    myocardium of that slice.
    """
    out = channels.copy()
    myo = gt_labels == MYOCARDIUM_LABEL
    per_slice = myo.sum(axis=(1, 2))
    eligible = np.flatnonzero(per_slice >= config.min_myocardium_voxels)
    if eligible.size == 0:
        return out, PerturbationRecord("fake_scar")
    k = int(eligible[rng.integers(0, eligible.size)])

    vals = image[k][myo[k]]
    threshold = percentile_nearest_rank(vals, config.scar_percentile)
    candidates = myo[k] & (image[k] > threshold)
    if not candidates.any():
        # e.g. constant myocardium intensity: nothing is strictly brighter
        return out, PerturbationRecord("fake_scar", k, ("scar",), 0)
    component = largest_component(candidates, config.connectivity)
    scar = CHANNEL_NAMES.index("scar")
    added = component & (out[scar, k] == 0)
    out[scar, k][component] = 1
    return out, PerturbationRecord("fake_scar", k, ("scar",), int(added.sum()))


def _inplane_neighbors(y: int, x: int, shape: tuple[int, int]):
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            ny_, nx_ = y + dy, x + dx
            if 0 <= ny_ < shape[0] and 0 <= nx_ < shape[1]:
                yield ny_, nx_


def add_fake_mvo(channels: np.ndarray, config: PerturbationConfig,
                 rng: np.random.Generator) -> tuple[np.ndarray, PerturbationRecord]:
    """Relabel a small connected patch of predicted scar as MVO.

    A seed voxel is drawn from the predicted scar, then up to n more voxels
    (n uniform in the configured neighbor range) are grown through the
    in-plane 8-neighborhood, only ever claiming voxels that are currently
    scar. With no predicted scar anywhere this is a recorded no-op.
    """
    if channels.shape[0] < 2:
        raise ConfigError("fake_mvo needs an MVO channel")
    out = channels.copy()
    scar_ch = CHANNEL_NAMES.index("scar")
    mvo_ch = CHANNEL_NAMES.index("mvo")
    coords = np.argwhere(out[scar_ch] > 0)
    if coords.size == 0:
        return out, PerturbationRecord("fake_mvo")

    d, y, x = (int(v) for v in coords[rng.integers(0, len(coords))])
    lo, hi = config.mvo_neighbor_range
    n_extra = int(rng.integers(lo, hi + 1))

    plane = out[scar_ch, d] > 0
    selected = {(y, x)}
    frontier = {p for p in _inplane_neighbors(y, x, plane.shape) if plane[p]}
    while len(selected) - 1 < n_extra and frontier:
        pick = sorted(frontier)[int(rng.integers(0, len(frontier)))]
        selected.add(pick)
        frontier.discard(pick)
        frontier |= {p for p in _inplane_neighbors(*pick, plane.shape)
                     if plane[p] and p not in selected}

    ys = np.array([p[0] for p in selected])
    xs = np.array([p[1] for p in selected])
    out[scar_ch, d, ys, xs] = 0
    out[mvo_ch, d, ys, xs] = 1
    return out, PerturbationRecord("fake_mvo", d, ("mvo",), len(selected))


def sample_perturbation(channels: np.ndarray, image: np.ndarray, gt_labels: np.ndarray,
                        config: PerturbationConfig, epoch: int,
                        rng: np.random.Generator
                        ) -> tuple[np.ndarray, PerturbationRecord]:
    """Draw and apply at most one perturbation operator.

    Before `enable_after_epoch` the result is always the identity. Afterwards
    exactly one of (delete_class, zero_mask, fake_scar, fake_mvo, none) is
    drawn with the configured probabilities.
    """
    if epoch < config.enable_after_epoch:
        return channels, PerturbationRecord("none")

    u = float(rng.random())
    edge = config.p_delete_class
    if u < edge:
        return delete_class_slices(channels, rng, config.active_classes)
    edge += config.p_zero_mask
    if u < edge:
        return zero_mask(channels)
    edge += config.p_fake_scar
    if u < edge:
        return add_fake_scar(channels, image, gt_labels, config, rng)
    edge += config.p_fake_mvo
    if u < edge:
        return add_fake_mvo(channels, config, rng)
    return channels, PerturbationRecord("none")


def apply_operator(name: str, channels: np.ndarray, image: np.ndarray,
                   gt_labels: np.ndarray, config: PerturbationConfig,
                   rng: np.random.Generator) -> tuple[np.ndarray, PerturbationRecord]:
    """Apply one operator by name (the `perturb` CLI entry point)."""
    if name == "delete_class":
        return delete_class_slices(channels, rng, config.active_classes)
    if name == "zero_mask":
        return zero_mask(channels)
    if name == "fake_scar":
        return add_fake_scar(channels, image, gt_labels, config, rng)
    if name == "fake_mvo":
        return add_fake_mvo(channels, config, rng)
    if name == "none":
        return channels.copy(), PerturbationRecord("none")
    raise ConfigError(f"unknown perturbation operator {name!r}; "
                      f"choose from {OPERATORS}")
