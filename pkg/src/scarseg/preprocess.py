"""Deterministic input preparation: LV-centered crop, z-score normalization
and z-axis subvolume/resize handling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import LabelMask, Volume
from .errors import ConfigError, DataError

PROFILE_DEFAULTS = {
    "emidec": {"crop_size": (96, 96), "depth": 7},
    "myops": {"crop_size": (320, 320), "depth": 5},
}


@dataclass
class PreprocessConfig:
    crop_size: tuple[int, int] = (96, 96)   # (Y', X')
    depth: int = 7                          # slices per 3D training sample
    dataset_profile: str = "emidec"         # emidec | myops | custom
    normalize_before_crop: bool = False

    def __post_init__(self):
        if self.crop_size[0] <= 0 or self.crop_size[1] <= 0 or self.depth <= 0:
            raise ConfigError("crop_size and depth must be positive")
        expected = PROFILE_DEFAULTS.get(self.dataset_profile)
        if expected is not None:
            if tuple(self.crop_size) != expected["crop_size"] or self.depth != expected["depth"]:
                raise ConfigError(
                    f"profile {self.dataset_profile!r} fixes crop_size="
                    f"{expected['crop_size']} depth={expected['depth']}; "
                    "use dataset_profile='custom' to override")
        elif self.dataset_profile != "custom":
            raise ConfigError(f"unknown dataset profile {self.dataset_profile!r}")

    @classmethod
    def emidec(cls) -> "PreprocessConfig":
        return cls((96, 96), 7, "emidec")

    @classmethod
    def myops(cls) -> "PreprocessConfig":
        return cls((320, 320), 5, "myops")


@dataclass(frozen=True)
class CropInfo:
    """Where the crop window sits in the original in-plane frame.

    `start` may be negative when the window extends past the top/left edge;
    the out-of-image part was zero padded.
    """

    start: tuple[int, int]            # (y0, x0) of the window in the original frame
    crop_size: tuple[int, int]        # (Y', X')
    original_in_plane: tuple[int, int]  # original (Y, X)

    def to_dict(self) -> dict:
        return {"start": list(self.start), "crop_size": list(self.crop_size),
                "original_in_plane": list(self.original_in_plane)}


def default_center(volume: Volume) -> tuple[int, int]:
    """Image center, used when no LV center is given (images come LV-centered)."""
    _, ny, nx = volume.shape
    return (ny // 2, nx // 2)


def _crop_array(arr: np.ndarray, center: tuple[int, int], crop_size: tuple[int, int],
                fill) -> tuple[np.ndarray, CropInfo]:
    nz, ny, nx = arr.shape
    cy, cx = int(center[0]), int(center[1])
    hy, hx = crop_size
    y0 = cy - hy // 2
    x0 = cx - hx // 2

    out = np.full((nz, hy, hx), fill, dtype=arr.dtype)
    src_y0, src_y1 = max(y0, 0), min(y0 + hy, ny)
    src_x0, src_x1 = max(x0, 0), min(x0 + hx, nx)
    if src_y0 < src_y1 and src_x0 < src_x1:
        out[:, src_y0 - y0 : src_y1 - y0, src_x0 - x0 : src_x1 - x0] = \
            arr[:, src_y0:src_y1, src_x0:src_x1]
    return out, CropInfo((y0, x0), (hy, hx), (ny, nx))


def crop_center(volume: Volume, mask: Optional[LabelMask], center: tuple[int, int],
                crop_size: tuple[int, int]
                ) -> tuple[Volume, Optional[LabelMask], CropInfo]:
    """Crop image (and mask) in-plane around `center` to `crop_size`.

    Out-of-bounds regions are zero padded in the image and background padded
    in the mask. The returned CropInfo lets predictions be padded back to the
    original field of view.
    """
    cy, cx = center
    nz, ny, nx = volume.shape
    if not (0 <= cy < ny and 0 <= cx < nx):
        raise DataError(f"{volume.case_id}: crop center {center} outside image {ny}x{nx}")
    data, info = _crop_array(volume.data, center, crop_size, 0.0)
    cropped_mask = None
    if mask is not None:
        if mask.shape != volume.shape:
            raise DataError(f"{volume.case_id}: mask/volume shape mismatch")
        mlabels, _ = _crop_array(mask.labels, center, crop_size, 0)
        cropped_mask = mask.with_labels(mlabels)
    return volume.with_data(data), cropped_mask, info


def uncrop_labels(labels: np.ndarray, info: CropInfo, background: int = 0) -> np.ndarray:
    """Place cropped-frame labels back into the original field of view."""
    nz = labels.shape[0]
    ny, nx = info.original_in_plane
    hy, hx = info.crop_size
    y0, x0 = info.start
    out = np.full((nz, ny, nx), background, dtype=labels.dtype)
    src_y0, src_y1 = max(y0, 0), min(y0 + hy, ny)
    src_x0, src_x1 = max(x0, 0), min(x0 + hx, nx)
    if src_y0 < src_y1 and src_x0 < src_x1:
        out[:, src_y0:src_y1, src_x0:src_x1] = \
            labels[:, src_y0 - y0 : src_y1 - y0, src_x0 - x0 : src_x1 - x0]
    return out


def normalize_zscore(volume: Volume, std_floor: float = 1e-8) -> Volume:
    """Shift/scale to zero mean, unit standard deviation, per examination.

    The std is clamped to `std_floor` so constant images map to all zeros
    instead of dividing by zero.
    """
    data = volume.data.astype(np.float64)
    mean = data.mean()
    std = max(data.std(), std_floor)
    return volume.with_data(((data - mean) / std).astype(np.float32))


def select_subvolume(volume: Volume, mask: Optional[LabelMask], depth: int,
                     rng: np.random.Generator) -> tuple[Volume, Optional[LabelMask]]:
    """Pick `depth` contiguous slices, start index uniform on [0, M-depth]."""
    m = volume.num_slices
    if m < depth:
        raise DataError(f"{volume.case_id}: {m} slices < requested depth {depth}; "
                        "use resize_z_nearest instead")
    start = int(rng.integers(0, m - depth + 1))
    sub = volume.with_data(volume.data[start : start + depth])
    sub_mask = mask.with_labels(mask.labels[start : start + depth]) if mask is not None else None
    return sub, sub_mask


def nearest_z_indices(m: int, depth: int) -> np.ndarray:
    """Center-aligned nearest-neighbor source index for each of `depth` slices."""
    idx = np.floor((np.arange(depth) + 0.5) * m / depth).astype(np.int64)
    return np.clip(idx, 0, m - 1)


def resize_z_nearest(volume: Volume, mask: Optional[LabelMask], depth: int
                     ) -> tuple[Volume, Optional[LabelMask]]:
    """Stretch a too-shallow stack to `depth` slices by repeating slices.

    Every output slice is an exact copy of one input slice; image and mask
    use the same index mapping so no new labels can appear.
    """
    m = volume.num_slices
    if m >= depth:
        raise DataError(f"{volume.case_id}: resize_z_nearest expects fewer than "
                        f"{depth} slices, got {m}")
    idx = nearest_z_indices(m, depth)
    out = volume.with_data(volume.data[idx])
    out_mask = mask.with_labels(mask.labels[idx]) if mask is not None else None
    return out, out_mask


def preprocess_case(volume: Volume, mask: Optional[LabelMask], config: PreprocessConfig,
                    lv_center: Optional[tuple[int, int]] = None
                    ) -> tuple[Volume, Optional[LabelMask], CropInfo]:
    """Crop around the LV center then normalize (or the reverse, per config)."""
    center = lv_center if lv_center is not None else default_center(volume)
    if config.normalize_before_crop:
        volume = normalize_zscore(volume)
    volume, mask, info = crop_center(volume, mask, center, tuple(config.crop_size))
    if not config.normalize_before_crop:
        volume = normalize_zscore(volume)
    return volume, mask, info
