"""Stochastic training-time transforms.

Intensity transforms act on the image only; geometric transforms move image
and mask through the identical in-plane warp (mask resampled with nearest
neighbor). All randomness comes from an explicit numpy Generator so parallel
loader workers stay independent. Transforms are applied volume-wise: every
slice of a sample receives the same in-plane transform, which also covers
the 2D case (single-slice volumes).

The "elevated" profile widens the contrast, brightness, gamma and
low-resolution ranges; it is what the cascade trainer swaps in when it wants
harder inputs for the refinement stage.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .data import LabelMask, Volume
from .errors import ConfigError


@dataclass
class AugmentConfig:
    profile: str = "standard"

    p_blur: float = 0.2
    blur_sigma: tuple[float, float] = (0.5, 1.0)
    p_gamma: float = 0.3
    gamma_range: tuple[float, float] = (0.7, 1.5)
    p_noise: float = 0.15
    noise_variance: tuple[float, float] = (0.0, 0.1)
    p_contrast: float = 0.15
    contrast_range: tuple[float, float] = (0.65, 1.5)
    p_brightness: float = 0.15
    brightness_range: tuple[float, float] = (-0.2, 0.2)
    p_lowres: float = 0.25
    lowres_factor: tuple[float, float] = (1.0, 2.0)

    p_translate: float = 0.2
    translate_fraction: float = 0.1        # max shift as fraction of in-plane extent
    p_flip: float = 0.5                    # per in-plane axis
    p_elastic: float = 0.2
    elastic_alpha: tuple[float, float] = (0.0, 200.0)
    elastic_sigma: tuple[float, float] = (9.0, 13.0)
    p_scale: float = 0.2
    scale_range: tuple[float, float] = (0.7, 1.4)

    def __post_init__(self):
        for name in ("p_blur", "p_gamma", "p_noise", "p_contrast", "p_brightness",
                     "p_lowres", "p_translate", "p_flip", "p_elastic", "p_scale"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name}={p} outside [0, 1]")
        for name in ("blur_sigma", "gamma_range", "noise_variance", "contrast_range",
                     "brightness_range", "lowres_factor", "elastic_alpha",
                     "elastic_sigma", "scale_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} has min > max: ({lo}, {hi})")

    @classmethod
    def standard(cls) -> "AugmentConfig":
        return cls(profile="standard")

    @classmethod
    def elevated(cls) -> "AugmentConfig":
        return cls(
            profile="elevated",
            gamma_range=(0.5, 1.8),
            contrast_range=(0.5, 1.8),
            brightness_range=(-0.3, 0.3),
            lowres_factor=(1.0, 3.0),
        )

    @classmethod
    def none(cls) -> "AugmentConfig":
        """All probabilities zero; the pipeline becomes the identity."""
        kwargs = {name: 0.0 for name in ("p_blur", "p_gamma", "p_noise", "p_contrast",
                                         "p_brightness", "p_lowres", "p_translate",
                                         "p_flip", "p_elastic", "p_scale")}
        return cls(profile="none", **kwargs)


def _uniform(rng: np.random.Generator, range_: tuple[float, float]) -> float:
    lo, hi = range_
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def sample_intensity_params(config: AugmentConfig, rng: np.random.Generator) -> dict:
    """Draw which intensity transforms fire this sample and their parameters.

    Each transform is an independent Bernoulli; absent keys mean "skip".
    Exposed separately so the parameter distributions are testable on their
    own.
    """
    params = {}
    if rng.random() < config.p_blur:
        params["blur_sigma"] = _uniform(rng, config.blur_sigma)
    if rng.random() < config.p_noise:
        params["noise_variance"] = _uniform(rng, config.noise_variance)
    if rng.random() < config.p_brightness:
        params["brightness"] = _uniform(rng, config.brightness_range)
    if rng.random() < config.p_contrast:
        params["contrast"] = _uniform(rng, config.contrast_range)
    if rng.random() < config.p_gamma:
        params["gamma"] = _uniform(rng, config.gamma_range)
    if rng.random() < config.p_lowres:
        params["lowres_factor"] = _uniform(rng, config.lowres_factor)
    return params


def _resize_plane(img: np.ndarray, out_shape: tuple[int, int], order: int) -> np.ndarray:
    """Center-aligned in-plane resize to an exact output shape."""
    iy, ix = img.shape
    oy, ox = out_shape
    yy = (np.arange(oy) + 0.5) * iy / oy - 0.5
    xx = (np.arange(ox) + 0.5) * ix / ox - 0.5
    coords = np.meshgrid(yy, xx, indexing="ij")
    return ndimage.map_coordinates(img, coords, order=order, mode="nearest")


def apply_intensity_params(volume: Volume, params: dict,
                           rng: np.random.Generator) -> Volume:
    """Apply an already-sampled intensity parameter set."""
    if not params:
        return volume
    data = volume.data.astype(np.float32).copy()

    if "blur_sigma" in params:
        s = params["blur_sigma"]
        data = ndimage.gaussian_filter(data, sigma=(0.0, s, s)).astype(np.float32)
    if "noise_variance" in params:
        sigma = float(np.sqrt(params["noise_variance"]))
        if sigma > 0:
            data = data + rng.normal(0.0, sigma, size=data.shape).astype(np.float32)
    if "brightness" in params:
        data = data + np.float32(params["brightness"])
    if "contrast" in params:
        m = data.mean()
        data = (data - m) * np.float32(params["contrast"]) + m
    if "gamma" in params:
        lo, hi = data.min(), data.max()
        if hi > lo:
            unit = (data - lo) / (hi - lo)
            data = np.power(unit, np.float32(params["gamma"])) * (hi - lo) + lo
    if "lowres_factor" in params:
        f = params["lowres_factor"]
        if f > 1.0:
            ny, nx = data.shape[1:]
            small = (max(1, int(round(ny / f))), max(1, int(round(nx / f))))
            for z in range(data.shape[0]):
                down = _resize_plane(data[z], small, order=1)
                data[z] = _resize_plane(down, (ny, nx), order=1)
    return volume.with_data(data)


def apply_intensity(volume: Volume, config: AugmentConfig,
                    rng: np.random.Generator) -> Volume:
    """Randomized intensity augmentation; shape is always preserved."""
    return apply_intensity_params(volume, sample_intensity_params(config, rng), rng)


def sample_geometric_params(config: AugmentConfig, rng: np.random.Generator,
                            in_plane: tuple[int, int]) -> dict:
    """Draw the in-plane geometric transform for one sample."""
    ny, nx = in_plane
    params: dict = {}
    flips = []
    for axis in (0, 1):  # in-plane (y, x)
        if rng.random() < config.p_flip:
            flips.append(axis)
    if flips:
        params["flip_axes"] = tuple(flips)
    if rng.random() < config.p_scale:
        params["scale"] = _uniform(rng, config.scale_range)
    if rng.random() < config.p_elastic:
        params["elastic_alpha"] = _uniform(rng, config.elastic_alpha)
        params["elastic_sigma"] = _uniform(rng, config.elastic_sigma)
    if rng.random() < config.p_translate:
        max_dy = max(1, int(round(config.translate_fraction * ny)))
        max_dx = max(1, int(round(config.translate_fraction * nx)))
        params["translate"] = (int(rng.integers(-max_dy, max_dy + 1)),
                               int(rng.integers(-max_dx, max_dx + 1)))
    return params


def _warp_coordinates(params: dict, in_plane: tuple[int, int],
                      rng: np.random.Generator) -> Optional[np.ndarray]:
    """Source coordinates (2, Y, X) for the sampled warp, or None if identity."""
    needs_warp = any(k in params for k in ("scale", "elastic_alpha", "translate"))
    if not needs_warp:
        return None
    ny, nx = in_plane
    yy, xx = np.meshgrid(np.arange(ny, dtype=np.float64),
                         np.arange(nx, dtype=np.float64), indexing="ij")
    if "translate" in params:
        dy, dx = params["translate"]
        yy = yy - dy
        xx = xx - dx
    if "scale" in params:
        s = params["scale"]
        cy, cx = (ny - 1) / 2.0, (nx - 1) / 2.0
        yy = (yy - cy) / s + cy
        xx = (xx - cx) / s + cx
    if "elastic_alpha" in params:
        alpha = params["elastic_alpha"]
        sigma = params["elastic_sigma"]
        dy = ndimage.gaussian_filter(rng.uniform(-1, 1, size=(ny, nx)), sigma) * alpha
        dx = ndimage.gaussian_filter(rng.uniform(-1, 1, size=(ny, nx)), sigma) * alpha
        yy = yy + dy
        xx = xx + dx
    return np.stack([yy, xx])


def apply_geometric_params(volume: Volume, mask: Optional[LabelMask], params: dict,
                           rng: np.random.Generator
                           ) -> tuple[Volume, Optional[LabelMask]]:
    """Apply an already-sampled geometric transform to image and mask alike."""
    data = volume.data
    labels = mask.labels if mask is not None else None

    if "flip_axes" in params:
        for axis in params["flip_axes"]:
            data = np.flip(data, axis=axis + 1)
            if labels is not None:
                labels = np.flip(labels, axis=axis + 1)

    coords = _warp_coordinates(params, data.shape[1:], rng)
    if coords is not None:
        warped = np.empty_like(data)
        warped_labels = np.empty_like(labels) if labels is not None else None
        for z in range(data.shape[0]):
            warped[z] = ndimage.map_coordinates(data[z], coords, order=1,
                                                mode="constant", cval=0.0)
            if labels is not None:
                warped_labels[z] = ndimage.map_coordinates(labels[z], coords, order=0,
                                                           mode="constant", cval=0)
        data, labels = warped, warped_labels

    out_vol = volume.with_data(np.ascontiguousarray(data))
    out_mask = mask.with_labels(np.ascontiguousarray(labels)) if mask is not None else None
    return out_vol, out_mask


def apply_geometric(volume: Volume, mask: Optional[LabelMask], config: AugmentConfig,
                    rng: np.random.Generator) -> tuple[Volume, Optional[LabelMask]]:
    """Randomized geometric augmentation; image and mask stay aligned."""
    params = sample_geometric_params(config, rng, volume.shape[1:])
    return apply_geometric_params(volume, mask, params, rng)


def augment_sample(volume: Volume, mask: Optional[LabelMask], config: AugmentConfig,
                   rng: np.random.Generator) -> tuple[Volume, Optional[LabelMask]]:
    """Geometric then intensity augmentation, the per-sample training path."""
    volume, mask = apply_geometric(volume, mask, config, rng)
    volume = apply_intensity(volume, config, rng)
    return volume, mask
