"""Synthetic LGE-like phantoms for desk-scale training and testing.

Each phantom is a short-axis-style stack: a bright blood pool disk inside a
darker myocardial annulus, with (for the infarcted fraction) a bright scar
arc spanning at least two contiguous slices and optionally a small dark MVO
blob strictly inside the scar. Geometry and intensities are crude but
preserve exactly the properties the pipeline relies on: anatomy containment
(scar inside myocardium, MVO inside scar), inter-slice continuity of the
scar, and LGE intensity ordering (scar brighter than healthy myocardium,
MVO darker than scar).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (ClassScheme, DatasetManifest, LabelMask, ManifestEntry, Volume,
                   save_raw_case)
from .errors import ConfigError


@dataclass
class IntensityModel:
    background: float = 0.05
    blood: float = 1.0
    myocardium: float = 0.3
    scar: float = 0.85
    mvo: float = 0.15
    noise_sigma: float = 0.05


@dataclass
class PhantomConfig:
    count: int = 40
    shape: tuple[int, int, int] = (7, 96, 96)        # (D, Y, X)
    spacing: tuple[float, float, float] = (10.0, 1.458, 1.458)
    fraction_healthy: float = 1.0 / 3.0              # floor(count * fraction) cases
    blood_radius: tuple[float, float] = (10.0, 14.0)
    myo_thickness: tuple[float, float] = (6.0, 10.0)
    scar_angle_deg: tuple[float, float] = (70.0, 150.0)
    scar_radial_fraction: tuple[float, float] = (0.6, 1.0)
    scar_slice_span: tuple[int, int] = (2, 5)
    mvo_probability: float = 0.5
    mvo_radius: tuple[float, float] = (1.5, 3.0)
    intensity: IntensityModel = field(default_factory=IntensityModel)
    center_jitter: int = 3
    apex_taper: float = 0.9                          # radius factor at the last slice
    seed: int = 0

    def __post_init__(self):
        d, ny, nx = self.shape
        max_r = self.blood_radius[1] + self.myo_thickness[1]
        if max_r + self.center_jitter >= min(ny, nx) / 2:
            raise ConfigError(f"annulus (radius up to {max_r}) does not fit a "
                              f"{ny}x{nx} slice")
        if self.scar_slice_span[0] < 2:
            raise ConfigError("scar must span at least 2 contiguous slices")
        if self.scar_slice_span[1] > d:
            raise ConfigError("scar slice span exceeds stack depth")
        if not 0.0 <= self.fraction_healthy <= 1.0:
            raise ConfigError("fraction_healthy outside [0, 1]")

    @property
    def num_healthy(self) -> int:
        return int(math.floor(self.count * self.fraction_healthy))


def _uniform(rng, lo_hi):
    lo, hi = lo_hi
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def make_phantom(config: PhantomConfig, index: int) -> tuple[Volume, LabelMask]:
    """Build one phantom; cases below num_healthy carry no scar or MVO."""
    rng = np.random.default_rng([config.seed, index])
    d, ny, nx = config.shape
    healthy = index < config.num_healthy

    cy = ny // 2 + int(rng.integers(-config.center_jitter, config.center_jitter + 1))
    cx = nx // 2 + int(rng.integers(-config.center_jitter, config.center_jitter + 1))
    r_blood = _uniform(rng, config.blood_radius)
    thickness = _uniform(rng, config.myo_thickness)

    yy, xx = np.mgrid[0:ny, 0:nx]
    radius = np.hypot(yy - cy, xx - cx)
    angle = np.arctan2(yy - cy, xx - cx)  # (-pi, pi]

    labels = np.zeros((d, ny, nx), dtype=np.uint8)
    # apex-ward taper keeps slices similar but not identical
    taper = np.linspace(1.0, config.apex_taper, d)
    for z in range(d):
        r1 = r_blood * taper[z]
        r2 = (r_blood + thickness) * taper[z]
        labels[z][radius <= r1] = 1
        labels[z][(radius > r1) & (radius <= r2)] = 2

    if not healthy:
        theta0 = float(rng.uniform(-math.pi, math.pi))
        extent = math.radians(_uniform(rng, config.scar_angle_deg))
        radial_frac = _uniform(rng, config.scar_radial_fraction)
        span = int(rng.integers(config.scar_slice_span[0],
                                min(config.scar_slice_span[1], d) + 1))
        z0 = int(rng.integers(0, d - span + 1))

        rel = np.mod(angle - theta0, 2 * math.pi)
        for i, z in enumerate(range(z0, z0 + span)):
            # smooth per-slice arc width, full width mid-span
            width = extent * (0.55 + 0.45 * math.sin(math.pi * (i + 0.5) / span))
            r1 = r_blood * taper[z]
            r2 = (r_blood + thickness) * taper[z]
            r_scar = r1 + radial_frac * (r2 - r1)
            scar = (labels[z] == 2) & (rel <= width) & (radius <= r_scar)
            labels[z][scar] = 3

        if config.mvo_probability > 0 and rng.random() < config.mvo_probability:
            n_mvo_slices = int(rng.integers(1, 3))
            mid = z0 + span // 2
            mvo_r = _uniform(rng, config.mvo_radius)
            for z in range(mid, min(mid + n_mvo_slices, z0 + span)):
                scar_here = labels[z] == 3
                if not scar_here.any():
                    continue
                coords = np.argwhere(scar_here)
                my, mx = coords[len(coords) // 2]
                blob = (np.hypot(yy - my, xx - mx) <= mvo_r) & scar_here
                if blob.sum() >= 2:
                    labels[z][blob] = 4

    means = np.array([config.intensity.background, config.intensity.blood,
                      config.intensity.myocardium, config.intensity.scar,
                      config.intensity.mvo], dtype=np.float32)
    data = means[labels] + rng.normal(
        0.0, config.intensity.noise_sigma, size=labels.shape).astype(np.float32)

    case_id = f"phantom_{index:03d}"
    volume = Volume.from_array(data, config.spacing, case_id)
    mask = LabelMask(labels, ClassScheme.emidec())
    return volume, mask


def generate_phantoms(config: PhantomConfig, out_dir: str | Path) -> DatasetManifest:
    """Generate the full phantom set, write it in the raw format + manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(config.count):
        volume, mask = make_phantom(config, i)
        entry = save_raw_case(out_dir, volume.case_id, volume, mask)
        d, ny, nx = config.shape
        entries.append(ManifestEntry(entry.case_id, entry.volume_path,
                                     entry.mask_path, (ny // 2, nx // 2)))
    manifest = DatasetManifest(entries, ClassScheme.emidec())
    manifest.save(out_dir / "manifest.json")
    return DatasetManifest.load(out_dir / "manifest.json")
