import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # for the oracles module

from scarseg.data import ClassScheme, LabelMask, Volume
from scarseg.networks import NetworkSpec2D, NetworkSpec3D
from scarseg.synthgen import PhantomConfig, generate_phantoms


@pytest.fixture(scope="session")
def phantom_dataset(tmp_path_factory):
    """Small deterministic phantom set shared by the fast tests."""
    out = tmp_path_factory.mktemp("phantoms")
    cfg = PhantomConfig(count=6, seed=123)
    manifest = generate_phantoms(cfg, out)
    return manifest


@pytest.fixture
def infarcted_case(phantom_dataset):
    """A (Volume, LabelMask) pair that contains scar."""
    from scarseg.data import load_case

    for entry in reversed(phantom_dataset.entries):
        volume, mask = load_case(entry, phantom_dataset.scheme)
        if (mask.labels == 3).any():
            return volume, mask
    raise AssertionError("phantom fixture produced no infarcted case")


@pytest.fixture
def healthy_case(phantom_dataset):
    from scarseg.data import load_case

    for entry in phantom_dataset.entries:
        volume, mask = load_case(entry, phantom_dataset.scheme)
        if not (mask.labels >= 3).any():
            return volume, mask
    raise AssertionError("phantom fixture produced no healthy case")


@pytest.fixture
def tiny_spec_2d():
    return NetworkSpec2D(out_channels=5, levels=3, base_width=8)


@pytest.fixture
def tiny_spec_3d():
    return NetworkSpec3D(in_channels=3, out_channels=5, levels=2, base_width=8)


def random_volume(shape=(4, 16, 16), seed=0, case_id="case") -> Volume:
    rng = np.random.default_rng(seed)
    return Volume.from_array(rng.normal(size=shape).astype(np.float32),
                             (10.0, 1.458, 1.458), case_id)


def random_mask(shape=(4, 16, 16), seed=0, num_classes=5) -> LabelMask:
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, size=shape).astype(np.uint8)
    return LabelMask(labels, ClassScheme.emidec())
