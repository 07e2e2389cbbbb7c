"""Domain types, label schemes, dataset manifests, fold splits and case IO.

Conventions used throughout the package: arrays are indexed (z, y, x),
spacing is (sz, sy, sx) in mm per voxel, class indices are fixed as
0 background, 1 blood pool, 2 myocardium, 3 scar, 4 MVO (the four-class
scheme simply drops index 4).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import nifti
from .errors import ConfigError, DataError


@dataclass(frozen=True)
class ClassScheme:
    """Ordered class list for a dataset, background always at index 0."""

    name: str
    class_names: tuple[str, ...]

    background_index: int = 0

    def __post_init__(self):
        if self.background_index != 0:
            raise ConfigError("background class must be index 0")
        if len(self.class_names) < 2:
            raise ConfigError("scheme needs at least background plus one class")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def foreground_indices(self) -> tuple[int, ...]:
        return tuple(range(1, len(self.class_names)))

    @property
    def scar_index(self) -> int:
        return self.class_names.index("scar")

    @property
    def mvo_index(self) -> Optional[int]:
        return self.class_names.index("mvo") if "mvo" in self.class_names else None

    @property
    def auxiliary_classes(self) -> tuple[int, ...]:
        """Class indices fed back to the 3D stage as extra input channels."""
        idx = [self.scar_index]
        if self.mvo_index is not None:
            idx.append(self.mvo_index)
        return tuple(idx)

    @classmethod
    def emidec(cls) -> "ClassScheme":
        return cls("emidec", ("background", "blood_pool", "myocardium", "scar", "mvo"))

    @classmethod
    def myops(cls) -> "ClassScheme":
        return cls("myops", ("background", "blood_pool", "myocardium", "scar"))

    @classmethod
    def from_name(cls, name: str) -> "ClassScheme":
        try:
            return {"emidec": cls.emidec, "myops": cls.myops}[name]()
        except KeyError:
            raise ConfigError(f"unknown class scheme {name!r}") from None


@dataclass(frozen=True)
class Volume:
    """3D grayscale stack with physical voxel spacing.

    `original_shape` is the shape before any cropping so predictions can be
    padded back to the acquired field of view. Treat instances as immutable;
    transforms return new Volumes via `with_data`.
    """

    data: np.ndarray                       # (Z, Y, X) float32
    spacing: tuple[float, float, float]    # (sz, sy, sx) mm
    case_id: str
    original_shape: tuple[int, int, int]

    def __post_init__(self):
        if self.data.ndim != 3:
            raise DataError(f"{self.case_id}: volume must be 3D, got shape {self.data.shape}")
        if any(s <= 0 for s in self.spacing):
            raise DataError(f"{self.case_id}: non-positive spacing {self.spacing}")
        if not np.all(np.isfinite(self.data)):
            raise DataError(f"{self.case_id}: volume contains non-finite values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    @property
    def num_slices(self) -> int:
        return self.data.shape[0]

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(np.asarray(data, dtype=np.float32), self.spacing, self.case_id,
                      self.original_shape)

    @classmethod
    def from_array(cls, data: np.ndarray, spacing, case_id: str) -> "Volume":
        data = np.asarray(data, dtype=np.float32)
        return cls(data, tuple(float(s) for s in spacing), case_id, tuple(data.shape))


@dataclass(frozen=True)
class LabelMask:
    """Integer class labels aligned voxel for voxel with a Volume."""

    labels: np.ndarray  # (Z, Y, X) uint8
    scheme: ClassScheme

    def __post_init__(self):
        if self.labels.ndim != 3:
            raise DataError(f"mask must be 3D, got shape {self.labels.shape}")
        lo = np.min(self.labels, initial=0)
        hi = np.max(self.labels, initial=0)
        if lo < 0 or hi >= self.scheme.num_classes:
            raise DataError(
                f"mask contains label {int(hi if hi >= self.scheme.num_classes else lo)} "
                f"outside the {self.scheme.name} scheme ({self.scheme.num_classes} classes)")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)

    def with_labels(self, labels: np.ndarray) -> "LabelMask":
        return LabelMask(np.asarray(labels, dtype=np.uint8), self.scheme)

    @classmethod
    def from_array(cls, labels: np.ndarray, scheme: ClassScheme) -> "LabelMask":
        return cls(np.asarray(labels, dtype=np.uint8), scheme)


@dataclass(frozen=True)
class ManifestEntry:
    case_id: str
    volume_path: Path
    mask_path: Optional[Path] = None
    lv_center: Optional[tuple[int, int]] = None  # (y, x) voxel coordinate

    def to_dict(self) -> dict:
        d = {"case_id": self.case_id, "volume_path": str(self.volume_path)}
        if self.mask_path is not None:
            d["mask_path"] = str(self.mask_path)
        if self.lv_center is not None:
            d["lv_center"] = list(self.lv_center)
        return d


@dataclass
class DatasetManifest:
    """List of cases plus the class scheme they are labelled with."""

    entries: list[ManifestEntry]
    scheme: ClassScheme

    def __post_init__(self):
        ids = [e.case_id for e in self.entries]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"duplicate case ids in manifest: {dup}")

    @property
    def case_ids(self) -> list[str]:
        return [e.case_id for e in self.entries]

    def entry(self, case_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.case_id == case_id:
                return e
        raise DataError(f"case {case_id!r} not in manifest")

    def save(self, path: str | Path) -> None:
        path = Path(path)
        entries = []
        for e in self.entries:
            d = e.to_dict()
            for key in ("volume_path", "mask_path"):
                if key in d:  # store relative to the manifest when possible
                    try:
                        d[key] = str(Path(d[key]).relative_to(path.parent))
                    except ValueError:
                        pass
            entries.append(d)
        doc = {"scheme": self.scheme.name, "entries": entries}
        path.write_text(json.dumps(doc, indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path, scheme: Optional[ClassScheme] = None) -> "DatasetManifest":
        """Load a manifest and check that every referenced file exists.

        Relative paths are resolved against the manifest's directory. The
        file may be either {"scheme": ..., "entries": [...]} or a bare list
        of entries (then `scheme` or the EMIDEC default applies).
        """
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc

        if isinstance(doc, list):
            raw_entries = doc
        else:
            raw_entries = doc.get("entries", [])
            if scheme is None and "scheme" in doc:
                scheme = ClassScheme.from_name(doc["scheme"])
        if scheme is None:
            scheme = ClassScheme.emidec()

        root = path.parent
        entries = []
        for raw in raw_entries:
            vol = root / raw["volume_path"]
            msk = root / raw["mask_path"] if raw.get("mask_path") else None
            center = tuple(raw["lv_center"]) if raw.get("lv_center") else None
            if not vol.exists():
                raise DataError(f"manifest {path}: missing volume file {vol}")
            if msk is not None and not msk.exists():
                raise DataError(f"manifest {path}: missing mask file {msk}")
            entries.append(ManifestEntry(raw["case_id"], vol, msk, center))
        return cls(entries, scheme)


@dataclass(frozen=True)
class FoldSplit:
    """Cross-validation split: one (train_ids, val_ids) pair per fold."""

    folds: tuple[tuple[tuple[str, ...], tuple[str, ...]], ...]
    seed: int

    def __len__(self) -> int:
        return len(self.folds)

    def to_dict(self) -> dict:
        return {"seed": self.seed,
                "folds": [{"train": list(tr), "val": list(va)} for tr, va in self.folds]}

    @classmethod
    def from_dict(cls, d: dict) -> "FoldSplit":
        folds = tuple((tuple(f["train"]), tuple(f["val"])) for f in d["folds"])
        return cls(folds, int(d["seed"]))


def make_folds(case_ids, k: int, seed: int) -> FoldSplit:
    """Split case ids into k random folds whose sizes differ by at most one.

    Deterministic for a given seed regardless of the input ordering: ids are
    sorted before shuffling. Every id lands in exactly one validation fold.
    """
    all_ids = list(case_ids)
    ids = sorted(set(all_ids))
    if len(ids) != len(all_ids):
        raise DataError("case ids must be unique")
    if k < 2:
        raise ConfigError(f"need k >= 2 folds, got {k}")
    if len(ids) < k:
        raise DataError(f"cannot split {len(ids)} cases into {k} folds")

    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    chunks = np.array_split(np.arange(len(order)), k)
    folds = []
    for chunk in chunks:
        val = tuple(sorted(order[i] for i in chunk))
        train = tuple(sorted(set(order) - set(val)))
        folds.append((train, val))
    return FoldSplit(tuple(folds), seed)


def one_hot(mask: LabelMask) -> np.ndarray:
    """Per-class binary grids, shape (C, Z, Y, X); channels sum to 1 per voxel."""
    c = mask.scheme.num_classes
    return (mask.labels[None] == np.arange(c, dtype=mask.labels.dtype)[:, None, None, None]
            ).astype(np.uint8)


# ---------------------------------------------------------------------------
# Raw on-disk format: <case>.json header + <case>.f32 image / <case>.u8 mask.
# Blobs are little-endian, voxel order z-major then y then x (C order).

def save_raw_case(directory: str | Path, case_id: str, volume: Optional[Volume] = None,
                  mask: Optional[LabelMask] = None,
                  spacing: Optional[tuple[float, float, float]] = None,
                  shape: Optional[tuple[int, int, int]] = None) -> ManifestEntry:
    """Write a case in the raw format and return a manifest entry for it."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if volume is not None:
        spacing = volume.spacing
        shape = volume.shape
    elif mask is not None:
        shape = mask.shape
    if shape is None or spacing is None:
        raise DataError("raw case needs at least a volume, or a mask plus explicit spacing")

    header = {
        "case_id": case_id,
        "shape": list(shape),
        "spacing": list(spacing),
        "image": f"{case_id}.f32" if volume is not None else None,
        "mask": f"{case_id}.u8" if mask is not None else None,
    }
    (directory / f"{case_id}.json").write_text(json.dumps(header, indent=2) + "\n")
    if volume is not None:
        vol32 = np.ascontiguousarray(volume.data, dtype="<f4")
        (directory / f"{case_id}.f32").write_bytes(vol32.tobytes())
    if mask is not None:
        if mask.shape != tuple(shape):
            raise DataError(f"{case_id}: mask shape {mask.shape} != volume shape {tuple(shape)}")
        (directory / f"{case_id}.u8").write_bytes(
            np.ascontiguousarray(mask.labels, dtype=np.uint8).tobytes())

    return ManifestEntry(
        case_id,
        directory / f"{case_id}.json",
        directory / f"{case_id}.u8" if mask is not None else None,
        None,
    )


def _read_raw_header(header_path: Path) -> dict:
    try:
        header = json.loads(header_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read raw header {header_path}: {exc}") from exc
    for key in ("shape", "spacing"):
        if key not in header:
            raise DataError(f"{header_path}: raw header missing {key!r}")
    return header


def _raw_header_for(path: Path) -> Path:
    """Header path for a raw blob (.f32/.u8): same stem, .json suffix."""
    return path.with_suffix(".json")


def read_raw_volume(header_path: str | Path) -> Volume:
    header_path = Path(header_path)
    header = _read_raw_header(header_path)
    if not header.get("image"):
        raise DataError(f"{header_path}: raw case has no image blob")
    shape = tuple(header["shape"])
    blob = header_path.parent / header["image"]
    try:
        raw = np.frombuffer(blob.read_bytes(), dtype="<f4")
    except OSError as exc:
        raise DataError(f"cannot read {blob}: {exc}") from exc
    if raw.size != int(np.prod(shape)):
        raise DataError(f"{blob}: blob size {raw.size} does not match shape {shape}")
    data = raw.reshape(shape).astype(np.float32)
    return Volume.from_array(data, header["spacing"], header.get("case_id", header_path.stem))


def read_raw_mask(path: str | Path, scheme: ClassScheme) -> LabelMask:
    path = Path(path)
    header = _read_raw_header(_raw_header_for(path))
    shape = tuple(header["shape"])
    try:
        raw = np.frombuffer(path.read_bytes(), dtype=np.uint8)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if raw.size != int(np.prod(shape)):
        raise DataError(f"{path}: blob size {raw.size} does not match shape {shape}")
    return LabelMask(raw.reshape(shape).copy(), scheme)


def _is_nifti(path: Path) -> bool:
    return path.name.endswith(".nii") or path.name.endswith(".nii.gz")


def load_case(entry: ManifestEntry, scheme: ClassScheme) -> tuple[Volume, Optional[LabelMask]]:
    """Load one case; volume and mask are checked for shape agreement.

    Supports NIfTI-1 (.nii/.nii.gz) and the raw format (volume_path is the
    .json header, mask_path the .u8 blob).
    """
    vpath = Path(entry.volume_path)
    if _is_nifti(vpath):
        data, spacing = nifti.read(vpath)
        volume = Volume.from_array(data, spacing, entry.case_id)
    elif vpath.suffix == ".json":
        volume = read_raw_volume(vpath)
        volume = Volume(volume.data, volume.spacing, entry.case_id, volume.original_shape)
    else:
        raise DataError(f"{entry.case_id}: unrecognized volume format {vpath.name}")

    if entry.mask_path is None:
        return volume, None

    mpath = Path(entry.mask_path)
    if _is_nifti(mpath):
        mdata, _ = nifti.read(mpath)
        mdata = np.rint(mdata).astype(np.int64)
        if mdata.min() < 0 or mdata.max() >= scheme.num_classes:
            raise DataError(
                f"{entry.case_id}: mask labels outside [0, {scheme.num_classes - 1}]")
        mask = LabelMask(mdata.astype(np.uint8), scheme)
    elif mpath.suffix == ".u8":
        mask = read_raw_mask(mpath, scheme)
    else:
        raise DataError(f"{entry.case_id}: unrecognized mask format {mpath.name}")

    if mask.shape != volume.shape:
        raise DataError(
            f"{entry.case_id}: mask shape {mask.shape} != volume shape {volume.shape}")
    return volume, mask


def save_mask(path: str | Path, mask: LabelMask,
              spacing: tuple[float, float, float]) -> None:
    """Write a label mask as NIfTI (.nii/.nii.gz) or raw (.u8 + .json header)."""
    path = Path(path)
    if _is_nifti(path):
        nifti.write(path, mask.labels.astype(np.uint8), spacing)
    elif path.suffix == ".u8":
        save_raw_case(path.parent, path.stem, mask=mask, spacing=spacing, shape=mask.shape)
    else:
        raise DataError(f"unrecognized mask output format {path.name}")
