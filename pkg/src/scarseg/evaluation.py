"""Segmentation quality metrics and cross-validation reporting.

Metrics follow the conventions of the cardiac LGE segmentation challenges:
Dice overlap, symmetric Hausdorff distance in mm between boundary voxels,
absolute volume difference in mm^3 and its rate relative to the ground-truth
myocardial volume. Evaluation targets are unions of label classes: the
entire myocardium (muscle + scar + MVO), the infarction (scar + MVO) and MVO
alone. When prediction and ground truth are both empty, Dice counts as a
perfect 1.0 and the volume difference as 0; the Hausdorff distance is then
undefined and reported as missing.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import stats
from scipy.spatial import cKDTree

from .data import ClassScheme, DatasetManifest, FoldSplit
from .errors import ConfigError, DataError

# metric columns shown per target, mirroring the cross-validation tables
TARGET_METRICS = {
    "myocardium": ("dsc", "avd", "haus"),
    "infarction": ("dsc", "avd", "avdr"),
    "mvo": ("dsc", "avd", "avdr"),
}


def target_definitions(scheme: ClassScheme,
                       overrides: Optional[dict[str, tuple[int, ...]]] = None
                       ) -> dict[str, tuple[int, ...]]:
    """Evaluation targets as unions of class indices for the given scheme."""
    if overrides is not None:
        return dict(overrides)
    myo, scar = 2, 3
    targets = {}
    if scheme.mvo_index is not None:
        mvo = scheme.mvo_index
        targets["myocardium"] = (myo, scar, mvo)
        targets["infarction"] = (scar, mvo)
        targets["mvo"] = (mvo,)
    else:
        targets["myocardium"] = (myo, scar)
        targets["infarction"] = (scar,)
    return targets


def dsc(pred: np.ndarray, gt: np.ndarray) -> float:
    """Dice overlap 2|P & G| / (|P| + |G|); 1.0 when both sets are empty."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    p, g = int(pred.sum()), int(gt.sum())
    if p + g == 0:
        return 1.0
    inter = int(np.logical_and(pred, gt).sum())
    return 2.0 * inter / (p + g)


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Coordinates (N, 3) of foreground voxels with a background 6-neighbor.

    Voxels on the array edge count as boundary (outside the grid is
    background).
    """
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = np.ones_like(mask)
    for axis in range(3):
        lo = [slice(1, -1)] * 3
        hi = [slice(1, -1)] * 3
        lo[axis] = slice(0, -2)
        hi[axis] = slice(2, None)
        interior &= padded[tuple(lo)] & padded[tuple(hi)]
    return np.argwhere(mask & ~interior)


def hausdorff_mm(pred: np.ndarray, gt: np.ndarray,
                 spacing: tuple[float, float, float]) -> float:
    """Symmetric Hausdorff distance in mm between the two boundary voxel sets."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if not pred.any() or not gt.any():
        raise ValueError("Hausdorff distance undefined for an empty mask")
    scale = np.asarray(spacing, dtype=np.float64)
    p = boundary_voxels(pred) * scale
    g = boundary_voxels(gt) * scale
    d_pg = cKDTree(g).query(p)[0].max()
    d_gp = cKDTree(p).query(g)[0].max()
    return float(max(d_pg, d_gp))


def avd(pred: np.ndarray, gt: np.ndarray,
        spacing: tuple[float, float, float]) -> float:
    """Absolute volume difference in mm^3."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    voxel = float(spacing[0]) * float(spacing[1]) * float(spacing[2])
    return abs(int(pred.sum()) - int(gt.sum())) * voxel


def avdr(pred: np.ndarray, gt: np.ndarray, myocardium_gt: np.ndarray,
         spacing: tuple[float, float, float]) -> float:
    """Volume difference as a fraction of the ground-truth myocardial volume."""
    myo = np.asarray(myocardium_gt, dtype=bool)
    n_myo = int(myo.sum())
    if n_myo == 0:
        raise ValueError("AVDR undefined: empty ground-truth myocardium")
    voxel = float(spacing[0]) * float(spacing[1]) * float(spacing[2])
    return avd(pred, gt, spacing) / (n_myo * voxel)


@dataclass
class TargetMetrics:
    dsc: float
    avd: float
    avdr: Optional[float] = None
    haus: Optional[float] = None   # None when undefined (an empty mask)

    def to_dict(self) -> dict:
        return {"dsc": self.dsc, "avd": self.avd, "avdr": self.avdr, "haus": self.haus}


@dataclass
class CaseMetrics:
    case_id: str
    targets: dict[str, TargetMetrics]

    def to_dict(self) -> dict:
        return {"case_id": self.case_id,
                "targets": {k: v.to_dict() for k, v in self.targets.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "CaseMetrics":
        return cls(d["case_id"],
                   {k: TargetMetrics(**v) for k, v in d["targets"].items()})


def evaluate_case(pred_labels: np.ndarray, gt_labels: np.ndarray, scheme: ClassScheme,
                  spacing: tuple[float, float, float], case_id: str = "",
                  targets: Optional[dict[str, tuple[int, ...]]] = None) -> CaseMetrics:
    """All metrics for all evaluation targets of one case."""
    pred_labels = np.asarray(pred_labels)
    gt_labels = np.asarray(gt_labels)
    if pred_labels.shape != gt_labels.shape:
        raise DataError(f"{case_id}: prediction shape {pred_labels.shape} != "
                        f"ground truth shape {gt_labels.shape}")
    defs = target_definitions(scheme, targets)
    myo_gt = np.isin(gt_labels, defs["myocardium"])

    out = {}
    for name, classes in defs.items():
        p = np.isin(pred_labels, classes)
        g = np.isin(gt_labels, classes)
        tm = TargetMetrics(dsc=dsc(p, g), avd=avd(p, g, spacing))
        try:
            tm.haus = hausdorff_mm(p, g, spacing)
        except ValueError:
            tm.haus = None
        if name != "myocardium":
            tm.avdr = avdr(p, g, myo_gt, spacing) if myo_gt.any() else None
        out[name] = tm
    return CaseMetrics(case_id, out)


# ---------------------------------------------------------------------------
# aggregation


def _metric_values(cases: Sequence[CaseMetrics], target: str, metric: str) -> list[float]:
    vals = []
    for cm in cases:
        tm = cm.targets.get(target)
        if tm is None:
            continue
        v = getattr(tm, metric)
        if v is not None:
            vals.append(float(v))
    return vals


def fold_mean(cases: Sequence[CaseMetrics]) -> dict[str, dict[str, float]]:
    """Per-target metric means over one fold; undefined values are skipped."""
    if not cases:
        return {}
    targets = cases[0].targets.keys()
    means = {}
    for t in targets:
        means[t] = {}
        for m in ("dsc", "avd", "avdr", "haus"):
            vals = _metric_values(cases, t, m)
            if vals:
                means[t][m] = float(np.mean(vals))
    return means


def aggregate_fold_means(values: Sequence[float]) -> tuple[float, float]:
    """Cross-fold mean and population standard deviation of per-fold means."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


@dataclass
class FoldReport:
    """Per-fold means plus cross-fold mean/SD, recomputable from raw cases."""

    fold_cases: list[list[CaseMetrics]]
    per_fold: list[dict[str, dict[str, float]]] = field(default_factory=list)
    cross: dict[str, dict[str, dict[str, float]]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.per_fold:
            self.recompute()

    def recompute(self) -> None:
        self.per_fold = [fold_mean(cases) for cases in self.fold_cases]
        self.cross = {}
        targets = {t for f in self.per_fold for t in f}
        for t in sorted(targets):
            self.cross[t] = {}
            for m in ("dsc", "avd", "avdr", "haus"):
                vals = [f[t][m] for f in self.per_fold if t in f and m in f[t]]
                if vals:
                    mean, sd = aggregate_fold_means(vals)
                    self.cross[t][m] = {"mean": mean, "sd": sd}

    def to_dict(self) -> dict:
        return {
            "folds": [[cm.to_dict() for cm in cases] for cases in self.fold_cases],
            "per_fold": self.per_fold,
            "cross": self.cross,
        }

    def save_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def save_csv(self, path: str | Path) -> None:
        """Cross-validation table: one row per target/metric, folds as columns."""
        k = len(self.per_fold)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["Target", "Metric"] +
                            [f"Fold {i + 1}" for i in range(k)] + ["Mean", "SD"])
            for target, metrics in TARGET_METRICS.items():
                if target not in self.cross:
                    continue
                for m in metrics:
                    if m not in self.cross[target]:
                        continue
                    percent = m in ("dsc", "avdr")
                    scale = 100.0 if percent else 1.0
                    row = [target, m.upper() + (" (%)" if percent else
                                                " (mm3)" if m == "avd" else " (mm)")]
                    for f in self.per_fold:
                        v = f.get(target, {}).get(m)
                        row.append("" if v is None else f"{v * scale:.2f}")
                    row.append(f"{self.cross[target][m]['mean'] * scale:.2f}")
                    row.append(f"{self.cross[target][m]['sd'] * scale:.2f}")
                    writer.writerow(row)


def summarize_cases(cases: Sequence[CaseMetrics]) -> dict[str, dict[str, dict[str, float]]]:
    """Per-case mean and SD per target/metric (single prediction directory)."""
    out: dict[str, dict[str, dict[str, float]]] = {}
    if not cases:
        return out
    for t in cases[0].targets:
        out[t] = {}
        for m in ("dsc", "avd", "avdr", "haus"):
            vals = _metric_values(cases, t, m)
            if vals:
                out[t][m] = {"mean": float(np.mean(vals)),
                             "sd": float(np.std(vals)),
                             "n": len(vals)}
    return out


def compare_methods(scores_a: dict[str, float], scores_b: dict[str, float]) -> dict:
    """Two-sided paired Wilcoxon signed-rank test on per-case scores.

    Cases must match exactly. With all per-case differences zero the test
    statistic is undefined and p = 1.0 by convention.
    """
    if set(scores_a) != set(scores_b):
        raise DataError("methods were evaluated on different case sets")
    ids = sorted(scores_a)
    a = np.array([scores_a[i] for i in ids], dtype=np.float64)
    b = np.array([scores_b[i] for i in ids], dtype=np.float64)
    diffs = a - b
    if np.all(diffs == 0):
        p_value = 1.0
    else:
        p_value = float(stats.wilcoxon(a, b, alternative="two-sided").pvalue)
    return {
        "n": len(ids),
        "p_value": p_value,
        "mean_a": float(a.mean()), "sd_a": float(a.std()),
        "mean_b": float(b.mean()), "sd_b": float(b.std()),
    }


def cross_validate(manifest: DatasetManifest, folds: FoldSplit,
                   checkpoints: Sequence[tuple[str | Path, str | Path]],
                   pre_cfg, out_dir: Optional[str | Path] = None,
                   device: str = "cpu") -> FoldReport:
    """Predict and score every validation case of every fold.

    `checkpoints` holds one (2D, 3D) checkpoint pair per fold. Writes
    report.json and report.csv when out_dir is given.
    """
    from .data import load_case
    from .inference import predict_cascade
    from .networks import load_checkpoint

    if len(checkpoints) != len(folds):
        raise ConfigError(f"{len(folds)} folds but {len(checkpoints)} checkpoint pairs")

    fold_cases = []
    for (ck2d, ck3d), (_, val_ids) in zip(checkpoints, folds.folds):
        net2d, _ = load_checkpoint(ck2d)
        net3d, _ = load_checkpoint(ck3d)
        net2d.to(device)
        net3d.to(device)
        cases = []
        for cid in val_ids:
            entry = manifest.entry(cid)
            volume, gt = load_case(entry, manifest.scheme)
            if gt is None:
                raise DataError(f"case {cid} has no ground truth to evaluate against")
            result = predict_cascade(net2d, net3d, volume, manifest.scheme, pre_cfg,
                                     lv_center=entry.lv_center, device=device)
            cases.append(evaluate_case(result.labels, gt.labels, manifest.scheme,
                                       volume.spacing, case_id=cid))
        fold_cases.append(cases)

    report = FoldReport(fold_cases)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report.save_json(out_dir / "report.json")
        report.save_csv(out_dir / "report.csv")
    return report
