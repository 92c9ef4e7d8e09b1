"""Registration accuracy metrics: corner relative distance, success rate, Dice, HD-95."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage


class EmptyMaskError(ValueError):
    """HD-95 is undefined when either mask is empty."""


def image_corners(extents) -> np.ndarray:
    """The four corner pixel centres of a 2-D image, ``(4, 2)`` in (row, col)."""
    h, w = (int(e) for e in extents)
    return np.array([[0, 0], [0, w - 1], [h - 1, 0], [h - 1, w - 1]], dtype=np.float64)


def corner_relative_distance(t_est, t_gt, extents) -> float:
    """Mean corner error of ``t_est`` against ``t_gt`` as a percentage of max(H, W).

    Both transforms are callables mapping ``(n, 2)`` pixel positions in the
    transformed frame to the fixed frame.
    """
    if len(extents) != 2:
        raise ValueError("corner distance is defined for 2-D images")
    corners = image_corners(extents)
    err = np.linalg.norm(np.asarray(t_est(corners)) - np.asarray(t_gt(corners)), axis=1)
    return float(100.0 * err.mean() / max(extents))


def field_transform(displacement: np.ndarray):
    """Callable ``x -> x + u(x)`` for a dense voxel-unit field; points are rounded to voxels."""
    disp = np.asarray(displacement)

    def apply(points):
        pts = np.asarray(points, dtype=np.float64)
        idx = np.clip(np.rint(pts).astype(np.int64), 0, np.array(disp.shape[:-1]) - 1)
        return pts + disp[tuple(idx.T)]

    return apply


def success_rate(distances, threshold: float = 2.0) -> float:
    """Fraction of distances strictly below ``threshold``."""
    d = np.asarray(list(distances), dtype=np.float64)
    if d.size == 0:
        raise ValueError("success_rate needs at least one distance")
    if threshold <= 0:
        raise ValueError("threshold must be > 0")
    return float(np.mean(d < threshold))


def _values(mask):
    return np.asarray(mask.values if hasattr(mask, "values") else mask)


def dice(a, b) -> float:
    """``2|A & B| / (|A| + |B|)``; 1.0 when both masks are empty."""
    a = _values(a).astype(bool)
    b = _values(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def weighted_dice(dice_values, counts) -> float:
    """Dice averaged with per-label reference voxel counts as weights.

    Both arguments are either aligned sequences or dicts keyed by label.
    """
    if isinstance(dice_values, dict):
        if set(dice_values) != set(counts):
            raise ValueError("dice values and counts cover different labels")
        keys = sorted(dice_values)
        dv = np.array([dice_values[k] for k in keys], dtype=np.float64)
        cn = np.array([counts[k] for k in keys], dtype=np.float64)
    else:
        dv = np.asarray(dice_values, dtype=np.float64)
        cn = np.asarray(counts, dtype=np.float64)
        if dv.shape != cn.shape:
            raise ValueError("dice values and counts differ in length")
    total = cn.sum()
    if total <= 0:
        raise ValueError("total reference count must be positive")
    return float(np.sum(cn * dv) / total)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one face neighbour outside the mask (image edge counts as outside)."""
    m = np.asarray(mask, dtype=bool)
    structure = ndimage.generate_binary_structure(m.ndim, 1)
    interior = ndimage.binary_erosion(m, structure=structure, border_value=0)
    return m & ~interior


def surface_distances(a, b, spacing=None) -> tuple[np.ndarray, np.ndarray]:
    """Distances (mm) from each boundary voxel of ``a`` to the nearest boundary voxel of ``b``, and back."""
    a = _values(a).astype(bool)
    b = _values(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        raise EmptyMaskError("HD-95 needs two non-empty masks")
    spacing = tuple(float(s) for s in (spacing or (1.0,) * a.ndim))
    ba, bb = boundary(a), boundary(b)
    # exact Euclidean distance to the other boundary, anisotropic spacing
    dist_to_b = ndimage.distance_transform_edt(~bb, sampling=spacing)
    dist_to_a = ndimage.distance_transform_edt(~ba, sampling=spacing)
    return dist_to_b[ba], dist_to_a[bb]


def hd95(a, b, spacing=None) -> float:
    """95th percentile (linear interpolation) of the pooled symmetric boundary distances."""
    if spacing is None and hasattr(a, "spacing"):
        spacing = a.spacing
    d_ab, d_ba = surface_distances(a, b, spacing)
    return float(np.percentile(np.concatenate([d_ab, d_ba]), 95))


def label_metrics(estimated, reference, spacing=None, labels=None) -> dict:
    """Per-label Dice/HD-95 plus mean and volume-weighted Dice.

    Labels default to the non-zero values of ``reference``. HD-95 is NaN for a
    label whose estimated mask is empty.
    """
    est = _values(estimated)
    ref = _values(reference)
    if spacing is None and hasattr(reference, "spacing"):
        spacing = reference.spacing
    if labels is None:
        labels = [int(v) for v in np.unique(ref) if v != 0]
    per = {}
    for lab in labels:
        a, b = est == lab, ref == lab
        try:
            h = hd95(a, b, spacing)
        except EmptyMaskError:
            h = float("nan")
        per[lab] = {"dice": dice(a, b), "hd95": h, "count": int(b.sum())}
    dices = {k: v["dice"] for k, v in per.items()}
    counts = {k: v["count"] for k, v in per.items()}
    hds = [v["hd95"] for v in per.values() if np.isfinite(v["hd95"])]
    return {
        "labels": per,
        "mean_dice": float(np.mean(list(dices.values()))) if per else float("nan"),
        "weighted_dice": weighted_dice(dices, counts) if per else float("nan"),
        "mean_hd95": float(np.mean(hds)) if hds else float("nan"),
    }


@dataclass
class EvalReport:
    """Per-pair rows plus mean/std aggregates of every numeric column."""

    rows: list[dict] = field(default_factory=list)
    threshold: float | None = None

    def add(self, **row) -> None:
        self.rows.append(row)

    def numeric_columns(self) -> list[str]:
        cols = []
        for row in self.rows:
            for k, v in row.items():
                if k not in cols and isinstance(v, (int, float)) and not isinstance(v, bool):
                    cols.append(k)
        return cols

    def aggregate(self) -> dict:
        out = {"count": len(self.rows)}
        for col in self.numeric_columns():
            vals = np.array([r[col] for r in self.rows if col in r], dtype=np.float64)
            vals = vals[np.isfinite(vals)]
            out[col] = {
                "mean": float(vals.mean()) if vals.size else float("nan"),
                "std": float(vals.std()) if vals.size else float("nan"),
            }
        if self.threshold is not None and any("relative_distance" in r for r in self.rows):
            out["success_rate"] = success_rate([r["relative_distance"] for r in self.rows], self.threshold)
            out["threshold"] = self.threshold
        return out

    def write(self, csv_path, json_path) -> None:
        cols = []
        for row in self.rows:
            for k in row:
                if k not in cols:
                    cols.append(k)
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols)
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row)
        Path(json_path).write_text(json.dumps(self.aggregate(), indent=2))
