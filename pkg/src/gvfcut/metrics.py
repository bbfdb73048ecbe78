"""Dice similarity coefficient and average symmetric surface distance."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volume import LabelVolume, edt


class UndefinedMetricError(ValueError):
    pass


def _mask(vol, label):
    data = vol.data if isinstance(vol, LabelVolume) else np.asarray(vol)
    return data == label if label is not None else data.astype(bool)


def dsc(a, b, label=1) -> float:
    """2|A & B| / (|A| + |B|)."""
    ma, mb = _mask(a, label), _mask(b, label)
    if ma.shape != mb.shape:
        raise ValueError("volumes must have the same shape")
    total = int(ma.sum()) + int(mb.sum())
    if total == 0:
        raise UndefinedMetricError("DSC is undefined when both objects are empty")
    return 2.0 * int(np.count_nonzero(ma & mb)) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    """Object voxels with a face-adjacent background voxel; voxels on the
    volume border count as boundary."""
    mask = np.asarray(mask, dtype=bool)
    struct = ndimage.generate_binary_structure(mask.ndim, 1)
    interior = ndimage.binary_erosion(mask, structure=struct, border_value=0)
    return mask & ~interior


def assd(a, b, label=1, spacing=None) -> float:
    """Mean over both boundaries of the distance (mm) to the other boundary."""
    if spacing is None:
        spacing = a.spacing if isinstance(a, LabelVolume) else (1.0,) * np.ndim(a.data if hasattr(a, "data") else a)
    if isinstance(a, LabelVolume) and isinstance(b, LabelVolume) and a.spacing != b.spacing:
        raise ValueError("volumes must have the same spacing")
    ma, mb = _mask(a, label), _mask(b, label)
    if ma.shape != mb.shape:
        raise ValueError("volumes must have the same shape")
    if not ma.any() or not mb.any():
        raise UndefinedMetricError("ASSD is undefined for an empty object")
    sa, sb = boundary(ma), boundary(mb)
    da = edt(sb, spacing)[sa]
    db = edt(sa, spacing)[sb]
    return float((da.sum() + db.sum()) / (da.size + db.size))


@dataclass
class MetricReport:
    dsc: float
    assd: float
    per_object: dict = field(default_factory=dict)


def evaluate(a: LabelVolume, b: LabelVolume, labels=None) -> MetricReport:
    """Per-label DSC/ASSD; the top-level values are the means over labels."""
    if labels is None:
        labels = sorted((set(np.unique(a.data)) | set(np.unique(b.data))) - {0})
    per = {}
    for lab in labels:
        per[int(lab)] = (dsc(a, b, lab), assd(a, b, lab))
    if not per:
        raise UndefinedMetricError("no object labels to compare")
    return MetricReport(
        float(np.mean([v[0] for v in per.values()])),
        float(np.mean([v[1] for v in per.values()])),
        per,
    )
