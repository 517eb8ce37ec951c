"""Metrics Module - keyreg

Registration quality on the fixed grid: MSE, SSIM, soft Dice and Hausdorff
distance in world millimetres. Nothing here resamples.
"""

from __future__ import annotations

import logging
import math
from typing import Dict, Iterable, Mapping, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, Field
from scipy import ndimage
from scipy.spatial import cKDTree

from coords import WorldAffine, apply_affine
from errors import DimMismatch, EmptyMask, ParseError, UnknownLabel
from warp import Volume

logger = logging.getLogger(__name__)

SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DICE_EPS = 1e-6
_FACE_STRUCTURE = ndimage.generate_binary_structure(3, 1)

LabelGrid = Union[np.ndarray, Mapping[int, np.ndarray]]


class MetricReport(BaseModel):
    """Metrics for one registered pair; per-label maps share their key set."""

    mse: float = Field(ge=0.0)
    ssim: float = Field(ge=-1.0, le=1.0)
    soft_dice: Dict[int, float] = Field(default_factory=dict)
    soft_dice_mean: Optional[float] = None
    hausdorff_mm: Dict[int, float] = Field(default_factory=dict)
    hausdorff_mean: Optional[float] = None


def _as_array(v) -> np.ndarray:
    return v.data if isinstance(v, Volume) else np.asarray(v)


def _check_dims(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimMismatch(f"grid dims differ: {a.shape} vs {b.shape}")


def mse(a, b) -> float:
    x = _as_array(a).astype(np.float64)
    y = _as_array(b).astype(np.float64)
    _check_dims(x, y)
    return float(np.mean((x - y) ** 2))


def shared_data_range(a, b) -> float:
    x = _as_array(a)
    y = _as_array(b)
    return float(max(x.max(), y.max()) - min(x.min(), y.min()))


def _window_sizes(shape) -> tuple:
    # thin stacks get the largest odd window that fits
    return tuple(min(SSIM_WINDOW, d if d % 2 else d - 1) for d in shape)


def ssim(a, b, data_range: Optional[float] = None) -> float:
    """Mean local SSIM over every full 7^3 uniform window.

    ``data_range`` is the declared dynamic range L; by default the joint
    range of both inputs, which keeps the metric symmetric.
    """
    x = _as_array(a).astype(np.float64)
    y = _as_array(b).astype(np.float64)
    _check_dims(x, y)
    L = shared_data_range(x, y) if data_range is None else float(data_range)
    if L <= 0:
        L = 1.0
    c1 = (SSIM_K1 * L) ** 2
    c2 = (SSIM_K2 * L) ** 2

    size = _window_sizes(x.shape)
    n = float(np.prod(size))
    cov_norm = n / (n - 1.0) if n > 1 else 1.0

    def mean(v):
        return ndimage.uniform_filter(v, size=size, mode="reflect")

    ux, uy = mean(x), mean(y)
    vx = cov_norm * (mean(x * x) - ux * ux)
    vy = cov_norm * (mean(y * y) - uy * uy)
    vxy = cov_norm * (mean(x * y) - ux * uy)
    s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux ** 2 + uy ** 2 + c1) * (vx + vy + c2))

    pads = [(w - 1) // 2 for w in size]
    interior = tuple(slice(p, d - p) for p, d in zip(pads, x.shape))
    return float(np.clip(s[interior].mean(), -1.0, 1.0))


def _label_mask(grid: LabelGrid, label: int) -> Optional[np.ndarray]:
    if isinstance(grid, Mapping):
        m = grid.get(label)
        return None if m is None else np.asarray(m, dtype=np.float64)
    return (np.asarray(grid) == label).astype(np.float64)


def _has_label(grid: LabelGrid, label: int) -> bool:
    if isinstance(grid, Mapping):
        return label in grid
    return bool(np.any(np.asarray(grid) == label))


def soft_dice(a: LabelGrid, b: LabelGrid, labels: Iterable[int]) -> Dict[int, float]:
    """Per-label (2 sum(a b) + eps) / (sum a + sum b + eps).

    ``a`` and ``b`` are integer label grids or mappings label -> probability grid.
    """
    out: Dict[int, float] = {}
    for label in labels:
        if not (_has_label(a, label) or _has_label(b, label)):
            raise UnknownLabel(f"label {label} appears in neither grid")
        ma, mb = _label_mask(a, label), _label_mask(b, label)
        if ma is None:
            ma = np.zeros_like(mb)
        if mb is None:
            mb = np.zeros_like(ma)
        _check_dims(ma, mb)
        out[int(label)] = float((2.0 * np.sum(ma * mb) + DICE_EPS) / (ma.sum() + mb.sum() + DICE_EPS))
    return out


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one face-adjacent background neighbour (off-grid counts)."""
    mask = np.asarray(mask, dtype=bool)
    interior = ndimage.binary_erosion(mask, structure=_FACE_STRUCTURE, border_value=0)
    return np.argwhere(mask & ~interior)


def _surface_world(labels: np.ndarray, affine: WorldAffine, label: int) -> np.ndarray:
    mask = np.asarray(labels) == label
    if not mask.any():
        raise EmptyMask(f"label {label} is empty")
    return apply_affine(affine.matrix, boundary_voxels(mask).astype(np.float64))


def hausdorff_mm(
    a: np.ndarray,
    a_affine: WorldAffine,
    b: np.ndarray,
    b_affine: WorldAffine,
    labels: Iterable[int],
    percentile: float = 100.0,
) -> Dict[int, float]:
    """Symmetric boundary Hausdorff distance in world mm, per label.

    The grids may differ in dims and affine. ``percentile=100`` is the exact
    maximum; lower values take that percentile of each directed distance set.
    """
    out: Dict[int, float] = {}
    for label in labels:
        pa = _surface_world(a, a_affine, label)
        pb = _surface_world(b, b_affine, label)
        d_ab, _ = cKDTree(pb).query(pa)
        d_ba, _ = cKDTree(pa).query(pb)
        if percentile >= 100.0:
            hd = max(d_ab.max(), d_ba.max())
        else:
            hd = max(np.percentile(d_ab, percentile), np.percentile(d_ba, percentile))
        out[int(label)] = float(hd)
    return out


def _mean(values: Mapping[int, float]) -> Optional[float]:
    return float(np.mean(list(values.values()))) if values else None


def evaluate_pair(
    a: Volume,
    b: Volume,
    labels: Optional[Sequence[int]] = None,
    data_range: Optional[float] = None,
    hd_percentile: float = 100.0,
) -> MetricReport:
    """All metrics for two volumes on the same grid.

    Label metrics are computed when both volumes carry labels; by default
    over every non-background label present in either.
    """
    report = MetricReport(mse=mse(a, b), ssim=ssim(a, b, data_range))
    if a.labels is not None and b.labels is not None:
        if labels is None:
            labels = sorted(set(a.label_ids()) | set(b.label_ids()))
        dice = soft_dice(a.labels, b.labels, labels)
        present = [lab for lab in labels if np.any(a.labels == lab) and np.any(b.labels == lab)]
        hd = hausdorff_mm(a.labels, a.affine, b.labels, b.affine, present, hd_percentile)
        for lab in labels:
            if lab not in hd:
                logger.warning("label %d is missing from one grid; its Hausdorff distance is infinite", lab)
                hd[int(lab)] = math.inf
        hd = {lab: hd[lab] for lab in sorted(hd)}
        report.soft_dice = dice
        report.soft_dice_mean = _mean(dice)
        report.hausdorff_mm = hd
        report.hausdorff_mean = _mean(hd)
    return report


# ----------------------------------------------------------------------------
# key/value text format
# ----------------------------------------------------------------------------

def format_report(report: MetricReport) -> str:
    """One ``metric.label = value`` line per value."""
    lines = [f"mse.all = {report.mse!r}", f"ssim.all = {report.ssim!r}"]
    for name, values, mean in (
        ("soft_dice", report.soft_dice, report.soft_dice_mean),
        ("hausdorff_mm", report.hausdorff_mm, report.hausdorff_mean),
    ):
        for label in sorted(values):
            lines.append(f"{name}.{label} = {values[label]!r}")
        if mean is not None:
            lines.append(f"{name}.mean = {mean!r}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> MetricReport:
    fields: Dict[str, object] = {"soft_dice": {}, "hausdorff_mm": {}}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ParseError("expected 'metric.label = value'", lineno, 1)
        metric, dot, label = key.strip().partition(".")
        if not dot:
            raise ParseError(f"key {key.strip()!r} has no label part", lineno, 1)
        try:
            number = float(value)
        except ValueError:
            raise ParseError(f"value {value.strip()!r} is not a number", lineno, raw.index("=") + 2) from None
        if metric in ("mse", "ssim"):
            fields[metric] = number
        elif metric in ("soft_dice", "hausdorff_mm"):
            if label == "mean":
                fields["soft_dice_mean" if metric == "soft_dice" else "hausdorff_mean"] = number
            else:
                try:
                    fields[metric][int(label)] = number  # type: ignore[index]
                except ValueError:
                    raise ParseError(f"label {label!r} is not an integer", lineno, len(metric) + 2) from None
        else:
            raise ParseError(f"unknown metric {metric!r}", lineno, 1)
    return MetricReport(**fields)
