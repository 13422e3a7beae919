"""Segmentation metrics: Dice, IoU, Hausdorff and average surface distance.

Distances are in pixel units over boundary point sets (4-connectivity
surface definition). Empty-vs-empty overlap scores as perfect; surface
distances are undefined when exactly one mask is empty and such cases are
flagged instead of scored.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.spatial import cKDTree


@dataclass
class MetricReport:
    dsc: float
    iou: float
    hsd: Optional[float]
    asd: Optional[float]
    flags: List[str] = field(default_factory=list)

    @property
    def undefined(self) -> bool:
        return bool(self.flags)


def _check_masks(pred: np.ndarray, gt: np.ndarray):
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    return p, g


def dsc(pred: np.ndarray, gt: np.ndarray) -> float:
    """Dice similarity 2|P∩G|/(|P|+|G|); both-empty convention: 1.0."""
    p, g = _check_masks(pred, gt)
    denom = p.sum() + g.sum()
    if denom == 0:
        return 1.0
    return 2.0 * np.logical_and(p, g).sum() / denom


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union; both-empty convention: 1.0."""
    p, g = _check_masks(pred, gt)
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return np.logical_and(p, g).sum() / union


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """(row, col) array of foreground pixels with a background 4-neighbor.

    Pixels on the image border count as boundary (out-of-image is background).
    """
    m = np.asarray(mask).astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1]
        & padded[2:, 1:-1]
        & padded[1:-1, :-2]
        & padded[1:-1, 2:]
    )
    return np.argwhere(m & ~interior)


def _directed_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from each point of a to its nearest point of b."""
    tree = cKDTree(b)
    d, _ = tree.query(a, k=1)
    return d


def surface_distances(pred: np.ndarray, gt: np.ndarray):
    """Return (pred→gt, gt→pred) nearest-boundary distance arrays or None."""
    p, g = _check_masks(pred, gt)
    bp = boundary_pixels(p)
    bg = boundary_pixels(g)
    if len(bp) == 0 and len(bg) == 0:
        return np.zeros(0), np.zeros(0)
    if len(bp) == 0 or len(bg) == 0:
        return None
    return _directed_dists(bp, bg), _directed_dists(bg, bp)


def hsd(pred: np.ndarray, gt: np.ndarray, percentile: float = 100.0) -> Optional[float]:
    """Symmetric Hausdorff distance (optionally percentile-softened).

    Returns None (undefined) when exactly one mask is empty; 0.0 for two
    empty masks.
    """
    d = surface_distances(pred, gt)
    if d is None:
        return None
    d_pg, d_gp = d
    if len(d_pg) == 0 and len(d_gp) == 0:
        return 0.0
    if percentile >= 100.0:
        return float(max(d_pg.max(), d_gp.max()))
    return float(max(np.percentile(d_pg, percentile), np.percentile(d_gp, percentile)))


def asd(pred: np.ndarray, gt: np.ndarray) -> Optional[float]:
    """Average surface distance: mean of the two directed mean distances."""
    d = surface_distances(pred, gt)
    if d is None:
        return None
    d_pg, d_gp = d
    if len(d_pg) == 0 and len(d_gp) == 0:
        return 0.0
    return float((d_pg.mean() + d_gp.mean()) / 2.0)


def evaluate_pair(pred: np.ndarray, gt: np.ndarray, percentile: float = 100.0) -> MetricReport:
    p, g = _check_masks(pred, gt)
    flags = []
    if p.any() != g.any():
        flags.append("empty_mismatch")
    return MetricReport(
        dsc=dsc(p, g),
        iou=iou(p, g),
        hsd=hsd(p, g, percentile),
        asd=asd(p, g),
        flags=flags,
    )


def write_metrics_csv(path, case_ids: List[str], reports: List[MetricReport]) -> None:
    """Per-case rows plus an aggregate mean row (distances skip flagged cases).

    Aggregate formatting: 3 decimals for dsc/iou, 2 for hsd/asd.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id", "dsc", "iou", "hsd", "asd", "undefined_flags"])
        for cid, r in zip(case_ids, reports):
            w.writerow(
                [
                    cid,
                    f"{r.dsc:.6f}",
                    f"{r.iou:.6f}",
                    "" if r.hsd is None else f"{r.hsd:.6f}",
                    "" if r.asd is None else f"{r.asd:.6f}",
                    ";".join(r.flags),
                ]
            )
        w.writerow(aggregate_row(reports))


def aggregate_row(reports: List[MetricReport]) -> List[str]:
    d = np.mean([r.dsc for r in reports]) if reports else float("nan")
    i = np.mean([r.iou for r in reports]) if reports else float("nan")
    hs = [r.hsd for r in reports if r.hsd is not None]
    as_ = [r.asd for r in reports if r.asd is not None]
    n_undef = sum(1 for r in reports if r.undefined)
    return [
        "mean",
        f"{d:.3f}",
        f"{i:.3f}",
        f"{np.mean(hs):.2f}" if hs else "",
        f"{np.mean(as_):.2f}" if as_ else "",
        f"undefined={n_undef}",
    ]
