"""Overlap and surface-distance metrics with fold summaries."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .preprocess import surface_3d


def _voxels(m):
    return np.asarray(getattr(m, "voxels", m)).astype(bool)


def dsc(a, b) -> float:
    """Dice similarity; two empty masks score 1."""
    a, b = _voxels(a), _voxels(b)
    if a.shape != b.shape:
        raise ValueError(f"mask dims differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def _surface_points(mask: np.ndarray, spacing) -> np.ndarray:
    """Surface voxel centres in mm as (x, y, z) rows."""
    zs, ys, xs = np.nonzero(surface_3d(mask))
    sx, sy, sz = spacing
    return np.stack([xs * sx, ys * sy, zs * sz], axis=1).astype(np.float64)


def _pair_distance(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return np.sqrt(((p - q) ** 2).sum(axis=-1))


def directed_surface_distance(a, b, spacing=(1.0, 1.0, 1.0)) -> float:
    """Mean over surface voxels of ``a`` of the distance to the nearest surface voxel of ``b``."""
    pa = _surface_points(_voxels(a), spacing)
    pb = _surface_points(_voxels(b), spacing)
    _, idx = cKDTree(pb).query(pa, k=1)
    # recompute so ties in the tree resolve to the identical value a brute-force scan gives
    return float(_pair_distance(pa, pb[idx]).mean())


def avg_min_distance(a, b, spacing=None) -> float:
    """
    Symmetric average minimum surface distance in mm:
    ``(d(a -> b) + d(b -> a)) / 2``.
    """
    if spacing is None:
        spacing = getattr(a, "spacing", (1.0, 1.0, 1.0))
    va, vb = _voxels(a), _voxels(b)
    if va.shape != vb.shape:
        raise ValueError(f"mask dims differ: {va.shape} vs {vb.shape}")
    if not va.any() or not vb.any():
        raise ValueError("average minimum distance is undefined for an empty mask")
    return 0.5 * (directed_surface_distance(va, vb, spacing) + directed_surface_distance(vb, va, spacing))


@dataclass(frozen=True)
class Summary:
    mean: float
    std: float
    min: float
    max: float
    n: int
    std_defined: bool = True


def summarize(values) -> Summary:
    """Mean, sample (n-1) standard deviation, min and max."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot summarize an empty set of cases")
    if v.size == 1:
        return Summary(float(v[0]), 0.0, float(v[0]), float(v[0]), 1, std_defined=False)
    return Summary(float(v.mean()), float(v.std(ddof=1)), float(v.min()), float(v.max()), int(v.size))


def dsc_coverage_curve(dscs, levels=None) -> list[tuple[float, float]]:
    """Fraction of cases whose DSC is at least each level (levels 0.00..1.00 by default)."""
    d = np.asarray(list(dscs), dtype=np.float64)
    if d.size == 0:
        raise ValueError("no cases")
    if levels is None:
        levels = [round(k / 100, 2) for k in range(101)]
    return [(float(l), float(np.mean(d >= l))) for l in levels]


def fmt(x: float, digits: int = 4) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "nan"
    return f"{x:.{digits}f}"
