"""
Spatial aggregation: superpixel statistics over CT, interior and boundary
maps, forest probabilities spread back to pixels, threshold calibration, and
re-stacking of slice masks into the volume.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .metrics import dsc
from .preprocess import BoundingBox, MaskVolume

PERCENTILES = (20, 30, 40, 50, 60, 70, 80, 90)
SOURCES = ("ct", "hnn_i", "hnn_b")
STATS = ("mean", "cm2", "cm3", "cm4") + tuple(f"p{q}" for q in PERCENTILES)
FEATURE_NAMES = tuple(f"{src}_{st}" for src in SOURCES for st in STATS) + ("x", "y", "z")
N_FEATURES = len(FEATURE_NAMES)  # 39
THRESHOLD_GRID = tuple(round(0.05 * k, 2) for k in range(1, 20))


def _stats(values: np.ndarray) -> list[float]:
    v = np.sort(values)
    if v[0] == v[-1]:
        return [float(v[0]), 0.0, 0.0, 0.0] + [float(v[0])] * len(PERCENTILES)
    mu = v.mean()
    d = v - mu
    d2 = d * d
    moments = [float(mu), float(d2.mean()), float((d2 * d).mean()), float((d2 * d2).mean())]
    return moments + np.percentile(v, PERCENTILES).tolist()


def _norm(value: float, lo: int, hi: int) -> float:
    return 0.5 if hi == lo else (value - lo) / (hi - lo)


def extract_features(s, ct, hnn_i, hnn_b, slice_z: int, box: BoundingBox) -> np.ndarray:
    """
    39 superpixel features: for each of CT, HNN-I and HNN-B the mean, central
    moments of order 2-4 and the 20..90th percentiles (linear interpolation),
    then the mean x, y, z position normalised to the candidate box.

    ``s`` is a boolean mask over the cropped slice; the grids are crop-sized.
    """
    m = np.asarray(s).astype(bool)
    ct = np.asarray(ct, dtype=np.float64)
    if m.shape != ct.shape or np.shape(hnn_i) != ct.shape or np.shape(hnn_b) != ct.shape:
        raise ValueError("superpixel mask and maps must share the cropped slice dims")
    if not m.any():
        raise ValueError("empty superpixel")
    feats = []
    for grid in (ct, hnn_i, hnn_b):
        feats += _stats(np.asarray(grid, dtype=np.float64)[m])
    rows, cols = np.nonzero(m)
    feats.append(_norm(np.sort(cols + box.xmin).mean(), box.xmin, box.xmax))
    feats.append(_norm(np.sort(rows + box.ymin).mean(), box.ymin, box.ymax))
    feats.append(_norm(float(slice_z), box.zmin, box.zmax))
    return np.array(feats, dtype=np.float64)


def proposal_features(pset, ct, hnn_i, hnn_b, slice_z: int, box: BoundingBox) -> np.ndarray:
    """Feature matrix with one row per proposal in ``pset``."""
    return np.array(
        [extract_features(pset.mask(i), ct, hnn_i, hnn_b, slice_z, box) for i in range(len(pset.proposals))]
    ).reshape(-1, N_FEATURES)


def proposal_labels(pset, gt, positive_fraction: float = 0.5) -> np.ndarray:
    """1 where at least ``positive_fraction`` of a proposal's pixels are foreground."""
    gt = np.asarray(gt).astype(bool)
    n1 = pset.num_level1
    size = np.bincount(pset.labels.ravel(), minlength=n1)
    inside = np.bincount(pset.labels.ravel(), weights=gt.ravel(), minlength=n1)
    out = []
    for p in pset.proposals:
        idx = list(p)
        out.append(int(inside[idx].sum() >= positive_fraction * size[idx].sum()))
    return np.array(out, dtype=np.int64)


def pixel_probability(pset, probs, mode: str = "max") -> np.ndarray:
    """Spread proposal probabilities to pixels by max (or mean) over containing proposals."""
    n1 = pset.num_level1
    probs = np.asarray(probs, dtype=np.float64)
    if probs.size != len(pset.proposals):
        raise ValueError(f"{probs.size} probabilities for {len(pset.proposals)} proposals")
    if mode == "max":
        region = np.zeros(n1)
        for p, pr in zip(pset.proposals, probs):
            idx = list(p)
            region[idx] = np.maximum(region[idx], pr)
    elif mode == "mean":
        total = np.zeros(n1)
        count = np.zeros(n1)
        for p, pr in zip(pset.proposals, probs):
            idx = list(p)
            total[idx] += pr
            count[idx] += 1
        region = total / np.maximum(count, 1)
    else:
        raise ValueError(f"aggregation mode must be 'max' or 'mean', got {mode!r}")
    return region[pset.labels]


@dataclass(frozen=True)
class CalibratedThreshold:
    threshold: float
    train_dsc: float


def calibrate_threshold(train_probs, train_gts, grid=THRESHOLD_GRID) -> CalibratedThreshold:
    """
    Pick the grid threshold maximising mean DSC over the given training cases
    (``prob >= t`` is foreground); ties go to the lowest threshold.
    """
    if len(train_probs) != len(train_gts) or not train_probs:
        raise ValueError("need matching, non-empty lists of probability maps and ground truths")
    best_t, best_d = None, -1.0
    for t in grid:
        d = float(np.mean([dsc(np.asarray(p) >= t, g) for p, g in zip(train_probs, train_gts)]))
        if d > best_d:
            best_t, best_d = t, d
    return CalibratedThreshold(float(best_t), best_d)


def stack_to_volume(masks, box: BoundingBox, dims, spacing=(1.0, 1.0, 1.0)) -> MaskVolume:
    """Place per-slice masks back into a zero volume; no post-processing."""
    nz_box, ny_box, nx_box = box.shape
    if len(masks) != nz_box:
        raise ValueError(f"{len(masks)} slice masks for a box spanning {nz_box} slices")
    if not box.fits(dims):
        raise ValueError(f"box {box.as_list()} exceeds dims {tuple(dims)}")
    nx, ny, nz = dims
    vol = np.zeros((nz, ny, nx), dtype=np.uint8)
    ys, xs = box.inplane()
    for k, m in enumerate(masks):
        m = np.asarray(m)
        if m.shape != (ny_box, nx_box):
            raise ValueError(f"slice mask {m.shape} != box in-plane extent {(ny_box, nx_box)}")
        vol[box.zmin + k, ys, xs] = m.astype(bool)
    return MaskVolume(vol, spacing)


def stack_probabilities(maps, box: BoundingBox, dims) -> np.ndarray:
    """Like :func:`stack_to_volume` for real-valued maps (zeros outside the box)."""
    nx, ny, nz = dims
    vol = np.zeros((nz, ny, nx))
    ys, xs = box.inplane()
    for k, m in enumerate(maps):
        vol[box.zmin + k, ys, xs] = m
    return vol


def write_features_csv(path, rows, labels=None, ids=None) -> None:
    rows = np.asarray(rows, dtype=np.float64).reshape(-1, N_FEATURES)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        head = (["id"] if ids is not None else []) + list(FEATURE_NAMES)
        if labels is not None:
            head.append("label")
        w.writerow(head)
        for k, r in enumerate(rows):
            line = ([ids[k]] if ids is not None else []) + [repr(float(v)) for v in r]
            if labels is not None:
                line.append(int(labels[k]))
            w.writerow(line)
