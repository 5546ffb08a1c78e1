"""
Superpixels and object proposals from boundary probability maps.

A lightweight stand-in for multiscale combinatorial grouping: watershed
superpixels are computed on several boundary maps, overlaid into a common
refinement (level 1), and greedily merged along their weakest shared edges
inside the regions of the coarsest partition (level 2).
"""

from __future__ import annotations

import heapq
import re
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy import ndimage

_NEIGHBOURS = ((-1, 0), (0, -1), (0, 1), (1, 0))


@dataclass
class SuperpixelPartition:
    labels: np.ndarray  # (H, W) int, values 0..num_regions-1
    num_regions: int
    scale_tag: str = ""


@dataclass
class ProposalSet:
    labels: np.ndarray  # level-1 superpixel labels
    proposals: list[tuple[int, ...]]  # each proposal as sorted level-1 ids
    levels: list[int]
    merge_order: list[tuple[tuple[int, ...], tuple[int, ...], float]] = field(default_factory=list)

    @property
    def num_level1(self) -> int:
        return int(self.labels.max()) + 1

    def mask(self, i: int) -> np.ndarray:
        return np.isin(self.labels, self.proposals[i])

    def level(self, lvl: int) -> list[tuple[int, ...]]:
        return [p for p, l in zip(self.proposals, self.levels) if l == lvl]


def _plateau_minima(v: np.ndarray):
    """Raster-ordered list of pixel lists, one per regional-minimum plateau."""
    h, w = v.shape
    seen = np.zeros(v.shape, dtype=bool)
    minima = []
    for r in range(h):
        for c in range(w):
            if seen[r, c]:
                continue
            val = v[r, c]
            comp = [(r, c)]
            seen[r, c] = True
            is_min = True
            k = 0
            while k < len(comp):
                pr, pc = comp[k]
                k += 1
                for dr, dc in _NEIGHBOURS:
                    qr, qc = pr + dr, pc + dc
                    if 0 <= qr < h and 0 <= qc < w:
                        q = v[qr, qc]
                        if q == val:
                            if not seen[qr, qc]:
                                seen[qr, qc] = True
                                comp.append((qr, qc))
                        elif q < val:
                            is_min = False
            if is_min:
                minima.append(sorted(comp))
    return minima


def watershed(boundary_prob, min_prob: float = 0.10, scale_tag: str = "") -> SuperpixelPartition:
    """
    Priority-flood watershed from the regional minima of a boundary map.

    Values below ``min_prob`` are floored to zero so faint responses form a
    single plateau. Each pixel takes the label of the first already-labelled
    neighbour to be processed; the queue is ordered by (value, arrival), and
    seeds enter in raster order, so ties go to the lower label.
    """
    v = np.asarray(boundary_prob, dtype=np.float64)
    if v.ndim != 2 or v.size == 0:
        raise ValueError(f"boundary map must be a non-empty 2D array, got shape {v.shape}")
    if np.any(~np.isfinite(v)) or v.min() < 0 or v.max() > 1:
        raise ValueError("boundary probabilities must lie in [0, 1]")
    v = np.where(v < min_prob, 0.0, v)
    h, w = v.shape
    labels = np.full(v.shape, -1, dtype=np.int64)
    heap = []
    seq = 0
    for lab, comp in enumerate(_plateau_minima(v)):
        for r, c in comp:
            labels[r, c] = lab
            heap.append((v[r, c], seq, r, c))
            seq += 1
    heapq.heapify(heap)
    while heap:
        _, _, r, c = heapq.heappop(heap)
        lab = labels[r, c]
        for dr, dc in _NEIGHBOURS:
            qr, qc = r + dr, c + dc
            if 0 <= qr < h and 0 <= qc < w and labels[qr, qc] < 0:
                labels[qr, qc] = lab
                heapq.heappush(heap, (v[qr, qc], seq, qr, qc))
                seq += 1
    return SuperpixelPartition(labels, int(labels.max()) + 1, scale_tag)


def relabel_connected(labels) -> np.ndarray:
    """Split every label into 4-connected pieces and renumber in raster order."""
    labels = np.asarray(labels)
    out = np.full(labels.shape, -1, dtype=np.int64)
    nxt = 0
    for val in np.unique(labels):
        comp, n = ndimage.label(labels == val)
        out[comp > 0] = comp[comp > 0] - 1 + nxt
        nxt += n
    # raster-order renumbering
    _, first = np.unique(out.ravel(), return_index=True)
    order = np.argsort(first, kind="stable")
    remap = np.empty_like(order)
    remap[order] = np.arange(order.size)
    return remap[out]


def overlay(partitions) -> np.ndarray:
    """Common refinement of several partitions, 4-connected, raster-numbered."""
    shape = partitions[0].labels.shape
    key = np.zeros(shape, dtype=np.int64)
    for p in partitions:
        if p.labels.shape != shape:
            raise ValueError(f"partition dims {p.labels.shape} != {shape}")
        key = key * (p.num_regions + 1) + p.labels
    return relabel_connected(key)


def _edge_stats(labels: np.ndarray, boundary_prob: np.ndarray):
    """Sum and count of mean pair boundary probability on each region adjacency."""
    stats: dict[tuple[int, int], list[float]] = {}
    for a, b, pa, pb in (
        (labels[:, :-1], labels[:, 1:], boundary_prob[:, :-1], boundary_prob[:, 1:]),
        (labels[:-1, :], labels[1:, :], boundary_prob[:-1, :], boundary_prob[1:, :]),
    ):
        diff = a != b
        lo = np.minimum(a[diff], b[diff])
        hi = np.maximum(a[diff], b[diff])
        strength = 0.5 * (pa[diff] + pb[diff])
        for i, j, s in zip(lo.tolist(), hi.tolist(), strength.tolist()):
            e = stats.setdefault((i, j), [0.0, 0])
            e[0] += s
            e[1] += 1
    return stats


def build_hierarchy(partitions, boundary_prob) -> ProposalSet:
    """
    Two-level proposal set.

    Level 1 is the common refinement of ``partitions``. Level 2 merges
    adjacent level-1 regions in ascending order of mean shared-edge boundary
    probability, only within a single region of the coarsest partition;
    every region formed along the way, and every final region, is kept.
    """
    if not partitions:
        raise ValueError("need at least one partition")
    bp = np.asarray(boundary_prob, dtype=np.float64)
    shape = partitions[0].labels.shape
    if any(p.labels.shape != shape for p in partitions) or bp.shape != shape:
        raise ValueError("partitions and boundary map must share dims")
    lv1 = overlay(partitions)
    n1 = int(lv1.max()) + 1
    coarse_part = min(reversed(partitions), key=lambda p: p.num_regions)
    # each level-1 region sits inside exactly one coarse region
    coarse_arr = np.zeros(n1, dtype=np.int64)
    coarse_arr[lv1.ravel()] = coarse_part.labels.ravel()
    coarse = dict(enumerate(coarse_arr.tolist()))

    members = {i: (i,) for i in range(n1)}
    edges: dict[int, dict[int, list[float]]] = {i: {} for i in range(n1)}
    for (i, j), (s, c) in _edge_stats(lv1, bp).items():
        edges[i][j] = [s, c]
        edges[j][i] = [s, c]

    heap = []
    for i in range(n1):
        for j, (s, c) in edges[i].items():
            if i < j and coarse[i] == coarse[j]:
                heap.append((s / c, i, j))
    heapq.heapify(heap)

    alive = set(range(n1))
    nxt = n1
    merged = []
    merge_order = []
    while heap:
        strength, i, j = heapq.heappop(heap)
        if i not in alive or j not in alive:
            continue
        k = nxt
        nxt += 1
        members[k] = tuple(sorted(members[i] + members[j]))
        merge_order.append((members[i], members[j], strength))
        alive -= {i, j}
        nb: dict[int, list[float]] = {}
        for src in (i, j):
            for n, (s, c) in edges.pop(src).items():
                if n in (i, j):
                    continue
                e = nb.setdefault(n, [0.0, 0])
                e[0] += s
                e[1] += c
                del edges[n][src]
        edges[k] = nb
        coarse[k] = coarse[i]
        for n, (s, c) in nb.items():
            edges[n][k] = [s, c]
            if coarse[n] == coarse[k]:
                heapq.heappush(heap, (s / c, n, k))
        alive.add(k)
        merged.append(members[k])

    final = sorted(members[k] for k in alive)
    level2 = list(dict.fromkeys(merged + final))
    proposals = [(i,) for i in range(n1)] + level2
    levels = [1] * n1 + [2] * len(level2)
    return ProposalSet(lv1, proposals, levels, merge_order)


def _greedy_dsc(sizes: np.ndarray, overlaps: np.ndarray, gt_size: int):
    """Greedy region selection by descending overlap ratio; returns (indices, dsc)."""
    ratio = np.divide(overlaps, sizes, out=np.zeros(len(sizes)), where=sizes > 0)
    order = sorted(range(len(sizes)), key=lambda i: (-ratio[i], i))
    inter = 0
    size = 0
    best = 1.0 if gt_size == 0 else 0.0
    chosen = []
    for i in order:
        cand = 2.0 * (inter + overlaps[i]) / (size + sizes[i] + gt_size)
        if cand > best:
            best = cand
            inter += overlaps[i]
            size += sizes[i]
            chosen.append(i)
    return sorted(chosen), best


def optimal_labeling(s: ProposalSet, gt):
    """Best achievable ground-truth labelling with level-1 superpixels: ``(mask, dsc)``."""
    masks, dsc = optimal_labeling_volume([s], [gt])
    return masks[0], dsc


def optimal_labeling_volume(sets, gts):
    """
    Greedy DSC-maximising superpixel selection pooled over several slices, so
    the returned DSC is that of the stacked volume.
    """
    sizes, overlaps, owner = [], [], []
    gt_size = 0
    for k, (s, gt) in enumerate(zip(sets, gts)):
        gt = np.asarray(gt).astype(bool)
        if gt.shape != s.labels.shape:
            raise ValueError(f"ground truth {gt.shape} != superpixel grid {s.labels.shape}")
        n = s.num_level1
        sizes.append(np.bincount(s.labels.ravel(), minlength=n))
        overlaps.append(np.bincount(s.labels.ravel(), weights=gt.ravel(), minlength=n).astype(np.int64))
        owner += [(k, r) for r in range(n)]
        gt_size += int(gt.sum())
    chosen, dsc = _greedy_dsc(np.concatenate(sizes), np.concatenate(overlaps), gt_size)
    picked: list[list[int]] = [[] for _ in sets]
    for i in chosen:
        k, r = owner[i]
        picked[k].append(r)
    masks = [np.isin(s.labels, p).astype(np.uint8) for s, p in zip(sets, picked)]
    return masks, float(dsc)


def exhaustive_best_dsc(s: ProposalSet, gt) -> float:
    """Exact optimum over all subsets of level-1 regions (exponential; small inputs only)."""
    gt = np.asarray(gt).astype(bool)
    n = s.num_level1
    sizes = np.bincount(s.labels.ravel(), minlength=n)
    overlaps = np.bincount(s.labels.ravel(), weights=gt.ravel(), minlength=n)
    g = gt.sum()
    best = 1.0 if g == 0 else 0.0
    for k in range(1, n + 1):
        for sub in combinations(range(n), k):
            idx = list(sub)
            best = max(best, 2.0 * overlaps[idx].sum() / (sizes[idx].sum() + g))
    return float(best)


def write_pgm(path, labels) -> None:
    """Binary PGM of an integer label image (16-bit when labels exceed 255)."""
    labels = np.asarray(labels)
    maxval = max(int(labels.max()), 1)
    if labels.min() < 0 or maxval > 65535:
        raise ValueError("labels must lie in [0, 65535] for PGM export")
    h, w = labels.shape
    dtype = ">u2" if maxval > 255 else "u1"
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode() + labels.astype(dtype).tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", buf)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(buf, dtype=dtype, count=w * h, offset=m.end())
    return data.reshape(h, w).astype(np.int64)
