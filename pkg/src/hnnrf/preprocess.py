"""
CT volume handling: HU windowing, axial slicing, boundary ground truth, and
the raw-plus-header volume file format.

Voxel arrays are stored as numpy arrays of shape ``(nz, ny, nx)`` so that a
C-order dump is x-fastest, and ``voxels[z]`` is an axial ``(ny, nx)`` slice.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class VolumeFormatError(ValueError):
    """Malformed or inconsistent volume file."""


@dataclass(frozen=True)
class BoundingBox:
    """Inclusive voxel index bounds per axis."""

    xmin: int
    xmax: int
    ymin: int
    ymax: int
    zmin: int
    zmax: int

    def __post_init__(self):
        if self.xmin > self.xmax or self.ymin > self.ymax or self.zmin > self.zmax:
            raise ValueError(f"empty bounding box {self}")

    @property
    def shape(self) -> tuple[int, int, int]:
        """(nz, ny, nx) extent of the box."""
        return (self.zmax - self.zmin + 1, self.ymax - self.ymin + 1, self.xmax - self.xmin + 1)

    def fits(self, dims) -> bool:
        nx, ny, nz = dims
        return (
            0 <= self.xmin and self.xmax < nx
            and 0 <= self.ymin and self.ymax < ny
            and 0 <= self.zmin and self.zmax < nz
        )

    def inplane(self) -> tuple[slice, slice]:
        return slice(self.ymin, self.ymax + 1), slice(self.xmin, self.xmax + 1)

    def as_list(self) -> list[int]:
        return [self.xmin, self.xmax, self.ymin, self.ymax, self.zmin, self.zmax]


@dataclass
class Volume:
    voxels: np.ndarray  # (nz, ny, nx) HU or windowed values
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)  # (sx, sy, sz) mm

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float64)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ValueError(f"volume must be a non-empty 3D array, got {self.voxels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.voxels.shape
        return nx, ny, nz


@dataclass
class MaskVolume(Volume):
    def __post_init__(self):
        v = np.asarray(self.voxels)
        if not np.all((v == 0) | (v == 1)):
            raise ValueError("mask volume must be binary")
        super().__post_init__()
        self.voxels = self.voxels.astype(np.uint8)


@dataclass
class SlicePair:
    image: np.ndarray  # (H, W) values in [0, 255]
    interior_gt: np.ndarray  # (H, W) uint8
    boundary_gt: np.ndarray  # (H, W) uint8
    slice_index: int
    case_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.image.shape == self.interior_gt.shape == self.boundary_gt.shape):
            raise ValueError("slice image and ground-truth grids must share dims")


def hu_window(v: Volume, lo: float = -160.0, hi: float = 240.0) -> Volume:
    """Map HU to [0, 255] through a clamped linear window."""
    if not lo < hi:
        raise ValueError(f"window lower bound {lo} must be below upper bound {hi}")
    out = np.clip((v.voxels - lo) / (hi - lo), 0.0, 1.0) * 255.0
    return Volume(out, v.spacing)


def boundary_from_mask(interior) -> np.ndarray:
    """
    One-pixel inner boundary: foreground pixels with at least one background
    4-neighbour, treating the image border as background.
    """
    m = np.asarray(interior).astype(bool)
    if m.ndim != 2:
        raise ValueError(f"expected a 2D mask, got shape {m.shape}")
    p = np.pad(m, 1, constant_values=False)
    interior_core = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return (m & ~interior_core).astype(np.uint8)


def contour_from_mask(interior) -> np.ndarray:
    """
    Two-sided contour: the inner boundary plus the background pixels that
    4-touch the foreground, so the ridge centre lies on the organ edge.
    """
    m = np.asarray(interior).astype(bool)
    if m.ndim != 2:
        raise ValueError(f"expected a 2D mask, got shape {m.shape}")
    p = np.pad(m, 1, constant_values=False)
    touches = p[:-2, 1:-1] | p[2:, 1:-1] | p[1:-1, :-2] | p[1:-1, 2:]
    return (boundary_from_mask(m).astype(bool) | (touches & ~m)).astype(np.uint8)


def surface_3d(mask) -> np.ndarray:
    """3D analogue of :func:`boundary_from_mask` with the 6-neighbourhood."""
    m = np.asarray(mask).astype(bool)
    p = np.pad(m, 1, constant_values=False)
    core = (
        p[:-2, 1:-1, 1:-1] & p[2:, 1:-1, 1:-1]
        & p[1:-1, :-2, 1:-1] & p[1:-1, 2:, 1:-1]
        & p[1:-1, 1:-1, :-2] & p[1:-1, 1:-1, 2:]
    )
    return m & ~core


def extract_axial_slices(
    v: Volume, m: MaskVolume, box: BoundingBox, case_id: str = ""
) -> list[SlicePair]:
    if v.voxels.shape != m.voxels.shape:
        raise ValueError(f"image dims {v.dims} and mask dims {m.dims} differ")
    if not box.fits(v.dims):
        raise ValueError(f"bounding box {box.as_list()} exceeds volume dims {v.dims}")
    ys, xs = box.inplane()
    pairs = []
    for z in range(box.zmin, box.zmax + 1):
        gt = m.voxels[z, ys, xs].copy()
        pairs.append(
            SlicePair(
                image=v.voxels[z, ys, xs].copy(),
                interior_gt=gt,
                boundary_gt=boundary_from_mask(gt),
                slice_index=z,
                case_id=case_id,
            )
        )
    return pairs


# ---------------------------------------------------------------------------
# File format: "<name>.hdr" key = value text, "<name>.raw" little-endian dump.

_DTYPES = {"float32": "<f4", "uint8": "u1"}


def write_volume(path, vol: Volume) -> None:
    """Write ``path.hdr`` and ``path.raw``; masks are uint8, images float32."""
    path = Path(path)
    dtype = "uint8" if isinstance(vol, MaskVolume) else "float32"
    data = vol.voxels.astype(_DTYPES[dtype])
    nx, ny, nz = vol.dims
    header = (
        "format = hnnrf-volume\n"
        "version = 1\n"
        f"dims = {nx} {ny} {nz}\n"
        f"spacing = {' '.join(repr(s) for s in vol.spacing)}\n"
        f"dtype = {dtype}\n"
        "byte_order = little\n"
        "layout = x-fastest\n"
    )
    path.with_suffix(".hdr").write_text(header)
    path.with_suffix(".raw").write_bytes(data.tobytes(order="C"))


def _parse_header(text: str) -> dict[str, str]:
    fields = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise VolumeFormatError(f"header line {lineno} is not 'key = value': {line!r}")
        k, v = line.split("=", 1)
        fields[k.strip()] = v.strip()
    return fields


def read_volume(path) -> Volume:
    path = Path(path)
    hdr, raw = path.with_suffix(".hdr"), path.with_suffix(".raw")
    if not hdr.exists() or not raw.exists():
        raise FileNotFoundError(f"volume {path} needs both {hdr.name} and {raw.name}")
    fields = _parse_header(hdr.read_text())
    try:
        nx, ny, nz = (int(t) for t in fields["dims"].split())
        spacing = tuple(float(t) for t in fields["spacing"].split())
        dtype = fields["dtype"]
    except (KeyError, ValueError) as exc:
        raise VolumeFormatError(f"bad header {hdr}: {exc}") from exc
    if dtype not in _DTYPES:
        raise VolumeFormatError(f"unsupported dtype {dtype!r} in {hdr}")
    data = np.frombuffer(raw.read_bytes(), dtype=_DTYPES[dtype])
    if data.size != nx * ny * nz:
        raise VolumeFormatError(
            f"{raw.name} holds {data.size} voxels, header declares {nx}x{ny}x{nz}"
        )
    data = data.reshape(nz, ny, nx)
    if dtype == "uint8":
        if not np.all(data <= 1):
            raise VolumeFormatError(f"mask {raw.name} is not binary")
        return MaskVolume(data.copy(), spacing)
    return Volume(data.astype(np.float64), spacing)
