"""Synthetic CT phantoms: a small blob-shaped organ in noisy soft tissue."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .preprocess import BoundingBox, MaskVolume, Volume


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (32, 32, 24)  # (nx, ny, nz)
    spacing: tuple[float, float, float] = (1.0, 1.0, 2.0)
    organ_hu: tuple[float, float] = (80.0, 15.0)
    background_hu: tuple[float, float] = (-30.0, 40.0)
    noise_hu: float = 10.0
    texture_sigma: float = 2.0  # voxels; 0 gives iid tissue values
    min_fraction: float = 0.005
    max_fraction: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 8:
            raise ValueError(f"phantom dims must be three values >= 8, got {self.dims}")
        if min(self.spacing) <= 0:
            raise ValueError("spacing must be positive")
        if not 0 < self.min_fraction < self.max_fraction < 1:
            raise ValueError("need 0 < min_fraction < max_fraction < 1")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def _organ_mask(spec: PhantomSpec, rng) -> np.ndarray:
    nx, ny, nz = spec.dims
    zz, yy, xx = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    pts = np.stack([xx, yy, zz], axis=-1).astype(float)
    extent = np.array([nx, ny, nz], dtype=float)
    # flattened, in-plane elongated organ; radii in voxels
    base_r = np.array([0.17 * nx, 0.14 * ny, 0.09 * nz])
    center = extent / 2 + rng.uniform(-0.1, 0.1, 3) * extent
    spread = np.array([0.9, 0.9, 0.4])
    field = np.full(pts.shape[:3], -np.inf)
    for i in range(rng.integers(3, 7)):
        r = base_r * rng.uniform(0.7, 1.1, 3)
        c = center if i == 0 else center + rng.uniform(-1, 1, 3) * spread * base_r
        field = np.maximum(field, 1.0 - (((pts - c) / r) ** 2).sum(axis=-1))
    noise = ndimage.gaussian_filter(rng.normal(size=field.shape), sigma=3.0)
    noise *= 0.25 / max(noise.std(), 1e-12)
    mask = field + noise > 0
    lab, n = ndimage.label(mask)
    if n == 0:
        return mask
    sizes = ndimage.sum(mask, lab, index=np.arange(1, n + 1))
    return lab == (1 + int(np.argmax(sizes)))


def _texture(rng, shape, mean: float, std: float, sigma: float) -> np.ndarray:
    """Smooth random field with the given per-voxel mean and standard deviation."""
    t = rng.normal(size=shape)
    if sigma > 0:
        t = ndimage.gaussian_filter(t, sigma=sigma, mode="wrap")
        t /= t.std()
    return mean + std * t


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, MaskVolume]:
    """Deterministic (image, mask) pair; the organ is one 6-connected component."""
    rng = np.random.default_rng(spec.seed)
    for _ in range(200):
        mask = _organ_mask(spec, rng)
        frac = mask.mean()
        if spec.min_fraction <= frac <= spec.max_fraction:
            break
    else:
        raise ValueError(f"could not place an organ within the volume-fraction bounds for {spec}")
    organ = _texture(rng, mask.shape, *spec.organ_hu, spec.texture_sigma)
    background = _texture(rng, mask.shape, *spec.background_hu, spec.texture_sigma)
    hu = np.where(mask, organ, background) + rng.normal(0.0, spec.noise_hu, mask.shape)
    hu = np.clip(hu, -1000.0, 1000.0).astype(np.float32).astype(np.float64)
    return Volume(hu, spec.spacing), MaskVolume(mask.astype(np.uint8), spec.spacing)


def tight_box(mask) -> BoundingBox:
    m = np.asarray(mask).astype(bool)
    if not m.any():
        raise ValueError("ground-truth mask is empty; no bounding box")
    zs, ys, xs = np.nonzero(m)
    return BoundingBox(int(xs.min()), int(xs.max()), int(ys.min()), int(ys.max()), int(zs.min()), int(zs.max()))


def candidate_box(gt, margin_voxels: int = 8, jitter: int = 4, seed: int = 0) -> BoundingBox:
    """
    Stand-in for a learned candidate-region detector: the tight ground-truth
    box grown by ``margin_voxels``, each face moved by up to ``+-jitter``,
    clamped to the volume and re-grown so the organ is always fully inside.
    """
    voxels = gt.voxels if isinstance(gt, Volume) else np.asarray(gt)
    t = tight_box(voxels)
    nz, ny, nx = voxels.shape
    rng = np.random.default_rng(seed)
    j = rng.integers(-jitter, jitter + 1, size=6) if jitter > 0 else np.zeros(6, dtype=int)

    def face(lo, hi, n, jl, jh):
        a = max(0, min(lo - margin_voxels + jl, lo))
        b = min(n - 1, max(hi + margin_voxels + jh, hi))
        return int(a), int(b)

    x0, x1 = face(t.xmin, t.xmax, nx, j[0], j[1])
    y0, y1 = face(t.ymin, t.ymax, ny, j[2], j[3])
    z0, z1 = face(t.zmin, t.zmax, nz, j[4], j[5])
    return BoundingBox(x0, x1, y0, y1, z0, z1)
