"""Detector response: voxelization, crosstalk, calibration to photoelectrons."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels, rng
from .physics import DEFAULT_CONSTANTS, PhysicsConstants, TrackDeposit


class GridMismatch(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    """Cubic grid of ``n`` voxels per axis, centered on ``origin``."""

    n: int = 9
    pitch: float = 10.0
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.n < 1 or self.n % 2 == 0:
            raise ValueError("n_voxels_per_axis must be odd")
        if not self.pitch > 0:
            raise ValueError("pitch must be positive")
        object.__setattr__(self, "origin", tuple(float(x) for x in self.origin))

    @property
    def half_extent(self) -> float:
        return 0.5 * self.n * self.pitch

    def to_index(self, x) -> np.ndarray:
        """Continuous voxel-index coordinates of points ``x`` (mm)."""
        x = np.asarray(x, dtype=np.float64)
        return (x - np.asarray(self.origin)) / self.pitch + 0.5 * (self.n - 1)

    def centers(self) -> np.ndarray:
        """Voxel centers, shape (n, n, n, 3)."""
        c = (np.arange(self.n) - 0.5 * (self.n - 1)) * self.pitch
        g = np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1)
        return g + np.asarray(self.origin)

    def padded(self, margin: int) -> "GridSpec":
        return GridSpec(self.n + 2 * margin, self.pitch, self.origin)


SIM_GRID = GridSpec(9, 10.0)
CROP_GRID = GridSpec(7, 10.0)


@dataclass
class VoxelImage:
    grid: GridSpec
    pe: np.ndarray = field(repr=False)

    def __post_init__(self):
        n = self.grid.n
        self.pe = np.asarray(self.pe, dtype=np.float64).reshape(n, n, n)

    @property
    def total(self) -> float:
        return float(self.pe.sum())

    def check_same_grid(self, other: "VoxelImage"):
        if self.grid != other.grid:
            raise GridMismatch(f"grid mismatch: {self.grid} vs {other.grid}")

    def __add__(self, other: "VoxelImage") -> "VoxelImage":
        self.check_same_grid(other)
        return VoxelImage(self.grid, self.pe + other.pe)


def voxelize(td: TrackDeposit, grid: GridSpec, mode: str = "soft") -> VoxelImage:
    """Sum segment light into voxels (MeV-equivalent, before calibration).

    ``hard`` puts each segment in the voxel holding its midpoint; ``soft``
    spreads it over the 8 nearest voxel centers with trilinear weights.
    Weight landing outside the grid is dropped.
    """
    q = grid.to_index(td.midpoints).reshape(-1, 3)
    if mode == "soft":
        img = kernels.scatter_trilinear(q, td.light, grid.n)
    elif mode == "hard":
        img = kernels.scatter_nearest(q, td.light, grid.n)
    else:
        raise ValueError(f"unknown voxelization mode {mode!r}")
    return VoxelImage(grid, img)


def apply_crosstalk(img: VoxelImage, frac: float) -> VoxelImage:
    """Each voxel keeps ``1 - 6 frac`` and leaks ``frac`` through each face."""
    if not 0 <= frac < 1 / 6:
        raise ValueError("crosstalk fraction must lie in [0, 1/6)")
    return VoxelImage(img.grid, kernels.crosstalk(img.pe, frac))


def calibrate(img_light: VoxelImage, consts: PhysicsConstants = DEFAULT_CONSTANTS,
              smear: int | None = None) -> VoxelImage:
    """Scale light to photoelectrons; optionally Poisson-smear with a seed.

    The smeared count of voxel ``i`` is drawn from a stream keyed by
    ``(smear, i)`` so it is reproducible regardless of evaluation order.
    """
    pe = consts.calib * img_light.pe
    if smear is not None:
        pe = poisson_smear(pe, smear)
    return VoxelImage(img_light.grid, pe)


def poisson_smear(pe: np.ndarray, seed: int) -> np.ndarray:
    flat = np.asarray(pe, dtype=np.float64).reshape(-1)
    nz = np.flatnonzero(flat > 0)
    out = np.zeros_like(flat)
    out[nz] = rng.poisson(seed, nz, flat[nz])
    return out.reshape(np.shape(pe))


def crop(img: np.ndarray, margin: int) -> np.ndarray:
    if margin == 0:
        return img
    return img[margin:-margin, margin:-margin, margin:-margin]


def shift_image(pe: np.ndarray, shift) -> np.ndarray:
    """Translate content by integer voxels; vacated voxels become 0."""
    out = np.zeros_like(pe)
    n = pe.shape
    src = []
    dst = []
    for a in range(3):
        s = int(shift[a])
        if s >= 0:
            src.append(slice(0, n[a] - s))
            dst.append(slice(s, n[a]))
        else:
            src.append(slice(-s, n[a]))
            dst.append(slice(0, n[a] + s))
    out[tuple(dst)] = pe[tuple(src)]
    return out
