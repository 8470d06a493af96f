"""Point <-> voxel conversion and the pathway transformations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

DEFAULT_RES = 32
COLOR_COLS = slice(3, 6)
AXES = "xyz"


@dataclass
class VoxelGrid:
    data: np.ndarray  # (r, r, r, d)
    counts: np.ndarray  # (r, r, r)

    @property
    def res(self):
        return self.data.shape[0]

    @property
    def channels(self):
        return self.data.shape[-1]


@dataclass(frozen=True)
class FlipSpec:
    axes: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "axes", tuple(sorted(set(int(a) for a in self.axes))))
        if any(a not in (0, 1, 2) for a in self.axes):
            raise ValueError("flip axes must be among 0, 1, 2")

    @classmethod
    def parse(cls, text):
        return cls(tuple(AXES.index(c) for c in text.lower()))

    def __str__(self):
        return "".join(AXES[a] for a in self.axes) or "-"


@dataclass(frozen=True)
class ColorJitter:
    brightness: float = 0.0
    contrast: float = 1.0

    @classmethod
    def sample(cls, rng, brightness=0.2, contrast=0.2):
        b = rng.uniform(-brightness, brightness)
        cf = rng.uniform(1.0 - contrast, 1.0 + contrast)
        return cls(float(b), float(cf))

    @property
    def is_identity(self):
        return self.brightness == 0.0 and self.contrast == 1.0


def cell_indices(norm_coords, r):
    c = np.asarray(norm_coords, dtype=np.float64)
    if c.min() < -1e-9 or c.max() > 1.0 + 1e-9:
        raise ValueError("normalized coordinates must lie in [0, 1]")
    return np.clip(np.floor(c * r).astype(np.int64), 0, r - 1)


def voxelize(features, norm_coords, r: int = DEFAULT_RES) -> VoxelGrid:
    """Average point features into an r^3 grid; empty cells stay zero."""
    if r < 1:
        raise ValueError("resolution must be >= 1")
    features = np.asarray(features)
    idx = cell_indices(norm_coords, r)
    flat = (idx[:, 0] * r + idx[:, 1]) * r + idx[:, 2]
    counts = np.bincount(flat, minlength=r ** 3)
    sums = np.zeros((r ** 3, features.shape[1]), dtype=np.float64)
    np.add.at(sums, flat, features)
    occupied = counts > 0
    sums[occupied] /= counts[occupied, None]
    data = sums.astype(features.dtype, copy=False).reshape(r, r, r, -1)
    return VoxelGrid(data, counts.reshape(r, r, r))


def trilinear_matrix(norm_coords, r):
    """Sparse (N, r^3) interpolation matrix over the 8 surrounding cell centers.

    Cell centers sit at (m + 0.5) / r; queries beyond the outermost centers
    clamp to them.
    """
    u = np.clip(np.asarray(norm_coords, dtype=np.float64) * r - 0.5, 0.0, r - 1.0)
    snapped = np.rint(u)
    u = np.where(np.abs(u - snapped) < 1e-9, snapped, u)  # exact weights at cell centers
    lo = np.minimum(np.floor(u).astype(np.int64), max(r - 2, 0))
    t = u - lo
    hi = np.minimum(lo + 1, r - 1)
    n = len(u)
    rows, cols, vals = [], [], []
    for cx in (0, 1):
        ix = hi[:, 0] if cx else lo[:, 0]
        wx = t[:, 0] if cx else 1.0 - t[:, 0]
        for cy in (0, 1):
            iy = hi[:, 1] if cy else lo[:, 1]
            wy = t[:, 1] if cy else 1.0 - t[:, 1]
            for cz in (0, 1):
                iz = hi[:, 2] if cz else lo[:, 2]
                wz = t[:, 2] if cz else 1.0 - t[:, 2]
                rows.append(np.arange(n))
                cols.append((ix * r + iy) * r + iz)
                vals.append(wx * wy * wz)
    m = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n, r ** 3))
    m.sum_duplicates()
    return m


def devoxelize(grid, norm_coords, matrix=None):
    """Trilinear interpolation of grid features at each point. ``grid`` is a VoxelGrid or (r,r,r,d)."""
    data = grid.data if isinstance(grid, VoxelGrid) else np.asarray(grid)
    r = data.shape[0]
    if matrix is None:
        matrix = trilinear_matrix(norm_coords, r)
    out = matrix @ data.reshape(r ** 3, -1)
    return out.astype(data.dtype, copy=False)


def devoxelize_backward(grad_points, norm_coords, r, matrix=None):
    """Adjoint of devoxelize: scatter point gradients back onto the grid."""
    if matrix is None:
        matrix = trilinear_matrix(norm_coords, r)
    g = matrix.T @ grad_points
    return np.asarray(g, dtype=grad_points.dtype).reshape(r, r, r, -1)


def flip(grid, spec: FlipSpec):
    """Reverse the grid along ``spec.axes``. Works on VoxelGrid or raw (r,r,r,...) arrays."""
    if isinstance(grid, VoxelGrid):
        if not spec.axes:
            return VoxelGrid(grid.data.copy(), grid.counts.copy())
        return VoxelGrid(np.flip(grid.data, spec.axes).copy(), np.flip(grid.counts, spec.axes).copy())
    return flip_batch(np.asarray(grid)[None], spec)[0]


def flip_batch(x, spec: FlipSpec):
    """Flip a batched (B, r, r, r, C) tensor; its own inverse."""
    if not spec.axes:
        return x
    return np.ascontiguousarray(np.flip(x, tuple(a + 1 for a in spec.axes)))


def color_jitter(features, jitter: ColorJitter):
    """Contrast around the per-channel block mean, then brightness, clamped to [0, 1].

    Only the RGB columns change; blocks without color pass through.
    """
    out = np.array(features, copy=True)
    rgb = out[:, COLOR_COLS]
    if jitter.is_identity or not rgb.any():
        return out
    mean = rgb.mean(axis=0, keepdims=True)
    out[:, COLOR_COLS] = np.clip((rgb - mean) * jitter.contrast + mean + jitter.brightness, 0.0, 1.0)
    return out
