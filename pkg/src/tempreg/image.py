"""Image volumes, label maps, ROI masks, interpolation and resampling.

Physical coordinates are axis-aligned: voxel ``(i, j, k)`` sits at
``origin + (i*sx, j*sy, k*sz)`` mm.  Continuous indices put voxel centers at
integers.  Intensities are stored as float32; interpolation is evaluated in
float64.
"""
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import _kernels
from .errors import InvalidInputError


@dataclass(frozen=True)
class Grid:
    dims: tuple
    spacing: tuple
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise InvalidInputError("grid needs three dims, spacings and origin components")
        if any(d < 1 for d in dims):
            raise InvalidInputError(f"dims must be positive, got {dims}")
        if not all(np.isfinite(s) and s > 0 for s in spacing):
            raise InvalidInputError(f"spacing must be finite and > 0, got {spacing}")
        if not all(np.isfinite(o) for o in origin):
            raise InvalidInputError(f"origin must be finite, got {origin}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    def to_index(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        return (pts - np.asarray(self.origin)) / np.asarray(self.spacing)

    def to_physical(self, idx):
        idx = np.asarray(idx, dtype=np.float64)
        return np.asarray(self.origin) + idx * np.asarray(self.spacing)

    def points(self, lo=(0, 0, 0), hi=None):
        """Physical centers of the voxel box [lo, hi) as an (nx, ny, nz, 3) array."""
        hi = self.dims if hi is None else hi
        axes = [self.origin[a] + self.spacing[a] * np.arange(lo[a], hi[a], dtype=np.float64)
                for a in range(3)]
        out = np.empty((len(axes[0]), len(axes[1]), len(axes[2]), 3))
        out[..., 0] = axes[0][:, None, None]
        out[..., 1] = axes[1][None, :, None]
        out[..., 2] = axes[2][None, None, :]
        return out

    def extent(self):
        """Physical coordinates of the first and last voxel centers."""
        lo = np.asarray(self.origin)
        return lo, lo + (np.asarray(self.dims) - 1) * np.asarray(self.spacing)

    def same_as(self, other, tol=1e-6):
        return (self.dims == other.dims
                and np.allclose(self.spacing, other.spacing, rtol=0, atol=tol)
                and np.allclose(self.origin, other.origin, rtol=0, atol=tol))


def _frozen(arr):
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


class _GridImage:
    dtype = None

    def __init__(self, voxels, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
        voxels = np.asarray(voxels)
        if voxels.ndim != 3:
            raise InvalidInputError(f"expected a 3D array, got shape {voxels.shape}")
        self._grid = Grid(voxels.shape, spacing, origin)
        self._voxels = _frozen(self._coerce(voxels))

    def _coerce(self, voxels):
        return voxels.astype(self.dtype)

    @property
    def voxels(self):
        return self._voxels

    @property
    def grid(self):
        return self._grid

    @property
    def dims(self):
        return self._grid.dims

    @property
    def spacing(self):
        return self._grid.spacing

    @property
    def origin(self):
        return self._grid.origin

    @classmethod
    def on_grid(cls, voxels, grid):
        return cls(voxels, grid.spacing, grid.origin)

    def __repr__(self):
        return f"{type(self).__name__}(dims={self.dims}, spacing={self.spacing}, origin={self.origin})"


class ImageVolume(_GridImage):
    """3D scalar image on an axis-aligned physical grid."""

    dtype = np.float32

    def _coerce(self, voxels):
        out = voxels.astype(np.float32)
        if not np.all(np.isfinite(out)):
            raise InvalidInputError("image intensities must be finite")
        return out

    def rescaled(self):
        """Linear map of the intensities onto [0, 1] (constant images map to 0)."""
        v = self._voxels.astype(np.float64)
        lo, hi = v.min(), v.max()
        if hi > lo:
            v = (v - lo) / (hi - lo)
        else:
            v = np.zeros_like(v)
        return ImageVolume.on_grid(v, self.grid)


class LabelMap(_GridImage):
    """Non-negative integer labels, 0 is background."""

    dtype = np.int32

    def _coerce(self, voxels):
        if voxels.dtype.kind == "f":
            if not np.all(np.isfinite(voxels)) or np.any(voxels != np.round(voxels)):
                raise InvalidInputError("labels must be integers")
        out = voxels.astype(np.int32)
        if out.min(initial=0) < 0:
            raise InvalidInputError("labels must be non-negative")
        return out

    def labels(self):
        """Sorted non-background labels present."""
        return [int(v) for v in np.unique(self._voxels) if v != 0]


class RoiMask(_GridImage):
    dtype = np.bool_

    def _coerce(self, voxels):
        return voxels.astype(bool)

    def count(self):
        return int(self._voxels.sum())

    def support_box(self):
        """Index bounding box ``(lo, hi)`` (hi exclusive) of the true voxels, or None."""
        if not hasattr(self, "_box"):
            idx = np.argwhere(self._voxels)
            self._box = None if len(idx) == 0 else (idx.min(axis=0), idx.max(axis=0) + 1)
        return self._box

    def as_float(self):
        if not hasattr(self, "_float"):
            self._float = np.ascontiguousarray(self._voxels, dtype=np.float64)
        return self._float

    def centroid(self):
        """Physical centroid of the true voxels; the grid center when empty."""
        idx = np.argwhere(self._voxels)
        if len(idx) == 0:
            return self.grid.to_physical((np.asarray(self.dims) - 1) / 2.0)
        return self.grid.to_physical(idx.mean(axis=0))

    def dilated(self, radius):
        """Euclidean dilation by ``radius`` voxels (isotropic in index space)."""
        if radius <= 0:
            return self
        dist = ndimage.distance_transform_edt(~self._voxels)
        return RoiMask.on_grid(dist <= radius, self.grid)

    @classmethod
    def from_labels(cls, labels, which=None):
        v = labels.voxels
        m = v > 0 if which is None else np.isin(v, np.atleast_1d(which))
        return cls.on_grid(m, labels.grid)

    @classmethod
    def full(cls, grid):
        return cls.on_grid(np.ones(grid.dims, dtype=bool), grid)


# ---------------------------------------------------------------------------
# interpolation
# ---------------------------------------------------------------------------

def trilinear_sample(vol, p, oob=0.0):
    """Trilinear interpolation at physical point(s) ``p`` (shape (3,) or (N, 3)).

    Points outside ``[0, n-1]`` along any axis return ``oob``.
    """
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise InvalidInputError("sample point must be finite")
    single = p.ndim == 1
    idx = vol.grid.to_index(p.reshape(-1, 3))
    out = _kernels.sample_linear(vol.voxels, idx, oob)
    return float(out[0]) if single else out


def resample(moving, point_map, reference, order="linear", oob=0.0):
    """Evaluate ``moving`` at ``point_map(p)`` for every voxel center of ``reference``.

    ``point_map`` takes an (N, 3) array of physical points in reference space
    and returns their images in moving space; ``None`` means identity.
    ``order`` is ``"linear"`` or ``"nearest"``.  Label maps and masks are
    always resampled with nearest neighbour.
    """
    grid = reference.grid if hasattr(reference, "grid") else reference
    if not isinstance(grid, Grid):
        raise InvalidInputError("reference must be a Grid or a grid image")
    pts = grid.points().reshape(-1, 3)
    mapped = pts if point_map is None else np.asarray(point_map(pts), dtype=np.float64)
    if mapped.shape != pts.shape:
        raise InvalidInputError("point map must return one 3D point per input point")
    idx = moving.grid.to_index(mapped)
    if isinstance(moving, (LabelMap, RoiMask)) or order == "nearest":
        out = _kernels.sample_nearest(moving.voxels, idx, oob)
        cls = type(moving) if isinstance(moving, (LabelMap, RoiMask)) else ImageVolume
        return cls.on_grid(out.reshape(grid.dims), grid)
    if order != "linear":
        raise InvalidInputError(f"unknown interpolation order {order!r}")
    out = _kernels.sample_linear(moving.voxels, idx, oob)
    return ImageVolume.on_grid(out.reshape(grid.dims), grid)


# ---------------------------------------------------------------------------
# interleaved acquisitions
# ---------------------------------------------------------------------------

def _complete_slices(v, keep_parity):
    """Fill the z-slices whose parity differs from ``keep_parity`` by linear
    interpolation between their kept neighbours, replicating at the edges."""
    out = v.astype(np.float64, copy=True)
    nz = v.shape[2]
    for k in range(1 - keep_parity, nz, 2):
        below, above = k - 1, k + 1
        if below >= 0 and above < nz:
            out[:, :, k] = 0.5 * (out[:, :, below] + out[:, :, above])
        elif below >= 0:
            out[:, :, k] = out[:, :, below]
        else:
            out[:, :, k] = out[:, :, above]
    return out


def split_interleaved(series):
    """Split each interleaved volume into an even-slice and an odd-slice volume.

    Returns ``[even_0, odd_0, even_1, odd_1, ...]`` on the input grids.
    """
    out = []
    for n, vol in enumerate(series):
        if vol.dims[2] < 4:
            raise InvalidInputError(f"volume {n}: need at least 4 slices, got {vol.dims[2]}")
        v = vol.voxels
        out.append(ImageVolume.on_grid(_complete_slices(v, 0), vol.grid))
        out.append(ImageVolume.on_grid(_complete_slices(v, 1), vol.grid))
    return out
