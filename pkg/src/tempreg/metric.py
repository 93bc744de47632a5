"""Windowed normalized cross-correlation dissimilarity and its analytic gradient.

Windows live on the fixed (frame) grid.  The moving image (template) is pulled
onto that grid through the transform, and so is the template ROI mask: fixed
voxels whose warped mask value is >= 0.5 are the sample centers.  The
dissimilarity is minus the mean local NCC over those centers, so it lies in
[-1, 1] with -1 a perfect match.

Everything is computed on a sub-box of the fixed grid that holds the sample
centers plus one window radius, so the cost of an evaluation scales with the
ROI rather than with the image.
"""
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import DegenerateMetricError, InvalidInputError
from .image import RoiMask
from .transforms import BSplineParams, RigidParams, euler_matrix_derivs, rigid_invert
from .transforms import tensor_adjoint, tensor_apply


@dataclass(frozen=True)
class MetricConfig:
    window_radius: int = 2
    variance_epsilon: float = 1e-5
    stride: int = 1
    oob_value: float = 0.0

    def __post_init__(self):
        if int(self.window_radius) < 1:
            raise InvalidInputError("window_radius must be >= 1")
        if not self.variance_epsilon > 0:
            raise InvalidInputError("variance_epsilon must be > 0")
        if int(self.stride) < 1:
            raise InvalidInputError("stride must be >= 1")


@dataclass
class MetricResult:
    value: float
    grad: np.ndarray
    n_samples: int
    n_valid: int


# ---------------------------------------------------------------------------
# transform adapters on a box of the fixed grid
# ---------------------------------------------------------------------------

class _RigidWarp:
    def __init__(self, t, grid, lo, hi):
        self.t = t
        self.rel = grid.points(lo, hi) - t.center
        self.points = self.rel @ t.matrix.T + t.center + t.trans

    def param_grad(self, g):
        g = g.reshape(-1, 3)
        rel = self.rel.reshape(-1, 3)
        G = np.einsum("ni,nj->ij", g, rel)
        dR = euler_matrix_derivs(self.t.rot)
        out = np.empty(6)
        out[:3] = np.einsum("kij,ij->k", dR, G)
        out[3:] = g.sum(axis=0)
        return out


class _BSplineWarp:
    def __init__(self, t, grid, lo, hi):
        self.t = t
        coords = [grid.origin[a] + grid.spacing[a] * np.arange(lo[a], hi[a]) for a in range(3)]
        self.W = [t.axis_weights(a, coords[a]) for a in range(3)]
        self.points = grid.points(lo, hi) + tensor_apply(*self.W, t.coeffs)

    def param_grad(self, g):
        return tensor_adjoint(*self.W, g).reshape(-1)


def _warp(t, grid, lo, hi):
    if isinstance(t, RigidParams):
        return _RigidWarp(t, grid, lo, hi)
    if isinstance(t, BSplineParams):
        return _BSplineWarp(t, grid, lo, hi)
    raise InvalidInputError(f"unsupported transform {type(t).__name__}")


def _candidate_box(t, fixed_grid, roi):
    """Index box of fixed voxels that can map into the ROI support."""
    box = roi.support_box()
    if box is None:
        raise InvalidInputError("ROI mask is empty")
    lo_i, hi_i = box
    # one extra voxel: trilinear mask values >= 0.5 stay within a voxel of the support
    lo = roi.grid.to_physical(lo_i - 1)
    hi = roi.grid.to_physical(hi_i)
    if isinstance(t, RigidParams):
        corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1])
                            for z in (lo[2], hi[2])])
        pre = rigid_invert(t).map_points(corners)
        plo, phi = pre.min(axis=0), pre.max(axis=0)
    else:
        m = t.max_displacement()
        plo, phi = lo - m, hi + m
    flo = np.floor(fixed_grid.to_index(plo) - 1e-9).astype(int)
    fhi = np.ceil(fixed_grid.to_index(phi) + 1e-9).astype(int) + 1
    dims = np.asarray(fixed_grid.dims)
    flo = np.clip(flo, 0, dims)
    fhi = np.clip(fhi, 0, dims)
    return flo, fhi


def _stride_mask(lo, hi, k):
    if k == 1:
        return None
    ax = [(np.arange(lo[a], hi[a]) % k) == 0 for a in range(3)]
    return ax[0][:, None, None] & ax[1][None, :, None] & ax[2][None, None, :]


def sample_set(fixed, moving, transform, roi, cfg=MetricConfig()):
    """Boolean mask on the fixed grid of the window centers used at ``transform``."""
    lo, hi = _candidate_box(transform, fixed.grid, roi)
    out = np.zeros(fixed.dims, dtype=bool)
    if np.any(hi <= lo):
        return out
    w = _warp(transform, fixed.grid, lo, hi)
    s = _roi_values(roi, w.points) >= 0.5
    sm = _stride_mask(lo, hi, cfg.stride)
    if sm is not None:
        s &= sm
    out[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = s
    return out


def _roi_values(roi, pts):
    shape = pts.shape[:-1]
    idx = roi.grid.to_index(pts.reshape(-1, 3))
    return _kernels.sample_linear(roi.as_float(), idx, 0.0).reshape(shape)


def evaluate(fixed, moving, transform, roi, cfg=MetricConfig(), want_grad=True,
             samples=None, strict=True):
    """Metric value (and gradient over the flat transform parameters).

    ``samples`` optionally freezes the set of window centers (boolean array on
    the fixed grid); otherwise it is derived from the warped ROI.  With
    ``strict`` an all-degenerate evaluation raises
    :class:`DegenerateMetricError`; otherwise it returns 0 with a zero gradient.
    """
    r = int(cfg.window_radius)
    dims = np.asarray(fixed.dims)
    n_params = transform.as_vector().size
    if samples is None:
        lo, hi = _candidate_box(transform, fixed.grid, roi)
    else:
        samples = np.asarray(samples, dtype=bool)
        if samples.shape != fixed.dims:
            raise InvalidInputError("sample mask must live on the fixed grid")
        idx = np.argwhere(samples)
        if len(idx) == 0:
            raise InvalidInputError("empty sample set")
        lo, hi = idx.min(axis=0), idx.max(axis=0) + 1
    if np.any(hi <= lo):
        raise InvalidInputError("ROI maps entirely outside the fixed image")
    blo = np.maximum(lo - r, 0)
    bhi = np.minimum(hi + r, dims)
    w = _warp(transform, fixed.grid, blo, bhi)
    shape = tuple(bhi - blo)

    if samples is None:
        S = _roi_values(roi, w.points) >= 0.5
        inner = np.zeros(shape, dtype=bool)
        inner[tuple(slice(lo[a] - blo[a], hi[a] - blo[a]) for a in range(3))] = True
        S &= inner
        sm = _stride_mask(blo, bhi, cfg.stride)
        if sm is not None:
            S &= sm
    else:
        S = samples[blo[0]:bhi[0], blo[1]:bhi[1], blo[2]:bhi[2]].copy()
    n_s = int(S.sum())
    if n_s == 0:
        raise InvalidInputError("no ROI voxels fall inside the fixed image")

    f = fixed.voxels[blo[0]:bhi[0], blo[1]:bhi[1], blo[2]:bhi[2]].astype(np.float64)
    midx = moving.grid.to_index(w.points.reshape(-1, 3))
    if want_grad:
        m, dm = _kernels.sample_linear_grad(moving.voxels, midx, cfg.oob_value)
        dm = dm / np.asarray(moving.spacing)
    else:
        m = _kernels.sample_linear(moving.voxels, midx, cfg.oob_value)
    m = m.reshape(shape)

    box = _kernels.box_sum
    n = box(np.ones(shape), r)
    sf, sm_ = box(f, r), box(m, r)
    fbar, mbar = sf / n, sm_ / n
    B = box(f * f, r) - sf * fbar
    C = box(m * m, r) - sm_ * mbar
    A = box(f * m, r) - sf * mbar
    eps = cfg.variance_epsilon
    ok = S & (B >= eps * n) & (C >= eps * n)
    n_valid = int(ok.sum())
    if n_valid == 0:
        if strict:
            raise DegenerateMetricError(f"all {n_s} correlation windows are degenerate")
        return MetricResult(0.0, np.zeros(n_params), n_s, 0)

    denom = np.sqrt(np.where(ok, B * C, 1.0))
    ncc = np.where(ok, A / denom, 0.0)
    value = -float(np.sum(ncc[S])) / n_s
    if not want_grad:
        return MetricResult(value, None, n_s, n_valid)

    alpha = np.where(ok, 1.0 / denom, 0.0)
    beta = np.where(ok, A / (np.where(ok, C, 1.0) * denom), 0.0)
    d_m = -(f * box(alpha, r) - box(alpha * fbar, r)
            - m * box(beta, r) + box(beta * mbar, r)) / n_s
    g = d_m.reshape(-1, 1) * dm
    return MetricResult(value, w.param_grad(g.reshape(shape + (3,))), n_s, n_valid)


def lncc_dist(fixed, moving, transform, roi, cfg=MetricConfig(), samples=None):
    """Negative mean local NCC of ``fixed`` and ``moving`` pulled through ``transform``."""
    return evaluate(fixed, moving, transform, roi, cfg, want_grad=False, samples=samples).value


def lncc_grad(fixed, moving, transform, roi, cfg=MetricConfig(), samples=None):
    """Gradient of :func:`lncc_dist` over the flat transform parameters.

    All-degenerate inputs (e.g. constant images) give a zero gradient.
    """
    return evaluate(fixed, moving, transform, roi, cfg, samples=samples, strict=False).grad


def local_ncc_map(fixed, moving, cfg=MetricConfig()):
    """Per-voxel windowed NCC of two images on the same grid (0 in degenerate windows)."""
    if fixed.dims != moving.dims:
        raise InvalidInputError("images must share a grid")
    r = int(cfg.window_radius)
    f = fixed.voxels.astype(np.float64)
    m = moving.voxels.astype(np.float64)
    box = _kernels.box_sum
    n = box(np.ones(f.shape), r)
    sf, sm = box(f, r), box(m, r)
    B = box(f * f, r) - sf * sf / n
    C = box(m * m, r) - sm * sm / n
    A = box(f * m, r) - sf * sm / n
    ok = (B >= cfg.variance_epsilon * n) & (C >= cfg.variance_epsilon * n)
    return np.where(ok, A / np.sqrt(np.where(ok, B * C, 1.0)), 0.0)


def full_roi(grid):
    return RoiMask.full(grid)
