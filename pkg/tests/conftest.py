import numpy as np
import pytest

from tempreg import _kernels, phantom
from tempreg.image import ImageVolume

needs_numba = pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba path unavailable")


@pytest.fixture(scope="session")
def template_phantom():
    """Default 64^3 phantom: (image, labels, rois)."""
    return phantom.make_template(phantom.PhantomSpec())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def smooth_volume(shape=(16, 14, 12), seed=0, sigma=1.5, spacing=(1.0, 1.0, 1.0), origin=(0, 0, 0)):
    from scipy import ndimage
    r = np.random.default_rng(seed)
    v = ndimage.gaussian_filter(r.standard_normal(shape), sigma, mode="wrap")
    return ImageVolume(v, spacing, origin)


def _cells(t, fixed, moving, lo, hi):
    pts = fixed.grid.points(lo, hi).reshape(-1, 3)
    return np.floor(moving.grid.to_index(t.map_points(pts)))


def fd_metric_grad(fixed, moving, t, roi, samples, idx, h0, radius=2, min_step=1e-9):
    """Central differences of the metric, one component at a time.

    The warped moving image is only piecewise smooth (trilinear), so each
    step is shrunk from ``h0`` until no window point changes interpolation
    cell between the two stencil ends.
    """
    from tempreg.metric import lncc_dist
    nz = np.argwhere(samples)
    lo = np.maximum(nz.min(axis=0) - radius, 0)
    hi = np.minimum(nz.max(axis=0) + 1 + radius, fixed.dims)
    th = t.as_vector()
    out, used = [], []
    for k in idx:
        h = float(h0[k] if np.ndim(h0) else h0)
        e = np.zeros_like(th)
        while True:
            e[k] = h
            tp, tm = t.with_vector(th + e), t.with_vector(th - e)
            if np.array_equal(_cells(tp, fixed, moving, lo, hi), _cells(tm, fixed, moving, lo, hi)):
                break
            h /= 10.0
            if h < min_step:
                raise AssertionError(f"component {k}: no kink-free step above {min_step}")
        fp = lncc_dist(fixed, moving, tp, roi, samples=samples)
        fm = lncc_dist(fixed, moving, tm, roi, samples=samples)
        out.append((fp - fm) / (2 * h))
        used.append(h)
    return np.array(out), np.array(used)
