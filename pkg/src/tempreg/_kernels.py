"""Hot inner loops: trilinear / nearest sampling and separable box sums.

Every kernel has a numba implementation and a pure-numpy twin with the same
signature.  The numba path is used when numba imports cleanly and the
environment variable ``TEMPREG_DISABLE_JIT`` is unset (or ``0``).  Point
coordinates are continuous voxel indices, voxel centers at integers.

All kernels are elementwise-independent, so the parallel numba loops give
identical results for any thread count.
"""
import os

import numpy as np

_DISABLE = os.environ.get("TEMPREG_DISABLE_JIT", "0").strip().lower() not in ("", "0", "false", "no")

try:
    if _DISABLE:
        raise ImportError("jit disabled by TEMPREG_DISABLE_JIT")
    import numba
    from numba import njit, prange
    HAVE_NUMBA = True
except ImportError:
    numba = None
    HAVE_NUMBA = False


def backend():
    return "numba" if HAVE_NUMBA else "numpy"


def set_threads(n):
    """Bound the number of numba worker threads; returns the value in effect."""
    if not HAVE_NUMBA or n is None:
        return 1
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------

def _cell(x, n):
    """Lower cell corner and fractional offset along one axis."""
    i = np.floor(x).astype(np.intp)
    np.clip(i, 0, max(n - 2, 0), out=i)
    f = x - i
    i1 = np.minimum(i + 1, n - 1)
    return i, i1, f


def _inside(pts, shape):
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    return ((x >= 0) & (x <= shape[0] - 1) & (y >= 0) & (y <= shape[1] - 1)
            & (z >= 0) & (z <= shape[2] - 1))


def _np_linear(vol, pts, oob):
    out = np.full(pts.shape[0], oob, dtype=np.float64)
    ok = _inside(pts, vol.shape)
    p = pts[ok]
    if p.shape[0] == 0:
        return out
    i0, i1, fx = _cell(p[:, 0], vol.shape[0])
    j0, j1, fy = _cell(p[:, 1], vol.shape[1])
    k0, k1, fz = _cell(p[:, 2], vol.shape[2])
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    v = vol
    acc = (v[i0, j0, k0] * (gx * gy * gz)
           + v[i1, j0, k0] * (fx * gy * gz)
           + v[i0, j1, k0] * (gx * fy * gz)
           + v[i1, j1, k0] * (fx * fy * gz)
           + v[i0, j0, k1] * (gx * gy * fz)
           + v[i1, j0, k1] * (fx * gy * fz)
           + v[i0, j1, k1] * (gx * fy * fz)
           + v[i1, j1, k1] * (fx * fy * fz))
    out[ok] = acc
    return out


def _np_linear_grad(vol, pts, oob):
    vals = np.full(pts.shape[0], oob, dtype=np.float64)
    grad = np.zeros((pts.shape[0], 3), dtype=np.float64)
    ok = _inside(pts, vol.shape)
    p = pts[ok]
    if p.shape[0] == 0:
        return vals, grad
    i0, i1, fx = _cell(p[:, 0], vol.shape[0])
    j0, j1, fy = _cell(p[:, 1], vol.shape[1])
    k0, k1, fz = _cell(p[:, 2], vol.shape[2])
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
    v = vol
    c000 = v[i0, j0, k0].astype(np.float64)
    c100 = v[i1, j0, k0].astype(np.float64)
    c010 = v[i0, j1, k0].astype(np.float64)
    c110 = v[i1, j1, k0].astype(np.float64)
    c001 = v[i0, j0, k1].astype(np.float64)
    c101 = v[i1, j0, k1].astype(np.float64)
    c011 = v[i0, j1, k1].astype(np.float64)
    c111 = v[i1, j1, k1].astype(np.float64)
    vals[ok] = (c000 * (gx * gy * gz) + c100 * (fx * gy * gz)
                + c010 * (gx * fy * gz) + c110 * (fx * fy * gz)
                + c001 * (gx * gy * fz) + c101 * (fx * gy * fz)
                + c011 * (gx * fy * fz) + c111 * (fx * fy * fz))
    # exact derivative of the interpolant inside the cell
    gr = np.empty((p.shape[0], 3))
    gr[:, 0] = ((c100 - c000) * (gy * gz) + (c110 - c010) * (fy * gz)
                + (c101 - c001) * (gy * fz) + (c111 - c011) * (fy * fz))
    gr[:, 1] = ((c010 - c000) * (gx * gz) + (c110 - c100) * (fx * gz)
                + (c011 - c001) * (gx * fz) + (c111 - c101) * (fx * fz))
    gr[:, 2] = ((c001 - c000) * (gx * gy) + (c101 - c100) * (fx * gy)
                + (c011 - c010) * (gx * fy) + (c111 - c110) * (fx * fy))
    # a degenerate (length-1) axis has no slope
    for ax in range(3):
        if vol.shape[ax] == 1:
            gr[:, ax] = 0.0
    grad[ok] = gr
    return vals, grad


def _np_nearest(vol, pts, oob):
    out = np.full(pts.shape[0], oob, dtype=vol.dtype)
    idx = np.floor(pts + 0.5).astype(np.intp)
    ok = ((idx[:, 0] >= 0) & (idx[:, 0] < vol.shape[0]) & (idx[:, 1] >= 0)
          & (idx[:, 1] < vol.shape[1]) & (idx[:, 2] >= 0) & (idx[:, 2] < vol.shape[2]))
    i = idx[ok]
    out[ok] = vol[i[:, 0], i[:, 1], i[:, 2]]
    return out


def _np_box_axis(a, r, axis):
    n = a.shape[axis]
    out = np.zeros_like(a)
    src = np.moveaxis(a, axis, 0)
    dst = np.moveaxis(out, axis, 0)
    for d in range(-r, r + 1):
        if d >= 0:
            if d < n:
                dst[:n - d] += src[d:]
        elif -d < n:
            dst[-d:] += src[:n + d]
    return out


def _np_box_sum(a, r):
    a = np.asarray(a, dtype=np.float64)
    for axis in range(3):
        a = _np_box_axis(a, r, axis)
    return a


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True, inline="always")
    def _nb_cell(x, n):
        i = int(np.floor(x))
        hi = n - 2
        if hi < 0:
            hi = 0
        if i > hi:
            i = hi
        if i < 0:
            i = 0
        i1 = i + 1
        if i1 > n - 1:
            i1 = n - 1
        return i, i1, x - i

    @njit(parallel=True, cache=True)
    def _nb_linear(vol, pts, oob):
        nx, ny, nz = vol.shape
        m = pts.shape[0]
        out = np.empty(m, dtype=np.float64)
        for n in prange(m):
            x = pts[n, 0]
            y = pts[n, 1]
            z = pts[n, 2]
            if not (x >= 0.0 and x <= nx - 1 and y >= 0.0 and y <= ny - 1
                    and z >= 0.0 and z <= nz - 1):
                out[n] = oob
                continue
            i0, i1, fx = _nb_cell(x, nx)
            j0, j1, fy = _nb_cell(y, ny)
            k0, k1, fz = _nb_cell(z, nz)
            gx = 1.0 - fx
            gy = 1.0 - fy
            gz = 1.0 - fz
            out[n] = (vol[i0, j0, k0] * (gx * gy * gz)
                      + vol[i1, j0, k0] * (fx * gy * gz)
                      + vol[i0, j1, k0] * (gx * fy * gz)
                      + vol[i1, j1, k0] * (fx * fy * gz)
                      + vol[i0, j0, k1] * (gx * gy * fz)
                      + vol[i1, j0, k1] * (fx * gy * fz)
                      + vol[i0, j1, k1] * (gx * fy * fz)
                      + vol[i1, j1, k1] * (fx * fy * fz))
        return out

    @njit(parallel=True, cache=True)
    def _nb_linear_grad(vol, pts, oob):
        nx, ny, nz = vol.shape
        m = pts.shape[0]
        vals = np.empty(m, dtype=np.float64)
        grad = np.zeros((m, 3), dtype=np.float64)
        for n in prange(m):
            x = pts[n, 0]
            y = pts[n, 1]
            z = pts[n, 2]
            if not (x >= 0.0 and x <= nx - 1 and y >= 0.0 and y <= ny - 1
                    and z >= 0.0 and z <= nz - 1):
                vals[n] = oob
                continue
            i0, i1, fx = _nb_cell(x, nx)
            j0, j1, fy = _nb_cell(y, ny)
            k0, k1, fz = _nb_cell(z, nz)
            gx = 1.0 - fx
            gy = 1.0 - fy
            gz = 1.0 - fz
            c000 = np.float64(vol[i0, j0, k0])
            c100 = np.float64(vol[i1, j0, k0])
            c010 = np.float64(vol[i0, j1, k0])
            c110 = np.float64(vol[i1, j1, k0])
            c001 = np.float64(vol[i0, j0, k1])
            c101 = np.float64(vol[i1, j0, k1])
            c011 = np.float64(vol[i0, j1, k1])
            c111 = np.float64(vol[i1, j1, k1])
            vals[n] = (c000 * (gx * gy * gz) + c100 * (fx * gy * gz)
                       + c010 * (gx * fy * gz) + c110 * (fx * fy * gz)
                       + c001 * (gx * gy * fz) + c101 * (fx * gy * fz)
                       + c011 * (gx * fy * fz) + c111 * (fx * fy * fz))
            if nx > 1:
                grad[n, 0] = ((c100 - c000) * (gy * gz) + (c110 - c010) * (fy * gz)
                              + (c101 - c001) * (gy * fz) + (c111 - c011) * (fy * fz))
            if ny > 1:
                grad[n, 1] = ((c010 - c000) * (gx * gz) + (c110 - c100) * (fx * gz)
                              + (c011 - c001) * (gx * fz) + (c111 - c101) * (fx * fz))
            if nz > 1:
                grad[n, 2] = ((c001 - c000) * (gx * gy) + (c101 - c100) * (fx * gy)
                              + (c011 - c010) * (gx * fy) + (c111 - c110) * (fx * fy))
        return vals, grad

    @njit(parallel=True, cache=True)
    def _nb_nearest(vol, pts, oob):
        nx, ny, nz = vol.shape
        m = pts.shape[0]
        out = np.empty(m, dtype=vol.dtype)
        for n in prange(m):
            i = int(np.floor(pts[n, 0] + 0.5))
            j = int(np.floor(pts[n, 1] + 0.5))
            k = int(np.floor(pts[n, 2] + 0.5))
            if i < 0 or i >= nx or j < 0 or j >= ny or k < 0 or k >= nz:
                out[n] = oob
            else:
                out[n] = vol[i, j, k]
        return out

    @njit(parallel=True, cache=True)
    def _nb_box_x(a, r):
        nx, ny, nz = a.shape
        out = np.zeros_like(a)
        for j in prange(ny):
            for k in range(nz):
                for i in range(nx):
                    # same accumulation order as the numpy twin: d = -r .. r
                    s = 0.0
                    for d in range(-r, r + 1):
                        ii = i + d
                        if ii >= 0 and ii < nx:
                            s += a[ii, j, k]
                    out[i, j, k] = s
        return out

    @njit(parallel=True, cache=True)
    def _nb_box_y(a, r):
        nx, ny, nz = a.shape
        out = np.zeros_like(a)
        for i in prange(nx):
            for k in range(nz):
                for j in range(ny):
                    s = 0.0
                    for d in range(-r, r + 1):
                        jj = j + d
                        if jj >= 0 and jj < ny:
                            s += a[i, jj, k]
                    out[i, j, k] = s
        return out

    @njit(parallel=True, cache=True)
    def _nb_box_z(a, r):
        nx, ny, nz = a.shape
        out = np.zeros_like(a)
        for i in prange(nx):
            for j in range(ny):
                for k in range(nz):
                    s = 0.0
                    for d in range(-r, r + 1):
                        kk = k + d
                        if kk >= 0 and kk < nz:
                            s += a[i, j, kk]
                    out[i, j, k] = s
        return out

    def _nb_box_sum(a, r):
        a = np.ascontiguousarray(a, dtype=np.float64)
        return _nb_box_z(_nb_box_y(_nb_box_x(a, r), r), r)


# ---------------------------------------------------------------------------
# public dispatch
# ---------------------------------------------------------------------------

def _prep(vol, pts):
    return np.ascontiguousarray(vol), np.ascontiguousarray(pts, dtype=np.float64).reshape(-1, 3)


def sample_linear(vol, pts, oob=0.0, use_jit=None):
    """Trilinear values of ``vol`` at index-space points ``pts`` (N, 3)."""
    vol, pts = _prep(vol, pts)
    if _use(use_jit):
        return _nb_linear(vol, pts, float(oob))
    return _np_linear(vol, pts, float(oob))


def sample_linear_grad(vol, pts, oob=0.0, use_jit=None):
    """Trilinear values and exact interpolant gradient (index units)."""
    vol, pts = _prep(vol, pts)
    if _use(use_jit):
        return _nb_linear_grad(vol, pts, float(oob))
    return _np_linear_grad(vol, pts, float(oob))


def sample_nearest(vol, pts, oob=0, use_jit=None):
    vol, pts = _prep(vol, pts)
    if _use(use_jit):
        return _nb_nearest(vol, pts, vol.dtype.type(oob))
    return _np_nearest(vol, pts, oob)


def box_sum(a, r, use_jit=None):
    """Sum over the (2r+1)^3 cube around each voxel, zero outside the array."""
    if _use(use_jit):
        return _nb_box_sum(a, int(r))
    return _np_box_sum(a, int(r))


def _use(use_jit):
    if use_jit is None:
        return HAVE_NUMBA
    if use_jit and not HAVE_NUMBA:
        raise RuntimeError("numba path requested but numba is unavailable")
    return bool(use_jit)
