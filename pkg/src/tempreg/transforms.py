"""Rigid and cubic B-Spline transform models.

A transform here is always a point map from frame (fixed) space into template
(moving) space, the map used to pull template intensities onto a frame grid.

Rigid rotations use the fixed intrinsic convention ``R = Rz(g) @ Ry(b) @ Rx(a)``
applied about a center that stays constant for a registration run.
"""
import json
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InvalidInputError, OutOfDomainError

GIMBAL_TOL = 1e-8


def _vec3(v, name):
    a = np.array(v, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} must be finite")
    a.setflags(write=False)
    return a


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _ry(b):
    c, s = np.cos(b), np.sin(b)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rz(g):
    c, s = np.cos(g), np.sin(g)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def _drx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[0, 0, 0], [0, -s, -c], [0, c, -s]])


def _dry(b):
    c, s = np.cos(b), np.sin(b)
    return np.array([[-s, 0, c], [0, 0, 0], [-c, 0, -s]])


def _drz(g):
    c, s = np.cos(g), np.sin(g)
    return np.array([[-s, -c, 0], [c, -s, 0], [0, 0, 0]])


def euler_matrix(rot):
    a, b, g = rot
    return _rz(g) @ _ry(b) @ _rx(a)


def euler_matrix_derivs(rot):
    """d R / d(alpha, beta, gamma) as a (3, 3, 3) stack."""
    a, b, g = rot
    rx, ry, rz = _rx(a), _ry(b), _rz(g)
    return np.stack([rz @ ry @ _drx(a), rz @ _dry(b) @ rx, _drz(g) @ ry @ rx])


def euler_from_matrix(R):
    """Inverse of :func:`euler_matrix`; gamma is pinned to 0 at gimbal lock."""
    sb = -R[2, 0]
    sb = min(1.0, max(-1.0, sb))
    b = np.arcsin(sb)
    if abs(b - np.pi / 2) < GIMBAL_TOL:
        return np.array([np.arctan2(R[0, 1], R[0, 2]), np.pi / 2, 0.0])
    if abs(b + np.pi / 2) < GIMBAL_TOL:
        return np.array([np.arctan2(-R[0, 1], -R[0, 2]), -np.pi / 2, 0.0])
    a = np.arctan2(R[2, 1], R[2, 2])
    g = np.arctan2(R[1, 0], R[0, 0])
    return np.array([a, b, g])


# ---------------------------------------------------------------------------
# rigid
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RigidParams:
    rot: np.ndarray = (0.0, 0.0, 0.0)
    trans: np.ndarray = (0.0, 0.0, 0.0)
    center: np.ndarray = (0.0, 0.0, 0.0)

    model = "rigid"

    def __post_init__(self):
        object.__setattr__(self, "rot", _vec3(self.rot, "rot"))
        object.__setattr__(self, "trans", _vec3(self.trans, "trans"))
        object.__setattr__(self, "center", _vec3(self.center, "center"))

    @classmethod
    def identity(cls, center=(0.0, 0.0, 0.0)):
        return cls(center=center)

    @property
    def matrix(self):
        return euler_matrix(self.rot)

    def map_points(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        return (pts - self.center) @ self.matrix.T + self.center + self.trans

    def as_vector(self):
        return np.concatenate([self.rot, self.trans])

    def with_vector(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (6,):
            raise InvalidInputError(f"rigid parameter vector must have 6 entries, got {theta.shape}")
        return RigidParams(theta[:3], theta[3:], self.center)

    def recentered(self, center):
        """The same point map expressed with rotation center ``center``."""
        c = _vec3(center, "center")
        return RigidParams(self.rot, self.trans + (self.matrix - np.eye(3)) @ (c - self.center), c)

    def __eq__(self, other):
        return (isinstance(other, RigidParams) and np.array_equal(self.rot, other.rot)
                and np.array_equal(self.trans, other.trans)
                and np.array_equal(self.center, other.center))

    def __repr__(self):
        return f"RigidParams(rot={self.rot.tolist()}, trans={self.trans.tolist()}, center={self.center.tolist()})"


def rigid_apply(t, p):
    return t.map_points(p)


def _check_centers(a, b):
    if not np.allclose(a.center, b.center, rtol=0, atol=1e-9):
        raise InvalidInputError(f"rigid centers differ: {a.center} vs {b.center}")


def rigid_compose(a, b):
    """``c`` with ``c(p) == a(b(p))``."""
    _check_centers(a, b)
    Ra, Rb = a.matrix, b.matrix
    R = Ra @ Rb
    trans = Ra @ b.trans + a.trans
    return RigidParams(euler_from_matrix(R), trans, a.center)


def rigid_invert(t):
    Rt = t.matrix.T
    return RigidParams(euler_from_matrix(Rt), -(Rt @ t.trans), t.center)


# ---------------------------------------------------------------------------
# cubic B-Spline
# ---------------------------------------------------------------------------

def cubic_weights(f):
    """Uniform cubic B-Spline weights for control points i-1..i+2 at offset f in [0, 1)."""
    f = np.asarray(f, dtype=np.float64)
    f2, f3 = f * f, f * f * f
    g = 1.0 - f
    return np.stack([g * g * g / 6.0,
                     (3.0 * f3 - 6.0 * f2 + 4.0) / 6.0,
                     (-3.0 * f3 + 3.0 * f2 + 3.0 * f + 1.0) / 6.0,
                     f3 / 6.0], axis=-1)


def cubic_weight_derivs(f):
    """d/df of :func:`cubic_weights`."""
    f = np.asarray(f, dtype=np.float64)
    f2 = f * f
    g = 1.0 - f
    return np.stack([-0.5 * g * g,
                     (9.0 * f2 - 12.0 * f) / 6.0,
                     (-9.0 * f2 + 6.0 * f + 3.0) / 6.0,
                     0.5 * f2], axis=-1)


@dataclass(frozen=True, eq=False)
class BSplineParams:
    """Control lattice of 3D displacement vectors (mm).

    Control point ``(a, b, c)`` sits at ``grid_origin + (a, b, c) * grid_spacing``.
    """

    grid_dims: tuple
    grid_spacing: tuple
    grid_origin: tuple
    coeffs: np.ndarray = None

    model = "bspline"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.grid_dims)
        if len(dims) != 3 or any(d < 4 for d in dims):
            raise InvalidInputError(f"lattice needs >= 4 control points per axis, got {dims}")
        spacing = tuple(float(s) for s in self.grid_spacing)
        if not all(s > 0 and np.isfinite(s) for s in spacing):
            raise InvalidInputError("lattice spacing must be positive")
        origin = tuple(float(o) for o in self.grid_origin)
        c = np.zeros(dims + (3,)) if self.coeffs is None else np.array(self.coeffs, dtype=np.float64)
        if c.shape != dims + (3,):
            raise InvalidInputError(f"coefficients must have shape {dims + (3,)}, got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise InvalidInputError("coefficients must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "grid_dims", dims)
        object.__setattr__(self, "grid_spacing", spacing)
        object.__setattr__(self, "grid_origin", origin)
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def for_image(cls, grid, spacing_voxels=(10, 10, 10), coeffs=None):
        """Lattice anchored to an image grid, padded by one control spacing per side."""
        h = np.asarray(spacing_voxels, dtype=np.float64) * np.asarray(grid.spacing)
        extent = (np.asarray(grid.dims) - 1) * np.asarray(grid.spacing)
        dims = tuple(int(np.floor(extent[a] / h[a] + 1e-9)) + 4 for a in range(3))
        origin = tuple(np.asarray(grid.origin) - h)
        return cls(dims, tuple(h), origin, coeffs)

    def same_lattice(self, other):
        return (isinstance(other, BSplineParams) and self.grid_dims == other.grid_dims
                and np.allclose(self.grid_spacing, other.grid_spacing, rtol=0, atol=1e-9)
                and np.allclose(self.grid_origin, other.grid_origin, rtol=0, atol=1e-9))

    def as_vector(self):
        return self.coeffs.reshape(-1).copy()

    def with_vector(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.size != self.coeffs.size:
            raise InvalidInputError(f"expected {self.coeffs.size} coefficients, got {theta.size}")
        return BSplineParams(self.grid_dims, self.grid_spacing, self.grid_origin,
                             theta.reshape(self.coeffs.shape))

    def identity(self):
        return BSplineParams(self.grid_dims, self.grid_spacing, self.grid_origin)

    def _lattice_coords(self, pts):
        t = (np.asarray(pts, dtype=np.float64) - np.asarray(self.grid_origin)) / np.asarray(self.grid_spacing)
        i = np.floor(t).astype(np.intp)
        dims = np.asarray(self.grid_dims)
        bad = (i < 1) | (i + 2 > dims - 1)
        if np.any(bad):
            raise OutOfDomainError("point outside B-Spline lattice support")
        return i, t - i

    def axis_weights(self, axis, coords, deriv=False):
        """Dense (len(coords), n_ctrl) basis matrix along one axis.

        With ``deriv`` the matrix holds d/dx of the weights (per mm).
        """
        coords = np.asarray(coords, dtype=np.float64)
        t = (coords - self.grid_origin[axis]) / self.grid_spacing[axis]
        i = np.floor(t).astype(np.intp)
        n = self.grid_dims[axis]
        if np.any(i < 1) or np.any(i + 2 > n - 1):
            raise OutOfDomainError(f"coordinates outside lattice support on axis {axis}")
        f = t - i
        w = cubic_weight_derivs(f) / self.grid_spacing[axis] if deriv else cubic_weights(f)
        out = np.zeros((len(coords), n))
        rows = np.arange(len(coords))
        for k in range(4):
            out[rows, i - 1 + k] = w[:, k]
        return out

    def map_points(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        return pts + bspline_displacement(self, pts)

    def max_displacement(self):
        """Per-axis bound on |u| (weights are a non-negative partition of unity)."""
        return np.abs(self.coeffs).reshape(-1, 3).max(axis=0)

    def __eq__(self, other):
        return (isinstance(other, BSplineParams) and self.grid_dims == other.grid_dims
                and self.grid_spacing == other.grid_spacing
                and self.grid_origin == other.grid_origin
                and np.array_equal(self.coeffs, other.coeffs))

    def __repr__(self):
        return (f"BSplineParams(grid_dims={self.grid_dims}, grid_spacing={self.grid_spacing}, "
                f"max|c|={np.abs(self.coeffs).max():.4g})")


def _local_weights(b, pts, deriv_axis=None):
    """(N, 4, 4, 4) tensor-product weights and the lattice base index per point."""
    i, f = b._lattice_coords(pts)
    w = [cubic_weights(f[:, a]) for a in range(3)]
    if deriv_axis is not None:
        w[deriv_axis] = cubic_weight_derivs(f[:, deriv_axis]) / b.grid_spacing[deriv_axis]
    W = w[0][:, :, None, None] * w[1][:, None, :, None] * w[2][:, None, None, :]
    return W, i


def _gather(b, i):
    """(N, 4, 4, 4, 3) neighbouring coefficients."""
    off = np.arange(-1, 3)
    ia = i[:, 0, None] + off
    ib = i[:, 1, None] + off
    ic = i[:, 2, None] + off
    return b.coeffs[ia[:, :, None, None], ib[:, None, :, None], ic[:, None, None, :]]


def bspline_displacement(b, p):
    """Displacement u(p) in mm; ``p`` is (3,) or (N, 3)."""
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    pts = p.reshape(-1, 3)
    W, i = _local_weights(b, pts)
    u = np.einsum("nabc,nabcj->nj", W, _gather(b, i))
    return u[0] if single else u


def bspline_jacobian(b, p):
    """Jacobian d(p + u)/dp, (3, 3) or (N, 3, 3)."""
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    pts = p.reshape(-1, 3)
    J = np.zeros((pts.shape[0], 3, 3))
    C = None
    for a in range(3):
        W, i = _local_weights(b, pts, deriv_axis=a)
        if C is None:
            C = _gather(b, i)
        J[:, :, a] = np.einsum("nabc,nabcj->nj", W, C)
    J += np.eye(3)
    return J[0] if single else J


FOLD = float("-inf")


def bspline_jacobian_logdet(b, p):
    """log det of the Jacobian at ``p``; :data:`FOLD` (-inf) where det <= 0."""
    J = bspline_jacobian(b, p)
    det = np.linalg.det(J)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(det > 0, np.log(np.where(det > 0, det, 1.0)), FOLD)
    return float(out) if np.ndim(out) == 0 else out


def grid_logdet(b, grid, lo=(0, 0, 0), hi=None):
    """Log-det of the Jacobian at every voxel center of a box of ``grid``.

    Separable evaluation; folds come out as :data:`FOLD`.
    """
    hi = grid.dims if hi is None else hi
    coords = [grid.origin[a] + grid.spacing[a] * np.arange(lo[a], hi[a]) for a in range(3)]
    W = [b.axis_weights(a, coords[a]) for a in range(3)]
    D = [b.axis_weights(a, coords[a], deriv=True) for a in range(3)]
    J = np.empty(tuple(len(c) for c in coords) + (3, 3))
    J[..., :, 0] = tensor_apply(D[0], W[1], W[2], b.coeffs)
    J[..., :, 1] = tensor_apply(W[0], D[1], W[2], b.coeffs)
    J[..., :, 2] = tensor_apply(W[0], W[1], D[2], b.coeffs)
    J += np.eye(3)
    det = np.linalg.det(J)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(det > 0, np.log(np.where(det > 0, det, 1.0)), FOLD)


def tensor_apply(Wx, Wy, Wz, coeffs):
    """Separable lattice evaluation: sum_abc Wx[x,a] Wy[y,b] Wz[z,c] coeffs[a,b,c,:]."""
    t = np.einsum("xa,abcj->xbcj", Wx, coeffs)
    t = np.einsum("yb,xbcj->xycj", Wy, t)
    return np.einsum("zc,xycj->xyzj", Wz, t)


def tensor_adjoint(Wx, Wy, Wz, field):
    """Adjoint of :func:`tensor_apply`: scatter an (x, y, z, 3) field onto the lattice."""
    t = np.einsum("zc,xyzj->xycj", Wz, field)
    t = np.einsum("yb,xycj->xbcj", Wy, t)
    return np.einsum("xa,xbcj->abcj", Wx, t)


# ---------------------------------------------------------------------------
# penalties and flat-vector helpers
# ---------------------------------------------------------------------------

def _same_model(a, b):
    if type(a) is not type(b):
        raise InvalidInputError(f"model mismatch: {a.model} vs {b.model}")
    if isinstance(a, RigidParams):
        _check_centers(a, b)
    elif not a.same_lattice(b):
        raise InvalidInputError("B-Spline lattices differ")


def param_distance_sq(a, b, weights=(1.0, 0.0)):
    """Weighted squared L2 distance between two parameter sets.

    Rigid: ``weights = (w_rot, w_trans)``.  B-Spline: ``weights`` is a scalar
    (or a one-element sequence) multiplying the squared coefficient distance.
    """
    _same_model(a, b)
    if isinstance(a, RigidParams):
        w_rot, w_trans = weights
        return float(w_rot * np.sum((a.rot - b.rot) ** 2) + w_trans * np.sum((a.trans - b.trans) ** 2))
    w = float(np.ravel(weights)[0])
    return float(w * np.sum((a.coeffs - b.coeffs) ** 2))


def param_distance_grad(a, b, weights=(1.0, 0.0)):
    """Gradient of :func:`param_distance_sq` w.r.t. the flat parameters of ``a``."""
    _same_model(a, b)
    d = a.as_vector() - b.as_vector()
    if isinstance(a, RigidParams):
        w_rot, w_trans = weights
        return 2.0 * d * np.array([w_rot] * 3 + [w_trans] * 3)
    return 2.0 * float(np.ravel(weights)[0]) * d


def composition_distance_sq(a, b, weights=(1.0, 0.0)):
    """Weighted squared size of ``a o b^-1`` (rigid only): exact composition norm."""
    _same_model(a, b)
    if not isinstance(a, RigidParams):
        raise InvalidInputError("composition norm is only defined for rigid transforms")
    d = rigid_compose(a, rigid_invert(b))
    w_rot, w_trans = weights
    return float(w_rot * np.sum(d.rot ** 2) + w_trans * np.sum(d.trans ** 2))


def spatial_reg(t):
    """Sum of squared B-Spline coefficients and its gradient; 0 for rigid."""
    if isinstance(t, RigidParams):
        return 0.0, np.zeros(6)
    return float(np.sum(t.coeffs ** 2)), 2.0 * t.as_vector()


def identity_like(t):
    if isinstance(t, RigidParams):
        return RigidParams.identity(t.center)
    return t.identity()


# ---------------------------------------------------------------------------
# JSON
# ---------------------------------------------------------------------------

def to_dict(t):
    if isinstance(t, RigidParams):
        return {"model": "rigid", "parameters": t.as_vector().tolist(),
                "center": t.center.tolist()}
    return {"model": "bspline", "parameters": t.as_vector().tolist(),
            "grid_dims": list(t.grid_dims), "grid_spacing": list(t.grid_spacing),
            "grid_origin": list(t.grid_origin)}


def from_dict(d):
    try:
        model = d["model"]
        theta = np.asarray(d["parameters"], dtype=np.float64)
        if model == "rigid":
            return RigidParams(theta[:3], theta[3:6], d.get("center", (0.0, 0.0, 0.0)))
        if model == "bspline":
            dims = tuple(d["grid_dims"])
            return BSplineParams(dims, d["grid_spacing"], d["grid_origin"], theta.reshape(dims + (3,)))
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidInputError(f"malformed transform record: {exc}") from exc
    raise InvalidInputError(f"unknown transform model {model!r}")


def save_transform(t, path):
    with open(path, "w") as fh:
        json.dump(to_dict(t), fh, indent=1)


def load_transform(path):
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(path, f"not valid JSON ({exc})") from exc
    return from_dict(d)
