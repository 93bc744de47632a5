"""Synthetic motion phantoms with known ground truth.

A template holds a textured body with a brain-like ellipsoid and a curved,
placenta-like slab.  Motion sequences are AR(1)-smoothed random walks in
parameter space, started from the identity at the template frame and walked
outward in both directions.  Frames are the template pulled through the true
transform, times a smooth quadratic bias field, plus Gaussian noise.

Randomness uses counter-based Philox streams keyed by ``(seed, stream)`` so any
frame can be regenerated independently of the others.
"""
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import ndimage

from . import _kernels
from .errors import InvalidInputError
from .image import Grid, ImageVolume, LabelMap, RoiMask, resample
from .transforms import BSplineParams, RigidParams, tensor_apply

BRAIN, PLACENTA, BODY = 1, 2, 3

_STREAM_TEXTURE = 0
_STREAM_WALK_UP = 1
_STREAM_WALK_DOWN = 2
_STREAM_NOISE = 1000
_STREAM_BIAS = 100000


def rng_for(seed, stream):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple      # voxels
    radii: tuple       # voxels
    intensity: float
    label: int


@dataclass(frozen=True)
class CurvedSlab:
    """Slab ``|z - z0 - curvature * ((x-xc)^2 + (y-yc)^2)| <= thickness / 2`` inside an
    elliptical footprint; all lengths in voxels."""

    center: tuple
    footprint: tuple
    thickness: float
    curvature: float
    intensity: float
    label: int


def _default_objects():
    return (
        Ellipsoid((32, 32, 32), (27, 25, 22), 0.35, BODY),
        CurvedSlab((33, 32, 20), (17, 14), 7.0, 0.012, 0.6, PLACENTA),
        Ellipsoid((30, 31, 40), (14, 10, 8), 0.8, BRAIN),
    )


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple = (64, 64, 64)
    spacing: tuple = (3.0, 3.0, 3.0)
    origin: tuple = (0.0, 0.0, 0.0)
    objects: tuple = field(default_factory=_default_objects)
    background: float = 0.05
    texture_amplitude: float = 0.15
    correlation_length: float = 1.0    # voxels; texture autocorrelation at this lag is exp(-1/2)
    seed: int = 0
    roi_dilation: float = 2.0
    moving_margin: float = 4.0         # voxels of surrounding tissue that move with a tracked object

    def to_dict(self):
        d = asdict(self)
        d["objects"] = [dict(kind=type(o).__name__, **asdict(o)) for o in self.objects]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "objects" in d:
            objs = []
            for o in d["objects"]:
                o = dict(o)
                kind = o.pop("kind")
                if kind == "Ellipsoid":
                    objs.append(Ellipsoid(tuple(o["center"]), tuple(o["radii"]), o["intensity"], o["label"]))
                elif kind == "CurvedSlab":
                    objs.append(CurvedSlab(tuple(o["center"]), tuple(o["footprint"]), o["thickness"],
                                           o["curvature"], o["intensity"], o["label"]))
                else:
                    raise InvalidInputError(f"unknown phantom object {kind!r}")
            d["objects"] = tuple(objs)
        for k in ("dims", "spacing", "origin"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def _index_grids(dims):
    return np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij")


def _object_mask(obj, dims):
    x, y, z = _index_grids(dims)
    if isinstance(obj, Ellipsoid):
        c, r = obj.center, obj.radii
        return ((x - c[0]) / r[0]) ** 2 + ((y - c[1]) / r[1]) ** 2 + ((z - c[2]) / r[2]) ** 2 <= 1.0
    if isinstance(obj, CurvedSlab):
        c, fp = obj.center, obj.footprint
        rho2 = (x - c[0]) ** 2 + (y - c[1]) ** 2
        inside = ((x - c[0]) / fp[0]) ** 2 + ((y - c[1]) / fp[1]) ** 2 <= 1.0
        mid = c[2] + obj.curvature * rho2
        return inside & (np.abs(z - mid) <= obj.thickness / 2.0)
    raise InvalidInputError(f"unknown phantom object {obj!r}")


def _check_bounds(obj, dims):
    c = np.asarray(obj.center, dtype=float)
    if isinstance(obj, Ellipsoid):
        lo = c - np.asarray(obj.radii, dtype=float)
        hi = c + np.asarray(obj.radii, dtype=float)
    else:
        fp = np.asarray(obj.footprint, dtype=float)
        sag = obj.curvature * float(np.max(fp)) ** 2
        half = obj.thickness / 2.0
        lo = np.array([c[0] - fp[0], c[1] - fp[1], c[2] - half + min(sag, 0.0)])
        hi = np.array([c[0] + fp[0], c[1] + fp[1], c[2] + half + max(sag, 0.0)])
    if np.any(lo < 0) or np.any(hi > np.asarray(dims) - 1):
        raise InvalidInputError(f"phantom object {obj} extends outside the {dims} grid")


def texture_field(spec):
    """Zero-mean, unit-variance band-limited noise on the phantom grid."""
    rng = rng_for(spec.seed, _STREAM_TEXTURE)
    white = rng.standard_normal(spec.dims)
    sigma = spec.correlation_length / np.sqrt(2.0)
    t = ndimage.gaussian_filter(white, sigma, mode="wrap")
    t -= t.mean()
    return t / t.std()


def _render(spec, tex, skip=()):
    img = np.full(spec.dims, spec.background, dtype=np.float64)
    lab = np.zeros(spec.dims, dtype=np.int32)
    for obj in spec.objects:
        if obj.label in skip:
            continue
        m = _object_mask(obj, spec.dims)
        img[m] = obj.intensity + spec.texture_amplitude * tex[m]
        lab[m] = obj.label
    return img, lab


def make_template(spec=PhantomSpec()):
    """Return ``(image, labels, rois)``; ``rois`` maps label -> RoiMask (support dilated)."""
    grid = Grid(spec.dims, spec.spacing, spec.origin)
    for obj in spec.objects:
        _check_bounds(obj, spec.dims)
    img, lab = _render(spec, texture_field(spec))
    labels = LabelMap.on_grid(lab, grid)
    rois = {}
    for obj in spec.objects:
        rois[obj.label] = RoiMask.on_grid(lab == obj.label, grid).dilated(spec.roi_dilation)
    return ImageVolume.on_grid(img, grid), labels, rois


def static_layer(spec, moving_label):
    """Background seen when the ``moving_label`` object and its margin move away.

    Returns ``(background, background_labels, weight)``: the template rendered
    without that object, its labels, and a soft [0, 1] map of the region that
    moves with the object (dilated by ``spec.moving_margin`` voxels, edges
    smoothed over one voxel).
    """
    grid = Grid(spec.dims, spec.spacing, spec.origin)
    tex = texture_field(spec)
    img, static_lab = _render(spec, tex, skip=(moving_label,))
    _, lab = _render(spec, tex)
    region = RoiMask.on_grid(lab == moving_label, grid).dilated(spec.moving_margin).voxels
    weight = np.clip(ndimage.gaussian_filter(region.astype(np.float64), 1.0), 0.0, 1.0)
    return ImageVolume.on_grid(img, grid), LabelMap.on_grid(static_lab, grid), weight


# ---------------------------------------------------------------------------
# motion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MotionSpec:
    model: str = "rigid"
    n_frames: int = 61
    rot_std_deg: float = 2.0
    trans_std_mm: float = 1.5
    coeff_std_mm: float = 1.0
    rho: float = 0.5
    seed: int = 0
    drift: tuple = None            # rigid: (rx, ry, rz [deg], tx, ty, tz [mm]) per frame
    template_index: object = "middle"
    max_displacement: float = None  # B-Spline: cap on the peak |u| over all frames, mm
    pivot_offset: tuple = None      # rigid: rotation pivot relative to the tracked centroid, mm

    def __post_init__(self):
        if self.model not in ("rigid", "bspline"):
            raise InvalidInputError(f"unknown motion model {self.model!r}")
        if int(self.n_frames) < 1:
            raise InvalidInputError("n_frames must be >= 1")
        if not 0.0 <= self.rho < 1.0:
            raise InvalidInputError("rho must lie in [0, 1)")
        if min(self.rot_std_deg, self.trans_std_mm, self.coeff_std_mm) < 0:
            raise InvalidInputError("standard deviations must be >= 0")

    def resolved_template_index(self):
        return resolve_template_index(self.template_index, self.n_frames)

    def to_dict(self):
        return asdict(self)


def resolve_template_index(template_index, n):
    if template_index in (None, "middle"):
        return n // 2
    t = int(template_index)
    if not 0 <= t < n:
        raise InvalidInputError(f"template index {t} outside [0, {n})")
    return t


def ar1_increments(rng, n_steps, std, rho):
    """Stationary AR(1) increments with per-step standard deviation ``std``.

    ``std`` broadcasts over parameters; returns an (n_steps, n_params) array.
    """
    std = np.atleast_1d(np.asarray(std, dtype=np.float64))
    eps = rng.standard_normal((n_steps, std.size))
    out = np.empty_like(eps)
    prev = np.zeros(std.size)
    innov = np.sqrt(1.0 - rho * rho)
    for k in range(n_steps):
        prev = eps[k] if k == 0 else rho * prev + innov * eps[k]
        out[k] = prev
    return out * std


def _peak_displacement(lattice, theta):
    """Largest |u| over all frames, probed at control nodes and half-nodes of the supported box."""
    W = []
    for a in range(3):
        k = np.arange(2, 2 * lattice.grid_dims[a] - 4) / 2.0
        W.append(lattice.axis_weights(a, lattice.grid_origin[a] + k * lattice.grid_spacing[a]))
    peak = 0.0
    for th in theta:
        u = tensor_apply(*W, th.reshape(lattice.coeffs.shape))
        peak = max(peak, float(np.sqrt((u * u).sum(axis=-1)).max()))
    return peak


def gen_motion(spec, center=(0.0, 0.0, 0.0), lattice=None):
    """Per-frame true transforms (frame -> template point maps).

    Rigid motion needs ``center``; B-Spline motion needs a ``lattice``
    (a :class:`BSplineParams` whose coefficients are ignored).
    """
    n = int(spec.n_frames)
    t = spec.resolved_template_index()
    if spec.model == "rigid":
        std = np.array([np.deg2rad(spec.rot_std_deg)] * 3 + [spec.trans_std_mm] * 3)
        drift = np.zeros(6)
        if spec.drift is not None:
            d = np.asarray(spec.drift, dtype=np.float64)
            drift = np.concatenate([np.deg2rad(d[:3]), d[3:]])
        n_par = 6
    else:
        if lattice is None:
            raise InvalidInputError("B-Spline motion needs a lattice")
        n_par = lattice.coeffs.size
        std = np.full(n_par, spec.coeff_std_mm)
        drift = np.zeros(n_par)

    theta = np.zeros((n, n_par))
    for stream, idx in ((_STREAM_WALK_UP, range(t + 1, n)), (_STREAM_WALK_DOWN, range(t - 1, -1, -1))):
        idx = list(idx)
        if not idx:
            continue
        rng = rng_for(spec.seed, stream)
        inc = ar1_increments(rng, len(idx), std, spec.rho) + drift
        prev = theta[t]
        for k, i in enumerate(idx):
            theta[i] = prev + inc[k]
            prev = theta[i]

    if spec.model == "bspline" and spec.max_displacement is not None:
        peak = _peak_displacement(lattice, theta)
        if peak > spec.max_displacement:
            theta *= spec.max_displacement / peak

    if spec.model == "rigid":
        if spec.pivot_offset is None:
            return [RigidParams(th[:3], th[3:], center) for th in theta]
        pivot = np.asarray(center, dtype=np.float64) + np.asarray(spec.pivot_offset, dtype=np.float64)
        return [RigidParams(th[:3], th[3:], pivot).recentered(center) for th in theta]
    return [lattice.with_vector(th) for th in theta]


# ---------------------------------------------------------------------------
# series synthesis
# ---------------------------------------------------------------------------

@dataclass
class PhantomTruth:
    series: list
    transforms: list
    labels: LabelMap = None
    noise_std: float = 0.0
    bias: float = 0.0
    seed: int = 0
    template_index: int = 0
    moving_weight: np.ndarray = None
    static_labels: LabelMap = None

    def frame_labels(self, n):
        """Ground-truth labels of frame ``n``."""
        return reference_labels(self.labels, self.transforms[n], self.moving_weight,
                                self.static_labels)


def bias_field(grid, amplitude, rng):
    """``1 + amplitude * P / max|P|`` for a random quadratic polynomial ``P``."""
    if amplitude == 0:
        return np.ones(grid.dims)
    x, y, z = [2.0 * g / max(n - 1, 1) - 1.0 for g, n in zip(_index_grids(grid.dims), grid.dims)]
    terms = [x, y, z, x * x, y * y, z * z, x * y, x * z, y * z]
    coef = rng.standard_normal(len(terms))
    P = sum(c * t for c, t in zip(coef, terms))
    peak = np.abs(P).max()
    return 1.0 + amplitude * P / peak if peak > 0 else np.ones(grid.dims)


def _moving_weight(weight, grid, transform):
    idx = grid.to_index(transform.map_points(grid.points().reshape(-1, 3)))
    return _kernels.sample_linear(weight, idx, 0.0).reshape(grid.dims)


def synthesize_series(template, motions, noise_std=0.0, bias=0.0, seed=0, labels=None,
                      template_index=None, background=None, moving_weight=None,
                      static_labels=None):
    """Frames ``resample(template, T_n) * bias_n + noise_n``.

    ``noise_std`` is a fraction of the template intensity range, ``bias`` the
    peak relative amplitude of the per-frame quadratic bias field.  With a
    ``background`` image and a template-space ``moving_weight`` map only the
    weighted region moves; the rest of the frame shows the static background,
    whose labels (``static_labels``) are kept on the truth for reference maps.
    """
    v = template.voxels
    scale = float(v.max() - v.min())
    if (background is None) != (moving_weight is None):
        raise InvalidInputError("background and moving_weight go together")
    series = []
    for n, t in enumerate(motions):
        warped = resample(template, t.map_points, template.grid).voxels.astype(np.float64)
        if background is not None:
            w = _moving_weight(moving_weight, template.grid, t)
            warped = w * warped + (1.0 - w) * background.voxels
        if bias:
            warped = warped * bias_field(template.grid, bias, rng_for(seed, _STREAM_BIAS + n))
        if noise_std:
            warped = warped + noise_std * scale * rng_for(seed, _STREAM_NOISE + n).standard_normal(warped.shape)
        series.append(ImageVolume.on_grid(warped, template.grid))
    t_idx = len(motions) // 2 if template_index is None else template_index
    return PhantomTruth(series, list(motions), labels, noise_std, bias, seed, t_idx, moving_weight,
                        static_labels)


def reference_labels(labels, transform, moving_weight=None, static_labels=None):
    """Ground-truth label map of a frame: template labels pulled through the true map.

    With ``moving_weight`` only the moving region is pulled; elsewhere the
    frame shows ``static_labels``.
    """
    pulled = resample(labels, transform.map_points, labels.grid)
    if moving_weight is None:
        return pulled
    if static_labels is None:
        raise InvalidInputError("a moving region needs the static label map")
    w = _moving_weight(moving_weight, labels.grid, transform)
    return LabelMap.on_grid(np.where(w >= 0.5, pulled.voxels, static_labels.voxels), labels.grid)


def make_phantom(phantom_spec=PhantomSpec(), motion_spec=MotionSpec(), noise_std=0.02, bias=0.1,
                 roi_label=None, spacing_voxels=(10, 10, 10), static_background=False):
    """Template, ROIs and a synthesized series in one call.

    Rigid motion rotates about the centroid of the ``roi_label`` ROI (brain by
    default); with ``static_background`` only that object and its margin move
    while the rest of the body stays put.  B-Spline motion uses a lattice
    anchored to the template grid.
    """
    image, labels, rois = make_template(phantom_spec)
    rigid = motion_spec.model == "rigid"
    label = BRAIN if roi_label is None else roi_label
    if rigid:
        motions = gen_motion(motion_spec, center=rois[label].centroid())
    else:
        lattice = BSplineParams.for_image(image.grid, spacing_voxels)
        motions = gen_motion(motion_spec, lattice=lattice)
    background = static_labels = weight = None
    if static_background:
        background, static_labels, weight = static_layer(phantom_spec, label)
    truth = synthesize_series(image, motions, noise_std, bias, seed=motion_spec.seed, labels=labels,
                              template_index=motion_spec.resolved_template_index(),
                              background=background, moving_weight=weight,
                              static_labels=static_labels)
    return image, labels, rois, truth
