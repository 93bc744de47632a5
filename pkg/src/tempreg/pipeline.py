"""Sequential (filtered) registration of an image series to one of its frames.

Each frame is registered to the template by minimizing

    Dist(frame, template o T) + temporal(T, T_anchor) + lambda2 * Reg(T)

where the anchor and the initial guess are the estimate already obtained for
the neighbouring frame on the template side.  Frames below the template index
are visited in descending order, frames above it in ascending order.  The
pairwise baseline drops the temporal term and starts every frame from the
identity.
"""
import json
import logging
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import _kernels
from .errors import FrameError, InvalidInputError, TempRegError
from .image import RoiMask
from .metric import MetricConfig, evaluate
from .optimizer import OptimizerConfig, OptReport, build_pyramid, minimize
from .phantom import resolve_template_index
from .transforms import (BSplineParams, RigidParams, composition_distance_sq, from_dict,
                         identity_like, param_distance_grad, param_distance_sq, spatial_reg,
                         to_dict)

log = logging.getLogger(__name__)

MODES = ("temporal", "pairwise")
MODELS = ("rigid", "bspline")


@dataclass(frozen=True)
class PipelineConfig:
    mode: str = "temporal"
    model: str = "rigid"
    template_index: object = "middle"
    lambda1: float = 0.005          # B-Spline temporal weight
    lambda1_rot: float = 1.0        # rigid temporal weight on rotation angles
    lambda1_trans: float = 0.0      # rigid temporal weight on translations
    lambda2: float = 0.0            # spatial weight (B-Spline sum of squared coefficients)
    init: str = "previous"          # previous | identity
    anchor: str = "previous"        # previous | none
    composition_norm: bool = False
    grid_spacing_voxels: tuple = (10, 10, 10)
    roi_dilation: int = None        # default: 0 rigid, 3 B-Spline
    bspline_max_level_factor: float = 2.0
    center: tuple = None            # default: template ROI centroid
    metric: MetricConfig = field(default_factory=MetricConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidInputError(f"mode must be one of {MODES}")
        if self.model not in MODELS:
            raise InvalidInputError(f"model must be one of {MODELS}")
        if self.init not in ("previous", "identity"):
            raise InvalidInputError("init must be 'previous' or 'identity'")
        if self.anchor not in ("previous", "none"):
            raise InvalidInputError("anchor must be 'previous' or 'none'")
        for name in ("lambda1", "lambda1_rot", "lambda1_trans", "lambda2"):
            if not getattr(self, name) >= 0:
                raise InvalidInputError(f"{name} must be >= 0")
        if isinstance(self.metric, dict):
            object.__setattr__(self, "metric", MetricConfig(**self.metric))
        if isinstance(self.optimizer, dict):
            object.__setattr__(self, "optimizer", OptimizerConfig(**self.optimizer))

    @property
    def temporal_weights(self):
        if self.model == "rigid":
            return (self.lambda1_rot, self.lambda1_trans)
        return (self.lambda1,)

    @property
    def effective_roi_dilation(self):
        if self.roi_dilation is not None:
            return int(self.roi_dilation)
        return 3 if self.model == "bspline" else 0

    def resolved(self, n_frames=None):
        """Copy with defaults materialized (template index needs the series length)."""
        t = self.template_index
        if n_frames is not None:
            t = resolve_template_index(t, n_frames)
        return replace(self, template_index=t, roi_dilation=self.effective_roi_dilation)

    def to_dict(self):
        d = asdict(self)
        d["grid_spacing_voxels"] = list(self.grid_spacing_voxels)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "grid_spacing_voxels" in d:
            d["grid_spacing_voxels"] = tuple(d["grid_spacing_voxels"])
        if d.get("center") is not None:
            d["center"] = tuple(d["center"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidInputError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# per-series preparation
# ---------------------------------------------------------------------------

class Prepared:
    """Normalized template pyramid, ROI, and the transform prototype for a run."""

    def __init__(self, template, roi, cfg):
        self.cfg = cfg
        self.levels = build_pyramid(template.rescaled(), cfg.optimizer.pyramid_levels)
        if roi is None:
            roi = RoiMask.full(template.grid)
        self.roi = roi.dilated(cfg.effective_roi_dilation)
        if self.roi.count() == 0:
            raise InvalidInputError("ROI mask is empty")
        if cfg.model == "rigid":
            center = self.roi.centroid() if cfg.center is None else np.asarray(cfg.center, float)
            self.proto = RigidParams.identity(center)
        else:
            self.proto = BSplineParams.for_image(template.grid, cfg.grid_spacing_voxels)
        base = template.spacing[0]
        active = []
        for lvl, img in enumerate(self.levels):
            if cfg.model == "bspline" and img.spacing[0] > cfg.bspline_max_level_factor * base + 1e-9:
                continue
            active.append(lvl)
        self.active_levels = sorted(active, reverse=True)   # coarse to fine

    def identity(self):
        return identity_like(self.proto)

    def frame_pyramid(self, frame):
        return build_pyramid(frame.rescaled(), self.cfg.optimizer.pyramid_levels)

    def check(self, t, what):
        if t is None:
            return
        if type(t) is not type(self.proto):
            raise InvalidInputError(f"{what} model does not match config model {self.cfg.model!r}")
        if isinstance(t, RigidParams) and not np.allclose(t.center, self.proto.center, atol=1e-9):
            raise InvalidInputError(f"{what} has a different rotation center")
        if isinstance(t, BSplineParams) and not t.same_lattice(self.proto):
            raise InvalidInputError(f"{what} has a different B-Spline lattice")


def _objective(fixed, moving, prep, anchor, cfg):
    proto = prep.proto
    weights = cfg.temporal_weights
    use_temporal = anchor is not None and any(w > 0 for w in weights)
    use_spatial = cfg.model == "bspline" and cfg.lambda2 > 0

    def fun(theta):
        t = proto.with_vector(theta)
        r = evaluate(fixed, moving, t, prep.roi, cfg.metric)
        value, grad = r.value, r.grad
        if use_temporal:
            if cfg.composition_norm and cfg.model == "rigid":
                value += composition_distance_sq(t, anchor, weights)
                grad = grad + _numeric_grad(lambda th: composition_distance_sq(
                    proto.with_vector(th), anchor, weights), theta)
            else:
                value += param_distance_sq(t, anchor, weights)
                grad = grad + param_distance_grad(t, anchor, weights)
        if use_spatial:
            reg, reg_grad = spatial_reg(t)
            value += cfg.lambda2 * reg
            grad = grad + cfg.lambda2 * reg_grad
        return value, grad

    return fun


def _numeric_grad(f, x, h=1e-7):
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def register_pair(template, frame, roi, anchor, init, cfg, prepared=None):
    """Register ``frame`` to ``template``; returns ``(transform, report)``.

    ``report.final_metric`` holds the dissimilarity (no penalties) at the
    finest level for the returned transform.
    """
    prep = prepared if prepared is not None else Prepared(template, roi, cfg)
    if init is None:
        init = prep.identity()
    prep.check(anchor, "anchor")
    prep.check(init, "init")
    if not template.grid.same_as(frame.grid):
        raise InvalidInputError("template and frame grids differ")
    fpyr = prep.frame_pyramid(frame)
    steps, scales = cfg.optimizer.steps_and_scales(cfg.model, init.as_vector().size)
    theta = init.as_vector()
    report = OptReport()
    for k, lvl in enumerate(prep.active_levels):
        fun = _objective(fpyr[lvl], prep.levels[lvl], prep, anchor, cfg)
        theta, report = minimize(fun, theta, steps, scales, min_step=cfg.optimizer.min_step,
                                 step_shrink=cfg.optimizer.step_shrink,
                                 max_iterations=cfg.optimizer.max_iterations,
                                 start_factor=cfg.optimizer.step_shrink ** k, report=report)
    result = prep.proto.with_vector(theta)
    report.final_metric = evaluate(fpyr[0], prep.levels[0], result, prep.roi, cfg.metric,
                                   want_grad=False).value
    return result, report


# ---------------------------------------------------------------------------
# whole series
# ---------------------------------------------------------------------------

@dataclass
class SeriesAlignment:
    template_index: int
    model: str
    mode: str
    transforms: list
    reports: list
    final_metrics: list
    failed: list = field(default_factory=list)
    failure_policy: str = "carry last successful estimate forward as anchor and init"

    def __len__(self):
        return len(self.transforms)

    def to_dict(self):
        frames = []
        for n, (t, r, m) in enumerate(zip(self.transforms, self.reports, self.final_metrics)):
            rec = {"index": n, "transform": to_dict(t), "final_metric": m,
                   "failed": n in self.failed}
            if r is not None:
                rec["report"] = r.to_dict()
            frames.append(rec)
        return {"template_index": self.template_index, "model": self.model, "mode": self.mode,
                "failure_policy": self.failure_policy, "failed": list(self.failed),
                "frames": frames}

    @classmethod
    def from_dict(cls, d):
        frames = sorted(d["frames"], key=lambda r: r["index"])
        reports = []
        for r in frames:
            rep = r.get("report")
            reports.append(None if rep is None else OptReport.from_dict(rep))
        return cls(d["template_index"], d["model"], d["mode"],
                   [from_dict(r["transform"]) for r in frames], reports,
                   [r["final_metric"] for r in frames], list(d.get("failed", [])),
                   d.get("failure_policy", ""))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def sweep_order(n, t):
    """Frame visit order: descending below the template, ascending above it.

    Yields ``(frame, neighbour_toward_template)``.
    """
    for i in range(t - 1, -1, -1):
        yield i, i + 1
    for i in range(t + 1, n):
        yield i, i - 1


def align_series(series, roi, cfg=PipelineConfig(), threads=None, progress=None):
    """Register every frame of ``series`` to ``series[template_index]``."""
    n = len(series)
    if n < 2:
        raise InvalidInputError("need at least two frames")
    t = resolve_template_index(cfg.template_index, n)
    if threads is not None:
        _kernels.set_threads(threads)
    prep = Prepared(series[t], roi, cfg)
    ident = prep.identity()
    transforms = [None] * n
    reports = [None] * n
    metrics = [None] * n
    failed = []
    transforms[t] = ident
    tmpl = prep.levels[0]
    metrics[t] = evaluate(tmpl, tmpl, ident, prep.roi, cfg.metric, want_grad=False,
                          strict=False).value
    for i, nb in sweep_order(n, t):
        # a failed neighbour already holds the last successful estimate
        prev = transforms[nb]
        if cfg.mode == "pairwise":
            anchor, init = None, ident
        else:
            anchor = prev if cfg.anchor == "previous" else None
            init = prev if cfg.init == "previous" else ident
        try:
            est, rep = register_pair(series[t], series[i], roi, anchor, init, cfg, prepared=prep)
            transforms[i], reports[i], metrics[i] = est, rep, rep.final_metric
        except TempRegError as exc:
            err = FrameError(i, exc)
            log.warning("%s", err)
            failed.append(i)
            transforms[i] = prev
            reports[i] = OptReport(message=str(err))
            metrics[i] = None
        if progress is not None:
            progress(i, transforms[i], reports[i])
    return SeriesAlignment(t, cfg.model, cfg.mode, transforms, reports, metrics, sorted(failed))
