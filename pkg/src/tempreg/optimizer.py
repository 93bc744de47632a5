"""Regular-step gradient descent and the Gaussian image pyramid."""
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import ndimage

from .errors import InvalidInputError, OptimizationError, TempRegError
from .image import ImageVolume


@dataclass(frozen=True)
class OptimizerConfig:
    pyramid_levels: int = 3
    step_rot: float = 0.05          # rad
    step_trans: float = 2.0         # mm
    step_bspline: float = 1.0       # mm
    step_shrink: float = 0.5
    min_step: float = 1e-3          # fraction of the initial step
    max_iterations: int = 200       # per pyramid level
    rot_scale: float = 30.0         # mm per rad when forming the descent direction

    def __post_init__(self):
        if int(self.pyramid_levels) < 1:
            raise InvalidInputError("pyramid_levels must be >= 1")
        for name in ("step_rot", "step_trans", "step_bspline", "min_step", "rot_scale"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be > 0")
        if not 0 < self.step_shrink < 1:
            raise InvalidInputError("step_shrink must lie in (0, 1)")
        if int(self.max_iterations) < 1:
            raise InvalidInputError("max_iterations must be >= 1")

    def steps_and_scales(self, model, n_params):
        """Per-parameter initial steps and direction scales for a transform model."""
        if model == "rigid":
            steps = np.array([self.step_rot] * 3 + [self.step_trans] * 3)
            scales = np.array([self.rot_scale] * 3 + [1.0] * 3)
        else:
            steps = np.full(n_params, self.step_bspline)
            scales = np.ones(n_params)
        return steps, scales


@dataclass
class OptReport:
    final_cost: float = float("nan")
    iterations: list = field(default_factory=list)
    accepted: list = field(default_factory=list)
    cost_trace: list = field(default_factory=list)
    converged: bool = False
    grad_norm: float = float("nan")
    message: str = ""
    final_metric: float = None

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def minimize(fun, x0, steps, scales=None, min_step=1e-3, step_shrink=0.5, max_iterations=200,
             start_factor=1.0, report=None):
    """Regular-step gradient descent with shrink-on-reject.

    ``fun(x) -> (cost, grad)``.  Each trial moves ``x`` by
    ``-factor * steps * u`` where ``u`` is the unit vector of ``grad / scales``.
    A trial that does not lower the cost is rejected and ``factor`` is
    multiplied by ``step_shrink``; the run stops once ``factor < min_step`` or
    the iteration budget is spent.  Returns ``(x_best, report)``; the report is
    appended to when one is passed in (multi-level use).
    """
    report = OptReport() if report is None else report
    x = np.array(x0, dtype=np.float64)
    steps = np.broadcast_to(np.asarray(steps, dtype=np.float64), x.shape)
    scales = np.ones_like(x) if scales is None else np.broadcast_to(np.asarray(scales, float), x.shape)
    f, g = fun(x)
    report.cost_trace.append(float(f))
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise OptimizationError("cost or gradient is not finite at the initial point")

    factor = float(start_factor)
    n_iter = n_acc = 0
    converged = False
    message = "iteration budget exhausted"
    while n_iter < max_iterations:
        d = g / scales
        dn = np.linalg.norm(d)
        if dn == 0.0:
            converged, message = True, "zero gradient"
            break
        if factor < min_step:
            converged, message = True, "step below minimum"
            break
        trial = x - factor * steps * (d / dn)
        n_iter += 1
        try:
            ft, gt = fun(trial)
        except TempRegError:
            # e.g. the ROI left the image: treat like an uphill step
            report.cost_trace.append(float("inf"))
            factor *= step_shrink
            continue
        report.cost_trace.append(float(ft))
        if not np.isfinite(ft) or not np.all(np.isfinite(gt)):
            message = "non-finite cost during iteration; returning best point"
            break
        if ft < f:
            x, f, g = trial, ft, gt
            n_acc += 1
        else:
            factor *= step_shrink
    else:
        if factor < min_step:
            converged, message = True, "step below minimum"

    report.iterations.append(n_iter)
    report.accepted.append(n_acc)
    report.final_cost = float(f)
    report.converged = converged
    report.grad_norm = float(np.linalg.norm(g))
    report.message = message
    return x, report


def build_pyramid(vol, levels):
    """``[vol, vol/2, vol/4, ...]``.

    Each level smooths the previous one with sigma = 1 of its voxels (0.5 times
    the decimation factor of 2), keeps every other voxel, doubles the spacing
    and keeps the origin.
    """
    levels = int(levels)
    if levels < 1:
        raise InvalidInputError("levels must be >= 1")
    coarsest = np.asarray(vol.dims)
    for _ in range(levels - 1):
        coarsest = (coarsest + 1) // 2
    if coarsest.min() < 8:
        raise InvalidInputError(f"volume {vol.dims} too small for {levels} pyramid levels "
                                f"(coarsest level needs >= 8 voxels per axis)")
    out = [vol]
    for _ in range(levels - 1):
        prev = out[-1]
        v = ndimage.gaussian_filter(prev.voxels.astype(np.float64), sigma=1.0, mode="nearest")
        v = v[::2, ::2, ::2]
        out.append(ImageVolume(v, tuple(2.0 * s for s in prev.spacing), prev.origin))
    return out
