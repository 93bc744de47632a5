"""Temporal registration of 3D image series by filtered sequential estimation.

Every frame of a series is aligned to a template frame by minimizing a windowed
NCC dissimilarity plus a penalty that keeps the estimate close to the one just
obtained for the neighbouring frame.  Rigid and cubic B-Spline models are
supported.

Set ``TEMPREG_DISABLE_JIT=1`` before import to run the pure-numpy kernels.
"""
from . import _kernels
from .errors import (DegenerateMetricError, FormatError, FrameError, InvalidInputError,
                     OptimizationError, OutOfDomainError, TempRegError)
from .image import (Grid, ImageVolume, LabelMap, RoiMask, resample, split_interleaved,
                    trilinear_sample)
from .transforms import (BSplineParams, RigidParams, bspline_jacobian_logdet, param_distance_sq,
                         rigid_apply, rigid_compose, rigid_invert)
from .metric import MetricConfig, lncc_dist, lncc_grad
from .optimizer import OptimizerConfig, OptReport, build_pyramid, minimize
from .pipeline import PipelineConfig, SeriesAlignment, align_series, register_pair
from .evaluation import EvalReport, dice, jacobian_stats, propagate_labels
from .phantom import MotionSpec, PhantomSpec, gen_motion, make_phantom, synthesize_series

__version__ = "0.1.0"

backend = _kernels.backend
