"""Label propagation, Dice overlap and Jacobian log-determinant statistics."""
import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .image import Grid, LabelMap, resample
from .transforms import BSplineParams, grid_logdet

MODES = ("temporal", "pairwise", "none")
HEADER = ["frame", "label", "dice", "logdet_mean", "logdet_std", "folds", "mode"]


def _grid_of(target):
    grid = target.grid if hasattr(target, "grid") else target
    if not isinstance(grid, Grid):
        raise InvalidInputError("target must be a Grid or a grid image")
    return grid


def propagate_labels(labels, transform, target_grid, template_grid=None):
    """Template labels carried into a frame grid by nearest-neighbour lookup.

    ``transform`` is the frame -> template point map used to build
    ``I(phi^-1)``; voxels that map outside the template are background.
    """
    if not isinstance(labels, LabelMap):
        raise InvalidInputError("labels must be a LabelMap")
    if template_grid is not None and not labels.grid.same_as(_grid_of(template_grid)):
        raise InvalidInputError("labels are not on the template grid")
    return resample(labels, transform.map_points, _grid_of(target_grid))


def dice(a, b, label):
    """``2|A & B| / (|A| + |B|)`` for the voxels equal to ``label``; 1 when both are empty."""
    if not a.grid.same_as(b.grid):
        raise InvalidInputError("dice needs label maps on the same grid")
    A = a.voxels == label
    B = b.voxels == label
    na, nb = int(A.sum()), int(B.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(A & B)) / (na + nb)


def jacobian_stats(b, roi):
    """``(mean, std, folds)`` of the log-det Jacobian over the ROI voxel centers.

    Folded voxels (det <= 0) are counted and left out of mean and std.
    """
    if not isinstance(b, BSplineParams):
        raise InvalidInputError("jacobian_stats needs a B-Spline transform")
    box = roi.support_box()
    if box is None:
        raise InvalidInputError("ROI mask is empty")
    lo, hi = box
    ld = grid_logdet(b, roi.grid, lo, hi)
    inside = roi.voxels[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    vals = ld[inside]
    ok = np.isfinite(vals)
    folds = int(vals.size - ok.sum())
    vals = vals[ok]
    if vals.size == 0:
        return float("nan"), float("nan"), folds
    return float(vals.mean()), float(vals.std()), folds


@dataclass(frozen=True)
class EvalRow:
    frame: int
    label: int
    dice: float
    logdet_mean: float = float("nan")
    logdet_std: float = float("nan")
    folds: int = 0

    def __eq__(self, other):
        if not isinstance(other, EvalRow):
            return NotImplemented
        return (self.frame, self.label, self.folds) == (other.frame, other.label, other.folds) and all(
            _same_float(getattr(self, k), getattr(other, k)) for k in ("dice", "logdet_mean", "logdet_std"))


def _same_float(x, y):
    return (math.isnan(x) and math.isnan(y)) or x == y


@dataclass
class EvalReport:
    mode: str = "none"
    rows: list = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidInputError(f"mode must be one of {MODES}")
        for r in self.rows:
            if not 0.0 <= r.dice <= 1.0:
                raise InvalidInputError(f"dice {r.dice} outside [0, 1]")
        self.rows = sorted(self.rows, key=lambda r: (r.frame, r.label))

    def add(self, row):
        self.rows.append(row)
        self.__post_init__()

    def frames(self):
        return sorted({r.frame for r in self.rows})

    def labels(self):
        return sorted({r.label for r in self.rows})

    def mean_dice(self, label=None):
        d = [r.dice for r in self.rows if label is None or r.label == label]
        return float(np.mean(d)) if d else float("nan")

    def summary(self):
        """Aggregates recomputed from the rows."""
        out = {"mode": self.mode, "n_rows": len(self.rows), "dice": {}}
        for lab in self.labels():
            d = np.array([r.dice for r in self.rows if r.label == lab])
            out["dice"][lab] = {"mean": float(d.mean()), "std": float(d.std())}
        means = np.array([r.logdet_mean for r in self.rows if not math.isnan(r.logdet_mean)])
        if means.size:
            out["logdet_mean"] = {"mean": float(means.mean()), "std": float(means.std()),
                                  "min": float(means.min()), "max": float(means.max())}
        out["folds"] = int(sum(r.folds for r in self.rows))
        return out

    def __eq__(self, other):
        if not isinstance(other, EvalReport):
            return NotImplemented
        return self.mode == other.mode and self.rows == other.rows


def evaluate_series(labels, transforms, reference, roi=None, mode="none", label_ids=None):
    """Dice of propagated template labels against per-frame reference label maps.

    ``reference`` maps frame index -> LabelMap (frames without a reference are
    skipped).  B-Spline transforms also get log-det statistics over ``roi``.
    """
    ids = labels.labels() if label_ids is None else list(label_ids)
    rows = []
    for n, ref in sorted(reference.items()):
        if not 0 <= n < len(transforms):
            raise InvalidInputError(f"no transform for frame {n}")
        t = transforms[n]
        prop = propagate_labels(labels, t, ref.grid)
        stats = (float("nan"), float("nan"), 0)
        if isinstance(t, BSplineParams) and roi is not None:
            stats = jacobian_stats(t, roi)
        for lab in ids:
            rows.append(EvalRow(n, int(lab), dice(prop, ref, lab), *stats))
    return EvalReport(mode, rows)


def _fmt(x):
    return "" if math.isnan(x) else repr(float(x))


def _num(s):
    return float("nan") if s == "" else float(s)


def write_report(report, path):
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(HEADER)
            for r in report.rows:
                w.writerow([r.frame, r.label, _fmt(r.dice), _fmt(r.logdet_mean), _fmt(r.logdet_std),
                            r.folds, report.mode])
    except OSError as exc:
        raise OSError(f"{path}: {exc}") from exc


def read_report(path):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise OSError(f"{path}: {exc}") from exc
    if not rows or rows[0] != HEADER:
        raise InvalidInputError(f"{path}: not an evaluation report")
    mode = "none"
    out = []
    for rec in rows[1:]:
        if len(rec) != len(HEADER):
            raise InvalidInputError(f"{path}: malformed row {rec}")
        mode = rec[6]
        out.append(EvalRow(int(rec[0]), int(rec[1]), float(rec[2]), _num(rec[3]), _num(rec[4]),
                           int(rec[5])))
    return EvalReport(mode, out)
