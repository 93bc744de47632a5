"""Acceptance criteria 1-8.  Each test prints one ``criterion N: PASS|FAIL`` line."""
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

import acceptance_runs as runs
from conftest import fd_metric_grad
from tempreg.image import ImageVolume
from tempreg.metric import evaluate, lncc_dist, lncc_grad
from tempreg.phantom import BRAIN, PLACENTA, PhantomSpec, make_template
from tempreg.transforms import (BSplineParams, RigidParams, bspline_displacement,
                                bspline_jacobian_logdet, cubic_weights, rigid_apply, rigid_compose,
                                rigid_invert)

VOXEL = 3.0


@pytest.fixture
def verdict(capsys):
    def report(k, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {k}: {'PASS' if ok else 'FAIL'} - {detail}")
        assert ok, f"criterion {k}: {detail}"
    return report


@pytest.fixture(scope="module")
def grads():
    t0 = time.perf_counter()
    fixed, moving, cases = runs.gradient_cases()
    return fixed, moving, cases, time.perf_counter() - t0


@pytest.fixture(scope="module")
def c4():
    return runs.scenario_rigid_walk()


@pytest.fixture(scope="module")
def c5():
    return runs.scenario_drift()


@pytest.fixture(scope="module")
def c7():
    return runs.scenario_bspline()


def _support_components(b, fixed, samples, radius=2):
    """Flat indices of coefficients whose cubic support meets the window box."""
    nz = np.argwhere(samples)
    lo = np.maximum(nz.min(axis=0) - radius, 0)
    hi = np.minimum(nz.max(axis=0) + radius, np.asarray(fixed.dims) - 1)
    ranges = []
    for a in range(3):
        ends = fixed.grid.to_physical(np.stack([lo, hi]).astype(float))[:, a]
        t = (ends - b.grid_origin[a]) / b.grid_spacing[a]
        ranges.append(np.arange(int(np.floor(t.min())) - 1, int(np.floor(t.max())) + 3))
    mask = np.zeros(b.coeffs.shape, dtype=bool)
    mask[np.ix_(*ranges)] = True
    return np.flatnonzero(mask)


def test_criterion_1_gradient_correctness(grads, verdict):
    fixed, moving, cases, setup = grads
    t0 = time.perf_counter()
    worst, checked, zero_checked = 0.0, 0, 0
    bad = []
    rigid_h = np.array([1e-5] * 3 + [1e-4] * 3)
    for n, (t, roi, S, g) in enumerate(cases):
        if isinstance(t, RigidParams):
            idx = np.arange(6)
            fd, _ = fd_metric_grad(fixed, moving, t, roi, S, idx, rigid_h)
        else:
            idx = _support_components(t, fixed, S)
            outside = np.setdiff1d(np.arange(g.size), idx)
            if np.any(g[outside] != 0.0):
                bad.append((n, "nonzero gradient outside the support"))
            # the cost does not depend on these coefficients at all
            probe = outside[:: max(1, outside.size // 5)][:5]
            fd0, _ = fd_metric_grad(fixed, moving, t, roi, S, probe, 1e-4)
            zero_checked += probe.size
            if np.any(fd0 != 0.0):
                bad.append((n, "finite difference nonzero outside the support"))
            fd, _ = fd_metric_grad(fixed, moving, t, roi, S, idx, 1e-4)
        err = np.abs(g[idx] - fd) - 1e-4 * np.abs(fd)
        if np.any(err > 1e-8):
            k = int(np.argmax(err))
            bad.append((n, int(idx[k]), float(g[idx[k]]), float(fd[k])))
        rel = np.abs(g[idx] - fd) / np.maximum(np.abs(fd), 1e-8 / 1e-4)
        worst = max(worst, float(rel.max()))
        checked += idx.size
    secs = setup + time.perf_counter() - t0
    ok = not bad and secs < 120
    verdict(1, ok, f"{checked} components checked by finite differences over 20 rigid + 20 B-Spline "
                   f"cases ({zero_checked} off-support probes), worst rel err {worst:.2e}, "
                   f"{secs:.0f}s; failures {bad[:3]}")


def test_criterion_2_metric_properties(verdict):
    img, _, rois = make_template(PhantomSpec())
    img = img.rescaled()
    roi = rois[BRAIN]
    ident = RigidParams.identity(roi.centroid())
    self_val = lncc_dist(img, img, ident, roi)
    mapped = ImageVolume.on_grid(3.0 * img.voxels.astype(np.float64) + 7.0, img.grid)
    aff_val = lncc_dist(mapped, img, ident, roi)
    flat = ImageVolume.on_grid(np.full(img.dims, 0.4), img.grid)
    r = evaluate(flat, flat, ident, roi, strict=False)
    g = lncc_grad(flat, flat, ident, roi)
    finite = np.isfinite(r.value) and np.all(np.isfinite(g)) and np.all(np.isfinite(r.grad))
    ok = abs(self_val + 1) < 1e-6 and abs(aff_val - self_val) < 1e-6 and finite
    verdict(2, ok, f"self {self_val:.9f}, affine-mapped {aff_val:.9f}, constant-image value "
                   f"{r.value} with finite zero gradient: {finite}")


def test_criterion_3_transform_algebra(verdict):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        a = RigidParams(rng.uniform(-np.pi, np.pi, 3), rng.uniform(-20, 20, 3), (10.0, -5.0, 3.0))
        b = RigidParams(rng.uniform(-np.pi, np.pi, 3), rng.uniform(-20, 20, 3), (10.0, -5.0, 3.0))
        p = rng.uniform(-100, 100, 3)
        worst = max(worst, np.abs(rigid_apply(rigid_compose(a, b), p) - rigid_apply(a, rigid_apply(b, p))).max(),
                    np.abs(rigid_apply(rigid_invert(a), rigid_apply(a, p)) - p).max())
    w = cubic_weights(rng.uniform(0, 1, 10_000))
    pou = float(np.abs(w.sum(axis=1) - 1).max())

    grid = make_template(PhantomSpec())[0].grid
    b = BSplineParams.for_image(grid)
    b = b.with_vector(rng.normal(0, 2.0, b.coeffs.size))
    pts = grid.to_physical(rng.uniform(0, 63, (200, 3)))
    h = 1e-3
    ld_err = 0.0
    for p in pts:
        J = np.empty((3, 3))
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            J[:, k] = ((p + e + bspline_displacement(b, p + e)) - (p - e + bspline_displacement(b, p - e))) / (2 * h)
        ref = np.log(np.linalg.det(J))
        ld_err = max(ld_err, abs(bspline_jacobian_logdet(b, p) - ref) / max(abs(ref), 1e-12))

    a = 0.2
    nodes = b.grid_origin[0] + np.arange(b.grid_dims[0]) * b.grid_spacing[0]
    c = np.zeros(b.coeffs.shape)
    c[..., 0] = a * nodes[:, None, None]
    ramp = BSplineParams(b.grid_dims, b.grid_spacing, b.grid_origin, c)
    ramp_err = float(np.abs(bspline_jacobian_logdet(ramp, pts) - np.log1p(a)).max())
    ok = worst < 1e-9 and pou < 1e-12 and ld_err < 1e-4 and ramp_err < 1e-10
    verdict(3, ok, f"compose/invert max err {worst:.1e} mm, partition of unity {pou:.1e}, "
                   f"log-det vs FD rel {ld_err:.1e}, ramp |logdet - log(1.2)| {ramp_err:.1e}")


def test_criterion_4_temporal_rigid_recovery(c4, verdict):
    al, truth = c4["al"], c4["truth"]
    rot, trans = runs.rigid_errors(al, truth)
    good = (rot < 0.5) & (trans < 0.5 * VOXEL)
    d = runs.label_dice(c4["labels"], al, truth, BRAIN)
    ok = al.template_index == 30 and good.mean() >= 0.95 and d.mean() >= 0.90 and c4["seconds"] < 600
    verdict(4, ok, f"{good.sum()}/{good.size} frames within 0.5 deg / 0.5 voxel "
                   f"(worst {rot.max():.2f} deg, {trans.max() / VOXEL:.2f} voxel), mean brain Dice "
                   f"{d.mean():.4f}, {c4['seconds']:.0f}s")


def test_criterion_5_temporal_beats_pairwise_under_drift(c5, verdict):
    truth = c5["truth"]
    total = np.rad2deg(np.abs(truth.transforms[0].rot).max()), np.rad2deg(np.abs(truth.transforms[-1].rot).max())
    dt = runs.label_dice(c5["labels"], c5["temporal"], truth, BRAIN).mean()
    dp = runs.label_dice(c5["labels"], c5["pairwise"], truth, BRAIN).mean()
    worst_p = max(m for m in c5["pairwise"].final_metrics if m is not None)
    worst_t = max(m for m in c5["temporal"].final_metrics if m is not None)
    ok = min(total) > 20 and dt - dp >= 0.10 and worst_p > -0.5 and worst_t <= -0.5
    verdict(5, ok, f"terminal rotation {total[0]:.1f}/{total[1]:.1f} deg, mean Dice temporal {dt:.4f} "
                   f"vs pairwise {dp:.4f} (gap {dt - dp:+.4f}, need >= 0.10), worst final Dist "
                   f"pairwise {worst_p:.3f} (need > -0.5), temporal {worst_t:.3f}")


def test_criterion_6_baseline_identity(c5, verdict):
    pw, base = c5["pairwise"], c5["baseline"]
    same = all(np.array_equal(a.as_vector(), b.as_vector()) for a, b in zip(pw.transforms, base.transforms))
    same = same and pw.final_metrics == base.final_metrics
    verdict(6, same, f"temporal with lambda1=0 and identity init vs pairwise over {len(pw)} frames: "
                     f"{'bit-identical' if same else 'different'}")


def test_criterion_7_bspline_temporal_recovery(c7, verdict):
    al, truth = c7["al"], c7["truth"]
    d = runs.label_dice(c7["labels"], al, truth, PLACENTA)
    dev, folds = runs.logdet_deviation(al, truth, PLACENTA)
    ok = d.mean() >= 0.85 and np.abs(dev).max() <= 0.15 and folds == 0
    verdict(7, ok, f"mean placenta Dice {d.mean():.4f} (min {d.min():.3f}), max |log-det mean - truth| "
                   f"{np.abs(dev).max():.3f}, folds {folds}, {c7['seconds']:.0f}s")


def test_criterion_8_determinism(c4, c5, c7, grads, verdict):
    here = runs.digests(c4, c5, c7, grads[:3])
    env = dict(os.environ, NUMBA_NUM_THREADS="8")
    script = Path(__file__).with_name("acceptance_runs.py")
    r = subprocess.run([sys.executable, str(script), "8"], env=env, capture_output=True, text=True,
                       cwd=script.parent)
    assert r.returncode == 0, r.stderr[-2000:]
    there = json.loads(r.stdout.strip().splitlines()[-1])
    diff = sorted(k for k in here if here[k] != there.get(k))
    verdict(8, not diff, f"{len(here)} scenarios re-run in a fresh process with 8 threads; "
                         f"differing: {diff or 'none'}")
