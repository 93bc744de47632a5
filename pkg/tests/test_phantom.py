import numpy as np
import pytest
from scipy import ndimage

from conftest import smooth_volume
from tempreg import phantom
from tempreg.errors import InvalidInputError
from tempreg.metric import lncc_dist
from tempreg.phantom import (BRAIN, PLACENTA, Ellipsoid, MotionSpec, PhantomSpec, gen_motion,
                             make_phantom, make_template, static_layer, synthesize_series)
from tempreg.transforms import BSplineParams, RigidParams


def one_ellipsoid(**kw):
    return PhantomSpec(dims=(24, 22, 20), objects=(Ellipsoid((12, 11, 10), (6, 5, 4), 0.8, 1),), **kw)


def test_single_ellipsoid_labels_exactly():
    img, lab, rois = make_template(one_ellipsoid())
    x, y, z = np.meshgrid(*[np.arange(n) for n in (24, 22, 20)], indexing="ij")
    inside = ((x - 12) / 6) ** 2 + ((y - 11) / 5) ** 2 + ((z - 10) / 4) ** 2 <= 1
    assert np.array_equal(lab.voxels == 1, inside) and lab.labels() == [1]
    roi = rois[1].voxels
    assert roi[inside].all() and roi.sum() > inside.sum()
    assert not roi[ndimage.distance_transform_edt(~inside) > 2].any()


def test_out_of_bounds_object_rejected():
    spec = PhantomSpec(dims=(16, 16, 16), objects=(Ellipsoid((8, 8, 8), (9, 3, 3), 1.0, 1),))
    with pytest.raises(InvalidInputError):
        make_template(spec)


def test_template_is_deterministic():
    a = make_template(PhantomSpec())
    b = make_template(PhantomSpec())
    assert np.array_equal(a[0].voxels, b[0].voxels) and np.array_equal(a[1].voxels, b[1].voxels)
    c = make_template(PhantomSpec(seed=1))
    assert not np.array_equal(a[0].voxels, c[0].voxels)


def test_texture_autocorrelation_at_its_length():
    tex = phantom.texture_field(PhantomSpec(correlation_length=4.0))
    r = np.mean([np.mean(tex * np.roll(tex, 4, axis=a)) for a in range(3)])
    assert 0.2 <= r <= 0.8


def test_zero_std_motion_is_identity():
    spec = MotionSpec(n_frames=9, rot_std_deg=0.0, trans_std_mm=0.0)
    for t in gen_motion(spec, center=(1.0, 2.0, 3.0)):
        assert t == RigidParams.identity((1.0, 2.0, 3.0))


def test_template_frame_is_identity_and_walk_reproducible():
    spec = MotionSpec(n_frames=11, seed=5)
    a, b = gen_motion(spec), gen_motion(spec)
    assert a[5] == RigidParams() and all(x == y for x, y in zip(a, b))
    assert not all(x == y for x, y in zip(a, gen_motion(MotionSpec(n_frames=11, seed=6))))


def increments(spec):
    th = np.array([t.as_vector() for t in gen_motion(spec)])
    return np.diff(th, axis=0)


def test_white_increment_std_over_seeds():
    stds = []
    for seed in range(50):
        d = increments(MotionSpec(n_frames=101, rho=0.0, seed=seed, template_index=0))
        stds.append(np.rad2deg(d[:, :3]).std())
    stds = np.array(stds)
    assert np.all(np.abs(stds - 2.0) < 0.2 * 2.0)


def test_increment_lag_one_autocorrelation_matches_rho():
    d = increments(MotionSpec(n_frames=201, rho=0.5, seed=11, template_index=0))
    r = np.mean([np.corrcoef(d[:-1, k], d[1:, k])[0, 1] for k in range(6)])
    assert abs(r - 0.5) < 0.15


def test_bspline_walk_respects_displacement_cap():
    img, _, _ = make_template(PhantomSpec())
    lattice = BSplineParams.for_image(img.grid)
    motions = gen_motion(MotionSpec(model="bspline", n_frames=21, rho=0.7, max_displacement=9.0),
                         lattice=lattice)
    pts = img.grid.points().reshape(-1, 3)[::7]
    peak = max(np.linalg.norm(t.map_points(pts) - pts, axis=1).max() for t in motions)
    assert 6.0 < peak <= 9.0 + 0.5
    with pytest.raises(InvalidInputError):
        gen_motion(MotionSpec(model="bspline"))


def test_identity_series_reproduces_template():
    img, _, _ = make_template(one_ellipsoid())
    truth = synthesize_series(img, [RigidParams()] * 3)
    for f in truth.series:
        np.testing.assert_allclose(f.voxels, img.voxels, atol=1e-6)


def test_translated_frame_matches_spline_shift():
    img = smooth_volume((24, 22, 20), seed=4, sigma=3.0, spacing=(3.0, 3.0, 3.0))
    t = RigidParams(trans=(1.5, -2.0, 0.75))
    frame = synthesize_series(img, [t]).series[0].voxels
    ref = ndimage.shift(img.voxels.astype(np.float64), -np.asarray(t.trans) / 3.0, order=3, mode="nearest")
    inner = (slice(3, -3),) * 3
    rng_ = float(img.voxels.max() - img.voxels.min())
    assert np.abs(frame[inner] - ref[inner]).max() < 0.02 * rng_


def test_noise_level():
    img, _, _ = make_template(one_ellipsoid())
    clean = synthesize_series(img, [RigidParams()]).series[0].voxels.astype(np.float64)
    noisy = synthesize_series(img, [RigidParams()], noise_std=0.05, seed=3).series[0].voxels
    nominal = 0.05 * float(img.voxels.max() - img.voxels.min())
    assert abs((noisy - clean).std() / nominal - 1.0) < 0.1


def test_bias_and_length_consistency():
    img, _, _ = make_template(one_ellipsoid())
    truth = synthesize_series(img, [RigidParams()] * 2, bias=0.1, seed=1)
    ratio = truth.series[0].voxels / img.voxels
    assert 0.9 - 1e-6 <= ratio.min() and ratio.max() <= 1.1 + 1e-6
    assert len(truth.series) == len(truth.transforms) == 2
    with pytest.raises(InvalidInputError):
        synthesize_series(img, [RigidParams()], background=img)


def test_truth_is_a_near_perfect_registration():
    img, _, rois, truth = make_phantom(PhantomSpec(), MotionSpec(n_frames=5, seed=2), noise_std=0.0,
                                       bias=0.0)
    roi = rois[BRAIN]
    for frame, t in zip(truth.series, truth.transforms):
        assert lncc_dist(frame, img, t, roi) < -0.9


def test_static_background_layer():
    spec = PhantomSpec()
    bg, static_lab, w = static_layer(spec, BRAIN)
    assert w.min() >= 0.0 and w.max() <= 1.0
    _, lab, _ = make_template(spec)
    assert np.all(w[lab.voxels == BRAIN] > 0.999)
    assert BRAIN not in static_lab.labels() and PLACENTA in static_lab.labels()
    img, _, _, truth = make_phantom(spec, MotionSpec(n_frames=3, rot_std_deg=5.0, trans_std_mm=3.0),
                                    noise_std=0.0, bias=0.0, static_background=True)
    far = ndimage.distance_transform_edt(lab.voxels != BRAIN) > spec.moving_margin + 8
    for n, f in enumerate(truth.series):
        np.testing.assert_allclose(f.voxels[far], bg.voxels[far], atol=1e-6)
        ref = truth.frame_labels(n)
        assert np.array_equal(ref.voxels[far], static_lab.voxels[far])
        assert abs((ref.voxels == BRAIN).sum() - (lab.voxels == BRAIN).sum()) < 0.05 * (lab.voxels == BRAIN).sum()


def test_spec_dict_round_trip():
    spec = PhantomSpec(seed=4, correlation_length=2.0)
    assert PhantomSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(InvalidInputError):
        PhantomSpec.from_dict({"objects": [{"kind": "Torus"}]})
    with pytest.raises(InvalidInputError):
        MotionSpec(rho=1.0)
