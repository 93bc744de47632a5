import numpy as np
import pytest

from tempreg import phantom
from tempreg.errors import InvalidInputError
from tempreg.image import ImageVolume, resample
from tempreg.pipeline import (PipelineConfig, SeriesAlignment, align_series, register_pair,
                              sweep_order)
from tempreg.transforms import RigidParams, param_distance_sq

VOXEL = 3.0


@pytest.fixture(scope="module")
def walk():
    """Seven-frame rigid walk on the default phantom (brain ROI)."""
    img, labels, rois, truth = phantom.make_phantom(
        phantom.PhantomSpec(), phantom.MotionSpec(n_frames=7, seed=3), noise_std=0.02, bias=0.1)
    return img, rois[phantom.BRAIN], truth


@pytest.fixture(scope="module")
def brain(template_phantom):
    img, _, rois = template_phantom
    return img, rois[phantom.BRAIN]


def rot_err_deg(a, b):
    return np.rad2deg(np.abs(a.rot - b.rot).max())


def trans_err_vox(a, b):
    return np.abs(a.trans - b.trans).max() / VOXEL


def test_self_registration_is_identity(brain):
    img, roi = brain
    cfg = PipelineConfig()
    ident = RigidParams.identity(roi.centroid())
    t, rep = register_pair(img, img, roi, ident, ident, cfg)
    assert np.abs(t.rot).max() < 1e-3
    assert np.abs(t.trans).max() < 0.1 * VOXEL
    assert rep.final_metric == pytest.approx(-1.0, abs=1e-6)


def test_recovers_known_rigid_from_nearby_anchor(brain):
    img, roi = brain
    truth = RigidParams(np.deg2rad([4.0, -3.0, 5.0]), [2.5, -1.5, 2.0], roi.centroid())
    frame = resample(img, truth.map_points, img)
    near = RigidParams(truth.rot + np.deg2rad(1.0), truth.trans + 1.0, truth.center)
    t, _ = register_pair(img, frame, roi, near, near, PipelineConfig(lambda1_rot=0.0))
    assert rot_err_deg(t, truth) < 0.2
    assert trans_err_vox(t, truth) < 0.2


def test_huge_penalty_returns_the_anchor(brain):
    img, roi = brain
    anchor = RigidParams(np.deg2rad([3.0, 0.0, -2.0]), [1.0, 0.5, -1.0], roi.centroid())
    cfg = PipelineConfig(lambda1_rot=1e6, lambda1_trans=1e6)
    t, _ = register_pair(img, img, roi, anchor, anchor, cfg)
    np.testing.assert_allclose(t.as_vector(), anchor.as_vector(), atol=1e-3)


def test_model_mismatch_is_rejected(brain):
    img, roi = brain
    with pytest.raises(InvalidInputError):
        register_pair(img, img, roi, RigidParams(center=(0, 0, 0)), None, PipelineConfig())
    with pytest.raises(InvalidInputError):
        align_series([img], roi)


def test_repeated_template_gives_identity(brain):
    img, roi = brain
    al = align_series([img, img, img], roi, PipelineConfig())
    assert al.template_index == 1
    assert al.transforms[1] == RigidParams.identity(roi.centroid())
    for t in al.transforms:
        assert np.abs(t.rot).max() < 1e-3 and np.abs(t.trans).max() < 0.1 * VOXEL


def test_sweep_order():
    assert list(sweep_order(5, 2)) == [(1, 2), (0, 1), (3, 2), (4, 3)]
    assert list(sweep_order(3, 0)) == [(1, 0), (2, 1)]


def test_temporal_without_penalty_reproduces_pairwise(walk):
    _, roi, truth = walk
    pw = align_series(truth.series, roi, PipelineConfig(mode="pairwise"))
    tp = align_series(truth.series, roi, PipelineConfig(mode="temporal", lambda1_rot=0.0,
                                                        lambda1_trans=0.0, init="identity"))
    for a, b in zip(pw.transforms, tp.transforms):
        assert np.array_equal(a.as_vector(), b.as_vector())
    assert pw.final_metrics == tp.final_metrics


def test_temporal_run_is_deterministic_and_smooth(walk):
    _, roi, truth = walk
    cfg = PipelineConfig()
    a = align_series(truth.series, roi, cfg)
    b = align_series(truth.series, roi, cfg)
    assert a.to_dict() == b.to_dict()
    assert not a.failed
    for est, ref in zip(a.transforms, truth.transforms):
        assert rot_err_deg(est, ref) < 0.5 and trans_err_vox(est, ref) < 0.5
    t = a.template_index
    order = list(sweep_order(len(a), t))
    est_step = max(param_distance_sq(a.transforms[i], a.transforms[j], (1.0, 1.0)) for i, j in order)
    true_step = max(param_distance_sq(truth.transforms[i], truth.transforms[j], (1.0, 1.0))
                    for i, j in order)
    assert est_step <= 4 * true_step


def test_failed_frame_carries_estimate_forward(walk):
    _, roi, truth = walk
    series = list(truth.series[:5])
    series[0] = ImageVolume.on_grid(np.full(series[0].dims, 0.5), series[0].grid)
    al = align_series(series, roi, PipelineConfig())
    assert al.failed == [0]
    assert al.transforms[0] == al.transforms[1]
    assert al.final_metrics[0] is None and "frame 0" in al.reports[0].message


def test_alignment_json_round_trip(walk, tmp_path):
    img, roi, _ = walk
    al = align_series([img, img], roi, PipelineConfig(optimizer={"pyramid_levels": 1}))
    al.save(tmp_path / "a.json")
    back = SeriesAlignment.load(tmp_path / "a.json")
    assert back.to_dict() == al.to_dict()


def test_config_dict_round_trip():
    cfg = PipelineConfig(mode="pairwise", model="bspline", lambda2=0.1, grid_spacing_voxels=(8, 8, 8),
                         metric={"window_radius": 3})
    assert PipelineConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(InvalidInputError):
        PipelineConfig.from_dict({"bogus": 1})
    with pytest.raises(InvalidInputError):
        PipelineConfig(lambda1=-1.0)
    with pytest.raises(InvalidInputError):
        PipelineConfig(mode="smoothing")
