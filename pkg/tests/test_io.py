import gzip
import struct

import numpy as np
import pytest

from tempreg.errors import FormatError
from tempreg.image import Grid, ImageVolume, LabelMap, RoiMask
from tempreg.io import (load_image, load_labels, load_mask, read_nifti, read_raw, read_volume,
                        save_image, write_nifti)

GRID = Grid((5, 4, 3), (1.5, 2.0, 3.0), (-10.0, 4.0, 7.5))


def hand_nifti(data, spacing, origin, code, bitpix, endian="<", slope=0.0, inter=0.0):
    """NIfTI-1 single file packed field by field (independent of the reader's dtype table)."""
    h = bytearray(352)
    struct.pack_into(endian + "i", h, 0, 348)
    struct.pack_into(endian + "8h", h, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into(endian + "hh", h, 70, code, bitpix)
    struct.pack_into(endian + "8f", h, 76, 1.0, *spacing, 0, 0, 0, 0)
    struct.pack_into(endian + "fff", h, 108, 352.0, slope, inter)
    struct.pack_into(endian + "hh", h, 252, 0, 1)           # qform 0, sform 1
    struct.pack_into(endian + "4f", h, 280, spacing[0], 0, 0, origin[0])
    struct.pack_into(endian + "4f", h, 296, 0, spacing[1], 0, origin[1])
    struct.pack_into(endian + "4f", h, 312, 0, 0, spacing[2], origin[2])
    h[344:348] = b"n+1\0"
    return bytes(h) + data.astype(data.dtype.newbyteorder(endian)).tobytes(order="F")


@pytest.mark.parametrize("dtype,code,bits", [("uint8", 2, 8), ("int16", 4, 16), ("float32", 16, 32)])
@pytest.mark.parametrize("endian", ["<", ">"])
def test_reads_hand_packed_files(tmp_path, dtype, code, bits, endian):
    rng = np.random.default_rng(0)
    data = (rng.random(GRID.dims) * 100).astype(dtype)
    path = tmp_path / "h.nii"
    path.write_bytes(hand_nifti(data, GRID.spacing, GRID.origin, code, bits, endian))
    vox, grid = read_nifti(path)
    assert vox.dtype == np.dtype(dtype) and np.array_equal(vox, data)
    assert grid.same_as(GRID)


def test_scaling_is_applied(tmp_path):
    data = np.arange(60, dtype=np.int16).reshape(GRID.dims)
    path = tmp_path / "s.nii"
    path.write_bytes(hand_nifti(data, GRID.spacing, GRID.origin, 4, 16, slope=0.5, inter=-1.0))
    vox, _ = read_nifti(path)
    np.testing.assert_allclose(vox, data * 0.5 - 1.0)


@pytest.mark.parametrize("name", ["v.nii", "v.nii.gz", "v.raw"])
def test_round_trip(tmp_path, name):
    rng = np.random.default_rng(1)
    img = ImageVolume.on_grid(rng.standard_normal(GRID.dims), GRID)
    save_image(tmp_path / name, img)
    back = load_image(tmp_path / name)
    assert back.grid.same_as(GRID) and np.array_equal(back.voxels, img.voxels)
    lab = LabelMap.on_grid(rng.integers(0, 4, GRID.dims), GRID)
    save_image(tmp_path / ("l" + name), lab)
    assert np.array_equal(load_labels(tmp_path / ("l" + name)).voxels, lab.voxels)
    roi = RoiMask.on_grid(rng.random(GRID.dims) > 0.5, GRID)
    save_image(tmp_path / ("m" + name), roi)
    assert np.array_equal(load_mask(tmp_path / ("m" + name)).voxels, roi.voxels)


def test_saved_label_dtypes(tmp_path):
    small = LabelMap.on_grid(np.full(GRID.dims, 7), GRID)
    big = LabelMap.on_grid(np.full(GRID.dims, 300), GRID)
    save_image(tmp_path / "a.nii", small)
    save_image(tmp_path / "b.nii", big)
    assert read_volume(tmp_path / "a.nii")[0].dtype == np.uint8
    assert read_volume(tmp_path / "b.nii")[0].dtype == np.int16
    save_image(tmp_path / "c.nii", ImageVolume.on_grid(np.zeros(GRID.dims), GRID))
    assert read_volume(tmp_path / "c.nii")[0].dtype == np.float32


def test_gzip_output_is_byte_stable(tmp_path):
    img = ImageVolume.on_grid(np.arange(60.0).reshape(GRID.dims), GRID)
    save_image(tmp_path / "a.nii.gz", img)
    save_image(tmp_path / "b.nii.gz", img)
    assert (tmp_path / "a.nii.gz").read_bytes() == (tmp_path / "b.nii.gz").read_bytes()
    with gzip.open(tmp_path / "a.nii.gz") as fh:
        assert fh.read()[344:347] == b"n+1"


@pytest.mark.parametrize("mangle", [
    lambda b: b[:100],
    lambda b: b"\0\0\0\0" + b[4:],
    lambda b: b[:344] + b"xyz\0" + b[348:],
    lambda b: b[:-10],
    lambda b: b[:70] + struct.pack("<h", 999) + b[72:],
])
def test_corrupt_files_name_the_path(tmp_path, mangle):
    good = tmp_path / "good.nii"
    write_nifti(good, np.zeros(GRID.dims, np.float32), GRID)
    bad = tmp_path / "corrupt_volume.nii"
    bad.write_bytes(mangle(good.read_bytes()))
    with pytest.raises(FormatError, match="corrupt_volume.nii"):
        load_image(bad)


def test_raw_sidecar_errors(tmp_path):
    with pytest.raises(FormatError, match="nothing.raw|nothing.json"):
        read_raw(tmp_path / "nothing.raw")
    (tmp_path / "x.json").write_text('{"dims": [2, 2, 2], "dtype": "float32"}')
    (tmp_path / "x.raw").write_bytes(b"\0" * 8)
    with pytest.raises(FormatError, match="x"):
        read_raw(tmp_path / "x.raw")


def test_four_d_is_rejected(tmp_path):
    data = np.zeros((2, 2, 2, 3), np.float32)
    h = bytearray(hand_nifti(np.zeros((2, 2, 2), np.float32), (1, 1, 1), (0, 0, 0), 16, 32))
    struct.pack_into("<8h", h, 40, 4, 2, 2, 2, 3, 1, 1, 1)
    path = tmp_path / "four.nii"
    path.write_bytes(bytes(h[:352]) + data.tobytes())
    with pytest.raises(FormatError, match="3D"):
        read_nifti(path)


def test_agrees_with_nibabel(tmp_path):
    nib = pytest.importorskip("nibabel")
    rng = np.random.default_rng(2)
    data = rng.standard_normal(GRID.dims).astype(np.float32)
    write_nifti(tmp_path / "ours.nii.gz", data, GRID)
    ref = nib.load(str(tmp_path / "ours.nii.gz"))
    np.testing.assert_array_equal(np.asarray(ref.dataobj), data)
    np.testing.assert_allclose(ref.affine[:3, 3], GRID.origin)
    np.testing.assert_allclose(ref.header.get_zooms(), GRID.spacing)
    aff = np.diag([*GRID.spacing, 1.0])
    aff[:3, 3] = GRID.origin
    nib.save(nib.Nifti1Image(data.astype(np.int16), aff), str(tmp_path / "theirs.nii"))
    vox, grid = read_nifti(tmp_path / "theirs.nii")
    assert np.array_equal(vox, data.astype(np.int16)) and grid.same_as(GRID)
