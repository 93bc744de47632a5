"""Volume file I/O: single-file NIfTI-1 (``.nii``, ``.nii.gz``) and a raw fallback.

The raw format is a little-endian voxel file (``name.raw``, x fastest) next to
a JSON sidecar ``name.json`` holding ``dims``, ``spacing``, ``origin`` and
``dtype``.
"""
import gzip
import json
import os
import warnings

import numpy as np

from .errors import FormatError
from .image import Grid, ImageVolume, LabelMap, RoiMask

HEADER_DTYPE = np.dtype([
    ("sizeof_hdr", "i4"), ("data_type", "S10"), ("db_name", "S18"), ("extents", "i4"),
    ("session_error", "i2"), ("regular", "S1"), ("dim_info", "u1"), ("dim", "i2", (8,)),
    ("intent_p1", "f4"), ("intent_p2", "f4"), ("intent_p3", "f4"), ("intent_code", "i2"),
    ("datatype", "i2"), ("bitpix", "i2"), ("slice_start", "i2"), ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"), ("scl_slope", "f4"), ("scl_inter", "f4"), ("slice_end", "i2"),
    ("slice_code", "u1"), ("xyzt_units", "u1"), ("cal_max", "f4"), ("cal_min", "f4"),
    ("slice_duration", "f4"), ("toffset", "f4"), ("glmax", "i4"), ("glmin", "i4"),
    ("descrip", "S80"), ("aux_file", "S24"), ("qform_code", "i2"), ("sform_code", "i2"),
    ("quatern_b", "f4"), ("quatern_c", "f4"), ("quatern_d", "f4"),
    ("qoffset_x", "f4"), ("qoffset_y", "f4"), ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)), ("srow_y", "f4", (4,)), ("srow_z", "f4", (4,)),
    ("intent_name", "S16"), ("magic", "S4"),
])
assert HEADER_DTYPE.itemsize == 348

# NIfTI datatype code -> numpy dtype
DATATYPES = {2: "u1", 4: "i2", 8: "i4", 16: "f4", 64: "f8", 256: "i1", 512: "u2", 768: "u4"}
CODES = {np.dtype(v).str[1:]: k for k, v in DATATYPES.items()}
VOX_OFFSET = 352
RAW_DTYPES = ("uint8", "int16", "int32", "float32", "float64")


def _is_gz(path):
    return str(path).endswith(".gz")


def _is_raw(path):
    return str(path).endswith((".raw", ".json"))


def _raw_paths(path):
    stem = os.path.splitext(str(path))[0]
    return stem + ".json", stem + ".raw"


# ---------------------------------------------------------------------------
# NIfTI
# ---------------------------------------------------------------------------

def _read_bytes(path):
    try:
        if _is_gz(path):
            with gzip.open(path, "rb") as fh:
                return fh.read()
        with open(path, "rb") as fh:
            return fh.read()
    except (OSError, EOFError) as exc:
        raise FormatError(path, f"cannot read: {exc}") from exc


def _parse_header(path, buf):
    if len(buf) < 348:
        raise FormatError(path, f"file too short for a NIfTI-1 header ({len(buf)} bytes)")
    hdr = np.frombuffer(buf[:348], dtype=HEADER_DTYPE.newbyteorder("<"))[0]
    if hdr["sizeof_hdr"] != 348:
        hdr = np.frombuffer(buf[:348], dtype=HEADER_DTYPE.newbyteorder(">"))[0]
        if hdr["sizeof_hdr"] != 348:
            raise FormatError(path, "sizeof_hdr is not 348")
        order = ">"
    else:
        order = "<"
    if hdr["magic"] not in (b"n+1", b"ni1"):
        raise FormatError(path, f"bad magic {hdr['magic']!r}")
    if hdr["magic"] == b"ni1":
        raise FormatError(path, "two-file NIfTI (.hdr/.img) is not supported")
    return hdr, order


def _grid_from_header(path, hdr):
    dim = [int(d) for d in hdr["dim"]]
    if not 1 <= dim[0] <= 7:
        raise FormatError(path, f"invalid dim[0] = {dim[0]}")
    if dim[0] > 3 and any(d > 1 for d in dim[4:dim[0] + 1]):
        raise FormatError(path, f"only 3D volumes are supported, got dim {dim[1:dim[0] + 1]}")
    dims = tuple(dim[1 + a] if a < dim[0] else 1 for a in range(3))
    if min(dims) < 1:
        raise FormatError(path, f"invalid dims {dims}")
    spacing = tuple(abs(float(s)) if s != 0 else 1.0 for s in hdr["pixdim"][1:4])
    origin = (0.0, 0.0, 0.0)
    if hdr["sform_code"] > 0:
        rows = np.array([hdr["srow_x"], hdr["srow_y"], hdr["srow_z"]], dtype=np.float64)
        origin = tuple(rows[:, 3])
        if not np.allclose(rows[:, :3], np.diag(spacing), atol=1e-4 * max(spacing)):
            warnings.warn(f"{path}: sform rotation/flip ignored (axis-aligned grids only)")
    elif hdr["qform_code"] > 0:
        origin = (float(hdr["qoffset_x"]), float(hdr["qoffset_y"]), float(hdr["qoffset_z"]))
        q = np.array([hdr["quatern_b"], hdr["quatern_c"], hdr["quatern_d"]], dtype=np.float64)
        if np.any(np.abs(q) > 1e-6) or hdr["pixdim"][0] < 0:
            warnings.warn(f"{path}: qform rotation/flip ignored (axis-aligned grids only)")
    try:
        return Grid(dims, spacing, origin)
    except Exception as exc:
        raise FormatError(path, str(exc)) from exc


def read_nifti(path):
    """Return ``(voxels, grid)``; voxels keep the on-disk dtype unless scaled."""
    buf = _read_bytes(path)
    hdr, order = _parse_header(path, buf)
    grid = _grid_from_header(path, hdr)
    code = int(hdr["datatype"])
    if code not in DATATYPES:
        raise FormatError(path, f"unsupported datatype code {code}")
    dt = np.dtype(DATATYPES[code]).newbyteorder(order)
    offset = int(hdr["vox_offset"])
    if offset < 348:
        raise FormatError(path, f"invalid vox_offset {hdr['vox_offset']}")
    n = int(np.prod(grid.dims))
    if len(buf) < offset + n * dt.itemsize:
        raise FormatError(path, f"truncated voxel data: need {n * dt.itemsize} bytes after offset {offset}")
    data = np.frombuffer(buf, dtype=dt, count=n, offset=offset)
    vox = data.reshape(grid.dims, order="F").astype(dt.newbyteorder("="))
    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if np.isfinite(slope) and slope != 0 and (slope != 1 or inter != 0):
        vox = vox.astype(np.float64) * slope + inter
    return vox, grid


def _header_for(voxels, grid):
    hdr = np.zeros((), dtype=HEADER_DTYPE.newbyteorder("<"))
    hdr["sizeof_hdr"] = 348
    hdr["regular"] = b"r"
    hdr["dim"] = [3, *grid.dims, 1, 1, 1, 1]
    code = CODES[voxels.dtype.str[1:]]
    hdr["datatype"] = code
    hdr["bitpix"] = voxels.dtype.itemsize * 8
    hdr["pixdim"] = [1.0, *grid.spacing, 0.0, 0.0, 0.0, 0.0]
    hdr["vox_offset"] = VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["xyzt_units"] = 2          # mm
    hdr["qform_code"] = 1
    hdr["sform_code"] = 1
    hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"] = grid.origin
    sx, sy, sz = grid.spacing
    ox, oy, oz = grid.origin
    hdr["srow_x"] = [sx, 0, 0, ox]
    hdr["srow_y"] = [0, sy, 0, oy]
    hdr["srow_z"] = [0, 0, sz, oz]
    hdr["magic"] = b"n+1"
    return hdr


def write_nifti(path, voxels, grid):
    voxels = np.asarray(voxels)
    voxels = voxels.astype(voxels.dtype.newbyteorder("<"))
    if voxels.dtype.str[1:] not in CODES:
        raise FormatError(path, f"cannot write dtype {voxels.dtype}")
    payload = (_header_for(voxels, grid).tobytes() + b"\0" * (VOX_OFFSET - 348)
               + voxels.tobytes(order="F"))
    try:
        if _is_gz(path):
            # fixed mtime and no embedded name keep the output byte-stable
            with open(path, "wb") as raw, gzip.GzipFile(filename="", mode="wb", fileobj=raw,
                                                          mtime=0) as fh:
                fh.write(payload)
        else:
            with open(path, "wb") as fh:
                fh.write(payload)
    except OSError as exc:
        raise FormatError(path, f"cannot write: {exc}") from exc


# ---------------------------------------------------------------------------
# raw + sidecar
# ---------------------------------------------------------------------------

def read_raw(path):
    meta_path, raw_path = _raw_paths(path)
    try:
        with open(meta_path) as fh:
            meta = json.load(fh)
    except (OSError, ValueError) as exc:
        raise FormatError(meta_path, f"cannot read sidecar: {exc}") from exc
    try:
        grid = Grid(meta["dims"], meta["spacing"], meta.get("origin", (0.0, 0.0, 0.0)))
        dtype = meta["dtype"]
    except Exception as exc:
        raise FormatError(meta_path, f"bad sidecar: {exc}") from exc
    if dtype not in RAW_DTYPES:
        raise FormatError(meta_path, f"unsupported dtype {dtype!r}")
    dt = np.dtype(dtype).newbyteorder("<")
    try:
        with open(raw_path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise FormatError(raw_path, f"cannot read: {exc}") from exc
    n = int(np.prod(grid.dims))
    if len(buf) != n * dt.itemsize:
        raise FormatError(raw_path, f"expected {n * dt.itemsize} bytes, found {len(buf)}")
    vox = np.frombuffer(buf, dtype=dt).reshape(grid.dims, order="F")
    return vox.astype(dt.newbyteorder("=")), grid


def write_raw(path, voxels, grid):
    meta_path, raw_path = _raw_paths(path)
    voxels = np.asarray(voxels)
    if voxels.dtype.name not in RAW_DTYPES:
        raise FormatError(raw_path, f"cannot write dtype {voxels.dtype}")
    meta = {"dims": list(grid.dims), "spacing": list(grid.spacing), "origin": list(grid.origin),
            "dtype": voxels.dtype.name}
    try:
        with open(meta_path, "w") as fh:
            json.dump(meta, fh, indent=1)
        with open(raw_path, "wb") as fh:
            fh.write(voxels.astype(voxels.dtype.newbyteorder("<")).tobytes(order="F"))
    except OSError as exc:
        raise FormatError(raw_path, f"cannot write: {exc}") from exc


# ---------------------------------------------------------------------------
# typed front ends
# ---------------------------------------------------------------------------

def read_volume(path):
    """``(voxels, grid)`` from a NIfTI or raw file, chosen by extension."""
    return read_raw(path) if _is_raw(path) else read_nifti(path)


def _write(path, voxels, grid):
    if _is_raw(path):
        write_raw(path, voxels, grid)
    else:
        write_nifti(path, voxels, grid)


def load_image(path):
    vox, grid = read_volume(path)
    try:
        return ImageVolume.on_grid(vox, grid)
    except Exception as exc:
        raise FormatError(path, str(exc)) from exc


def load_labels(path):
    vox, grid = read_volume(path)
    try:
        return LabelMap.on_grid(vox, grid)
    except Exception as exc:
        raise FormatError(path, str(exc)) from exc


def load_mask(path):
    vox, grid = read_volume(path)
    return RoiMask.on_grid(vox != 0, grid)


def save_image(path, img):
    """Images are written as float32, labels and masks as uint8 (int16 above 255)."""
    if isinstance(img, RoiMask):
        vox = img.voxels.astype(np.uint8)
    elif isinstance(img, LabelMap):
        vox = img.voxels.astype(np.uint8 if img.voxels.max(initial=0) <= 255 else np.int16)
    else:
        vox = np.asarray(img.voxels, dtype=np.float32)
    _write(path, vox, img.grid)


__all__ = ["read_nifti", "write_nifti", "read_raw", "write_raw", "read_volume", "load_image",
           "load_labels", "load_mask", "save_image", "HEADER_DTYPE"]
