"""3D scalar volumes with physical spacing: volumetry, isotropic resampling, RVOL I/O.

Axis convention: index order (x, y, z) with x = left-right, y = posterior-anterior,
z = inferior-superior.  The physical position of voxel index i along an axis with
spacing s is (i + 0.5) * s (voxel-center alignment).
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

MM3_PER_LITER = 1.0e6


class VolumeFormatError(ValueError):
    """Malformed RVOL stream; carries the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Volume3D:
    """Dense 3D float volume.  data shape is (nx, ny, nz); spacing in mm/voxel."""

    data: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite values")
        _check_spacing(self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz


@dataclass(frozen=True)
class Mask3D:
    """Binary companion of Volume3D; data holds only {0, 1} as uint8."""

    data: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"mask data must be 3D, got shape {self.data.shape}")
        if self.data.dtype != np.uint8:
            raise ValueError(f"mask dtype must be uint8, got {self.data.dtype}")
        bad = (self.data != 0) & (self.data != 1)
        if bad.any():
            raise ValueError("mask contains values other than 0 and 1")
        _check_spacing(self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


def _check_spacing(spacing) -> None:
    if len(spacing) != 3:
        raise ValueError(f"spacing must have 3 components, got {spacing!r}")
    for s in spacing:
        if not np.isfinite(s) or s <= 0:
            raise ValueError(f"spacing components must be positive and finite, got {spacing!r}")


def volume_from_mask(mask: Mask3D) -> float:
    """Physical volume of the set voxels in liters (voxel count times voxel volume)."""
    sx, sy, sz = mask.spacing
    count = int(np.count_nonzero(mask.data))
    return count * sx * sy * sz / MM3_PER_LITER


def _output_dims(dims, spacing, target: float) -> tuple[int, int, int]:
    # round-half-up of physical extent / target spacing, at least 1 voxel
    out = []
    for n, s in zip(dims, spacing):
        out.append(max(1, int(np.floor(n * s / target + 0.5))))
    return tuple(out)


def _check_target(target_spacing_mm: float) -> None:
    if not np.isfinite(target_spacing_mm) or target_spacing_mm <= 0:
        raise ValueError(f"target spacing must be positive and finite, got {target_spacing_mm!r}")


def _source_coords(n_out: int, n_in: int, s_in: float, target: float) -> np.ndarray:
    """Continuous input index for each output voxel center, clamped to the grid."""
    centers = (np.arange(n_out, dtype=np.float64) + 0.5) * target
    u = centers / s_in - 0.5
    return np.clip(u, 0.0, n_in - 1.0)


def _lerp_axis(data: np.ndarray, axis: int, u: np.ndarray) -> np.ndarray:
    n_in = data.shape[axis]
    if n_in == 1:
        idx = np.zeros(len(u), dtype=np.intp)
        return np.take(data, idx, axis=axis)
    i0 = np.minimum(u.astype(np.intp), n_in - 2)
    frac = u - i0
    lo = np.take(data, i0, axis=axis)
    hi = np.take(data, i0 + 1, axis=axis)
    shape = [1, 1, 1]
    shape[axis] = len(u)
    w = frac.reshape(shape)
    return lo * (1.0 - w) + hi * w


def resample_isotropic(vol: Volume3D, target_spacing_mm: float) -> Volume3D:
    """Trilinear resampling onto an isotropic grid.

    Separable 1D linear passes along x, y, z; identical to full trilinear
    interpolation because the kernel is a tensor product.  Sample positions
    outside the input grid clamp to the nearest edge voxel.
    """
    _check_target(target_spacing_mm)
    t = float(target_spacing_mm)
    dims_out = _output_dims(vol.dims, vol.spacing, t)
    data = vol.data.astype(np.float64, copy=False)
    for axis in range(3):
        u = _source_coords(dims_out[axis], vol.dims[axis], vol.spacing[axis], t)
        data = _lerp_axis(data, axis, u)
    return Volume3D(data=data.astype(vol.data.dtype), spacing=(t, t, t))


def nearest_resample_mask(mask: Mask3D, target_spacing_mm: float) -> Mask3D:
    """Same output geometry as resample_isotropic but nearest-neighbor sampling."""
    _check_target(target_spacing_mm)
    t = float(target_spacing_mm)
    dims_out = _output_dims(mask.dims, mask.spacing, t)
    data = mask.data
    for axis in range(3):
        u = _source_coords(dims_out[axis], mask.dims[axis], mask.spacing[axis], t)
        idx = np.floor(u + 0.5).astype(np.intp)  # half-up, deterministic
        np.clip(idx, 0, mask.dims[axis] - 1, out=idx)
        data = np.take(data, idx, axis=axis)
    return Mask3D(data=np.ascontiguousarray(data), spacing=(t, t, t))


# ---------------------------------------------------------------------------
# RVOL format
#
# ASCII header lines (LF-terminated): RVOL1 / dims / spacing / dtype / data,
# then raw little-endian voxel data, x varying fastest, then y, then z.
# ---------------------------------------------------------------------------

_RVOL_MAGIC = b"RVOL1"
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def _format_float(x: float) -> str:
    return repr(float(x))


def write_rvol(path, obj: Volume3D | Mask3D) -> None:
    if isinstance(obj, Mask3D):
        dtype_tag, arr = "u8", obj.data
    else:
        dtype_tag, arr = "f32", obj.data.astype("<f4", copy=False)
    nx, ny, nz = obj.dims
    sx, sy, sz = obj.spacing
    header = (
        f"RVOL1\n"
        f"dims {nx} {ny} {nz}\n"
        f"spacing {_format_float(sx)} {_format_float(sy)} {_format_float(sz)}\n"
        f"dtype {dtype_tag}\n"
        f"data\n"
    )
    raw = np.asfortranarray(arr.astype(_DTYPES[dtype_tag], copy=False))
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(raw.tobytes(order="F"))


def _read_header_line(f, offset: int) -> tuple[str, int]:
    buf = bytearray()
    while True:
        b = f.read(1)
        if not b:
            raise VolumeFormatError("unexpected end of header", offset + len(buf))
        if b == b"\n":
            break
        buf += b
        if len(buf) > 256:
            raise VolumeFormatError("header line too long", offset)
    return buf.decode("ascii", errors="replace"), offset + len(buf) + 1


def read_rvol(path) -> Volume3D | Mask3D:
    with open(path, "rb") as f:
        return _parse_rvol(f)


def _parse_rvol(f) -> Volume3D | Mask3D:
    offset = 0
    line, offset = _read_header_line(f, offset)
    if line != "RVOL1":
        raise VolumeFormatError(f"bad magic {line!r}", 0)

    line_start = offset
    line, offset = _read_header_line(f, offset)
    parts = line.split()
    if len(parts) != 4 or parts[0] != "dims":
        raise VolumeFormatError(f"expected 'dims <nx> <ny> <nz>', got {line!r}", line_start)
    try:
        dims = tuple(int(p) for p in parts[1:])
    except ValueError:
        raise VolumeFormatError(f"non-integer dims in {line!r}", line_start) from None
    if any(d <= 0 for d in dims):
        raise VolumeFormatError(f"non-positive dims in {line!r}", line_start)

    line_start = offset
    line, offset = _read_header_line(f, offset)
    parts = line.split()
    if len(parts) != 4 or parts[0] != "spacing":
        raise VolumeFormatError(f"expected 'spacing <sx> <sy> <sz>', got {line!r}", line_start)
    try:
        spacing = tuple(float(p) for p in parts[1:])
    except ValueError:
        raise VolumeFormatError(f"non-numeric spacing in {line!r}", line_start) from None

    line_start = offset
    line, offset = _read_header_line(f, offset)
    parts = line.split()
    if len(parts) != 2 or parts[0] != "dtype" or parts[1] not in _DTYPES:
        raise VolumeFormatError(f"expected 'dtype f32|u8', got {line!r}", line_start)
    dtype_tag = parts[1]

    line_start = offset
    line, offset = _read_header_line(f, offset)
    if line != "data":
        raise VolumeFormatError(f"expected 'data', got {line!r}", line_start)

    dtype = _DTYPES[dtype_tag]
    count = dims[0] * dims[1] * dims[2]
    raw = f.read(count * dtype.itemsize)
    if len(raw) != count * dtype.itemsize:
        raise VolumeFormatError(
            f"truncated voxel data: expected {count * dtype.itemsize} bytes, got {len(raw)}",
            offset + len(raw),
        )
    arr = np.frombuffer(raw, dtype=dtype).reshape(dims, order="F")
    try:
        if dtype_tag == "u8":
            return Mask3D(data=np.ascontiguousarray(arr), spacing=spacing)
        return Volume3D(data=np.ascontiguousarray(arr.astype(np.float32)), spacing=spacing)
    except ValueError as e:
        raise VolumeFormatError(str(e), offset) from None


def read_rvol_bytes(blob: bytes) -> Volume3D | Mask3D:
    return _parse_rvol(io.BytesIO(blob))
