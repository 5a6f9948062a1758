"""Simulated chest projections: average-intensity projection, pad/normalize, RIMG I/O.

A frontal image is the per-pixel mean along the posterior-anterior (y) axis, a
lateral image the mean along the left-right (x) axis.  Rows run top-down with the
top row at the superior end of the volume.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .volgrid import Volume3D, resample_isotropic

VIEWS = ("frontal", "lateral")
CANVAS_SIZE = 512


class ImageFormatError(ValueError):
    """Malformed RIMG stream; carries the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Image2D:
    """2D float image.  data shape is (h, w), row 0 on top; spacing in mm/pixel (sx, sy)."""

    data: np.ndarray
    spacing: tuple[float, float]
    view: str

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ValueError(f"image data must be 2D, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("image contains non-finite values")
        if self.view not in VIEWS:
            raise ValueError(f"view must be one of {VIEWS}, got {self.view!r}")
        for s in self.spacing:
            if not np.isfinite(s) or s <= 0:
                raise ValueError(f"pixel spacing must be positive, got {self.spacing!r}")

    @property
    def dims(self) -> tuple[int, int]:
        h, w = self.data.shape
        return (w, h)


def project_aip(vol: Volume3D, view: str) -> Image2D:
    """Mean-intensity projection of a volume along the view's ray axis."""
    sx, sy, sz = vol.spacing
    d = vol.data.astype(np.float64, copy=False)
    if view == "frontal":
        proj = d.mean(axis=1)  # (nx, nz)
        spacing = (sx, sz)
    elif view == "lateral":
        proj = d.mean(axis=0)  # (ny, nz)
        spacing = (sy, sz)
    else:
        raise ValueError(f"view must be one of {VIEWS}, got {view!r}")
    # columns = in-plane axis, rows = z flipped so the top row is superior
    img = proj.T[::-1, :]
    return Image2D(data=np.ascontiguousarray(img, dtype=np.float32), spacing=spacing, view=view)


def _center_crop(data: np.ndarray, size: int) -> np.ndarray:
    h, w = data.shape
    if h > size:
        top = (h - size) // 2
        data = data[top:top + size, :]
    if w > size:
        left = (w - size) // 2
        data = data[:, left:left + size]
    return data


def preprocess(img: Image2D, size: int = CANVAS_SIZE) -> Image2D:
    """Min-max normalize to [-1, 1], then center on a size x size zero canvas.

    Normalization runs on the (cropped) content only, so padding zeros sit at
    mid-range and never stretch the dynamic range.  A constant image maps to
    all zeros.  Inputs larger than the canvas are center-cropped first.
    """
    data = _center_crop(img.data.astype(np.float64, copy=False), size)
    lo = data.min()
    hi = data.max()
    if hi > lo:
        data = 2.0 * (data - lo) / (hi - lo) - 1.0
    else:
        data = np.zeros_like(data)
    canvas = np.zeros((size, size), dtype=np.float32)
    h, w = data.shape
    top = (size - h) // 2
    left = (size - w) // 2
    canvas[top:top + h, left:left + w] = data.astype(np.float32)
    return Image2D(data=canvas, spacing=img.spacing, view=img.view)


def simulate_pair(
    vol: Volume3D,
    target_spacing_mm: float = 1.0,
    size: int = CANVAS_SIZE,
) -> tuple[Image2D, Image2D]:
    """Resample isotropically, project both views, and preprocess each."""
    iso = resample_isotropic(vol, target_spacing_mm)
    frontal = preprocess(project_aip(iso, "frontal"), size=size)
    lateral = preprocess(project_aip(iso, "lateral"), size=size)
    return frontal, lateral


# ---------------------------------------------------------------------------
# RIMG format: ASCII header (RIMG1 / dims / spacing / view / data) then raw
# little-endian float32, row-major, top row first.
# ---------------------------------------------------------------------------

def _format_float(x: float) -> str:
    return repr(float(x))


def write_rimg(path, img: Image2D) -> None:
    w, h = img.dims
    sx, sy = img.spacing
    header = (
        f"RIMG1\n"
        f"dims {w} {h}\n"
        f"spacing {_format_float(sx)} {_format_float(sy)}\n"
        f"view {img.view}\n"
        f"data\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(np.ascontiguousarray(img.data, dtype="<f4").tobytes(order="C"))


def _read_header_line(f, offset: int) -> tuple[str, int]:
    buf = bytearray()
    while True:
        b = f.read(1)
        if not b:
            raise ImageFormatError("unexpected end of header", offset + len(buf))
        if b == b"\n":
            break
        buf += b
        if len(buf) > 256:
            raise ImageFormatError("header line too long", offset)
    return buf.decode("ascii", errors="replace"), offset + len(buf) + 1


def read_rimg(path) -> Image2D:
    with open(path, "rb") as f:
        return _parse_rimg(f)


def read_rimg_bytes(blob: bytes) -> Image2D:
    return _parse_rimg(io.BytesIO(blob))


def _parse_rimg(f) -> Image2D:
    offset = 0
    line, offset = _read_header_line(f, offset)
    if line != "RIMG1":
        raise ImageFormatError(f"bad magic {line!r}", 0)

    line_start = offset
    line, offset = _read_header_line(f, offset)
    parts = line.split()
    if len(parts) != 3 or parts[0] != "dims":
        raise ImageFormatError(f"expected 'dims <w> <h>', got {line!r}", line_start)
    try:
        w, h = int(parts[1]), int(parts[2])
    except ValueError:
        raise ImageFormatError(f"non-integer dims in {line!r}", line_start) from None
    if w <= 0 or h <= 0:
        raise ImageFormatError(f"non-positive dims in {line!r}", line_start)

    line_start = offset
    line, offset = _read_header_line(f, offset)
    parts = line.split()
    if len(parts) != 3 or parts[0] != "spacing":
        raise ImageFormatError(f"expected 'spacing <sx> <sy>', got {line!r}", line_start)
    try:
        spacing = (float(parts[1]), float(parts[2]))
    except ValueError:
        raise ImageFormatError(f"non-numeric spacing in {line!r}", line_start) from None

    line_start = offset
    line, offset = _read_header_line(f, offset)
    parts = line.split()
    if len(parts) != 2 or parts[0] != "view" or parts[1] not in VIEWS:
        raise ImageFormatError(f"expected 'view frontal|lateral', got {line!r}", line_start)
    view = parts[1]

    line_start = offset
    line, offset = _read_header_line(f, offset)
    if line != "data":
        raise ImageFormatError(f"expected 'data', got {line!r}", line_start)

    count = w * h
    raw = f.read(count * 4)
    if len(raw) != count * 4:
        raise ImageFormatError(
            f"truncated pixel data: expected {count * 4} bytes, got {len(raw)}",
            offset + len(raw),
        )
    data = np.frombuffer(raw, dtype="<f4").reshape(h, w)
    try:
        return Image2D(data=np.ascontiguousarray(data), spacing=spacing, view=view)
    except ValueError as e:
        raise ImageFormatError(str(e), offset) from None


def write_pgm_preview(path, img: Image2D) -> None:
    """8-bit PGM preview mapping [-1, 1] linearly to [0, 255]."""
    scaled = np.clip((img.data + 1.0) * 127.5, 0.0, 255.0)
    pixels = scaled.astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes(order="C"))
