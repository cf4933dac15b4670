"""Readers and writers for PFM float maps, Middlebury .flo flow, 8-bit mask
PNGs and ``key = value`` calibration files.

Every failure raises :class:`~disprefine.errors.FormatError` naming the
offending field and, for binary formats, the byte offset.
"""
from __future__ import annotations

import io
import math
import os
import re
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import FormatError
from .grid import FlowMap, ScalarMap
from .occlusion import OcclusionMask

FLO_MAGIC = 202021.25
FLO_UNKNOWN = 1e10
FLO_UNKNOWN_THRESH = 1e9


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read file: {exc.strerror}", path=path) from exc


# ---------------------------------------------------------------- PFM

_PFM_TOKEN = re.compile(rb"\s*(\S+)")


def _pfm_tokens(buf: bytes, path):
    """Yield (token, end_offset) for the three whitespace-separated header
    lines.  The payload starts one byte after the last token."""
    pos = 0
    for field in ("identifier", "width", "height", "scale"):
        m = _PFM_TOKEN.match(buf, pos)
        if m is None:
            raise FormatError("truncated header", path=path, field=field, offset=pos)
        yield field, m.group(1), m.end()
        pos = m.end()


def decode_pfm(buf: bytes, path=None) -> ScalarMap:
    header = {}
    end = 0
    for field, token, end in _pfm_tokens(buf, path):
        header[field] = token
        if field == "identifier":
            if token == b"PF":
                raise FormatError("unsupported channel count", path=path, field="identifier", offset=0)
            if token != b"Pf":
                raise FormatError(f"bad identifier {token[:8]!r}", path=path, field="identifier", offset=0)
    try:
        width = int(header["width"])
        height = int(header["height"])
    except ValueError:
        raise FormatError("malformed header", path=path, field="dimensions") from None
    if width <= 0 or height <= 0:
        raise FormatError(f"non-positive dimensions {width}x{height}", path=path, field="dimensions")
    try:
        scale = float(header["scale"])
    except ValueError:
        raise FormatError("malformed header", path=path, field="scale") from None
    if scale == 0 or not math.isfinite(scale):
        raise FormatError("zero or non-finite scale", path=path, field="scale")
    # exactly one whitespace byte separates the header from the payload
    start = end + 1
    if start > len(buf) or not buf[end:start].isspace():
        raise FormatError("missing payload separator", path=path, field="payload", offset=end)
    need = 4 * width * height
    if len(buf) - start < need:
        raise FormatError(
            f"truncated payload: expected {need} bytes, found {len(buf) - start}",
            path=path, field="payload", offset=len(buf),
        )
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(buf, dtype=dtype, count=width * height, offset=start)
    values = np.flipud(data.reshape(height, width)).astype(np.float64)
    return ScalarMap(values, np.isfinite(values))


def encode_pfm(m: ScalarMap) -> bytes:
    h, w = m.shape
    if h == 0 or w == 0:
        raise ValueError("cannot write an empty map")
    data = np.where(m.valid, m.values, np.inf).astype("<f4")
    return b"Pf\n%d %d\n-1.0\n" % (w, h) + np.flipud(data).tobytes()


def read_pfm(path) -> ScalarMap:
    return decode_pfm(_read_bytes(path), path=path)


def write_pfm(m: ScalarMap, path) -> None:
    """Little-endian single-channel PFM, rows bottom-up.  Invalid pixels are
    stored as +inf."""
    atomic_write_bytes(path, encode_pfm(m))


# ---------------------------------------------------------------- .flo

def decode_flo(buf: bytes, path=None) -> FlowMap:
    if len(buf) < 12:
        raise FormatError("truncated header", path=path, field="header", offset=len(buf))
    magic = np.frombuffer(buf, "<f4", count=1)[0]
    if magic != np.float32(FLO_MAGIC):
        raise FormatError(f"bad magic {float(magic)!r}", path=path, field="magic", offset=0)
    width, height = (int(v) for v in np.frombuffer(buf, "<i4", count=2, offset=4))
    if width <= 0 or height <= 0:
        raise FormatError(f"non-positive dimensions {width}x{height}", path=path, field="dimensions", offset=4)
    need = 8 * width * height
    if len(buf) - 12 != need:
        raise FormatError(
            f"size mismatch: expected {need} payload bytes, found {len(buf) - 12}",
            path=path, field="payload", offset=12,
        )
    data = np.frombuffer(buf, "<f4", offset=12).reshape(height, width, 2).astype(np.float64)
    dx, dy = data[..., 0], data[..., 1]
    valid = (np.abs(dx) <= FLO_UNKNOWN_THRESH) & (np.abs(dy) <= FLO_UNKNOWN_THRESH)
    return FlowMap(dx, dy, valid)


def encode_flo(flow: FlowMap) -> bytes:
    h, w = flow.shape
    data = np.empty((h, w, 2), dtype="<f4")
    data[..., 0] = np.where(flow.valid, flow.dx, FLO_UNKNOWN)
    data[..., 1] = np.where(flow.valid, flow.dy, FLO_UNKNOWN)
    return (
        np.array([FLO_MAGIC], "<f4").tobytes()
        + np.array([w, h], "<i4").tobytes()
        + data.tobytes()
    )


def read_flo(path) -> FlowMap:
    return decode_flo(_read_bytes(path), path=path)


def write_flo(flow: FlowMap, path) -> None:
    atomic_write_bytes(path, encode_flo(flow))


# ---------------------------------------------------------------- mask PNG

def decode_mask_png(buf: bytes, path=None) -> OcclusionMask:
    try:
        img = Image.open(io.BytesIO(buf))
        img.load()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise FormatError(f"unreadable PNG: {exc}", path=path, field="header") from exc
    if img.format != "PNG":
        raise FormatError(f"not a PNG file ({img.format})", path=path, field="header")
    if img.mode != "L":
        raise FormatError(
            f"unsupported bit depth or color type (mode {img.mode}); expected 8-bit grayscale",
            path=path, field="mode",
        )
    v = np.asarray(img, dtype=np.float64)
    return OcclusionMask.from_array(v / 255.0)


def encode_mask_png(mask: OcclusionMask) -> bytes:
    m = np.where(mask.valid, mask.m, 0.0)
    if np.any(m < 0) or np.any(m > 1):
        raise ValueError("mask values must lie in [0, 1]")
    v = np.floor(m * 255.0 + 0.5).astype(np.uint8)
    out = io.BytesIO()
    Image.fromarray(v).save(out, format="PNG")
    return out.getvalue()


def read_mask_png(path) -> OcclusionMask:
    return decode_mask_png(_read_bytes(path), path=path)


def write_mask_png(mask: OcclusionMask, path) -> None:
    """Quantise to 8 bits with round-half-up; invalid pixels are written as 0."""
    atomic_write_bytes(path, encode_mask_png(mask))


def write_gray_png(values: np.ndarray, path) -> None:
    out = io.BytesIO()
    Image.fromarray(np.asarray(values, dtype=np.uint8)).save(out, format="PNG")
    atomic_write_bytes(path, out.getvalue())


# ---------------------------------------------------------------- calibration

@dataclass(frozen=True)
class CalibrationFile:
    focal_px: float
    baseline_mm: float
    min_valid_disparity_px: float = 0.1

    def __post_init__(self):
        for name in ("focal_px", "baseline_mm"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise FormatError(f"non-positive {name.split('_')[0]}", field=name)
        v = self.min_valid_disparity_px
        if not (math.isfinite(v) and v >= 0):
            raise FormatError("negative min_valid_disparity_px", field="min_valid_disparity_px")


_CALIB_KEYS = ("focal_px", "baseline_mm", "min_valid_disparity_px")


def parse_calibration(text: str, path=None) -> CalibrationFile:
    fields = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise FormatError(f"line {lineno}: expected 'key = value'", path=path, field=key or None)
        if key not in _CALIB_KEYS:
            raise FormatError(f"line {lineno}: unknown key {key}", path=path, field=key)
        try:
            fields[key] = float(value.strip())
        except ValueError:
            raise FormatError(f"line {lineno}: {key} is not a number", path=path, field=key) from None
    for key in ("focal_px", "baseline_mm"):
        if key not in fields:
            raise FormatError(f"missing key {key}", path=path, field=key)
    try:
        return CalibrationFile(**fields)
    except FormatError as exc:
        raise FormatError(exc.reason, path=path, field=exc.field) from None


def read_calibration(path) -> CalibrationFile:
    buf = _read_bytes(path)
    try:
        text = buf.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("calibration is not UTF-8 text", path=path, offset=exc.start) from None
    return parse_calibration(text, path=path)


def format_calibration(calib: CalibrationFile) -> str:
    return (
        f"focal_px = {calib.focal_px!r}\n"
        f"baseline_mm = {calib.baseline_mm!r}\n"
        f"min_valid_disparity_px = {calib.min_valid_disparity_px!r}\n"
    )


def write_calibration(calib: CalibrationFile, path) -> None:
    atomic_write_text(path, format_calibration(calib))
