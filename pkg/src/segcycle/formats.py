"""Bit-exact serialization: SEGP probability tensors, P5/P6 rasters, mapping tables.

SEGP layout (little-endian throughout):
    magic "SEGP" | u32 version=1 | u32 height | u32 width | u32 classes |
    height*width*classes float32 values, channel-major (class 0 plane first)
so a file is exactly 20 + 4*H*W*C bytes.

Label maps use binary PGM (P5, maxval 255, one byte per pixel, row-major);
RGB frames use binary PPM (P6, maxval 255, three bytes per pixel). Writes to
paths go through a temp file and an atomic rename so aborted runs leave no
partial artifacts.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

from .errors import FormatError, ValidationError
from .types import LabelMap, ProbMap

Destination = Union[str, Path, BinaryIO]
Source = Union[str, Path, BinaryIO]

SEGP_MAGIC = b"SEGP"
SEGP_VERSION = 1
SEGP_HEADER = struct.Struct("<4sIIII")

_WHITESPACE = b" \t\r\n\x0b\x0c"


def atomic_write_bytes(path: Union[str, Path], data: bytes) -> None:
    """Write data to path via a same-directory temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _emit(destination: Destination, data: bytes) -> None:
    if hasattr(destination, "write"):
        destination.write(data)
    else:
        atomic_write_bytes(destination, data)


def _slurp(source: Source) -> bytes:
    if hasattr(source, "read"):
        return source.read()
    return Path(source).read_bytes()


# ---------------------------------------------------------------------------
# SEGP probability tensors
# ---------------------------------------------------------------------------

def write_prob_map(pm: ProbMap, destination: Destination) -> None:
    """Serialize a ProbMap; re-validates invariants before any byte is written."""
    if not isinstance(pm, ProbMap):
        raise ValidationError("write_prob_map expects a ProbMap")
    ProbMap(pm.planes)  # defensive re-validation; never writes a bad stream
    header = SEGP_HEADER.pack(SEGP_MAGIC, SEGP_VERSION, pm.height, pm.width, pm.num_classes)
    payload = pm.planes.astype("<f4", copy=False).tobytes()
    _emit(destination, header + payload)


def read_prob_map(source: Source) -> ProbMap:
    data = _slurp(source)
    if len(data) < SEGP_HEADER.size:
        raise FormatError(f"SEGP stream truncated: {len(data)} bytes, need at least {SEGP_HEADER.size}")
    magic, version, height, width, classes = SEGP_HEADER.unpack_from(data)
    if magic != SEGP_MAGIC:
        raise FormatError(f"bad SEGP magic {magic!r}")
    if version != SEGP_VERSION:
        raise FormatError(f"unsupported SEGP version {version}")
    if height < 1 or width < 1 or not 2 <= classes <= 255:
        raise FormatError(f"implausible SEGP dimensions {height}x{width}x{classes}")
    expected = height * width * classes * 4
    actual = len(data) - SEGP_HEADER.size
    if actual != expected:
        raise FormatError(f"SEGP payload size mismatch: header declares {expected} bytes, found {actual}")
    arr = np.frombuffer(data, dtype="<f4", offset=SEGP_HEADER.size)
    planes = arr.reshape(classes, height, width).astype(np.float32)
    return ProbMap(planes)


# ---------------------------------------------------------------------------
# PNM header parsing shared by P5/P6
# ---------------------------------------------------------------------------

def _next_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        ch = data[pos]
        if ch in _WHITESPACE:
            pos += 1
        elif ch == ord("#"):
            nl = data.find(b"\n", pos)
            if nl < 0:
                raise FormatError("PNM header comment not terminated")
            pos = nl + 1
        else:
            break
    start = pos
    while pos < n and data[pos] not in _WHITESPACE:
        pos += 1
    if start == pos:
        raise FormatError("PNM header truncated")
    return data[start:pos], pos


def _parse_pnm(data: bytes, magic: bytes) -> tuple[int, int, bytes]:
    token, pos = _next_token(data, 0)
    if token != magic:
        raise FormatError(f"not a {magic.decode()} file (magic {token!r})")
    fields = []
    for name in ("width", "height", "maxval"):
        token, pos = _next_token(data, pos)
        try:
            fields.append(int(token))
        except ValueError:
            raise FormatError(f"PNM {name} is not an integer: {token!r}") from None
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise FormatError(f"implausible PNM dimensions {width}x{height}")
    if maxval != 255:
        raise FormatError(f"unsupported PNM maxval {maxval}, expected 255")
    if pos >= len(data) or data[pos] not in _WHITESPACE:
        raise FormatError("PNM header must end with a single whitespace byte")
    return width, height, data[pos + 1:]


# ---------------------------------------------------------------------------
# P5 label maps
# ---------------------------------------------------------------------------

def write_label_map(lm: LabelMap, destination: Destination) -> None:
    if not isinstance(lm, LabelMap):
        raise ValidationError("write_label_map expects a LabelMap")
    header = b"P5\n%d %d\n255\n" % (lm.width, lm.height)
    _emit(destination, header + lm.pixels.tobytes())


def read_label_map(source: Source) -> LabelMap:
    data = _slurp(source)
    width, height, payload = _parse_pnm(data, b"P5")
    if len(payload) != width * height:
        raise FormatError(
            f"P5 payload size mismatch: header declares {width * height} bytes, found {len(payload)}"
        )
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return LabelMap(pixels.copy())


# ---------------------------------------------------------------------------
# P6 RGB frames (the toy trainer's raw image input)
# ---------------------------------------------------------------------------

def write_image(image: np.ndarray, destination: Destination) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValidationError("image must be a (H, W, 3) uint8 array")
    h, w = image.shape[:2]
    if h < 1 or w < 1:
        raise ValidationError(f"image needs positive dimensions, got {h}x{w}")
    header = b"P6\n%d %d\n255\n" % (w, h)
    _emit(destination, header + np.ascontiguousarray(image).tobytes())


def read_image(source: Source) -> np.ndarray:
    data = _slurp(source)
    width, height, payload = _parse_pnm(data, b"P6")
    if len(payload) != width * height * 3:
        raise FormatError(
            f"P6 payload size mismatch: header declares {width * height * 3} bytes, found {len(payload)}"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()


# ---------------------------------------------------------------------------
# Class mapping text files: one "source target" pair per line
# ---------------------------------------------------------------------------

def load_class_mapping(source: Source, source_class_count: int | None = None):
    """Parse a mapping table; blank lines and '#' comments are skipped.

    When source_class_count is not given it is inferred as max(source) + 1.
    """
    from .types import ClassMapping

    raw = _slurp(source)
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"mapping file is not UTF-8 text: {exc}") from None
    entries: dict[int, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        parts = stripped.split()
        if len(parts) != 2:
            raise FormatError(f"mapping line {lineno}: expected 'source target', got {line!r}")
        try:
            src, dst = int(parts[0]), int(parts[1])
        except ValueError:
            raise FormatError(f"mapping line {lineno}: non-integer ids in {line!r}") from None
        if src in entries:
            raise FormatError(f"mapping line {lineno}: duplicate source id {src}")
        entries[src] = dst
    if source_class_count is None:
        if not entries:
            raise ValidationError("cannot infer source class count from an empty mapping")
        source_class_count = max(entries) + 1
    return ClassMapping(source_class_count, entries)
