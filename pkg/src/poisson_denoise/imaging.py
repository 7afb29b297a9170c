"""Grayscale image I/O, peak scaling, symmetric padding and quality metrics.

Images are plain 2-D ``float64`` numpy arrays indexed ``[row, col]``.  Two
value conventions are used throughout the package:

* normalized images hold values in ``[0, 1]``;
* intensity fields hold photoelectron rates, i.e. a normalized image
  multiplied by its peak value.
"""

from __future__ import annotations

import math
import os
import struct
import zlib

import numpy as np

from .errors import DomainError, FormatError

__all__ = [
    "LUMA_WEIGHTS",
    "PSNR_CAP_DB",
    "as_image",
    "load_grayscale",
    "save_pgm",
    "scale_to_peak",
    "normalize_shift",
    "unshift",
    "pad_symmetric",
    "crop_center",
    "psnr",
    "rmse",
]

# ITU-R BT.601 full-range luma.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

# Reported in place of +inf when the two images are identical.
PSNR_CAP_DB = 999.0

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def as_image(data, name="image"):
    """Return ``data`` as a finite 2-D float64 array or raise DomainError."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise DomainError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite values")
    return arr


def _check_peak(peak):
    peak = float(peak)
    if not (peak > 0 and math.isfinite(peak)):
        raise DomainError(f"peak must be a positive finite number, got {peak}")
    return peak


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------


def load_grayscale(path) -> np.ndarray:
    """Read an 8-bit PGM (P5) or PNG file as a normalized grayscale image.

    RGB inputs are reduced to luma with :data:`LUMA_WEIGHTS`; an alpha
    channel, if present, is ignored.

    Raises
    ------
    FormatError
        Unsupported bit depth, color type, or a corrupt header; the message
        carries the byte offset of the failure.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw.startswith(_PNG_SIGNATURE):
        return _decode_png(raw)
    if raw[:2] == b"P5":
        return _decode_pgm(raw)
    raise FormatError(f"{os.fspath(path)}: not a P5 PGM or PNG file", offset=0)


def _pgm_tokens(raw, count):
    """Yield ``count`` whitespace-separated header tokens, skipping comments.

    Returns the tokens and the offset of the single whitespace byte that
    terminates the last one.
    """
    tokens = []
    pos = 0
    n = len(raw)
    while len(tokens) < count:
        while pos < n and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < n and raw[pos : pos + 1] == b"#":
            while pos < n and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        if pos >= n:
            raise FormatError("truncated PGM header", offset=pos)
        start = pos
        while pos < n and not raw[pos : pos + 1].isspace() and raw[pos : pos + 1] != b"#":
            pos += 1
        tokens.append((raw[start:pos], start))
    return tokens, pos


def _decode_pgm(raw):
    tokens, pos = _pgm_tokens(raw, 4)
    magic = tokens[0][0]
    if magic != b"P5":
        raise FormatError(f"unsupported PGM magic {magic!r}", offset=tokens[0][1])
    fields = []
    for tok, off in tokens[1:]:
        try:
            fields.append(int(tok))
        except ValueError:
            raise FormatError(f"bad PGM header field {tok!r}", offset=off) from None
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise FormatError("PGM dimensions must be positive", offset=tokens[1][1])
    if not 0 < maxval < 256:
        raise FormatError(f"unsupported PGM maxval {maxval} (8-bit only)", offset=tokens[3][1])
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        raise FormatError("missing whitespace after PGM header", offset=pos)
    start = pos + 1
    need = width * height
    if len(raw) - start < need:
        raise FormatError(
            f"PGM pixel data truncated: need {need} bytes, have {len(raw) - start}",
            offset=len(raw),
        )
    pixels = np.frombuffer(raw, dtype=np.uint8, count=need, offset=start)
    return pixels.reshape(height, width).astype(np.float64) / float(maxval)


def save_pgm(path, img) -> None:
    """Write a normalized image as an 8-bit binary PGM.

    Values are clipped to ``[0, 1]`` and rounded to the nearest of 256 levels,
    so a file produced by :func:`load_grayscale` survives a round trip
    bit-exactly.
    """
    img = as_image(img)
    data = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(data.tobytes())


def _paeth(a, b, c):
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    if pb <= pc:
        return b
    return c


def _unfilter(data, height, stride, bpp, offset):
    out = np.zeros((height, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.uint8)
    pos = 0
    for y in range(height):
        ftype = data[pos]
        line = np.frombuffer(data, dtype=np.uint8, count=stride, offset=pos + 1).copy()
        if ftype == 0:
            pass
        elif ftype == 1:
            # cumulative sum per channel, wrapping mod 256
            for c in range(bpp):
                line[c::bpp] = np.cumsum(line[c::bpp], dtype=np.uint8)
        elif ftype == 2:
            line = line + prev
        elif ftype in (3, 4):
            cur = line.astype(np.int32)
            up = prev.astype(np.int32)
            for x in range(stride):
                left = cur[x - bpp] if x >= bpp else 0
                if ftype == 3:
                    cur[x] = (cur[x] + ((left + up[x]) >> 1)) & 0xFF
                else:
                    ul = up[x - bpp] if x >= bpp else 0
                    cur[x] = (cur[x] + _paeth(left, up[x], ul)) & 0xFF
            line = cur.astype(np.uint8)
        else:
            raise FormatError(f"bad PNG filter type {ftype} on row {y}", offset=offset)
        out[y] = line
        prev = line
        pos += stride + 1
    return out


def _decode_png(raw):
    pos = len(_PNG_SIGNATURE)
    header = None
    idat = []
    idat_offset = None
    while True:
        if pos + 8 > len(raw):
            raise FormatError("truncated PNG chunk header", offset=pos)
        length, ctype = struct.unpack(">I4s", raw[pos : pos + 8])
        body_start = pos + 8
        body_end = body_start + length
        if body_end + 4 > len(raw):
            raise FormatError(f"truncated PNG chunk {ctype!r}", offset=pos)
        body = raw[body_start:body_end]
        (crc,) = struct.unpack(">I", raw[body_end : body_end + 4])
        if zlib.crc32(ctype + body) & 0xFFFFFFFF != crc:
            raise FormatError(f"CRC mismatch in PNG chunk {ctype!r}", offset=pos)
        if ctype == b"IHDR":
            if length != 13:
                raise FormatError("bad IHDR length", offset=pos)
            header = struct.unpack(">IIBBBBB", body)
            width, height, depth, color, _comp, _filt, interlace = header
            if depth != 8:
                raise FormatError(f"unsupported PNG bit depth {depth}", offset=body_start + 8)
            if color not in (0, 2, 4, 6):
                raise FormatError(f"unsupported PNG color type {color}", offset=body_start + 9)
            if interlace != 0:
                raise FormatError("interlaced PNG not supported", offset=body_start + 12)
        elif ctype == b"IDAT":
            if idat_offset is None:
                idat_offset = body_start
            idat.append(body)
        elif ctype == b"IEND":
            break
        pos = body_end + 4
    if header is None:
        raise FormatError("PNG has no IHDR chunk", offset=len(_PNG_SIGNATURE))
    if not idat:
        raise FormatError("PNG has no IDAT chunk", offset=pos)
    width, height, _depth, color, *_ = header
    channels = {0: 1, 2: 3, 4: 2, 6: 4}[color]
    try:
        data = zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise FormatError(f"corrupt PNG image data: {exc}", offset=idat_offset) from None
    stride = width * channels
    if len(data) < height * (stride + 1):
        raise FormatError("PNG image data shorter than declared size", offset=idat_offset)
    pixels = _unfilter(data, height, stride, channels, idat_offset)
    pixels = pixels.reshape(height, width, channels).astype(np.float64) / 255.0
    if channels <= 2:
        return pixels[:, :, 0]
    r, g, b = LUMA_WEIGHTS
    return r * pixels[:, :, 0] + g * pixels[:, :, 1] + b * pixels[:, :, 2]


# ---------------------------------------------------------------------------
# Value conventions
# ---------------------------------------------------------------------------


def scale_to_peak(img, peak) -> np.ndarray:
    """Multiply a normalized image by ``peak`` to get photoelectron rates."""
    img = as_image(img)
    peak = _check_peak(peak)
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise DomainError("scale_to_peak expects values in [0, 1]")
    return img * peak


def normalize_shift(img) -> np.ndarray:
    """Shift a peak-normalized image by -1/2 (network input convention)."""
    return np.asarray(img, dtype=np.float64) - 0.5


def unshift(img) -> np.ndarray:
    """Inverse of :func:`normalize_shift`."""
    return np.asarray(img, dtype=np.float64) + 0.5


# ---------------------------------------------------------------------------
# Borders
# ---------------------------------------------------------------------------


def pad_symmetric(img, margin: int) -> np.ndarray:
    """Mirror-pad by ``margin`` pixels, repeating the edge pixel.

    ``[a, b, c]`` padded by one becomes ``[a, a, b, c, c]``.
    """
    img = as_image(img)
    margin = int(margin)
    if margin < 0:
        raise DomainError("margin must be non-negative")
    if margin > min(img.shape):
        raise DomainError(f"margin {margin} exceeds image dimensions {img.shape}")
    return np.pad(img, margin, mode="symmetric")


def crop_center(img, margin: int) -> np.ndarray:
    """Drop ``margin`` pixels from every side."""
    img = np.asarray(img)
    margin = int(margin)
    if margin < 0:
        raise DomainError("margin must be non-negative")
    h, w = img.shape[-2:]
    if 2 * margin >= min(h, w):
        raise DomainError(f"cannot crop {margin} pixels from a {h}x{w} image")
    if margin == 0:
        return img
    return img[..., margin : h - margin, margin : w - margin]


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DomainError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(reference, estimate, peak) -> float:
    """Peak signal-to-noise ratio in dB, ``10 log10(peak**2 / MSE)``.

    Both images are in photoelectron units.  Identical inputs give
    :data:`PSNR_CAP_DB` rather than infinity.
    """
    reference, estimate = _same_shape(reference, estimate)
    peak = _check_peak(peak)
    mse = float(np.mean((reference - estimate) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(peak * peak / mse), PSNR_CAP_DB)


def rmse(a, b) -> float:
    a, b = _same_shape(a, b)
    return float(np.sqrt(np.mean((a - b) ** 2)))
