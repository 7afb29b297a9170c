import struct
import zlib

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_png(pixels, color_type, filter_type=0):
    """Encode uint8 ``pixels`` (H, W[, C]) as a minimal PNG for reader tests."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape[:2]
    rows = pixels.reshape(h, -1)
    bpp = 1 if pixels.ndim == 2 else pixels.shape[2]
    raw = bytearray()
    prev = np.zeros(rows.shape[1], dtype=np.int32)
    for row in rows.astype(np.int32):
        raw.append(filter_type)
        if filter_type == 0:
            enc = row
        elif filter_type == 1:
            left = np.concatenate([np.zeros(bpp, np.int32), row[:-bpp]])
            enc = row - left
        elif filter_type == 2:
            enc = row - prev
        elif filter_type == 3:
            left = np.concatenate([np.zeros(bpp, np.int32), row[:-bpp]])
            enc = row - ((left + prev) >> 1)
        else:
            left = np.concatenate([np.zeros(bpp, np.int32), row[:-bpp]])
            ul = np.concatenate([np.zeros(bpp, np.int32), prev[:-bpp]])
            p = left + prev - ul
            pa, pb, pc = np.abs(p - left), np.abs(p - prev), np.abs(p - ul)
            pred = np.where((pa <= pb) & (pa <= pc), left, np.where(pb <= pc, prev, ul))
            enc = row - pred
        raw.extend((enc & 0xFF).astype(np.uint8).tobytes())
        prev = row

    def chunk(tag, body):
        return struct.pack(">I", len(body)) + tag + body + struct.pack(">I", zlib.crc32(tag + body) & 0xFFFFFFFF)

    ihdr = struct.pack(">IIBBBBB", w, h, 8, color_type, 0, 0, 0)
    return (
        b"\x89PNG\r\n\x1a\n"
        + chunk(b"IHDR", ihdr)
        + chunk(b"IDAT", zlib.compress(bytes(raw)))
        + chunk(b"IEND", b"")
    )


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): numbered acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines, key=lambda s: int(s.split()[1])):
        terminalreporter.write_line(line)
