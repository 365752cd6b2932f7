"""Binary netpbm I/O: P6 (8-bit RGB) and P5 (8-bit grey).

Arrays are float in [0, 1]; values are clipped and rounded on write.
"""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .errors import DimensionError


def to_bytes(values):
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def _squeeze_image(img, channels):
    a = np.asarray(img, dtype=np.float64)
    while a.ndim > 3 and a.shape[0] == 1:
        a = a[0]
    if channels == 1 and a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if channels == 3 and (a.ndim != 3 or a.shape[0] != 3):
        raise DimensionError(f"PPM expects (3, H, W), got {np.shape(img)}")
    if channels == 1 and a.ndim != 2:
        raise DimensionError(f"PGM expects (H, W), got {np.shape(img)}")
    return a


def write_ppm(path, img):
    a = _squeeze_image(img, 3)
    _, h, w = a.shape
    data = to_bytes(a).transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + data)


def write_pgm(path, img):
    a = _squeeze_image(img, 1)
    h, w = a.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + to_bytes(a).tobytes())


_HEADER = re.compile(rb"(P[56])\s+(?:#[^\n]*\s+)*(\d+)\s+(\d+)\s+(\d+)\s")


def read_netpbm(path):
    """Read a P5/P6 file; returns (C, H, W) floats in [0, 1]."""
    raw = Path(path).read_bytes()
    m = _HEADER.match(raw)
    if m is None:
        raise ValueError(f"{path}: not a binary PPM/PGM file")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit rasters are supported")
    c = 3 if magic == b"P6" else 1
    data = np.frombuffer(raw, dtype=np.uint8, count=h * w * c, offset=m.end())
    return data.reshape(h, w, c).transpose(2, 0, 1).astype(np.float64) / 255.0


def hstack_panels(panels, gap=2, fill=1.0):
    """Concatenate (3, H, W) / (H, W) panels left to right with a gap."""
    rgb = []
    for p in panels:
        a = np.asarray(p, dtype=np.float64)
        while a.ndim > 3:
            a = a[0]
        if a.ndim == 2:
            a = np.repeat(a[None], 3, axis=0)
        elif a.shape[0] == 1:
            a = np.repeat(a, 3, axis=0)
        rgb.append(a)
    h = max(a.shape[1] for a in rgb)
    spacer = np.full((3, h, gap), fill)
    parts = []
    for i, a in enumerate(rgb):
        if i:
            parts.append(spacer)
        parts.append(np.pad(a, ((0, 0), (0, h - a.shape[1]), (0, 0)), constant_values=fill))
    return np.concatenate(parts, axis=2)


def vstack_rows(rows, gap=2, fill=1.0):
    w = max(r.shape[2] for r in rows)
    out = []
    for i, r in enumerate(rows):
        if i:
            out.append(np.full((3, gap, w), fill))
        out.append(np.pad(r, ((0, 0), (0, 0), (0, w - r.shape[2])), constant_values=fill))
    return np.concatenate(out, axis=1)
