"""Heatmap export as binary PPM (P6).

Color ramp: data min -> blue (0, 0, 255), midpoint -> white (255, 255, 255),
max -> red (255, 0, 0), linear in each half, rounded to the nearest integer.
A constant field maps entirely to white. The min/max values are written as
a header comment (``# min=... max=...``).
"""

from __future__ import annotations

import numpy as np


def color_ramp(field: np.ndarray, vmin: float | None = None, vmax: float | None = None) -> np.ndarray:
    """H x W floats -> H x W x 3 uint8; NaN renders black."""
    field = np.asarray(field, dtype=np.float64)
    finite = np.isfinite(field)
    if vmin is None:
        vmin = float(field[finite].min()) if finite.any() else 0.0
    if vmax is None:
        vmax = float(field[finite].max()) if finite.any() else 0.0
    if vmax > vmin:
        t = np.clip((field - vmin) / (vmax - vmin), 0.0, 1.0)
    else:
        t = np.full(field.shape, 0.5)
    t = np.where(finite, t, 0.5)
    lower = np.minimum(t, 0.5) * 2  # 0 at blue, 1 at white
    upper = (np.maximum(t, 0.5) - 0.5) * 2  # 0 at white, 1 at red
    rgb = np.empty(field.shape + (3,))
    cold = t <= 0.5
    rgb[..., 0] = np.where(cold, 255 * lower, 255)
    rgb[..., 1] = np.where(cold, 255 * lower, 255 * (1 - upper))
    rgb[..., 2] = np.where(cold, 255, 255 * (1 - upper))
    rgb = np.rint(rgb).astype(np.uint8)
    rgb[~finite] = 0
    return rgb


def write_ppm(field: np.ndarray, path) -> tuple:
    """Write one H x W field; returns (min, max) used for the ramp."""
    field = np.asarray(field, dtype=np.float64)
    finite = field[np.isfinite(field)]
    vmin = float(finite.min()) if finite.size else float("nan")
    vmax = float(finite.max()) if finite.size else float("nan")
    rgb = color_ramp(field)
    h, w = field.shape
    header = f"P6\n# min={vmin!r} max={vmax!r}\n{w} {h}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rgb.tobytes())
    return vmin, vmax


def read_ppm(path):
    """Minimal P6 reader (for tests): returns (rgb array, comment lines)."""
    data = open(path, "rb").read()
    tokens, comments, pos = [], [], 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            end = data.index(b"\n", pos)
            comments.append(data[pos + 1 : end].decode().strip())
            pos = end + 1
            continue
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode())
    pos += 1
    if tokens[0] != "P6":
        raise ValueError(f"not a P6 file: {tokens[0]!r}")
    w, h = int(tokens[1]), int(tokens[2])
    rgb = np.frombuffer(data[pos : pos + 3 * w * h], dtype=np.uint8).reshape(h, w, 3)
    return rgb, comments
