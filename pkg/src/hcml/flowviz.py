"""Optical-flow colour coding and binary PPM export.

Hue follows the usual 55-entry colour wheel (red, yellow, green, cyan,
blue, magenta segments). Saturation grows with magnitude divided by the
99th percentile magnitude, so zero flow renders as a uniform mid-gray.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

__all__ = ["color_wheel", "flow_to_rgb", "write_ppm", "read_ppm", "export_flow"]

GRAY = 0.5


def color_wheel() -> np.ndarray:
    """(55, 3) wheel in [0, 1]: RY 15, YG 6, GC 4, CB 11, BM 13, MR 6."""
    segments = [(15, (1, 0, 0), (1, 1, 0)), (6, (1, 1, 0), (0, 1, 0)), (4, (0, 1, 0), (0, 1, 1)),
                (11, (0, 1, 1), (0, 0, 1)), (13, (0, 0, 1), (1, 0, 1)), (6, (1, 0, 1), (1, 0, 0))]
    rows = []
    for n, a, b in segments:
        t = np.arange(n)[:, None] / n
        rows.append((1 - t) * np.array(a, float) + t * np.array(b, float))
    return np.concatenate(rows)


def flow_to_rgb(flow: np.ndarray, norm: float | None = None) -> np.ndarray:
    """Map a ``(2, H, W)`` flow to ``(H, W, 3)`` floats in [0, 1].

    ``norm`` defaults to the 99th percentile of the magnitude. Colours are
    blended from mid-gray towards the wheel colour by the clipped
    normalized magnitude.
    """
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ValueError(f"expected a (2, H, W) flow, got {flow.shape}")
    u, v = flow
    mag = np.hypot(u, v)
    if norm is None:
        norm = float(np.percentile(mag, 99))
    sat = np.clip(mag / norm, 0.0, 1.0) if norm > 0 else np.zeros_like(mag)
    wheel = color_wheel()
    n = len(wheel)
    # angle measured so that +x (rightward) is red and +y (downward) turns towards green
    a = np.arctan2(-v, -u) / np.pi                     # in (-1, 1]
    fk = (a + 1) / 2 * (n - 1)
    k0 = np.floor(fk).astype(int) % n
    k1 = (k0 + 1) % n
    f = (fk - np.floor(fk))[..., None]
    col = (1 - f) * wheel[k0] + f * wheel[k1]
    return GRAY + sat[..., None] * (col - GRAY)


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write ``(H, W, 3)`` floats in [0, 1] as an 8-bit binary PPM (P6)."""
    img = np.clip(np.round(np.asarray(rgb) * 255), 0, 255).astype(np.uint8)
    H, W, _ = img.shape
    Path(path).write_bytes(f"P6\n{W} {H}\n255\n".encode("ascii") + img.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise ValueError("not an 8-bit binary PPM")
    W, H = int(fields[1]), int(fields[2])
    data = np.frombuffer(raw[pos + 1: pos + 1 + W * H * 3], dtype=np.uint8)
    return data.reshape(H, W, 3)


def export_flow(path, flow: np.ndarray, norm: float | None = None) -> np.ndarray:
    rgb = flow_to_rgb(flow, norm)
    write_ppm(path, rgb)
    return rgb
