"""Binary portable-pixmap output for scalar fields on 2-d grids."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array as a binary P6 pixmap."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) array")
    header = f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + rgb.tobytes())


def angle_field_to_rgb(angles: np.ndarray) -> np.ndarray:
    """Map angles in [0, pi] to colors, green at 0 and red at pi, linearly.

    ``angles`` is indexed [ix, iy]; the image puts the first axis left to
    right and the second axis bottom to top, matching a conventional plot.
    """
    a = np.clip(np.asarray(angles, dtype=float) / np.pi, 0.0, 1.0)
    img = a.T[::-1, :]  # rows top to bottom = decreasing y
    rgb = np.empty(img.shape + (3,), dtype=np.uint8)
    rgb[..., 0] = np.round(255 * img)
    rgb[..., 1] = np.round(255 * (1.0 - img))
    rgb[..., 2] = 0
    return rgb


def write_angle_pixmap(path, angles: np.ndarray) -> None:
    write_ppm(path, angle_field_to_rgb(angles))
